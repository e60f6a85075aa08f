"""Reconstruction network, normalisation layers and trainable-subset selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LoadError, NumericError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def bn_forward(v: torch.Tensor, scale, shift, mean, std) -> torch.Tensor:
    """Affine normalisation ``scale * (v - mean) / std + shift``.

    Per-channel parameters (1-D tensors) broadcast along axis 1 of ``v``.
    """
    std_t = torch.as_tensor(std, dtype=v.dtype)
    if bool((std_t <= 0).any()):
        raise NumericError("normalisation std must be positive")
    params = [torch.as_tensor(p, dtype=v.dtype) for p in (scale, shift, mean)] + [std_t]
    if v.ndim >= 2:
        shape = [1, -1] + [1] * (v.ndim - 2)
        params = [p.reshape(shape) if p.ndim == 1 else p for p in params]
    scale, shift, mean, std_t = params
    return scale * (v - mean) / std_t + shift


@dataclass(frozen=True)
class UNetSpec:
    """Architecture descriptor; ``depth`` counts the down-sampling steps."""

    depth: int = 4
    base_channels: int = 64
    in_channels: int = 1
    out_channels: int | None = None
    residual: bool = True

    def widths(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


# Convolutions feeding a normalisation layer carry no bias: the batch mean
# cancels it, so its gradient is pure rounding noise that Adam would amplify.


class _ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )


class _UpConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and BatchNorm after every 3x3 conv.

    Inputs whose height or width is not a multiple of ``2**depth`` are
    zero-padded at the bottom/right and the output is cropped back.
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        if spec.depth < 1:
            raise ConfigError("depth must be >= 1", field="depth")
        self.spec = spec
        w = spec.widths()
        out_ch = spec.out_channels or spec.in_channels
        self.pool = nn.MaxPool2d(2)
        self.down = nn.ModuleList([_ConvBlock(spec.in_channels, w[0])])
        self.down.extend(_ConvBlock(w[i - 1], w[i]) for i in range(1, spec.depth + 1))
        self.up = nn.ModuleList(_UpConv(w[i], w[i - 1]) for i in range(spec.depth, 0, -1))
        self.up_block = nn.ModuleList(_ConvBlock(2 * w[i - 1], w[i - 1]) for i in range(spec.depth, 0, -1))
        self.head = nn.Conv2d(w[0], out_ch, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
        if self.spec.residual:
            # Start as the identity map so training begins from the network input.
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        mult = 2**self.spec.depth
        ph, pw = (-h) % mult, (-w) % mult
        inp = F.pad(x, (0, pw, 0, ph)) if (ph or pw) else x
        skips = []
        out = inp
        for i, block in enumerate(self.down):
            out = block(out if i == 0 else self.pool(out))
            skips.append(out)
        skips.pop()
        for up, block in zip(self.up, self.up_block):
            out = block(torch.cat([skips.pop(), up(out)], dim=1))
        out = self.head(out)
        if ph or pw:
            out = out[..., :h, :w]
        return x + out if self.spec.residual else out

    def norm_layers(self) -> list[tuple[str, nn.BatchNorm2d]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]

    def parameter_groups(self) -> dict[str, list[str]]:
        """Every parameter name in exactly one of ``conv`` / ``norm``."""
        norm = {f"{n}.{p}" for n, m in self.norm_layers() for p, _ in m.named_parameters(recurse=False)}
        names = [n for n, _ in self.named_parameters()]
        return {"conv": [n for n in names if n not in norm], "norm": [n for n in names if n in norm]}


def build_unet(depth: int = 4, base_channels: int = 64, in_channels: int = 1,
               residual: bool = True, out_channels: int | None = None) -> UNet:
    return UNet(UNetSpec(depth, base_channels, in_channels, out_channels, residual))


def count_parameters(net: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad or not trainable_only)


@dataclass
class ParameterSelector:
    mode: str
    names: list[str] = field(default_factory=list)

    def parameters(self, net: nn.Module) -> list[nn.Parameter]:
        named = dict(net.named_parameters())
        return [named[n] for n in self.names]

    def count(self, net: nn.Module) -> int:
        return sum(p.numel() for p in self.parameters(net))

    def apply(self, net: nn.Module) -> list[nn.Parameter]:
        """Mark only the selected parameters as trainable and return them."""
        keep = set(self.names)
        for n, p in net.named_parameters():
            p.requires_grad_(n in keep)
        return self.parameters(net)


def select_parameters(net: UNet, mode: str = "full") -> ParameterSelector:
    """``full`` -> every parameter; ``bn-only`` -> normalisation scale/shift only."""
    groups = net.parameter_groups()
    if mode == "full":
        return ParameterSelector("full", groups["conv"] + groups["norm"])
    if mode == "bn-only":
        if not groups["norm"]:
            raise ConfigError("network has no normalisation layers", field="mode")
        return ParameterSelector("bn-only", list(groups["norm"]))
    raise ConfigError(f"unknown parameter mode {mode!r}", field="mode")


# ---------------------------------------------------------------------------
# Checkpoints: one .npz holding every state entry plus the JSON descriptor.

_ARCH_KEY = "__architecture__"


def save_checkpoint(net: UNet, path: str | Path) -> Path:
    path = Path(path)
    arrays = {}
    for name, t in net.state_dict().items():
        t = t.detach().cpu()
        arrays[name] = t.numpy().astype(np.float32) if t.is_floating_point() else t.numpy()
    arrays[_ARCH_KEY] = np.array(json.dumps(net.spec.to_dict()))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[UNetSpec, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            spec = UNetSpec(**json.loads(str(data[_ARCH_KEY])))
            state = {k: data[k] for k in data.files if k != _ARCH_KEY}
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    return spec, state


def load_checkpoint(path: str | Path, expected: UNetSpec | None = None,
                    dtype: torch.dtype = torch.float32) -> UNet:
    spec, state = read_checkpoint(path)
    if expected is not None and expected != spec:
        raise LoadError(f"checkpoint architecture {spec} does not match expected {expected}")
    net = UNet(spec)
    own = net.state_dict()
    if set(own) != set(state) or any(tuple(own[k].shape) != state[k].shape for k in own):
        raise LoadError(f"checkpoint {path} does not match its declared architecture")
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})
    return net.to(dtype)
