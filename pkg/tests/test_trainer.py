import numpy as np
import pytest
import torch

from skei.analysis import psnr
from skei.config import parse_config
from skei.errors import ConfigError, DataError
from skei.io import write_array
from skei.linops import IdentityModel
from skei.objectives import ei_loss
from skei.phantoms import make_coil_maps
from skei.sketch import coil_compress
from skei.trainer import (AcsMaps, PrecomputedMaps, Problem, build_problem, pretrain_supervised, run_coil_sketched_ei,
                          run_dip, run_ei, run_method, run_sketched_ei, prepare_network)


def _ct(**over):
    base = {"task": "ct", "image_size": 32, "ct": {"n_angles": 20, "n_batches": 1},
            "network": {"depth": 2, "base_channels": 4}, "optimizer": {"iterations": 15}}
    cfg = parse_config(base)
    return cfg.updated(**over) if over else cfg


def _mri(**over):
    base = {"task": "mri", "image_size": 32, "mri": {"n_coils": 4, "acceleration": 2, "acs_lines": 8},
            "network": {"depth": 2, "base_channels": 4}, "optimizer": {"iterations": 10}}
    cfg = parse_config(base)
    return cfg.updated(**over) if over else cfg


def test_identity_operator_converges():
    cfg = _ct(**{"optimizer.iterations": 200, "optimizer.learning_rate": 1e-2, "network.depth": 1})
    gen = np.random.default_rng(0)
    x = torch.from_numpy(gen.random((1, 1, 16, 16)))
    model = IdentityModel((1, 16, 16))
    problem = Problem("ct", model, x, 0.5 * x, x)
    run = run_dip(cfg.updated(dtype="float64"), problem)
    mc = run.trace("mc")
    assert mc[-1] < 0.01 * mc[0]


def test_seeded_rerun_reproduces_trace():
    cfg = _ct(**{"loss.method": "sketched-ei", "ct.n_batches": 4})
    a, b = run_method(cfg), run_method(cfg)
    for key in ("mc", "ei", "total", "psnr"):
        np.testing.assert_allclose(a.trace(key), b.trace(key), rtol=1e-6)
    other = run_method(cfg.updated(seed=1))
    assert not np.allclose(other.trace("total"), a.trace("total"))


def test_dip_improves_on_fbp_input():
    cfg = parse_config({"task": "ct", "image_size": 64, "ct": {"n_angles": 30, "n_batches": 1},
                        "loss": {"method": "dip"}, "optimizer": {"iterations": 500}})
    problem = build_problem(cfg)
    run = run_dip(cfg, problem)
    assert run.final_psnr is not None
    assert run.manifest["final_psnr"] > problem.quality(problem.z)


def test_single_batch_sketch_reproduces_full_ei():
    cfg = _ct(**{"loss.method": "sketched-ei"})
    a = run_sketched_ei(cfg)
    b = run_ei(cfg.updated(**{"loss.method": "ei"}))
    for key in ("mc", "ei", "total"):
        np.testing.assert_allclose(a.trace(key), b.trace(key), rtol=1e-6)


def test_reduction_lattice_lambda_and_noise():
    cfg = _ct(**{"loss.method": "sketched-ei", "ct.n_batches": 4})
    plain = run_sketched_ei(cfg)
    rei0 = run_sketched_ei(cfg.updated(**{"loss.rei": True, "loss.noise_sigma": 0.0}))
    np.testing.assert_allclose(rei0.trace("total"), plain.trace("total"), rtol=1e-6)
    no_ei = run_sketched_ei(cfg.updated(**{"loss.lam": 0.0}))
    np.testing.assert_array_equal(no_ei.trace("total"), no_ei.trace("mc"))


def test_records_schema_and_monotone_clock():
    run = run_method(_ct(**{"loss.method": "ei"}))
    assert run.iterations == 15 and not run.aborted
    assert set(run.records[0]) == {"iter", "wall_time_s", "mc", "ei", "total", "psnr"}
    t = run.trace("wall_time_s")
    assert np.all(np.diff(t) > 0)
    assert np.all(np.isfinite(run.trace("total")))
    assert run.manifest["method"] == "ei" and run.manifest["config_hash"]


def test_non_finite_loss_aborts_with_diagnostic():
    cfg = _ct(**{"loss.method": "dip"})
    problem = build_problem(cfg)
    bad = problem.y.clone()
    bad[0, 0, 0] = float("inf")
    run = run_dip(cfg, Problem("ct", problem.model, bad, problem.z, problem.reference))
    assert run.aborted and run.iterations == 0
    assert run.diagnostic["iter"] == 1 and run.manifest["aborted"]


def test_early_stop_patience():
    cfg = _ct(**{"loss.method": "dip", "optimizer.iterations": 200, "optimizer.early_stop_patience": 1,
                 "optimizer.learning_rate": 5e-2})
    run = run_dip(cfg)
    assert run.iterations < 200


# ---------------------------------------------------------------- adaptation


def test_bn_only_adaptation_freezes_everything_else(tmp_path):
    ckpt = tmp_path / "pre.npz"
    pre = _ct()
    pretrain_supervised(pre, n_images=4, iterations=5, checkpoint=ckpt)
    cfg = pre.updated(**{"adaptation.mode": "na-bn", "adaptation.checkpoint": str(ckpt),
                         "loss.method": "sketched-ei", "ct.n_batches": 4})
    net0, _, _ = prepare_network(cfg, 1)
    before = {k: v.clone() for k, v in net0.named_parameters()}
    run = run_method(cfg)
    groups = run.net.parameter_groups()
    after = dict(run.net.named_parameters())
    assert all(torch.equal(after[n], before[n]) for n in groups["conv"])
    assert any(not torch.equal(after[n], before[n]) for n in groups["norm"])
    assert run.trainable_params == sum(after[n].numel() for n in groups["norm"])

    full = run_method(cfg.updated(**{"adaptation.mode": "na-full"}))
    fa = dict(full.net.named_parameters())
    assert any(not torch.equal(fa[n], before[n]) for n in groups["conv"])
    assert full.trainable_params == full.total_params


def test_adaptation_requires_matching_checkpoint(tmp_path):
    ckpt = tmp_path / "pre.npz"
    pretrain_supervised(_ct(**{"network.depth": 1}), n_images=2, iterations=1, checkpoint=ckpt)
    cfg = _ct(**{"adaptation.mode": "na-bn", "adaptation.checkpoint": str(ckpt)})
    from skei.errors import LoadError
    with pytest.raises(LoadError):
        run_method(cfg)


# ---------------------------------------------------------------- MRI


def test_mri_sketched_ei_runs_with_classical_coils():
    cfg = _mri(**{"mri.sketch_kind": "classical-coil", "mri.n_keep": 2})
    run = run_method(cfg)
    assert run.manifest["n_keep"] == 2 and np.all(np.isfinite(run.trace("total")))


def test_identity_coil_sketch_matches_ei_on_rotated_coils():
    cfg = _mri(**{"mri.sketch_kind": "coil-sketch", "mri.n_virtual": 4, "mri.n_retained": 4,
                  "mri.n_sketched": 0, "loss.method": "sketched-ei", "dtype": "float64"})
    problem = build_problem(cfg)
    sketched = run_coil_sketched_ei(cfg, problem)
    comp = coil_compress(problem.y, 4, mask=problem.model.mask, maps=problem.maps)
    rotated = Problem("mri", problem.model.with_maps(comp.maps), comp.kspace, problem.z, problem.reference,
                      maps=comp.maps, in_channels=2)
    full = run_ei(cfg.updated(**{"loss.method": "ei"}), rotated)
    for key in ("mc", "ei", "total"):
        np.testing.assert_allclose(sketched.trace(key), full.trace(key), rtol=1e-5)


def test_coil_rotation_leaves_loss_unchanged_at_fixed_weights():
    cfg = _mri(dtype="float64")
    problem = build_problem(cfg)
    comp = coil_compress(problem.y, 4, mask=problem.model.mask, maps=problem.maps)
    rotated = problem.model.with_maps(comp.maps)
    net, _, _ = prepare_network(cfg, 2)
    a = ei_loss(net, problem.y, problem.model, 90.0, z=problem.z)
    b = ei_loss(net, comp.kspace, rotated, 90.0, z=problem.z)
    assert a.values()["mc"] == pytest.approx(b.values()["mc"], rel=1e-10)
    assert a.values()["ei"] == pytest.approx(b.values()["ei"], rel=1e-10)
    torch.testing.assert_close(rotated.pinv(comp.kspace), problem.z)


def test_coil_sketch_validation():
    cfg = _mri(**{"mri.sketch_kind": "coil-sketch", "mri.n_virtual": 3, "mri.n_retained": 1, "mri.n_sketched": 1})
    with pytest.raises(ConfigError):
        run_coil_sketched_ei(_ct(), None)
    run = run_coil_sketched_ei(cfg)
    assert run.manifest["method"] == "coil-sketched-ei"
    ev = run.manifest["eigenvalues"]
    assert ev == sorted(ev, reverse=True)


def test_acs_maps_recover_smooth_sensitivities():
    size = 32
    maps = torch.from_numpy(make_coil_maps(4, size))
    x = torch.ones(size, size, dtype=torch.complex128)
    k = torch.fft.fftshift(torch.fft.fft2(torch.fft.ifftshift(maps * x, dim=(-2, -1)), norm="ortho"), dim=(-2, -1))
    est = AcsMaps(acs_lines=16)(k, torch.ones(size, size, dtype=torch.bool))
    rss = maps.abs().pow(2).sum(0).sqrt()
    want = maps / rss
    inner = slice(8, 24)
    err = (est[:, inner, inner] - want[:, inner, inner]).abs().max()
    assert float(err) < 0.1


def test_mri_from_kspace_file(tmp_path):
    cfg = _mri()
    problem = build_problem(cfg)
    path = write_array(tmp_path / "k.f32", problem.y[0].numpy())
    from_file = parse_config({**cfg.model_dump(mode="json"), "data": {"kspace_path": str(path)}})
    p2 = build_problem(from_file)
    assert p2.reference is None and p2.model.n_coils == 4
    run = run_method(from_file.updated(**{"loss.method": "ei", "optimizer.iterations": 3}))
    assert run.records[0]["psnr"] is None
    wrong = from_file.updated(**{"mri.n_coils": 3})
    with pytest.raises(DataError):
        build_problem(wrong)


def test_precomputed_maps_shape_check():
    provider = PrecomputedMaps(torch.zeros(3, 8, 8, dtype=torch.complex128))
    with pytest.raises(DataError):
        provider(torch.zeros(4, 8, 8, dtype=torch.complex128), torch.ones(8, 8, dtype=torch.bool))


def test_pretraining_generalises_to_held_out_phantoms():
    from skei.phantoms import random_ellipses

    cfg = _ct()
    model = build_problem(cfg).model
    net = pretrain_supervised(cfg, n_images=32, iterations=300)
    net.eval()
    gen = np.random.default_rng(123)
    for _ in range(3):
        x = torch.from_numpy(random_ellipses(32, gen))[None, None].float()
        with torch.no_grad():
            z = model.pinv(model.apply(x))
            assert psnr(net(z), x) > psnr(z, x) + 3.0
