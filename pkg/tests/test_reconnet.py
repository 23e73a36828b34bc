import hashlib

import numpy as np
import pytest
import torch

from reconunlearn import phantomgen as pg
from reconunlearn import reconnet as rn
from reconunlearn.errors import DataError, NumericalError
from reconunlearn.fourier import ifft2c_np


def zero_refiner(arch, dc=1.0):
    vec = np.zeros(arch.n_params)
    vec[::arch.per_cascade] = dc
    return rn.ModelParams.unflatten(arch, vec)


@pytest.fixture(scope="module")
def samples():
    out = [pg.make_sample("A", i, f"a{i}", (32, 32), 3) for i in range(3)]
    out += [pg.make_sample("B", 10 + i, f"b{i}", (32, 32), 3) for i in range(2)]
    return out


@pytest.fixture(scope="module")
def params():
    return rn.init_params(rn.ArchConfig(3, 4), seed=3)


def test_param_count_matches_layers():
    arch = rn.ArchConfig(3, 8)
    conv1 = torch.nn.Conv2d(2, 8, 3)
    conv2 = torch.nn.Conv2d(8, 2, 3)
    per = 1 + sum(p.numel() for p in conv1.parameters()) + sum(p.numel() for p in conv2.parameters())
    assert arch.n_params == 3 * per == 897
    assert rn.init_params(arch, 0).flatten().shape == (897,)


def test_flatten_round_trip(params):
    vec = params.flatten()
    back = rn.ModelParams.unflatten(params.arch, vec)
    assert np.array_equal(back.flatten(), vec)
    for a, b in zip(params.cascades, back.cascades):
        assert a.dc_weight == b.dc_weight
        assert np.array_equal(a.w1, b.w1) and np.array_equal(a.b2, b.b2)


def test_unflatten_wrong_length(params):
    with pytest.raises(ValueError):
        rn.ModelParams.unflatten(params.arch, np.zeros(3))


def test_init_deterministic_and_dc_one():
    a = rn.init_params(rn.ArchConfig(), 11)
    b = rn.init_params(rn.ArchConfig(), 11)
    assert np.array_equal(a.flatten(), b.flatten())
    assert all(c.dc_weight == 1.0 for c in a.cascades)
    assert not np.array_equal(a.flatten(), rn.init_params(rn.ArchConfig(), 12).flatten())


def test_init_fan_in_scale():
    p = rn.init_params(rn.ArchConfig(20, 8), 0)
    w1 = np.concatenate([c.w1.ravel() for c in p.cascades])
    assert np.std(w1) == pytest.approx(np.sqrt(2 / 18), rel=0.1)


def test_invalid_arch():
    with pytest.raises(ValueError):
        rn.init_params(rn.ArchConfig(-1, 8), 0)


# -- sensitivities ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_sensitivities_match_true_maps(seed):
    img = pg.make_phantom("A", seed, (64, 64))
    maps = pg.make_coil_maps(4, (64, 64), seed)
    k = pg.forward_model(img, maps)
    centre = pg.SamplingMask(np.ones(64, bool), 1, 0.04).center_slice
    est = rn.estimate_sensitivities(torch.from_numpy(k), centre).numpy()
    support = np.abs(img) > 0.1
    assert np.mean(np.abs(est - maps)[:, support]) < 0.05


def test_sensitivities_single_coil():
    k = pg.forward_model(pg.make_phantom("B", 1, (32, 32)), np.ones((1, 32, 32), complex))
    est = rn.estimate_sensitivities(torch.from_numpy(k), slice(15, 17))
    acs = np.zeros_like(k)
    acs[..., 15:17] = k[..., 15:17]
    ok = np.abs(ifft2c_np(acs))[0] > rn.SENS_EPS
    np.testing.assert_allclose(np.abs(est.numpy()[0])[ok], 1.0, atol=1e-12)


def test_sensitivities_normalized_random():
    rng = np.random.default_rng(1)
    k = rng.standard_normal((5, 16, 16)) + 1j * rng.standard_normal((5, 16, 16))
    est = rn.estimate_sensitivities(torch.from_numpy(k), slice(6, 9)).numpy()
    power = np.sum(np.abs(est) ** 2, axis=0)
    assert np.abs(power - 1).max() < 1e-6


def test_sensitivities_empty_centre():
    with pytest.raises(ValueError):
        rn.estimate_sensitivities(torch.zeros(2, 8, 8, dtype=torch.complex64), slice(4, 4))


# -- reconstruction -----------------------------------------------------------

def test_zero_cascades_is_zero_filled(samples):
    s = samples[0]
    out = rn.reconstruct(rn.ModelParams(rn.ArchConfig(0, 8)), s.masked_kspace, s.mask, torch.float64)
    zf = np.sqrt(np.sum(np.abs(ifft2c_np(s.masked_kspace.astype(np.complex128))) ** 2, axis=0))
    np.testing.assert_allclose(out, zf, atol=1e-12)


def test_zero_refiner_keeps_acquired_columns(samples):
    s = samples[1]
    arch = rn.ArchConfig(1, 4)
    b = rn.stack_samples([s])
    vec = torch.from_numpy(zero_refiner(arch).flatten()).float()
    k1 = rn.unroll(vec, arch, b.kspace, b.mask, b.maps)
    kept = s.mask.kept
    assert torch.equal(k1[..., kept], b.kspace[..., kept])


def test_zero_refiner_fully_sampled_is_exact():
    s = pg.make_sample("A", 3, "full", (32, 32), 3, accel=1)
    out = rn.reconstruct(zero_refiner(rn.ArchConfig(3, 8)), s.masked_kspace, s.mask)
    assert np.array_equal(out, s.target)


def test_reconstruct_deterministic(samples):
    p = rn.init_params(rn.ArchConfig(3, 8), 5)
    s = samples[2]
    h = [hashlib.sha256(rn.reconstruct(p, s.masked_kspace, s.mask).tobytes()).hexdigest() for _ in range(2)]
    assert h[0] == h[1]


def test_reconstruct_shape_mismatch(samples, params):
    with pytest.raises(ValueError):
        rn.reconstruct(params, samples[0].masked_kspace, pg.make_mask(30, 4, 0.1))


def test_batched_matches_single(samples, params):
    b = rn.stack_samples(samples, torch.float64)
    vec = torch.from_numpy(params.flatten())
    batched = rn.forward(vec, params.arch, b.kspace, b.mask, b.maps)
    for i, s in enumerate(samples):
        single = rn.reconstruct(params, s.masked_kspace, s.mask, torch.float64)
        np.testing.assert_allclose(batched[i].numpy(), single, atol=1e-12)


# -- losses -------------------------------------------------------------------

def test_loss_l1_cases():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rn.loss_l1(t, t) == 0
    assert rn.loss_l1(t + 0.5, t) == pytest.approx(0.5)
    assert rn.loss_l1(np.zeros((2, 2)), t) == 2.5
    with pytest.raises(ValueError):
        rn.loss_l1(np.zeros(3), t)


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        rn.LossSpec("plain_l1", gamma=-1)
    with pytest.raises(ValueError):
        rn.LossSpec("plain_l1", lam=float("nan"))
    with pytest.raises(ValueError):
        rn.LossSpec("hinge")


def test_negated_with_zero_gamma(samples, params):
    v, g = rn.loss_and_grad(params, samples[:3], rn.LossSpec())
    vn, gn = rn.loss_and_grad(params, samples[:3], rn.LossSpec("negated_l1_plus_l1reg", gamma=0.0))
    assert vn == -v
    assert np.array_equal(gn, -g)


def test_noisy_with_zero_lambda(samples, params):
    seeds = [1, 2, 3]
    v, g = rn.loss_and_grad(params, samples[:3], rn.LossSpec())
    vn, gn = rn.loss_and_grad(params, samples[:3], rn.LossSpec("noisy_label", lam=0.0), seeds)
    assert vn == v
    assert np.array_equal(gn, g)


def test_noisy_label_reproducible(samples, params):
    spec = rn.LossSpec("noisy_label", lam=0.05)
    a = rn.loss_and_grad(params, samples[3:], spec, [7, 8])
    b = rn.loss_and_grad(params, samples[3:], spec, [7, 8])
    c = rn.loss_and_grad(params, samples[3:], spec, [7, 9])
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert a[0] != c[0]


def test_noisy_label_needs_seeds(samples, params):
    with pytest.raises(ValueError):
        rn.loss_and_grad(params, samples[:2], rn.LossSpec("noisy_label", lam=0.1))


def test_l1_subgradient_exact():
    vec = torch.tensor([-2.0, -0.5, 0.0, 0.25, 3.0], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(rn.l1_penalty(vec, 0.3), vec)
    assert torch.equal(g, 0.3 * torch.tensor([-1.0, -1.0, 0.0, 1.0, 1.0], dtype=torch.float64))


def test_empty_batch(params):
    with pytest.raises(ValueError):
        rn.loss_and_grad(params, [], rn.LossSpec())


def test_nan_forward_reported(samples, params):
    vec = params.flatten()
    vec[5] = np.nan
    bad = rn.ModelParams.unflatten(params.arch, vec)
    with pytest.raises(NumericalError):
        rn.loss_and_grad(bad, samples[:1], rn.LossSpec())


@pytest.fixture(scope="module")
def grad_samples():
    # tiny images keep ReLU/abs hinges rare inside the +-step bracket
    kw = dict(accel=2, center_fraction=0.25)
    return ([pg.make_sample("A", i, f"a{i}", (8, 8), 2, **kw) for i in range(2)]
            + [pg.make_sample("B", 10 + i, f"b{i}", (8, 8), 2, **kw) for i in range(2)])


def finite_difference_check(params, batch, spec, seeds=None, n_coords=10, step=1e-4, seed=0):
    """Worst relative error between autograd and central differences."""
    _, grad = rn.loss_and_grad(params, batch, spec, seeds)
    base = params.flatten()
    coords = np.random.default_rng(seed).choice(base.size, n_coords, replace=False)
    worst = 0.0
    for i in coords:
        vals = []
        for sgn in (1, -1):
            v = base.copy()
            v[i] += sgn * step
            vals.append(rn.loss_and_grad(rn.ModelParams.unflatten(params.arch, v), batch, spec, seeds)[0])
        fd = (vals[0] - vals[1]) / (2 * step)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12))
    return worst


@pytest.mark.parametrize("spec,needs_seeds", [
    (rn.LossSpec("plain_l1"), False),
    (rn.LossSpec("negated_l1_plus_l1reg", gamma=1e-3), False),
    (rn.LossSpec("noisy_label", lam=0.05), True),
])
@pytest.mark.parametrize("coord_seed", [0, 1])
def test_gradient_finite_differences(grad_samples, params, spec, needs_seeds, coord_seed):
    seeds = [4, 5] if needs_seeds else None
    assert finite_difference_check(params, grad_samples[:2], spec, seeds, seed=coord_seed) < 1e-3


def test_gradient_finite_differences_composite(grad_samples, params):
    spec = rn.LossSpec("composite", terms=(
        (1.0, rn.LossSpec("noisy_label", lam=0.05)),
        (1.0, rn.LossSpec("plain_l1")),
    ))
    batch = [grad_samples[2:], grad_samples[:2]]
    assert finite_difference_check(params, batch, spec, [[1, 2], None]) < 1e-3


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    rn.save_checkpoint(params, path)
    back = rn.load_checkpoint(path)
    assert back.arch == params.arch
    assert np.array_equal(back.flatten(), params.flatten().astype(np.float32).astype(np.float64))


def test_checkpoint_layout(params):
    import json
    import struct

    blob = rn.checkpoint_bytes(params)
    assert blob[:4] == rn.CKPT_MAGIC
    version, n = struct.unpack("<II", blob[4:12])
    assert version == rn.CKPT_VERSION
    assert json.loads(blob[12:12 + n]) == {"n_cascades": 3, "channels": 4}
    (p,) = struct.unpack("<I", blob[12 + n:16 + n])
    vec = np.frombuffer(blob[16 + n:-4], "<f4")
    assert p == params.n_params == vec.size


def test_checkpoint_corruption(tmp_path, params):
    blob = bytearray(rn.checkpoint_bytes(params))
    blob[40] ^= 0xFF
    with pytest.raises(DataError):
        rn.params_from_bytes(bytes(blob))
    with pytest.raises(DataError):
        rn.params_from_bytes(b"nope")
