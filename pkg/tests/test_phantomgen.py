import zlib

import numpy as np
import pytest
import torch

from reconunlearn import phantomgen as pg
from reconunlearn.errors import ChecksumError, ConfigError, DataError
from reconunlearn.fourier import fft2c, fft2c_np, ifft2c, ifft2c_np


def direct_dft_centered(x):
    """O(N^2) centred orthonormal DFT along both axes, by explicit basis matrices."""
    out = x.astype(np.complex128)
    for axis in (0, 1):
        n = out.shape[axis]
        grid = np.arange(n) - n // 2
        basis = np.exp(-2j * np.pi * np.outer(grid, grid) / n) / np.sqrt(n)
        out = np.moveaxis(np.tensordot(basis, np.moveaxis(out, axis, 0), axes=1), 0, axis)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- Fourier ------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(64, 64), (8, 10), (9, 12), (13, 7)])
def test_fft2c_matches_direct_dft(shape, rng):
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    np.testing.assert_allclose(fft2c_np(x), direct_dft_centered(x), atol=1e-12)


def test_dft_round_trip(rng):
    x = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    assert np.abs(ifft2c_np(fft2c_np(x)) - x).max() < 1e-6
    assert np.abs(fft2c_np(ifft2c_np(x)) - x).max() < 1e-6


def test_fft2c_batched_matches_single(rng):
    x = torch.from_numpy(rng.standard_normal((3, 4, 16, 16)) + 1j * rng.standard_normal((3, 4, 16, 16)))
    single = torch.stack([ifft2c(x[i]) for i in range(3)])
    assert torch.equal(ifft2c(x), single)
    assert torch.allclose(fft2c(ifft2c(x)), x)


# -- phantoms -----------------------------------------------------------------

def test_phantom_deterministic():
    a = pg.make_phantom("A", 7, (64, 64))
    b = pg.make_phantom("A", 7, (64, 64))
    assert np.array_equal(a, b)


def test_phantom_families_differ():
    a = pg.make_phantom("A", 7, (64, 64))
    b = pg.make_phantom("B", 7, (64, 64))
    assert np.mean(np.abs(np.abs(a) - np.abs(b))) > 0.05


@pytest.mark.parametrize("anatomy", ["A", "B"])
@pytest.mark.parametrize("seed", range(5))
def test_phantom_normalized(anatomy, seed):
    img = pg.make_phantom(anatomy, seed, (48, 40))
    mag = np.abs(img)
    assert img.shape == (48, 40)
    assert np.all(np.isfinite(img))
    assert mag.min() >= 0 and mag.max() <= 1 + 1e-12
    assert mag.max() == pytest.approx(1.0)


def test_phantom_phase_low_amplitude():
    img = pg.make_phantom("A", 3, (64, 64))
    phase = np.angle(img[np.abs(img) > 0.05])
    assert np.abs(phase).max() < 0.8


def test_phantom_errors():
    with pytest.raises(ValueError):
        pg.make_phantom("C", 0, (64, 64))
    with pytest.raises(ValueError):
        pg.make_phantom("A", 0, (4, 64))


def test_anatomy_separable_by_threshold():
    calls = [pg.classify_anatomy(pg.make_phantom(a, s, (64, 64))) == a for a in "AB" for s in range(50)]
    assert all(calls)


# -- coils / forward model ----------------------------------------------------

def test_single_coil_is_unit():
    maps = pg.make_coil_maps(1, (32, 32), seed=3)
    np.testing.assert_allclose(np.abs(maps), 1.0, atol=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_coil_normalization(n):
    maps = pg.make_coil_maps(n, (64, 64), seed=11)
    assert np.abs(np.sum(np.abs(maps) ** 2, axis=0) - 1).max() < 1e-6


def test_coil_centers_distinct():
    centers = pg.coil_centers(4, seed=5)
    assert not np.allclose(centers[0], centers[1])
    # each bump peaks on the side nearest its centre
    maps = pg.make_coil_maps(4, (64, 64), seed=5)
    for c in range(4):
        iy, ix = np.unravel_index(np.argmax(np.abs(maps[c])), (64, 64))
        x = np.linspace(-1, 1, 64)[ix]
        y = np.linspace(-1, 1, 64)[iy]
        assert np.sign(x) == np.sign(centers[c, 0]) or abs(centers[c, 0]) < 0.3
        assert np.sign(y) == np.sign(centers[c, 1]) or abs(centers[c, 1]) < 0.3


def test_coil_errors():
    with pytest.raises(ValueError):
        pg.make_coil_maps(0, (8, 8))


def test_forward_adjoint_round_trip():
    img = pg.make_phantom("A", 1, (64, 64))
    maps = pg.make_coil_maps(4, (64, 64), seed=2)
    k = pg.forward_model(img, maps)
    back = np.sum(np.conj(maps) * ifft2c_np(k), axis=0)
    assert np.abs(back - img).max() < 1e-6


def test_forward_parseval_and_zero():
    img = pg.make_phantom("B", 4, (64, 64))
    maps = pg.make_coil_maps(4, (64, 64), seed=9)
    k = pg.forward_model(img, maps)
    assert abs(np.sum(np.abs(k) ** 2) - np.sum(np.abs(img) ** 2)) < 1e-6
    assert not np.any(pg.forward_model(np.zeros_like(img), maps))


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        pg.forward_model(np.zeros((32, 32), complex), pg.make_coil_maps(2, (16, 16)))


# -- masks --------------------------------------------------------------------

def test_mask_center_count_368():
    m = pg.make_mask(368, 8, 0.04, seed=0)
    assert m.n_center == 15
    assert m.kept[m.center_slice].all()


def test_mask_accel_one_keeps_all():
    assert pg.make_mask(64, 1, 0.04, seed=3).kept.all()


@pytest.mark.parametrize("seed", range(8))
def test_mask_column_count_64(seed):
    m = pg.make_mask(64, 8, 0.04, seed=seed)
    centre = set(range(31, 34))
    offset = next(j for j in range(64) if j not in centre and m.kept[j]) % 8
    expected = centre | {j for j in range(64) if (j - offset) % 8 == 0}
    assert set(np.flatnonzero(m.kept)) == expected
    assert m.n_center == 3
    assert m.kept.sum() >= 64 / 8
    assert m.kept.sum() in (10, 11)


def test_mask_deterministic_and_seeded():
    assert pg.make_mask(64, 8, 0.04, 5) == pg.make_mask(64, 8, 0.04, 5)
    offsets = {tuple(pg.make_mask(64, 8, 0.04, s).kept) for s in range(20)}
    assert len(offsets) > 1


def test_mask_errors():
    with pytest.raises(ValueError):
        pg.make_mask(64, 8, 0.0)
    with pytest.raises(ValueError):
        pg.make_mask(64, 0.5, 0.04)
    with pytest.raises(ValueError):
        pg.make_mask(10, 4, 0.97)


def test_mask_json_round_trip():
    m = pg.make_mask(64, 8, 0.04, 2)
    assert pg.SamplingMask.from_json(m.to_json()) == m


# -- undersampling / targets -------------------------------------------------

@pytest.fixture
def kspace():
    img = pg.make_phantom("A", 2, (32, 32))
    return pg.forward_model(img, pg.make_coil_maps(3, (32, 32), 1))


def test_undersample_all_true(kspace):
    m = pg.SamplingMask(np.ones(32, bool), 1, 0.04)
    assert np.array_equal(pg.undersample(kspace, m), kspace)


def test_undersample_center_only(kspace):
    kept = np.zeros(32, bool)
    kept[15:17] = True
    out = pg.undersample(kspace, pg.SamplingMask(kept, 8, 0.04))
    assert np.sum(np.abs(out[..., ~kept]) ** 2) == 0
    assert np.array_equal(out[..., kept], kspace[..., kept])


def test_undersample_idempotent(kspace):
    m = pg.make_mask(32, 4, 0.1, 3)
    once = pg.undersample(kspace, m)
    assert np.array_equal(pg.undersample(once, m), once)


def test_undersample_width_mismatch(kspace):
    with pytest.raises(ValueError):
        pg.undersample(kspace, pg.make_mask(30, 4, 0.1))


def test_rss_single_coil():
    img = pg.make_phantom("B", 0, (32, 32))
    k = pg.forward_model(img, np.ones((1, 32, 32), complex))
    np.testing.assert_allclose(pg.rss_target(k), np.abs(img), atol=1e-12)


def test_rss_zero():
    assert not np.any(pg.rss_target(np.zeros((2, 16, 16), complex)))


@pytest.mark.parametrize("n", [1, 3, 6])
def test_rss_equals_magnitude(n):
    img = pg.make_phantom("A", n, (32, 32))
    k = pg.forward_model(img, pg.make_coil_maps(n, (32, 32), n))
    assert np.abs(pg.rss_target(k) - np.abs(img)).max() < 1e-6
    assert pg.rss_target(k).min() >= 0


# -- corpus / io --------------------------------------------------------------

SMALL = pg.CorpusConfig(height=16, width=16, n_coils=2, n_retain=10, n_forget=1,
                        n_retain_test=2, n_forget_test=2)


def test_default_corpus_sizes():
    cfg = pg.CorpusConfig()
    assert (cfg.n_retain, cfg.n_forget, cfg.n_retain_test, cfg.n_forget_test) == (200, 20, 40, 40)
    cfg.validate()


def test_corpus_ratio_rejected():
    with pytest.raises(ConfigError):
        pg.build_corpus(pg.CorpusConfig(n_retain=100, n_forget=20), 0)


def test_corpus_deterministic_and_disjoint():
    a = pg.build_corpus(SMALL, 42)
    b = pg.build_corpus(SMALL, 42)
    for role in a:
        for sa, sb in zip(a[role].samples, b[role].samples):
            assert sa.id == sb.id
            assert np.array_equal(sa.masked_kspace, sb.masked_kspace)
            assert np.array_equal(sa.target, sb.target)
    train_ids = set(a["retain"].ids) | set(a["forget"].ids)
    test_ids = set(a["retain_test"].ids) | set(a["forget_test"].ids)
    assert not train_ids & test_ids
    assert {s.anatomy for s in a["forget"].samples} == {"B"}
    assert {s.anatomy for s in a["retain_test"].samples} == {"A"}


def test_corpus_seed_changes_data():
    a = pg.build_corpus(SMALL, 1)["retain"].samples[0]
    b = pg.build_corpus(SMALL, 2)["retain"].samples[0]
    assert not np.array_equal(a.target, b.target)


def test_dataset_role_anatomy_enforced():
    s = pg.make_sample("B", 0, "x", (16, 16), 2)
    with pytest.raises(ValueError):
        pg.Dataset([s], "retain")
    with pytest.raises(ValueError):
        pg.Dataset([s, s], "forget")


def test_dataset_round_trip(tmp_path):
    d = pg.build_corpus(SMALL, 5)["forget_test"]
    pg.write_dataset(d, tmp_path / "ft")
    back = pg.read_dataset(tmp_path / "ft")
    assert back.role == "forget_test"
    assert back.seed == 5
    for s, t in zip(d.samples, back.samples):
        assert s.id == t.id and s.anatomy == t.anatomy
        assert np.array_equal(s.masked_kspace, t.masked_kspace)
        assert np.array_equal(s.target, t.target)
        assert s.mask == t.mask


def test_dataset_byte_layout(tmp_path):
    d = pg.build_corpus(SMALL, 5)["forget"]
    manifest = pg.write_dataset(d, tmp_path)
    s = d.samples[0]
    blob = (tmp_path / f"{s.id}.bin").read_bytes()
    assert manifest["samples"][0]["crc32"] == zlib.crc32(blob)
    raw = np.frombuffer(blob, "<f4")
    n_k = 2 * 16 * 16
    assert raw[0] == s.masked_kspace[0, 0, 0].real and raw[1] == s.masked_kspace[0, 0, 0].imag
    assert raw[2 * 16] == s.masked_kspace[0, 1, 0].real  # row-major within a coil
    assert raw[2 * 16 * 16] == s.masked_kspace[1, 0, 0].real  # coil-major
    assert np.array_equal(raw[2 * n_k:].reshape(16, 16), s.target)


def test_dataset_truncated_file(tmp_path):
    d = pg.build_corpus(SMALL, 5)["retain_test"]
    pg.write_dataset(d, tmp_path)
    f = tmp_path / f"{d.samples[1].id}.bin"
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(ChecksumError):
        pg.read_dataset(tmp_path)


def test_dataset_corrupt_manifest(tmp_path):
    d = pg.build_corpus(SMALL, 5)["retain_test"]
    pg.write_dataset(d, tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        pg.read_dataset(tmp_path)


def test_dataset_bytes_deterministic(tmp_path):
    for name in ("a", "b"):
        pg.write_dataset(pg.build_corpus(SMALL, 9)["retain"], tmp_path / name)
    assert pg.dataset_checksum(tmp_path / "a") == pg.dataset_checksum(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
