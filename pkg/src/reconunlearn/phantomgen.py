"""Two-domain synthetic phantoms, the multi-coil forward model and datasets.

Family ``A`` stands in for the retain anatomy (brain-like): nested ellipses
with a bright rim, bright paired ventricles and a sprinkling of small
blobs. Family ``B`` stands in for the forget anatomy (knee-like): a
wide elliptical region filled with horizontal layers and stripes (intensity
varies mostly down the rows) plus a bright ridge.

Generator parameters, version ``PHANTOM_VERSION``:

    A: head semi-axes a~U(0.70, 0.82) (x), b~U(0.82, 0.92) (y), tilt U(-10, 10) deg,
       rim thickness U(0.05, 0.08) at 0.9, tissue 0.40, inner ellipse x0.8 at +0.12,
       ventricles 0.85, 6-10 blobs of radius U(0.02, 0.07) and contrast U(-0.2, 0.25),
       Gaussian edge smoothing sigma = 0.6 px.
    B: region semi-axes a~U(0.70, 0.85) (x), b~U(0.85, 0.95) (y), tilt U(-12, 12) deg,
       horizontal layers: 3-5 plateaus in [0.25, 0.6], stripe amplitude 0.3 with
       period U(0.14, 0.22), bend U(-0.15, 0.15), ridge amplitude 0.6 and width 0.03,
       smoothing sigma = 0.4 px.
    Both: magnitude scaled to max 1, phase = amplitude * (c1 x + c2 y + c3 x y)
       with amplitude U(0.05, 0.25) rad and c ~ U(-1, 1).

The two families are separated by the gradient anisotropy statistic
``log(mean |d/dy|^2 / mean |d/dx|^2)`` of the magnitude image: A sits
slightly below 0, B well above ``ANISOTROPY_THRESHOLD``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ChecksumError, ConfigError, DataError
from .fourier import fft2c, ifft2c, rss
from .seeding import derive_seed, make_rng

PHANTOM_VERSION = 1
DATASET_FORMAT_VERSION = 1
ANISOTROPY_THRESHOLD = 0.5

ANATOMIES = ("A", "B")
ROLES = ("retain", "forget", "retain_subset", "retain_test", "forget_test")
ROLE_ANATOMY = {
    "retain": "A",
    "retain_subset": "A",
    "retain_test": "A",
    "forget": "B",
    "forget_test": "B",
}
MIN_SIZE = 8


def _grid(size):
    height, width = size
    y = np.linspace(-1.0, 1.0, height)
    x = np.linspace(-1.0, 1.0, width)
    return np.meshgrid(x, y)


def _ellipse(X, Y, x0, y0, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (X - x0) * c + (Y - y0) * s
    v = -(X - x0) * s + (Y - y0) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _brain_like(rng, X, Y):
    img = np.zeros_like(X)
    a = rng.uniform(0.70, 0.82)
    b = rng.uniform(0.82, 0.92)
    tilt = np.deg2rad(rng.uniform(-10, 10))
    cx, cy = rng.uniform(-0.04, 0.04, size=2)
    rim = rng.uniform(0.05, 0.08)
    img[_ellipse(X, Y, cx, cy, a, b, tilt)] = 0.9
    img[_ellipse(X, Y, cx, cy, a - rim, b - rim, tilt)] = 0.40
    inner = _ellipse(X, Y, cx, cy, 0.8 * (a - rim), 0.8 * (b - rim), tilt)
    img[inner] += 0.12
    for side in (-1.0, 1.0):
        vx = cx + side * rng.uniform(0.09, 0.14)
        vy = cy + rng.uniform(-0.08, 0.02)
        va = rng.uniform(0.05, 0.08)
        vb = rng.uniform(0.15, 0.22)
        vt = side * np.deg2rad(rng.uniform(5, 20))
        img[_ellipse(X, Y, vx, vy, va, vb, vt)] = 0.85
    for _ in range(rng.integers(6, 11)):
        r = rng.uniform(0.02, 0.07)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.15, 0.55)
        bx = cx + dist * (a - rim) * np.cos(ang)
        by = cy + dist * (b - rim) * np.sin(ang)
        blob = _ellipse(X, Y, bx, by, r, r * rng.uniform(0.6, 1.4), rng.uniform(0, np.pi))
        img[blob & inner] += rng.uniform(-0.2, 0.25)
    img = np.clip(img, 0.0, None)
    return ndimage.gaussian_filter(img, sigma=0.6)


def _knee_like(rng, X, Y):
    # wide elliptical field of horizontal tissue layers, fine stripes and one bright ridge
    a = rng.uniform(0.70, 0.85)
    b = rng.uniform(0.85, 0.95)
    tilt = np.deg2rad(rng.uniform(-12, 12))
    cx, cy = rng.uniform(-0.05, 0.05, size=2)
    c, s = np.cos(tilt), np.sin(tilt)
    u = (X - cx) * c + (Y - cy) * s
    v = -(X - cx) * s + (Y - cy) * c
    region = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # layers vary along the vertical axis
    u, v, a = v, u, b
    u = u + rng.uniform(-0.15, 0.15) * v ** 2

    n_layers = rng.integers(3, 6)
    edges = np.sort(rng.uniform(-a, a, size=n_layers - 1))
    levels = rng.uniform(0.25, 0.6, size=n_layers)
    layers = levels[np.searchsorted(edges, u)]
    period = rng.uniform(0.14, 0.22)
    bands = 0.3 * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
    ridge_pos = rng.uniform(-0.25, 0.25)
    ridge = 0.6 * np.exp(-0.5 * ((u - ridge_pos) / 0.03) ** 2)
    img = np.where(region, np.clip(layers + bands + ridge, 0.0, None), 0.0)
    return ndimage.gaussian_filter(img, sigma=0.4)


def make_phantom(anatomy: str, seed: int, size=(64, 64)) -> np.ndarray:
    """Complex phantom image of the given anatomy family, magnitude in [0, 1]."""
    if anatomy not in ANATOMIES:
        raise ValueError(f"unknown anatomy {anatomy!r}; expected one of {ANATOMIES}")
    height, width = size
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ValueError(f"phantom size must be at least {MIN_SIZE}x{MIN_SIZE}, got {size}")
    rng = make_rng("phantom", PHANTOM_VERSION, anatomy, seed)
    X, Y = _grid(size)
    mag = _brain_like(rng, X, Y) if anatomy == "A" else _knee_like(rng, X, Y)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    amp = rng.uniform(0.05, 0.25)
    c1, c2, c3 = rng.uniform(-1, 1, size=3)
    phase = amp * (c1 * X + c2 * Y + c3 * X * Y)
    return mag * np.exp(1j * phase)


def anisotropy(image: np.ndarray) -> float:
    """Log ratio of vertical to horizontal gradient energy of the magnitude."""
    mag = np.abs(image)
    gx = np.diff(mag, axis=1)
    gy = np.diff(mag, axis=0)
    return float(np.log((np.mean(gy ** 2) + 1e-12) / (np.mean(gx ** 2) + 1e-12)))


def classify_anatomy(image: np.ndarray) -> str:
    return "B" if anisotropy(image) > ANISOTROPY_THRESHOLD else "A"


def make_coil_maps(n_coils: int, size=(64, 64), seed: int = 0) -> np.ndarray:
    """Smooth complex sensitivities, shape (n_coils, H, W), with sum |S_c|^2 = 1.

    Coil ``c`` is a Gaussian bump (sigma 1.0 in [-1, 1] units) centred at
    angle ``offset + 2 pi c / n_coils`` on a circle of radius 1.2, where the
    offset is drawn from the seed, times a low-order linear phase.
    """
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    rng = make_rng("coils", seed)
    X, Y = _grid(size)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((n_coils,) + tuple(size), dtype=np.complex128)
    for c in range(n_coils):
        ang = offset + 2 * np.pi * c / n_coils
        px, py = 1.2 * np.cos(ang), 1.2 * np.sin(ang)
        weight = np.exp(-((X - px) ** 2 + (Y - py) ** 2) / 2.0)
        phase = rng.uniform(-np.pi, np.pi) + 0.5 * (rng.uniform(-1, 1) * X + rng.uniform(-1, 1) * Y)
        maps[c] = weight * np.exp(1j * phase)
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / norm


def coil_centers(n_coils: int, seed: int = 0) -> np.ndarray:
    """Placement of each coil's bump centre, in [-1, 1] units, shape (n_coils, 2)."""
    offset = make_rng("coils", seed).uniform(0, 2 * np.pi)
    ang = offset + 2 * np.pi * np.arange(n_coils) / n_coils
    return 1.2 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def forward_model(image: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Per-coil centred unitary DFT of ``maps * image``."""
    if maps.shape[1:] != image.shape:
        raise ValueError(f"image shape {image.shape} does not match maps {maps.shape[1:]}")
    coil_images = maps * image[None]
    return fft2c(torch.from_numpy(np.ascontiguousarray(coil_images))).numpy()


def rss_target(kspace: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares image of fully sampled multi-coil k-space."""
    if kspace.ndim != 3:
        raise ValueError(f"expected (coils, H, W) k-space, got shape {kspace.shape}")
    return rss(ifft2c(torch.from_numpy(np.ascontiguousarray(kspace))), dim=0).numpy()


@dataclass
class SamplingMask:
    kept: np.ndarray
    accel: float
    center_fraction: float

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)

    @property
    def width(self) -> int:
        return self.kept.shape[0]

    @property
    def n_center(self) -> int:
        return center_count(self.width, self.center_fraction)

    @property
    def center_slice(self) -> slice:
        start = (self.width - self.n_center + 1) // 2
        return slice(start, start + self.n_center)

    def to_json(self) -> dict:
        return {
            "accel": self.accel,
            "center_fraction": self.center_fraction,
            "kept": "".join("1" if k else "0" for k in self.kept),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SamplingMask":
        kept = np.array([ch == "1" for ch in obj["kept"]], dtype=bool)
        return cls(kept, obj["accel"], obj["center_fraction"])

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            np.array_equal(self.kept, other.kept)
            and self.accel == other.accel
            and self.center_fraction == other.center_fraction
        )


def center_count(width: int, center_fraction: float) -> int:
    # round half away from zero (Python's round() is banker's rounding)
    return int(np.floor(width * center_fraction + 0.5))


def make_mask(width: int, accel: float, center_fraction: float, seed: int = 0) -> SamplingMask:
    """Equispaced Cartesian column mask with a fully sampled centre block.

    Outside the centre, column ``j`` is kept when ``(j - offset) % accel == 0``
    with ``offset`` drawn from ``seed`` in ``[0, accel)``.
    """
    if not 0 < center_fraction < 1:
        raise ValueError("center_fraction must lie in (0, 1)")
    if accel < 1:
        raise ValueError("accel must be >= 1")
    n_center = center_count(width, center_fraction)
    if n_center >= width:
        raise ValueError(f"centre block of {n_center} columns does not fit in width {width}")
    stride = int(round(accel))
    offset = int(make_rng("mask", seed).integers(stride))
    cols = np.arange(width)
    kept = (cols - offset) % stride == 0
    start = (width - n_center + 1) // 2
    kept[start:start + n_center] = True
    return SamplingMask(kept, accel, center_fraction)


def undersample(kspace: np.ndarray, mask: SamplingMask) -> np.ndarray:
    if kspace.shape[-1] != mask.width:
        raise ValueError(f"k-space width {kspace.shape[-1]} does not match mask width {mask.width}")
    return np.where(mask.kept, kspace, np.zeros((), dtype=kspace.dtype))


@dataclass
class Sample:
    masked_kspace: np.ndarray  # complex64 (coils, H, W)
    mask: SamplingMask
    target: np.ndarray  # float32 (H, W)
    anatomy: str
    id: str


@dataclass
class Dataset:
    samples: list
    role: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown dataset role {self.role!r}")
        want = ROLE_ANATOMY[self.role]
        ids = set()
        for s in self.samples:
            if s.anatomy != want:
                raise ValueError(f"role {self.role} holds anatomy {want} only, sample {s.id} is {s.anatomy}")
            if s.id in ids:
                raise ValueError(f"duplicate sample id {s.id}")
            ids.add(s.id)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]


def make_sample(anatomy, seed, sample_id, size=(64, 64), n_coils=4, accel=8, center_fraction=0.04):
    image = make_phantom(anatomy, derive_seed(seed, "image"), size)
    maps = make_coil_maps(n_coils, size, derive_seed(seed, "coils"))
    # quantize first so the stored k-space and the target agree exactly
    kspace = forward_model(image, maps).astype(np.complex64)
    target = rss_target(kspace).astype(np.float32)
    mask = make_mask(size[1], accel, center_fraction, derive_seed(seed, "mask"))
    return Sample(undersample(kspace, mask), mask, target, anatomy, sample_id)


@dataclass
class CorpusConfig:
    height: int = 64
    width: int = 64
    n_coils: int = 4
    n_retain: int = 200
    n_forget: int = 20
    n_retain_test: int = 40
    n_forget_test: int = 40
    accel: float = 8
    center_fraction: float = 0.04

    def validate(self):
        if self.n_forget < 1 or self.n_retain != 10 * self.n_forget:
            raise ConfigError(
                f"retain/forget sizes must keep a 10:1 ratio, got {self.n_retain}/{self.n_forget}"
            )
        if self.n_retain_test < 1 or self.n_forget_test < 1:
            raise ConfigError("test sets must be non-empty")
        if min(self.height, self.width) < MIN_SIZE:
            raise ConfigError(f"image size must be at least {MIN_SIZE}x{MIN_SIZE}")


def build_dataset(role, n, master_seed, cfg: CorpusConfig) -> Dataset:
    anatomy = ROLE_ANATOMY[role]
    samples = [
        make_sample(
            anatomy,
            derive_seed(master_seed, role, i),
            f"{role}-{i:05d}",
            (cfg.height, cfg.width),
            cfg.n_coils,
            cfg.accel,
            cfg.center_fraction,
        )
        for i in range(n)
    ]
    return Dataset(samples, role, master_seed)


def build_corpus(cfg: CorpusConfig, master_seed: int) -> dict:
    cfg.validate()
    sizes = {
        "retain": cfg.n_retain,
        "forget": cfg.n_forget,
        "retain_test": cfg.n_retain_test,
        "forget_test": cfg.n_forget_test,
    }
    return {role: build_dataset(role, n, master_seed, cfg) for role, n in sizes.items()}


# -- on-disk format -----------------------------------------------------------

def _sample_bytes(s: Sample) -> bytes:
    k = np.ascontiguousarray(s.masked_kspace, dtype=np.complex64)
    interleaved = k.view(np.float32).astype("<f4", copy=False)
    return interleaved.tobytes() + np.ascontiguousarray(s.target, dtype="<f4").tobytes()


def write_dataset(d: Dataset, path) -> dict:
    """Write ``d`` as ``manifest.json`` plus one ``<id>.bin`` per sample."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if d.samples:
        n_coils, height, width = d.samples[0].masked_kspace.shape
    else:
        n_coils = height = width = 0
    entries = []
    for s in d.samples:
        if s.masked_kspace.shape != (n_coils, height, width) or s.target.shape != (height, width):
            raise DataError(f"sample {s.id} has inconsistent shape")
        blob = _sample_bytes(s)
        fname = f"{s.id}.bin"
        (path / fname).write_bytes(blob)
        entries.append({
            "id": s.id,
            "anatomy": s.anatomy,
            "file": fname,
            "crc32": zlib.crc32(blob),
            "mask": s.mask.to_json(),
        })
    manifest = {
        "version": DATASET_FORMAT_VERSION,
        "role": d.role,
        "seed": d.seed,
        "n_samples": len(d.samples),
        "height": height,
        "width": width,
        "n_coils": n_coils,
        "samples": entries,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (path / "manifest.json").write_text(text + "\n", encoding="utf-8")
    return manifest


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        version = manifest["version"]
        role = manifest["role"]
        n_coils, height, width = manifest["n_coils"], manifest["height"], manifest["width"]
        entries = manifest["samples"]
    except FileNotFoundError as exc:
        raise DataError(f"no dataset manifest at {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"corrupt dataset manifest at {path}: {exc}") from exc
    if version != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {version}")
    if len(entries) != manifest["n_samples"]:
        raise DataError("manifest sample count does not match its entries")
    n_k = n_coils * height * width * 2
    expected = 4 * (n_k + height * width)
    samples = []
    for e in entries:
        try:
            blob = (path / e["file"]).read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"missing sample file {e['file']}") from exc
        if zlib.crc32(blob) != e["crc32"]:
            raise ChecksumError(f"checksum mismatch for {e['file']}")
        if len(blob) != expected:
            raise DataError(f"{e['file']} holds {len(blob)} bytes, expected {expected}")
        raw = np.frombuffer(blob, dtype="<f4")
        kspace = raw[:n_k].astype(np.float32).view(np.complex64).reshape(n_coils, height, width)
        target = raw[n_k:].astype(np.float32).reshape(height, width)
        mask = SamplingMask.from_json(e["mask"])
        if mask.width != width:
            raise DataError(f"mask width of {e['id']} does not match the dataset width")
        samples.append(Sample(kspace, mask, target, e["anatomy"], e["id"]))
    try:
        return Dataset(samples, role, manifest["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def dataset_checksum(path) -> str:
    """CRC32 of the manifest bytes (which embed every per-sample CRC32), as hex."""
    return f"{zlib.crc32((Path(path) / 'manifest.json').read_bytes()):08x}"
