"""Miniature unrolled reconstruction network.

Each cascade updates multi-coil k-space as

    k <- k - dc_weight * M * (k - k0) - F(S * R(S^H F^-1 k))

where ``R`` is a two-layer 3x3 convolutional refiner (2 -> c -> 2 channels,
real and imaginary parts as channels, ReLU in between, zero padding) and
``S`` is estimated from the fully sampled centre columns of the input. The
output is the root-sum-of-squares of the final coil images.

Parameters live in one flat vector; the per-cascade layout is
``[dc_weight, conv1.weight (c,2,3,3), conv1.bias (c), conv2.weight (2,c,3,3), conv2.bias (2)]``,
so ``P = n_cascades * (37 * c + 3)``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericalError
from .fourier import fft2c, ifft2c, rss
from .seeding import make_rng

SENS_EPS = 1e-8
KERNEL = 3


@dataclass(frozen=True)
class ArchConfig:
    n_cascades: int = 3
    channels: int = 8

    def validate(self):
        if self.n_cascades < 0 or self.channels < 1:
            raise ConfigError(f"invalid architecture {self}")

    @property
    def per_cascade(self) -> int:
        c, k2 = self.channels, KERNEL * KERNEL
        return 1 + (c * 2 * k2 + c) + (2 * c * k2 + 2)

    @property
    def n_params(self) -> int:
        return self.n_cascades * self.per_cascade


@dataclass
class CascadeParams:
    dc_weight: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelParams:
    arch: ArchConfig
    cascades: list = field(default_factory=list)

    def flatten(self) -> np.ndarray:
        parts = []
        for c in self.cascades:
            parts += [np.array([c.dc_weight]), c.w1.ravel(), c.b1.ravel(), c.w2.ravel(), c.b2.ravel()]
        if not parts:
            return np.zeros(0)
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    @classmethod
    def unflatten(cls, arch: ArchConfig, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got shape {vec.shape}")
        cascades = [CascadeParams(float(t[0][0]), *(p.copy() for p in t[1:])) for t in _split(vec, arch)]
        return cls(arch, cascades)

    @property
    def n_params(self) -> int:
        return self.arch.n_params


def _split(vec, arch: ArchConfig):
    """Yield (dc, w1, b1, w2, b2) views into ``vec`` (numpy array or tensor)."""
    c, k = arch.channels, KERNEL
    shapes = [(1,), (c, 2, k, k), (c,), (2, c, k, k), (2,)]
    pos = 0
    for _ in range(arch.n_cascades):
        out = []
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(vec[pos:pos + n].reshape(shape))
            pos += n
        yield out


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """He-normal refiner weights (std = sqrt(2 / fan_in)), zero biases, dc_weight = 1.

    The second layer is additionally scaled by 0.1 so the untrained network
    starts close to plain data consistency.
    """
    arch.validate()
    rng = make_rng("init", seed)
    c, k2 = arch.channels, KERNEL * KERNEL
    cascades = []
    for _ in range(arch.n_cascades):
        w1 = rng.standard_normal((c, 2, KERNEL, KERNEL)) * np.sqrt(2.0 / (2 * k2))
        w2 = rng.standard_normal((2, c, KERNEL, KERNEL)) * np.sqrt(2.0 / (c * k2)) * 0.1
        cascades.append(CascadeParams(1.0, w1, np.zeros(c), w2, np.zeros(2)))
    return ModelParams(arch, cascades)


def estimate_sensitivities(masked_kspace, center: slice) -> torch.Tensor:
    """Coil maps from the centre columns only, normalized by their RSS.

    ``masked_kspace`` is (..., coils, H, W). Wherever the low-resolution RSS
    exceeds ``SENS_EPS`` the maps satisfy sum_c |S_c|^2 = 1.
    """
    k = torch.as_tensor(masked_kspace)
    if center.stop - center.start < 1:
        raise ValueError("sensitivity estimation needs a non-empty centre block")
    acs = torch.zeros_like(k)
    acs[..., center] = k[..., center]
    coil_images = ifft2c(acs)
    norm = rss(coil_images, dim=-3).unsqueeze(-3)
    return coil_images / torch.clamp(norm, min=SENS_EPS)


def _refine(x: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    h = torch.stack([x.real, x.imag], dim=1)
    h = F.relu(F.conv2d(h, w1, b1, padding=1))
    h = F.conv2d(h, w2, b2, padding=1)
    return torch.complex(h[:, 0], h[:, 1])


def unroll(vec: torch.Tensor, arch: ArchConfig, k0, mask, maps) -> torch.Tensor:
    """Run the cascades: k0, maps (B, C, H, W) complex; mask (B, 1, 1, W) real."""
    k = k0
    for dc, w1, b1, w2, b2 in _split(vec, arch):
        image = (maps.conj() * ifft2c(k)).sum(dim=1)
        refined = maps * _refine(image, w1, b1, w2, b2).unsqueeze(1)
        k = k - dc * mask * (k - k0) - fft2c(refined)
    return k


def forward(vec: torch.Tensor, arch: ArchConfig, k0, mask, maps) -> torch.Tensor:
    """Batched reconstruction, (B, H, W) RSS magnitude."""
    return rss(ifft2c(unroll(vec, arch, k0, mask, maps)), dim=1)


@dataclass
class Batch:
    """Stacked tensors for a list of samples, ready for ``forward``."""

    kspace: torch.Tensor
    mask: torch.Tensor
    maps: torch.Tensor
    target: torch.Tensor
    ids: list

    def __len__(self):
        return len(self.ids)

    def select(self, index) -> "Batch":
        index = list(index)
        idx = torch.as_tensor(index, dtype=torch.long)
        return Batch(self.kspace[idx], self.mask[idx], self.maps[idx], self.target[idx],
                     [self.ids[i] for i in index])


def complex_dtype(dtype):
    return torch.complex128 if dtype == torch.float64 else torch.complex64


def stack_samples(samples: Sequence, dtype=torch.float32) -> Batch:
    if len(samples) == 0:
        raise ValueError("empty batch")
    cdtype = complex_dtype(dtype)
    ks, masks, maps = [], [], []
    for s in samples:
        k = torch.from_numpy(np.ascontiguousarray(s.masked_kspace)).to(cdtype)
        ks.append(k)
        masks.append(torch.from_numpy(s.mask.kept.astype(np.float64)).to(dtype))
        maps.append(estimate_sensitivities(k, s.mask.center_slice))
    target = torch.stack([torch.from_numpy(np.ascontiguousarray(s.target)).to(dtype) for s in samples])
    return Batch(torch.stack(ks), torch.stack(masks)[:, None, None, :], torch.stack(maps), target,
                 [s.id for s in samples])


def reconstruct(params: ModelParams, masked_kspace, mask, dtype=torch.float32) -> np.ndarray:
    """Reconstruct one sample; returns a real (H, W) array."""
    if masked_kspace.shape[-1] != mask.width:
        raise ValueError("k-space width does not match mask width")
    cdtype = complex_dtype(dtype)
    k = torch.from_numpy(np.ascontiguousarray(masked_kspace)).to(cdtype)[None]
    m = torch.from_numpy(mask.kept.astype(np.float64)).to(dtype)[None, None, None, :]
    maps = estimate_sensitivities(k, mask.center_slice)
    vec = torch.from_numpy(params.flatten()).to(dtype)
    with torch.no_grad():
        return forward(vec, params.arch, k, m, maps)[0].numpy()


def loss_l1(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


# -- losses -------------------------------------------------------------------

LOSS_KINDS = ("plain_l1", "negated_l1_plus_l1reg", "noisy_label", "composite")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "plain_l1"
    gamma: float = 0.0
    lam: float = 0.0
    terms: tuple = ()  # composite only: (weight, LossSpec) pairs, one per batch

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.kind == "composite" and not self.terms:
            raise ValueError("composite loss needs at least one term")


def noise_like(target: torch.Tensor, seed: int) -> torch.Tensor:
    n = make_rng("label-noise", seed).standard_normal(tuple(target.shape))
    return torch.from_numpy(n).to(target.dtype)


def _term(vec, arch, batch: Batch, spec: LossSpec, noise_seeds=None) -> torch.Tensor:
    pred = forward(vec, arch, batch.kspace, batch.mask, batch.maps)
    if not torch.isfinite(pred).all():
        raise NumericalError("non-finite reconstruction in forward pass")
    target = batch.target
    if spec.kind == "noisy_label":
        if noise_seeds is None or len(noise_seeds) != len(batch):
            raise ValueError("noisy_label loss needs one noise seed per sample")
        if spec.lam != 0.0:
            noise = torch.stack([noise_like(target[i], s) for i, s in enumerate(noise_seeds)])
            target = target + spec.lam * noise
    j = (pred - target).abs().mean(dim=(-2, -1)).mean()
    if spec.kind == "negated_l1_plus_l1reg":
        return -j + l1_penalty(vec, spec.gamma)
    return j


def l1_penalty(vec: torch.Tensor, gamma: float) -> torch.Tensor:
    # autograd's abs() has derivative sign(x) with sign(0) = 0
    return gamma * vec.abs().sum()


def objective(vec, arch, batches, spec: LossSpec, noise_seeds=None) -> torch.Tensor:
    """Scalar training objective. For composite specs ``batches`` and
    ``noise_seeds`` are sequences aligned with ``spec.terms``."""
    if spec.kind != "composite":
        return _term(vec, arch, batches, spec, noise_seeds)
    seeds = noise_seeds or [None] * len(spec.terms)
    if len(batches) != len(spec.terms):
        raise ValueError("composite loss needs one batch per term")
    total = 0.0
    for (weight, sub), b, s in zip(spec.terms, batches, seeds):
        total = total + weight * _term(vec, arch, b, sub, s)
    return total


def value_and_grad_vec(vec: torch.Tensor, arch, batches, spec, noise_seeds=None):
    vec = vec.detach().requires_grad_(True)
    value = objective(vec, arch, batches, spec, noise_seeds)
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite loss {value.item()}")
    (grad,) = torch.autograd.grad(value, vec)
    return value.detach(), grad


def loss_and_grad(params: ModelParams, batch, spec: LossSpec, noise_seeds=None, dtype=torch.float64):
    """Batch-mean loss and its exact gradient w.r.t. ``params.flatten()``.

    ``batch`` is a list of samples (a list of such lists for composite specs).
    Returns ``(float, ndarray of length P)``.
    """
    if spec.kind == "composite":
        if not batch or any(len(b) == 0 for b in batch):
            raise ValueError("empty batch")
        stacked = [stack_samples(b, dtype) for b in batch]
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        stacked = stack_samples(batch, dtype)
    vec = torch.from_numpy(params.flatten()).to(dtype)
    value, grad = value_and_grad_vec(vec, params.arch, stacked, spec, noise_seeds)
    return float(value), grad.numpy().astype(np.float64)


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"RUCK"
CKPT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    """magic | u32 version | u32 len | arch JSON | u32 P | P x f32 LE | u32 CRC32."""
    arch = json.dumps(asdict(params.arch), sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(arch)) + arch
    vec = params.flatten().astype("<f4")
    body += struct.pack("<I", vec.size) + vec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def params_from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise DataError("not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError("checkpoint checksum mismatch")
    version, n = struct.unpack("<II", body[4:12])
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    arch = ArchConfig(**json.loads(body[12:12 + n].decode("utf-8")))
    pos = 12 + n
    (p,) = struct.unpack("<I", body[pos:pos + 4])
    vec = np.frombuffer(body[pos + 4:], dtype="<f4")
    if p != arch.n_params or vec.size != p:
        raise DataError("checkpoint parameter count does not match its architecture")
    return ModelParams.unflatten(arch, vec.astype(np.float64))


def save_checkpoint(params: ModelParams, path) -> bytes:
    blob = checkpoint_bytes(params)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
