"""Adam training plus the fine-tuning, gradient-ascent and noisy-label
unlearning procedures.

All procedures share one epoch loop (``_run``). A step draws one minibatch
from the retain stream and/or one from the forget stream and takes a
single Adam step on the sum of their losses. When both streams are present
the shorter one cycles, reshuffled on every pass, so an epoch lasts as many
steps as the longer stream has batches. Every permutation is drawn from
``make_rng(seed, stream, epoch, cycle)``, so the retain stream of a joint
run is identical to that of a plain fine-tuning run with the same seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, NumericalError
from .phantomgen import Dataset
from .reconnet import LossSpec, ModelParams, stack_samples, value_and_grad_vec
from .seeding import derive_seed, make_rng

METHODS = ("FT", "FullFT", "GA_L1", "NL", "GA_L1_FT", "NL_FT")
MODEL_ROLES = ("original", "oracle", "unlearned")

# Defaults frozen by scripts/calibrate.py on the 64x64 corpus, seed 1234.
DEFAULT_GAMMA = 1e-3
DEFAULT_LAMBDA = 100.0
PAPER_LAMBDA = 1e-5  # FastMRI intensity scale; far too small for targets in [0, 1]


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class UnlearnConfig:
    method: str
    gamma: Optional[float] = None
    lam: Optional[float] = None
    retain_fraction: float = 0.10
    budget_fraction: float = 0.10
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 4
    epochs: Optional[int] = None  # overrides the budget when set

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError("budget_fraction must lie in (0, 1]")
        if not 0 < self.retain_fraction <= 1:
            raise ConfigError("retain_fraction must lie in (0, 1]")
        uses_gamma = self.method in ("GA_L1", "GA_L1_FT")
        uses_lam = self.method in ("NL", "NL_FT")
        if uses_gamma != (self.gamma is not None):
            raise ConfigError(f"gamma is required by GA methods only (method {self.method})")
        if uses_lam != (self.lam is not None):
            raise ConfigError(f"lam is required by NL methods only (method {self.method})")
        for v in (self.gamma, self.lam):
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ConfigError("gamma and lam must be finite and >= 0")
        if not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("lr must be > 0 and batch_size >= 1")


@dataclass
class TrainedModel:
    params: ModelParams
    role: str
    lineage: dict
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # per-epoch ModelParams (unlearning runs)
    wall_seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return self.lineage.get("epochs_run", 0)


def config_hash(obj) -> str:
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def ids_hash(d: Dataset) -> str:
    return hashlib.sha256("\n".join(d.ids).encode("utf-8")).hexdigest()[:16]


def checkpoint_id(params: ModelParams) -> str:
    from .reconnet import checkpoint_bytes

    return hashlib.sha256(checkpoint_bytes(params)).hexdigest()[:16]


class Adam:
    """Adam on a flat parameter tensor, state kept in the tensor's dtype."""

    def __init__(self, n, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, dtype=torch.float32):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = torch.zeros(n, dtype=dtype)
        self.v = torch.zeros(n, dtype=dtype)
        self.t = 0

    def step(self, vec: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return vec - self.lr * m_hat / (torch.sqrt(v_hat) + self.eps)


def unlearn_budget(train_epochs: int, budget_fraction: float = 0.10) -> int:
    if train_epochs < 1:
        raise ValueError("train_epochs must be >= 1")
    # round first: 0.1 * 30 is 3.0000000000000004 in binary floating point
    return math.ceil(round(budget_fraction * train_epochs, 9))


def subset_retain(d_r: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded sample of ceil(fraction * |D_r|) retain samples, role ``retain_subset``."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = math.ceil(round(fraction * len(d_r), 9))
    order = make_rng(seed, "retain-subset").permutation(len(d_r))[:n]
    return Dataset([d_r.samples[i] for i in order], "retain_subset", seed)


class _Stream:
    """Minibatch index lists for one dataset within one epoch."""

    def __init__(self, n, batch_size, seed, label, epoch):
        self.n, self.batch_size = n, batch_size
        self.key = (seed, label, epoch)
        self._cycles = {}
        self.n_batches = math.ceil(n / batch_size) if n else 0

    def batch(self, step):
        cycle, pos = divmod(step, self.n_batches)
        if cycle not in self._cycles:
            perm = make_rng(*self.key, cycle).permutation(self.n)
            self._cycles[cycle] = [perm[i:i + self.batch_size].tolist()
                                   for i in range(0, self.n, self.batch_size)]
        return self._cycles[cycle][pos]


EpochHook = Callable[[int, torch.Tensor, float], list]


def _run(vec, arch, retain, forget, forget_spec, epochs, lr, batch_size, seed,
         first_epoch=1, betas=(0.9, 0.999), eps=1e-8, on_epoch: Optional[EpochHook] = None):
    """Shared epoch loop. ``retain``/``forget`` are stacked batches or None.

    Returns (vec, log rows, per-epoch vectors, optimisation seconds).
    """
    opt = Adam(vec.numel(), lr, betas, eps, vec.dtype)
    plain = LossSpec("plain_l1")
    noisy = forget_spec is not None and forget_spec.kind == "noisy_label"
    log, snapshots, seconds = [], [], 0.0
    for epoch in range(first_epoch, first_epoch + epochs):
        tic = time.perf_counter()
        streams = []
        if retain is not None and len(retain):
            streams.append(("retain", retain, plain, _Stream(len(retain), batch_size, seed, "retain", epoch)))
        if forget is not None and len(forget):
            streams.append(("forget", forget, forget_spec, _Stream(len(forget), batch_size, seed, "forget", epoch)))
        n_steps = max((s[3].n_batches for s in streams), default=0)
        total = 0.0
        for step in range(n_steps):
            batches, specs, seeds = [], [], []
            for name, data, spec, stream in streams:
                b = data.select(stream.batch(step))
                batches.append(b)
                specs.append(spec)
                seeds.append([derive_seed(seed, "noise", i, epoch) for i in b.ids] if name == "forget" and noisy else None)
            if len(batches) == 1:
                args = (batches[0], specs[0], seeds[0])
            else:
                args = (batches, LossSpec("composite", terms=tuple((1.0, s) for s in specs)), seeds)
            try:
                value, grad = value_and_grad_vec(vec, arch, *args)
            except NumericalError as exc:
                raise NumericalError(f"numerical failure at epoch {epoch}: {exc}", epoch=epoch) from exc
            vec = opt.step(vec, grad)
            if not torch.isfinite(vec).all():
                raise NumericalError(f"parameters diverged at epoch {epoch}", epoch=epoch)
            total += float(value)
        seconds += time.perf_counter() - tic
        mean_loss = total / n_steps if n_steps else float("nan")
        rows = on_epoch(epoch, vec, mean_loss) if on_epoch else None
        log.extend(rows or [{"epoch": epoch, "split": "train", "loss": mean_loss}])
        snapshots.append(vec.clone())
    return vec, log, snapshots, seconds


def _to_params(arch, vec) -> ModelParams:
    return ModelParams.unflatten(arch, vec.detach().numpy().astype(np.float64))


def _vec(params: ModelParams, dtype=torch.float32):
    return torch.from_numpy(params.flatten()).to(dtype)


def train(init: ModelParams, datasets, cfg: TrainConfig, role: str = "original") -> TrainedModel:
    """Train with plain L1 on the union of ``datasets`` (shuffled per epoch).

    The original model G takes ``[D_r, D_f]``, the oracle takes ``[D_r]``.
    """
    cfg.validate()
    if role not in ("original", "oracle"):
        raise ValueError(f"train role must be original or oracle, got {role!r}")
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    samples = [s for d in datasets for s in d.samples]
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    if role == "oracle" and any(d.role != "retain" for d in datasets):
        raise ValueError("the oracle is trained on retain data only")
    tic = time.perf_counter()
    data = stack_samples(samples)
    prep = time.perf_counter() - tic
    vec, log, _, seconds = _run(_vec(init), init.arch, data, None, None, cfg.epochs, cfg.lr,
                                cfg.batch_size, cfg.seed, betas=cfg.betas, eps=cfg.eps)
    lineage = {
        "role": role,
        "parent": None,
        "init": checkpoint_id(init),
        "config_hash": config_hash(cfg),
        "config": asdict(cfg),
        "datasets": {d.role: ids_hash(d) for d in datasets},
        "epochs_run": cfg.epochs,
        "epochs_total": cfg.epochs,
    }
    return TrainedModel(_to_params(init.arch, vec), role, lineage, log, [], prep + seconds)


def _unlearn(G: TrainedModel, cfg: UnlearnConfig, retain: Optional[Dataset], forget: Optional[Dataset],
             forget_spec: Optional[LossSpec], evaluator=None) -> TrainedModel:
    cfg.validate()
    parent_epochs = G.lineage.get("epochs_total", 0)
    epochs = cfg.epochs if cfg.epochs is not None else unlearn_budget(max(parent_epochs, 1), cfg.budget_fraction)
    tic = time.perf_counter()
    r = stack_samples(retain.samples) if retain is not None and len(retain) else None
    f = stack_samples(forget.samples) if forget is not None and len(forget) else None
    prep = time.perf_counter() - tic
    arch = G.params.arch

    def hook(epoch, vec, loss):
        rows = evaluator(_to_params(arch, vec))
        for row in rows:
            row.update(epoch=epoch, loss=loss)
        return rows

    vec, log, snaps, seconds = _run(_vec(G.params), arch, r, f, forget_spec, epochs, cfg.lr,
                                    cfg.batch_size, cfg.seed, first_epoch=parent_epochs + 1,
                                    on_epoch=hook if evaluator is not None else None)
    lineage = {
        "role": "unlearned",
        "method": cfg.method,
        "parent": checkpoint_id(G.params),
        "parent_config_hash": G.lineage.get("config_hash"),
        "config_hash": config_hash(cfg),
        "config": asdict(cfg),
        "datasets": {d.role: ids_hash(d) for d in (retain, forget) if d is not None},
        "epochs_run": epochs,
        "epochs_total": parent_epochs + epochs,
    }
    checkpoints = [_to_params(arch, v) for v in snaps]
    return TrainedModel(_to_params(arch, vec), "unlearned", lineage, log, checkpoints, prep + seconds)


def _require_role(d: Optional[Dataset], roles, what):
    if d is None or d.role not in roles:
        got = None if d is None else d.role
        raise ValueError(f"{what} must have role in {roles}, got {got}")


def run_ft(G, D, cfg, evaluator=None):
    """Fine-tune on retain data: D_r' for FT, the full D_r for FullFT."""
    _require_role(D, ("retain", "retain_subset"), "fine-tuning data")
    return _unlearn(G, cfg, D, None, None, evaluator)


def run_ga_l1(G, D_f, cfg, evaluator=None):
    _require_role(D_f, ("forget",), "gradient-ascent data")
    return _unlearn(G, cfg, None, D_f, LossSpec("negated_l1_plus_l1reg", gamma=cfg.gamma), evaluator)


def run_nl(G, D_f, cfg, evaluator=None):
    _require_role(D_f, ("forget",), "noisy-label data")
    return _unlearn(G, cfg, None, D_f, LossSpec("noisy_label", lam=cfg.lam), evaluator)


def run_ga_l1_ft(G, D_f, D_r_sub, cfg, evaluator=None):
    _require_role(D_f, ("forget",), "forget data")
    _require_role(D_r_sub, ("retain", "retain_subset"), "retain data")
    return _unlearn(G, cfg, D_r_sub, D_f, LossSpec("negated_l1_plus_l1reg", gamma=cfg.gamma), evaluator)


def run_nl_ft(G, D_f, D_r_sub, cfg, evaluator=None):
    _require_role(D_f, ("forget",), "forget data")
    _require_role(D_r_sub, ("retain", "retain_subset"), "retain data")
    return _unlearn(G, cfg, D_r_sub, D_f, LossSpec("noisy_label", lam=cfg.lam), evaluator)


def run_method(G, cfg: UnlearnConfig, d_r: Dataset, d_f: Dataset, evaluator=None) -> TrainedModel:
    """Dispatch by ``cfg.method``; FT and the combined methods use a seeded
    ``retain_fraction`` subset of ``d_r``, FullFT uses all of it."""
    cfg.validate()
    subset = subset_retain(d_r, cfg.retain_fraction, cfg.seed)
    if cfg.method == "FullFT":
        return run_ft(G, d_r, cfg, evaluator)
    if cfg.method == "FT":
        return run_ft(G, subset, cfg, evaluator)
    if cfg.method == "GA_L1":
        return run_ga_l1(G, d_f, cfg, evaluator)
    if cfg.method == "NL":
        return run_nl(G, d_f, cfg, evaluator)
    if cfg.method == "GA_L1_FT":
        return run_ga_l1_ft(G, d_f, subset, cfg, evaluator)
    return run_nl_ft(G, d_f, subset, cfg, evaluator)
