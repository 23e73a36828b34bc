"""Image-quality metrics, the retain/forget evaluation protocol, run-time
efficiency normalisation, quadratic Pareto fits and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .reconnet import reconstruct

# split label -> dataset role
SPLITS = {"BTA": "retain_test", "KTA": "forget_test", "UA": "forget"}
PSNR_INF = math.inf
REPORT_SCHEMA_VERSION = 1
REPORT_HEADER = "method,split,metric,mean,std,n"
EPOCH_HEADER = "epoch,split,psnr_mean,psnr_std,ssim_mean,ssim_std,loss"


def psnr(pred, target, data_range: Optional[float] = None) -> float:
    """PSNR in dB; ``math.inf`` when the images are identical."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if data_range is None:
        data_range = float(target.max())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(pred, target, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: Optional[float] = None) -> float:
    """Mean SSIM over all valid ``window x window`` windows, uniform weights.

    Local variances use the unbiased (N - 1) normalisation, matching
    scikit-image's default ``structural_similarity``.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < window:
        raise ValueError(f"images must be 2-D and at least {window}x{window}")
    if data_range is None:
        data_range = float(y.max())
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    cov_norm = n / (n - 1)

    def wmean(a):
        return sliding_window_view(a, (window, window)).mean(axis=(-2, -1))

    ux, uy = wmean(x), wmean(y)
    vx = cov_norm * (wmean(x * x) - ux * ux)
    vy = cov_norm * (wmean(y * y) - uy * uy)
    vxy = cov_norm * (wmean(x * y) - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsRecord:
    model_id: str
    split: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n_samples: int
    n_infinite: int = 0  # PSNR sentinel hits, excluded from the PSNR mean/std


def aggregate(model_id, split, psnrs, ssims) -> MetricsRecord:
    psnrs = np.asarray(psnrs, dtype=np.float64)
    finite = psnrs[np.isfinite(psnrs)]
    if finite.size:
        p_mean, p_std = float(finite.mean()), float(finite.std())
    else:
        p_mean, p_std = PSNR_INF, 0.0
    ssims = np.asarray(ssims, dtype=np.float64)
    return MetricsRecord(model_id, split, p_mean, p_std, float(ssims.mean()), float(ssims.std()),
                         int(psnrs.size), int(psnrs.size - finite.size))


def evaluate_dataset(params, dataset, model_id="model", split=None) -> MetricsRecord:
    psnrs, ssims = [], []
    for s in dataset.samples:
        pred = reconstruct(params, s.masked_kspace, s.mask)
        rng = float(s.target.max())
        psnrs.append(psnr(pred, s.target, rng))
        ssims.append(ssim(pred, s.target, data_range=rng))
    return aggregate(model_id, split or dataset.role, psnrs, ssims)


def evaluate(model, splits: dict, model_id: Optional[str] = None) -> dict:
    """BTA/KTA/UA records for whichever of the three splits are supplied.

    ``splits`` maps BTA/KTA/UA to datasets; ``model`` is a TrainedModel or
    ModelParams.
    """
    params = getattr(model, "params", model)
    if model_id is None:
        from .unlearn import checkpoint_id

        model_id = checkpoint_id(params)
    out = {}
    for label, d in splits.items():
        if label not in SPLITS:
            raise ValueError(f"unknown split {label!r}")
        if d.role != SPLITS[label]:
            raise ValueError(f"{label} needs a {SPLITS[label]} dataset, got {d.role}")
        if len(d) == 0:
            continue
        out[label] = evaluate_dataset(params, d, model_id, label)
    return out


def gap(a: MetricsRecord, b: MetricsRecord) -> float:
    if a.split != b.split:
        raise ValueError(f"cannot compare {a.split} with {b.split}")
    return a.psnr_mean - b.psnr_mean


@dataclass
class RteRecord:
    model_id: str
    wall_seconds: float
    epochs_run: int
    normalized_inverse_rte: float = 1.0


def measure_rte(model_id: str, wall_seconds: float, epochs_run: int) -> RteRecord:
    if not wall_seconds > 0:
        raise ValueError("run duration must be positive")
    return RteRecord(model_id, float(wall_seconds), int(epochs_run))


def normalize_rte(group: list) -> list:
    """Min-max rescale 1 / wall_seconds over the group (all 1.0 when degenerate)."""
    if not group:
        raise ValueError("empty comparison group")
    inv = np.array([1.0 / r.wall_seconds for r in group])
    lo, hi = inv.min(), inv.max()
    out = []
    for r, v in zip(group, inv):
        norm = 1.0 if hi == lo else float((v - lo) / (hi - lo))
        out.append(RteRecord(r.model_id, r.wall_seconds, r.epochs_run, norm))
    return out


@dataclass
class ParetoFit:
    a: float
    b: float
    c: float
    rss: float
    x_opt: Optional[float] = None  # argmax of the parabola when a < 0

    def __call__(self, x):
        return self.a * np.asarray(x) ** 2 + self.b * np.asarray(x) + self.c


def pareto_fit(points) -> ParetoFit:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.unique(x).size < 3:
        raise ValueError("need at least 3 distinct x values")
    V = np.stack([x ** 2, x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    a, b, c = (float(v) for v in coef)
    resid = y - V @ coef
    x_opt = -b / (2 * a) if a < 0 else None
    return ParetoFit(a, b, c, float(resid @ resid), x_opt)


# -- reports ------------------------------------------------------------------

def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header: str, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header.split(","))
    for row in rows:
        w.writerow([_num(v) for v in row])
    return buf.getvalue()


def table1_rows(records: dict):
    """records: method -> {split: MetricsRecord} -> long-format rows."""
    for method, by_split in records.items():
        for split in ("BTA", "KTA", "UA"):
            rec = by_split.get(split)
            if rec is None:
                continue
            yield (method, split, "psnr", rec.psnr_mean, rec.psnr_std, rec.n_samples)
            yield (method, split, "ssim", rec.ssim_mean, rec.ssim_std, rec.n_samples)


def _record_from_json(obj) -> MetricsRecord:
    return MetricsRecord(**obj)


@dataclass
class Report:
    table1: dict  # method -> split -> MetricsRecord
    table2: dict = field(default_factory=dict)  # method -> list of per-epoch rows
    table3: dict = field(default_factory=dict)  # fraction (str) -> method -> split -> MetricsRecord
    fig3: dict = field(default_factory=dict)  # method -> {"points": [[x, y], ...], "fit": ParetoFit dict}
    gaps: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "table1": {m: {s: asdict(r) for s, r in d.items()} for m, d in self.table1.items()},
            "table2": self.table2,
            "table3": {f: {m: {s: asdict(r) for s, r in d.items()} for m, d in md.items()}
                       for f, md in self.table3.items()},
            "fig3": self.fig3,
            "gaps": self.gaps,
            "warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Report":
        if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise DataError(f"unsupported report schema {obj.get('schema_version')}")
        return cls(
            table1={m: {s: _record_from_json(r) for s, r in d.items()} for m, d in obj["table1"].items()},
            table2=obj["table2"],
            table3={f: {m: {s: _record_from_json(r) for s, r in d.items()} for m, d in md.items()}
                    for f, md in obj["table3"].items()},
            fig3=obj["fig3"],
            gaps=obj["gaps"],
            warnings=obj["warnings"],
        )


def build_report(table1: dict, table2=None, table3=None, fig3_points=None, required=()) -> Report:
    """Assemble the report; ``required`` lists method names that must be present."""
    missing = [m for m in required if m not in table1]
    if missing:
        raise DataError(f"missing records for: {', '.join(missing)}")
    rep = Report(table1=table1)
    if "G" in table1 and "oracle" in table1:
        for split in ("BTA", "KTA", "UA"):
            if split in table1["G"] and split in table1["oracle"]:
                rep.gaps[split] = gap(table1["G"][split], table1["oracle"][split])
    if not any(("UA" in d) for d in table1.values()):
        rep.warnings.append("no forget-set (UA) records: UA columns omitted")
    if table2:
        rep.table2 = table2
    else:
        rep.warnings.append("no per-epoch unlearning logs: table 2 omitted")
    rep.table3 = table3 or {}
    for method, pts in (fig3_points or {}).items():
        entry = {"points": [list(p) for p in pts]}
        try:
            entry["fit"] = asdict(pareto_fit(pts))
        except ValueError as exc:
            entry["fit"] = None
            rep.warnings.append(f"fig3 fit for {method} skipped: {exc}")
        rep.fig3[method] = entry
    return rep


def emit_report(report: Report, outdir, formats=("csv", "json")) -> list:
    """Write the report files and return their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = outdir / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    if "json" in formats:
        put("report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    if "csv" in formats:
        rows = list(table1_rows(report.table1))
        rows += [("gap(G-oracle)", split, "psnr", v, 0.0, "") for split, v in sorted(report.gaps.items())]
        put("table1.csv", _csv_text(REPORT_HEADER, rows))
        if report.table2:
            t2 = [(m, r["epoch"], r["split"], r.get("psnr_mean"), r.get("psnr_std"), r.get("ssim_mean"),
                   r.get("ssim_std"), r.get("loss")) for m, rs in report.table2.items() for r in rs]
            put("table2.csv", _csv_text("method," + EPOCH_HEADER, t2))
        if report.table3:
            t3 = [(frac,) + row for frac, md in report.table3.items() for row in table1_rows(md)]
            put("table3.csv", _csv_text("fraction," + REPORT_HEADER, t3))
        if report.fig3:
            f3 = []
            for m, e in report.fig3.items():
                fit = e.get("fit") or {}
                for x, y in e["points"]:
                    f3.append((m, x, y, fit.get("a"), fit.get("b"), fit.get("c")))
            put("fig3.csv", _csv_text("method,x,y,a,b,c", f3))
    return written


def fig4_rows(table1: dict, rte: list):
    """Radar data: UA/BTA/KTA PSNR plus normalised inverse RTE per method."""
    by_id = {r.model_id: r for r in rte}
    for method, d in table1.items():
        r = by_id.get(method)
        yield (method, *(d[s].psnr_mean if s in d else None for s in ("UA", "BTA", "KTA")),
               None if r is None else r.normalized_inverse_rte)


def emit_timing_report(table1: dict, rte: list, fig3_time_points: dict, outdir) -> list:
    """Wall-clock dependent outputs, kept apart from the deterministic report."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rte = normalize_rte(rte) if rte else []
    p1 = outdir / "fig4_radar.csv"
    p1.write_text(_csv_text("method,ua_psnr,bta_psnr,kta_psnr,norm_inv_rte", fig4_rows(table1, rte)),
                  encoding="utf-8")
    fits = {}
    for m, pts in fig3_time_points.items():
        try:
            fit = asdict(pareto_fit(pts))
        except ValueError:
            fit = None
        fits[m] = {"points": [list(p) for p in pts], "fit": fit}
    p2 = outdir / "timing.json"
    p2.write_text(json.dumps({"rte": [asdict(r) for r in rte], "fig3_wall_time": fits},
                             indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [p1, p2]
