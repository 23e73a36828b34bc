"""One-off sweep that picks the desk-scale defaults for gamma and lambda.

gamma: smallest grid value whose GA-l1 run stays finite over the whole budget
and ends with a smaller ||theta||_1 than the original model.
lambda: smallest grid value whose plain NL run lowers forget-test PSNR by at
least 2 dB.

    python3 scripts/calibrate.py --cache /tmp/calib
"""

import argparse
import math
import time
from pathlib import Path

from reconunlearn import phantomgen as pg
from reconunlearn import reconnet as rn
from reconunlearn import unlearn as ul
from reconunlearn.errors import NumericalError
from reconunlearn.evalkit import evaluate

GAMMAS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
LAMBDAS = (1e-5, 1e-3, 1e-2, 0.1, 1.0, 10.0, 30.0, 100.0, 1000.0)


def trained(cache: Path, name, init, data, cfg, role):
    path = cache / f"{name}.ckpt"
    if path.exists():
        params = rn.load_checkpoint(path)
        lineage = {"epochs_total": cfg.epochs, "config_hash": ul.config_hash(cfg), "epochs_run": cfg.epochs}
        return ul.TrainedModel(params, role, lineage, [], [], 0.0)
    m = ul.train(init, data, cfg, role)
    rn.save_checkpoint(m.params, path)
    return m


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--cache", type=Path, default=Path("calib-cache"))
    ap.add_argument("--methods", nargs="*", default=["GA_L1", "NL"])
    ap.add_argument("--gamma", type=float, nargs="*", default=GAMMAS)
    ap.add_argument("--lam", type=float, nargs="*", default=LAMBDAS)
    ap.add_argument("--lr", type=float, default=1e-3, help="unlearning step size")
    args = ap.parse_args(argv)
    args.cache.mkdir(parents=True, exist_ok=True)

    corpus = pg.build_corpus(pg.CorpusConfig(), args.seed)
    init = rn.init_params(rn.ArchConfig(), args.seed)
    tcfg = ul.TrainConfig(seed=args.seed)
    G = trained(args.cache, "G", init, [corpus["retain"], corpus["forget"]], tcfg, "original")
    O = trained(args.cache, "oracle", init, [corpus["retain"]], tcfg, "oracle")
    splits = {"BTA": corpus["retain_test"], "KTA": corpus["forget_test"]}

    def row(name, model):
        r = evaluate(model, splits, name)
        print(f"{name:<24} BTA {r['BTA'].psnr_mean:7.3f}  KTA {r['KTA'].psnr_mean:7.3f}", flush=True)
        return r

    base = row("G", G)
    row("oracle", O)
    row("zero-filled", rn.ModelParams(rn.ArchConfig(0, 8), []))

    g_l1 = abs(G.params.flatten()).sum()
    print(f"G l1 {g_l1:.3f}")

    def run(cfg, label):
        t0 = time.perf_counter()
        try:
            m = ul.run_method(G, cfg, corpus["retain"], corpus["forget"])
        except NumericalError as exc:
            print(f"{label:<24} non-finite at epoch {exc.epoch}")
            return None, math.inf
        r = row(label, m)
        l1 = abs(m.params.flatten()).sum()
        print(f"{'':<24} l1 {l1:.3f}  {time.perf_counter() - t0:.1f}s")
        return r, l1

    picks = {}
    for method in args.methods:
        if method in ("GA_L1", "GA_L1_FT"):
            for g in args.gamma:
                r, l1 = run(ul.UnlearnConfig(method, gamma=g, seed=args.seed, lr=args.lr), f"{method} gamma={g:g}")
                if r is not None and l1 < g_l1 and method == "GA_L1" and "gamma" not in picks:
                    picks["gamma"] = g
        elif method in ("NL", "NL_FT"):
            for lam in args.lam:
                r, _ = run(ul.UnlearnConfig(method, lam=lam, seed=args.seed, lr=args.lr), f"{method} lambda={lam:g}")
                drop = base["KTA"].psnr_mean - r["KTA"].psnr_mean if r else -math.inf
                if method == "NL" and drop >= 2.0 and "lam" not in picks:
                    picks["lam"] = lam
        else:
            run(ul.UnlearnConfig(method, seed=args.seed, lr=args.lr), method)
    print("picks:", picks)


if __name__ == "__main__":
    main()
