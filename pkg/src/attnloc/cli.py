"""Command-line experiment runner.

Every command resolves its settings as built-in defaults, then a JSON
``--config`` file, then explicit flags, and writes the result to
``<out>/config-echo.json`` so a run can be replayed with ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, moments, spp
from .errors import TrainingDiverged
from .locater import TrainConfig, train
from .model import attention_entropy_from_wqk, hash_seed
from .randwalk import CovarianceSpec, make_covariance, walk_batch
from .spectrum import EigenSpec, ShapeParams, sample_wqk

DEFAULTS = {
    "spp-theory": {
        "xi": [-5.0, -1.0, 0.0, 1.0, 5.0],
        "eta": [0.001, 0.01, 0.1, 1.0, 10.0],
        "pairs": [[128.0, 0.01], [512.0, 0.01]],
        "n_theta": 1000,
        "variance": "paper",
    },
    "spp-mc": {
        "d": 128,
        "T": 40,
        "n_walks": 300,
        "n_draws": 10,
        "means": [0.0, 0.05, 0.2, 0.5],
        "scales": [0.01, 0.1, 0.5],
        "covariance": "isotropic",
        "lam": None,
    },
    "verify": {"quick": False, "inject_fault": False},
    "train": {
        "kappa1": 100.0,
        "kappa2": [0.0, 1e-3, 1e-2, 1e-1, 1.0],
        "lr": None,
        "iters": 5000,
        "batch_size": 64,
        "T": 32,
        "d": 32,
        "layers": 1,
        "weight_decay": 0.01,
        "optimizer": "adam",
        "data_source": "random-walk",
        "corpus_path": None,
        "paper_grad_variant": False,
        "log_every": 100,
        "eval_size": 64,
        "activation": "identity",
    },
    "plots": {"input": None, "what": ["auto"]},
}
COMMON = {"seed": 0, "jobs": 1}


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _tag(x) -> str:
    return f"{float(x):g}".replace("-", "m")


def _pmap(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# -- spp-theory -----------------------------------------------------------------

def cmd_spp_theory(cfg, out: Path):
    theta = np.linspace(0.0, 1.0, cfg["n_theta"])
    pairs = [(x, e) for x in cfg["xi"] for e in cfg["eta"]] + [tuple(p) for p in cfg["pairs"]]
    index = []
    for xi, eta in pairs:
        p = ShapeParams(xi=float(xi), eta=float(eta), r=float(xi) * float(eta), lam=1.0)
        rho = spp.rho_theory(theta, p, cfg["variance"])
        name = f"rho_xi{_tag(xi)}_eta{_tag(eta)}.csv"
        _write_csv(out / name, ["theta", "rho"], [[_fmt(t), _fmt(r)] for t, r in zip(theta, rho)])
        width = spp.half_max_support(p, n=cfg["n_theta"], variance=cfg["variance"])
        index.append([_fmt(xi), _fmt(eta), _fmt(p.r), _fmt(rho.max()), _fmt(width), name])
    _write_csv(out / "spp_theory_index.csv", ["xi", "eta", "r", "max_rho", "half_max_width", "file"], index)
    return 0


# -- spp-mc ---------------------------------------------------------------------

def _mc_cell(args):
    mean, scale, cfg, a, b = args
    d, T = cfg["d"], cfg["T"]
    lam = cfg["lam"] or spp.default_lambda(d)
    cov = make_covariance(CovarianceSpec(kind=cfg["covariance"], dim=d, seed=hash_seed(cfg["seed"], 5)))
    prof = np.zeros(T)
    ent = 0.0
    for k in range(cfg["n_draws"]):
        s = hash_seed(cfg["seed"], a, b, k)
        wqk = sample_wqk(EigenSpec(dim=d, mean=mean, scale=scale, seed=s))
        prof += spp.spp_monte_carlo(wqk, cov, T, lam, cfg["n_walks"], seed=s).values
        X, _ = walk_batch(cov, T, cfg["n_walks"], seed=s)
        ent += attention_entropy_from_wqk(wqk, X, lam)
    return prof / cfg["n_draws"], ent / cfg["n_draws"]


def cmd_spp_mc(cfg, out: Path):
    cells = [(float(m), float(s), cfg, a, b) for a, m in enumerate(cfg["means"]) for b, s in enumerate(cfg["scales"])]
    results = _pmap(_mc_cell, cells, cfg["jobs"])
    T = cfg["T"]
    _write_csv(out / "spp_mc_profiles.csv", ["mean", "scale"] + [f"rho_{i}" for i in range(1, T + 1)],
               [[_fmt(c[0]), _fmt(c[1])] + [_fmt(v) for v in prof] for c, (prof, _) in zip(cells, results)])
    _write_csv(out / "spp_mc_long.csv", ["mean", "scale", "i", "theta", "rho"],
               [[_fmt(c[0]), _fmt(c[1]), i + 1, _fmt((i + 1) / T), _fmt(v)]
                for c, (prof, _) in zip(cells, results) for i, v in enumerate(prof)])
    _write_csv(out / "entropy_heatmap.csv", ["mean", "scale", "entropy"],
               [[_fmt(c[0]), _fmt(c[1]), _fmt(e)] for c, (_, e) in zip(cells, results)])
    return 0


# -- verify ---------------------------------------------------------------------

def cmd_verify(cfg, out: Path):
    results, rows = checks.run_all(seed=cfg["seed"], inject_fault=cfg["inject_fault"], quick=cfg["quick"])
    moments.write_audit_csv(rows, out / "walk_moment_audit.csv")
    failed = [r.name for r in results if r.mandatory and not r.passed]
    report = {
        "passed": not failed,
        "failed_mandatory": failed,
        "audits_not_holding": [r.name for r in results if not r.mandatory and not r.passed],
        "checks": [r.as_dict() for r in results],
    }
    with open(out / "verify-report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, default=float)
    for r in results:
        status = "ok" if r.passed else ("FAIL" if r.mandatory else "audit-miss")
        print(f"{status:10s} {r.name}")
    if failed:
        print("failing mandatory checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# -- train ----------------------------------------------------------------------

def _train_one(args):
    k2, cfg = args
    fields = {k: cfg[k] for k in DEFAULTS["train"] if k != "kappa2"}
    tc = TrainConfig(kappa2=float(k2), seed=cfg["seed"], **fields)
    return k2, train(tc)


def cmd_train(cfg, out: Path):
    if cfg["data_source"] == "corpus":
        p = cfg["corpus_path"]
        if not p or not Path(p).is_file():
            print(f"corpus file not readable: {p}", file=sys.stderr)
            return 2
    try:
        runs = _pmap(_train_one, [(k2, cfg) for k2 in cfg["kappa2"]], cfg["jobs"])
    except TrainingDiverged as exc:
        with open(out / "divergence.json", "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), "record": exc.record}, fh, indent=1, default=float)
        print(str(exc), file=sys.stderr)
        return 3
    summary = []
    for k2, log in runs:
        tag = _tag(k2)
        log.to_csv(out / f"train_k2_{tag}.csv")
        log.to_json(out / f"train_k2_{tag}.json")
        T = log.config["T"]
        _write_csv(out / f"spp_evolution_k2_{tag}.csv", [f"spp_{i}" for i in range(1, T + 1)],
                   [[_fmt(v) for v in row] for row in log.spp_matrix()])
        f = log.final()
        summary.append([_fmt(k2), _fmt(f["scale"]), _fmt(f["trace"]), _fmt(f["entropy"]), _fmt(f["loss"])])
    _write_csv(out / "train_summary.csv", ["kappa2", "final_scale", "final_trace", "final_entropy", "final_loss"],
               summary)
    return 0


# -- plots ----------------------------------------------------------------------

PLOT_INPUTS = {
    "theory": ["spp_theory_index.csv"],
    "mc": ["spp_mc_long.csv", "entropy_heatmap.csv"],
    "train": ["train_summary.csv"],
}


def _theory_script(src: Path):
    with open(src / "spp_theory_index.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    lines = ["set datafile separator ','", "set terminal pngcairo size 1400,900", "set output 'spp_theory.png'",
             "set xlabel 'rho'", "set ylabel 'theta'", "set key outside right"]
    plots = [f"'{r['file']}' using 2:1 skip 1 with lines title 'xi={float(r['xi']):g} eta={float(r['eta']):g}'"
             for r in rows]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def _mc_script(src: Path):
    return "\n".join([
        "set datafile separator ','",
        "set terminal pngcairo size 1200,500",
        "set output 'spp_mc.png'",
        "set multiplot layout 1,2",
        "set xlabel 'token index i'", "set ylabel 'rho_i'",
        "plot 'spp_mc_long.csv' skip 1 using 3:5 with points pt 7 ps 0.3 title 'all mean/scale cells'",
        "set view map", "set xlabel 'eigenvalue mean'", "set ylabel 'eigenvalue scale'",
        "splot 'entropy_heatmap.csv' skip 1 using 1:2:3 with points pt 5 ps 4 palette title 'attention entropy'",
        "unset multiplot",
    ]) + "\n"


def _train_script(src: Path):
    evo = sorted(p.name for p in src.glob("spp_evolution_k2_*.csv"))
    lines = [
        "set datafile separator ','",
        "set terminal pngcairo size 1400,1000",
        "set output 'train_summary.png'",
        "set multiplot layout 2,2",
        "set logscale x", "set xlabel 'kappa2 (0 drawn at 1e-4)'",
        "fx(k) = (k > 0 ? k : 1e-4)",
        "set title '(A) final trace'",
        "plot 'train_summary.csv' skip 1 using (fx($1)):3 with linespoints notitle",
        "set title '(B) final scale tr(W^T W)'",
        "plot 'train_summary.csv' skip 1 using (fx($1)):2 with linespoints notitle",
        "set title '(C) final attention entropy'",
        "plot 'train_summary.csv' skip 1 using (fx($1)):4 with linespoints notitle",
        "set title '(D) final loss'",
        "plot 'train_summary.csv' skip 1 using (fx($1)):5 with linespoints notitle",
        "unset multiplot",
    ]
    for name in evo:
        lines += ["unset logscale x", f"set output '{name[:-4]}.png'", "set terminal pngcairo size 900,400",
                  "set title 'SPP per token over logged steps'", "set xlabel 'logged step'",
                  "set ylabel 'token index'", "set view map",
                  f"plot '{name}' matrix skip 1 with image notitle"]
    return "\n".join(lines) + "\n"


def cmd_plots(cfg, out: Path):
    src = Path(cfg["input"]) if cfg["input"] else out
    what = cfg["what"]
    if "auto" in what:
        what = [k for k, files in PLOT_INPUTS.items() if all((src / f).is_file() for f in files)]
        if not what:
            missing = sorted({f for files in PLOT_INPUTS.values() for f in files})
            print(f"no plottable inputs in {src}; expected any of: " + ", ".join(missing), file=sys.stderr)
            return 2
    missing = [f for k in what for f in PLOT_INPUTS[k] if not (src / f).is_file()]
    if missing:
        print(f"missing inputs in {src}: " + ", ".join(missing), file=sys.stderr)
        return 2
    makers = {"theory": _theory_script, "mc": _mc_script, "train": _train_script}
    for k in what:
        (out / f"plot_{k}.gp").write_text(makers[k](src), encoding="utf-8")
    return 0


COMMANDS = {
    "spp-theory": cmd_spp_theory,
    "spp-mc": cmd_spp_mc,
    "verify": cmd_verify,
    "train": cmd_train,
    "plots": cmd_plots,
}


def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _pairs(s):
    out = []
    for item in s.split(";"):
        if item.strip():
            a, b = item.split(",")
            out.append([float(a), float(b)])
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="attnloc", description="Attention localization experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with settings (overridden by explicit flags)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="parallel worker processes")
        return p

    p = common(sub.add_parser("spp-theory", help="closed-form SPP curves"))
    p.add_argument("--xi", type=_floats)
    p.add_argument("--eta", type=_floats)
    p.add_argument("--pairs", type=_pairs, help="extra 'xi,eta;xi,eta' pairs")
    p.add_argument("--n-theta", dest="n_theta", type=int)
    p.add_argument("--variance", choices=spp.VARIANCE_FORMS)

    p = common(sub.add_parser("spp-mc", help="sampled SPP profiles and entropy heatmap"))
    p.add_argument("--d", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--n-walks", dest="n_walks", type=int)
    p.add_argument("--n-draws", dest="n_draws", type=int)
    p.add_argument("--means", type=_floats)
    p.add_argument("--scales", type=_floats)
    p.add_argument("--covariance", choices=["isotropic", "factored"])
    p.add_argument("--lam", type=float)

    p = common(sub.add_parser("verify", help="run the self-check suite"))
    p.add_argument("--quick", action="store_const", const=True)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_const", const=True,
                   help="flip a sign in the closed-form curve to confirm the checks notice")

    p = common(sub.add_parser("train", help="regularized training sweep over kappa2"))
    p.add_argument("--kappa1", type=float)
    p.add_argument("--kappa2", type=_floats, help="comma-separated sweep")
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--data-source", dest="data_source", choices=["random-walk", "corpus"])
    p.add_argument("--corpus", dest="corpus_path")
    p.add_argument("--paper-grad-variant", dest="paper_grad_variant", action="store_const", const=True)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--activation", choices=["identity", "relu"])

    p = common(sub.add_parser("plots", help="write gnuplot scripts for existing CSVs"))
    p.add_argument("--input", help="directory holding the CSVs (default: --out)")
    p.add_argument("--what", type=lambda s: s.split(","), help="theory,mc,train or auto")
    return ap


def resolve_config(args) -> dict:
    cfg = {**COMMON, **DEFAULTS[args.command]}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(cfg) - {"command"}
        if unknown:
            raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config-echo.json", "w", encoding="utf-8") as fh:
            json.dump({"command": args.command, **cfg}, fh, indent=1, sort_keys=True)
    except OSError as exc:
        print(f"cannot write to {out}: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg, out)


if __name__ == "__main__":
    sys.exit(main())
