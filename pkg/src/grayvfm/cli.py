"""Command-line pipeline: ``synth -> squash -> train -> eval -> report``.

Every command reads and writes below ``--out``.  Settings come from an
optional INI file whose sections mirror the package modules; any key not
listed in :data:`DEFAULTS` is rejected.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, evaluation, models
from .autodiff import DomainError, StructuralError
from .estimation import TrainConfig, TrainingDiverged, train
from .physics import CvCurve, PhysicalConstants

log = logging.getLogger("grayvfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def _train_defaults(kind: str) -> dict:
    c = TrainConfig.for_kind(kind)
    return {
        "epochs": c.epochs, "batch_size": c.batch_size, "lr": c.lr,
        "sigma_eps": c.sigma_eps if c.sigma_eps is not None else 0.0,
        "lambda_nn": c.lambda_nn, "optimizer": c.optimizer, "width": c.width, "depth": c.depth,
    }


_spec = data.SynthSpec()
_const = PhysicalConstants()

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "workers": 1, "wells": 10},
    "synth": {
        "points_min": 612, "points_max": 2175, "days": _spec.days,
        "p1_min": _spec.p1_range[0], "p1_max": _spec.p1_range[1],
        "p2_min": _spec.p2_range[0], "p2_max": _spec.p2_range[1],
        "z_min": _spec.z_range[0], "z_max": _spec.z_range[1],
        "rho_o": _spec.rho_o, "rho_w": _spec.rho_w, "a": _spec.a, "rel_noise": _spec.rel_noise,
        "record_noise": True,
    },
    "physics": {
        "N": _const.N, "R": _const.R, "M_w": _const.M_w, "z_g": _const.z_g, "x_tp": _const.x_tp,
        "rho_o_st": _const.rho_o_st, "rho_w_st": _const.rho_w_st, "rho_g_st": _const.rho_g_st,
        "cv_z": _spec.cv_z, "cv_values": _spec.cv_values,
    },
    "data": {
        "window": 8, "threshold": 0.004, "p_max": 500.0, "q_tol": 1.0,
        "period_days": 30.0, "lookback": 20, "split": "chronological",
    },
    "models": {
        "fractions": "scheduled", "fused": True,
        **{f"{p}_{s}": getattr(models.DEFAULT_PRIORS[p], a) for p in ("rho_o", "rho_w", "a")
           for s, a in (("mu", "mu"), ("lower", "lower"), ("upper", "upper"))},
    },
    **{f"estimation.{k}": _train_defaults(k) for k in models.KINDS},
}


class ConfigError(ValueError):
    pass


def _coerce(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def load_config(path=None) -> dict[str, dict]:
    """Defaults overlaid with the INI file at ``path``; unknown sections or keys raise."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(DEFAULTS[section][key], text, f"[{section}] {key}")
    return cfg


def constants_of(cfg) -> PhysicalConstants:
    p = cfg["physics"]
    return PhysicalConstants(**{k: p[k] for k in ("N", "R", "M_w", "z_g", "x_tp", "rho_o_st", "rho_w_st", "rho_g_st")})


def cv_curve_of(cfg) -> CvCurve:
    return CvCurve(np.array(cfg["physics"]["cv_z"]), np.array(cfg["physics"]["cv_values"]), 1.0)


def priors_of(cfg) -> dict:
    m = cfg["models"]
    return {p: models.Prior.from_bounds(m[f"{p}_mu"], m[f"{p}_lower"], m[f"{p}_upper"]) for p in ("rho_o", "rho_w", "a")}


def train_config_of(cfg, kind: str, seed: int) -> TrainConfig:
    e = cfg[f"estimation.{kind}"]
    return TrainConfig.for_kind(
        kind, epochs=e["epochs"], batch_size=e["batch_size"], lr=e["lr"],
        sigma_eps=e["sigma_eps"] if kind in ("m", "h") else None,
        lambda_nn=e["lambda_nn"], optimizer=e["optimizer"], width=e["width"], depth=e["depth"], seed=seed)


def well_ids(n: int) -> list[str]:
    return [f"well_{i + 1:02d}" for i in range(n)]


def well_seeds(seed: int, n: int) -> list[int]:
    """Independent per-well seeds, stable for a given run seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def _pick_wells(available: list[str], wanted: str | None) -> list[str]:
    if not wanted:
        return available
    out = []
    for tok in wanted.split(","):
        tok = tok.strip()
        name = f"well_{int(tok):02d}" if tok.isdigit() else tok
        if name not in available:
            raise ConfigError(f"unknown well {tok!r}; available: {', '.join(available)}")
        out.append(name)
    return out


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# commands


def synth_specs(cfg) -> list[data.SynthSpec]:
    s, run = cfg["synth"], cfg["run"]
    rng = np.random.default_rng(np.random.SeedSequence([run["seed"], 0x5EED]))
    sizes = rng.integers(s["points_min"], s["points_max"] + 1, size=run["wells"])
    specs = []
    for n in sizes:
        spec = data.SynthSpec(
            n_points=int(n), days=s["days"], z_range=(s["z_min"], s["z_max"]),
            p1_range=(s["p1_min"], s["p1_max"]), p2_range=(s["p2_min"], s["p2_max"]),
            rho_o=s["rho_o"], rho_w=s["rho_w"], a=s["a"], rel_noise=s["rel_noise"],
            cv_z=tuple(cfg["physics"]["cv_z"]), cv_values=tuple(cfg["physics"]["cv_values"]),
            constants=constants_of(cfg))
        if not s["record_noise"]:
            spec.record_noise = {k: 0.0 for k in spec.record_noise}
        spec.validate()
        specs.append(spec)
    return specs


def cmd_synth(cfg, out: Path, wells: str | None) -> int:
    if cfg["run"]["wells"] < 1 or cfg["synth"]["points_min"] > cfg["synth"]["points_max"]:
        raise ConfigError("need at least one well and points_min <= points_max")
    specs = synth_specs(cfg)  # raises before anything is written
    ids = well_ids(len(specs))
    chosen = set(_pick_wells(ids, wells))
    seeds = well_seeds(cfg["run"]["seed"], len(specs))
    out.mkdir(parents=True, exist_ok=True)
    # stage into a sibling temp dir so a failure leaves no partial files
    stage = Path(tempfile.mkdtemp(prefix=".raw-", dir=out))
    try:
        for wid, spec, sd in zip(ids, specs, seeds):
            if wid not in chosen:
                continue
            series, truth = data.synth_generate(spec, sd)
            data.write_raw_csv(stage / f"{wid}.csv", series)
            data.write_truth(stage / f"{wid}.truth.json", truth)
        raw = out / "raw"
        raw.mkdir(exist_ok=True)
        for f in sorted(stage.iterdir()):
            f.replace(raw / f.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    print(f"wrote {len(chosen)} wells to {out / 'raw'}")
    return EXIT_OK


def _raw_wells(out: Path) -> list[str]:
    raw = out / "raw"
    if not raw.is_dir():
        raise FileNotFoundError(f"no raw data under {raw}; run synth first")
    return sorted(p.stem for p in raw.glob("well_*.csv"))


def _squash_one(job):
    cfg, out, wid = job
    d = cfg["data"]
    series = data.read_raw_csv(out / "raw" / f"{wid}.csv")
    ds, report = data.preprocess(
        series, constants_of(cfg), window=d["window"], threshold=d["threshold"], p_max=d["p_max"],
        q_tol=d["q_tol"], period_days=d["period_days"], lookback=d["lookback"], well_id=wid, split_mode=d["split"])
    report["split"] = ds.counts()
    return wid, ds, report


def cmd_squash(cfg, out: Path, wells: str | None) -> int:
    ids = _pick_wells(_raw_wells(out), wells)
    results = _map(_squash_one, [(cfg, out, w) for w in ids], cfg["run"]["workers"])
    for wid, ds, report in results:
        data.write_samples_csv(_mkparent(out / "samples" / f"{wid}.csv"), ds)
        _write(out / "samples" / f"{wid}.report.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"squashed {len(results)} wells into {out / 'samples'}")
    return EXIT_OK


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sample_wells(out: Path) -> list[str]:
    d = out / "samples"
    if not d.is_dir():
        raise FileNotFoundError(f"no samples under {d}; run squash first")
    return sorted(p.stem for p in d.glob("well_*.csv"))


def _train_one(job):
    cfg, out, kind, wid, seed = job
    ds = data.read_samples_csv(out / "samples" / f"{wid}.csv", wid)
    fit, val = ds.table("fit"), ds.table("val")
    tc = train_config_of(cfg, kind, seed)
    try:
        model = models.build_model(
            kind, fit, constants=constants_of(cfg), priors=priors_of(cfg), cv_curve=cv_curve_of(cfg),
            width=tc.width, depth=tc.depth, seed=seed, fractions=cfg["models"]["fractions"],
            fused=cfg["models"]["fused"])
        model, history = train(model, fit, val, tc)
    except TrainingDiverged as exc:
        return wid, None, None, f"diverged: {exc}"
    except (DomainError, StructuralError) as exc:
        return wid, None, None, f"data error: {exc}"
    return wid, model.to_dict(), history.to_csv(), None


def cmd_train(cfg, out: Path, wells: str | None, kind: str) -> int:
    available = _sample_wells(out)
    ids = _pick_wells(available, wells)
    seeds = dict(zip(available, well_seeds(cfg["run"]["seed"] + 1 + models.KINDS.index(kind), len(available))))
    jobs = [(cfg, out, kind, w, seeds[w]) for w in ids]
    results = _map(_train_one, jobs, cfg["run"]["workers"])
    mdir = out / "models" / kind
    failures = {}
    for wid, artifact, history, err in results:
        if err is not None:
            failures[wid] = err
            log.error("%s %s: %s", kind, wid, err)
            continue
        _write(mdir / f"{wid}.json", json.dumps(artifact, indent=1, sort_keys=True) + "\n")
        _write(mdir / f"{wid}.history.csv", history)
    fail_path = mdir / "failures.json"
    if failures:
        _write(fail_path, json.dumps(failures, indent=1, sort_keys=True) + "\n")
    elif fail_path.exists():
        fail_path.unlink()
    print(f"trained {len(results) - len(failures)}/{len(results)} {kind}-models into {mdir}")
    if any(v.startswith("diverged") for v in failures.values()):
        return EXIT_DIVERGED
    return EXIT_DATA if failures else EXIT_OK


def _eval_one(job):
    out, kind, wid = job
    path = out / "models" / kind / f"{wid}.json"
    if not path.exists():
        return wid, None
    model = models.ModelAssembly.load(path)
    test = data.read_samples_csv(out / "samples" / f"{wid}.csv", wid).table("test")
    return wid, (test["q_o"], models.predict_values(model, test))


def cmd_eval(cfg, out: Path, wells: str | None, kinds) -> int:
    ids = _pick_wells(_sample_wells(out), wells)
    edir = out / "eval"
    rows, missing = [], []
    for kind in kinds:
        results = _map(_eval_one, [(out, kind, w) for w in ids], cfg["run"]["workers"])
        per_well = {w: r for w, r in results if r is not None}
        missing += [f"{kind},{w}" for w, r in results if r is None]
        if not per_well:
            continue
        rep = evaluation.metric_report(kind, "test", per_well)
        for w in sorted(per_well):
            rows.append(f"{kind},{w},test,{rep.rmse[w]!r},{rep.mae[w]!r},{per_well[w][0].size}")
        _write(edir / f"cdp_{kind}.csv", rep.cdp.to_csv())
        for metric in ("rmse", "mae"):
            _write(edir / f"boxplot_{kind}_{metric}.csv", evaluation.boxplot_csv(getattr(rep, metric)))
    if not rows:
        raise FileNotFoundError("no model artifacts found; run train first")
    _write(edir / "metrics.csv", "kind,well,split,rmse,mae,n\n" + "\n".join(rows) + "\n")
    if missing:
        _write(edir / "missing.csv", "kind,well\n" + "\n".join(missing) + "\n")
        log.warning("missing artifacts: %s", ", ".join(missing))
    print(f"wrote evaluation tables to {edir}")
    return EXIT_OK


def _read_metrics(out: Path) -> dict:
    path = out / "eval" / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run eval first")
    table: dict = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        kind, wid, _, r, m, _n = line.split(",")
        table.setdefault(kind, {})[wid] = (float(r), float(m))
    return table


def cmd_report(cfg, out: Path) -> int:
    table = _read_metrics(out)
    lines = ["# Test-set summary", "", "| model | wells | mean RMSE | median RMSE | mean MAE | median MAE | CDP@10% | CDP@20% |",
             "|---|---|---|---|---|---|---|---|"]
    for kind in models.KINDS:
        if kind not in table:
            continue
        r = np.array([v[0] for v in table[kind].values()])
        m = np.array([v[1] for v in table[kind].values()])
        cdp_rows = (out / "eval" / f"cdp_{kind}.csv").read_text(encoding="utf-8").splitlines()[1:]
        pct = {int(a): float(b) for a, b in (row.split(",") for row in cdp_rows)}
        lines.append(f"| {kind} | {r.size} | {r.mean():.3f} | {np.median(r):.3f} | {m.mean():.3f} | "
                     f"{np.median(m):.3f} | {pct[10]:.1f} | {pct[20]:.1f} |")
    lines += ["", "## Per-well test RMSE", "", "| well | " + " | ".join(k for k in models.KINDS if k in table) + " |",
              "|---|" + "---|" * sum(k in table for k in models.KINDS)]
    wells = sorted({w for t in table.values() for w in t})
    for w in wells:
        cells = [f"{table[k][w][0]:.3f}" if w in table[k] else "-" for k in models.KINDS if k in table]
        lines.append(f"| {w} | " + " | ".join(cells) + " |")
    _write(out / "report.md", "\n".join(lines) + "\n")
    print(f"wrote {out / 'report.md'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overriding the built-in defaults")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    common.add_argument("--wells", help="comma-separated well ids or numbers (default: all)")
    p = _Parser(prog="grayvfm", description="Gray-box virtual flow metering pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate synthetic raw well data")
    sub.add_parser("squash", parents=[common], help="steady-state compression, cleaning and splitting")
    t = sub.add_parser("train", parents=[common], help="train one model kind per well")
    t.add_argument("--kind", choices=models.KINDS, required=True)
    e = sub.add_parser("eval", parents=[common], help="test-set metrics, CDP and boxplot tables")
    e.add_argument("--kind", choices=models.KINDS, help="model kind (default: every kind with artifacts)")
    sub.add_parser("report", parents=[common], help="markdown summary of the evaluation tables")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.command == "synth":
            return cmd_synth(cfg, out, args.wells)
        if args.command == "squash":
            return cmd_squash(cfg, out, args.wells)
        if args.command == "train":
            return cmd_train(cfg, out, args.wells, args.kind)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.wells, [args.kind] if args.kind else models.KINDS)
        return cmd_report(cfg, out)
    except ConfigError as exc:
        print(f"grayvfm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StructuralError, DomainError, FileNotFoundError, ValueError) as exc:
        print(f"grayvfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
