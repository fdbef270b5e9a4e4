"""Command-line front end.  Every run writes ``manifest.json`` into ``--out``.

Exit codes: 0 success, 1 runtime failure (error JSON on stderr and in
``error.json``), 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import KINDS, fit_baseline
from .evaluation import (
    BASE_SEED, TABLE2_COLUMNS, ablation_delta, block_bootstrap_ci, count_pll, count_rmse,
    evaluate_model, read_streams, regret_table, response_rmse, table2_row, write_metrics,
    write_rows, write_streams,
)
from .gates import structure_json
from .hawkes import counts_to_stream
from .panel import (
    COMPONENTS, SplitConfig, align_origin, apply_response_transform, fit_response_transform,
    load_counts, load_trends, month_index, month_label, write_counts, write_trends,
)
from .regime import SplitCandidate, placebo_rank, write_regime_csv
from .semisynthetic import BASE_SEED as STUDY_SEED, SCENARIOS, run_study
from .trainer import VARIANTS, FitConfig, fit_coupled, make_variant

SUBCOMMANDS = ("ingest", "fit", "evaluate", "ablate", "bootstrap", "semisynth", "regime",
               "stability", "report")
PRIMARY = "coupled"
ABLATION_COLUMNS = ("variant", "count_ll_delta", "count_ll_lo", "count_ll_hi",
                    "count_rmse_delta", "count_rmse_lo", "count_rmse_hi",
                    "resp_rmse_delta", "resp_rmse_lo", "resp_rmse_hi")
STABILITY_METRICS = ("count_pll", "count_rmse", "resp_rmse", "density_ir", "density_ri")
MILESTONES = {"2022-04": "DALL-E 2", "2022-08": "Stable Diffusion",
              "2022-10": "AI Bill of Rights blueprint", "2022-11": "ChatGPT"}
ROLLING_TRAIN, ROLLING_EVAL, ROLLING_STEP, ROLLING_WINDOWS = 84, 12, 6, 4
STABILITY_SEEDS = 5


class UsageError(Exception):
    pass


@dataclass
class CommandSpec:
    subcommand: str
    out: Path
    config_path: str | None = None
    seed: int | None = None
    variant: str | None = None
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)


# ------------------------------------------------------------------ parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coupled-nhp",
                                 description="coupled innovation/response models")
    sub = ap.add_subparsers(dest="subcommand", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def common(p, data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="FitConfig JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--counts", required=True, help="counts CSV (month,component,count)")
            p.add_argument("--trends", required=True, help="trends CSV (month,<terms>)")

    p = sub.add_parser("ingest", help="validate and normalize the input panels")
    common(p)
    p = sub.add_parser("fit", help="fit the coupled model")
    common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p = sub.add_parser("evaluate", help="held-out metrics with bootstrap intervals")
    common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--models", default=",".join((PRIMARY,) + KINDS),
                   help="comma-separated subset of: " + ",".join((PRIMARY,) + KINDS))
    p.add_argument("--resamples", type=int, default=1000)
    p = sub.add_parser("ablate", help="paired deltas for the variant registry")
    common(p)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--resamples", type=int, default=1000)
    p = sub.add_parser("bootstrap", help="intervals for stored score streams")
    p.add_argument("--streams", required=True, help="CSV label,month,value")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resamples", type=int, default=1000)
    p = sub.add_parser("semisynth", help="planted-structure recovery study")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="study base seed")
    p.add_argument("--replications", type=int, default=60)
    p.add_argument("--desk", action="store_true", help="10 replications")
    p.add_argument("--scenario", choices=SCENARIOS, default="one-way")
    p = sub.add_parser("regime", help="split-date scoring with placebo months")
    common(p)
    p.add_argument("--candidates",
                   help="comma-separated YYYY-MM[:kind[:label]]; default: every month of the "
                        "year before the test year, with known milestones marked")
    p = sub.add_parser("stability", help="seed, threshold and rolling-window sweeps")
    common(p)
    p.add_argument("--counts-low", required=True, help="low-threshold counts CSV")
    p = sub.add_parser("report", help="regret table and consolidated JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--tables", nargs="+", required=True, help="table2.csv files")
    return ap


def parse_args(argv) -> CommandSpec:
    """Parse ``argv`` (without the program name).  Usage errors raise SystemExit(2)."""
    ns = _parser().parse_args(argv)
    d = vars(ns).copy()
    spec = CommandSpec(d.pop("subcommand"), Path(d.pop("out")), d.pop("config", None),
                       d.pop("seed", None), d.pop("variant", None))
    for key in ("counts", "trends", "counts_low", "streams", "tables"):
        if key in d:
            spec.inputs[key] = d.pop(key)
    spec.options = d
    return spec


def resolve_config(spec: CommandSpec) -> FitConfig:
    cfg = FitConfig.load(spec.config_path) if spec.config_path else FitConfig()
    if spec.seed is not None:
        cfg = replace(cfg, seed=spec.seed)
    if spec.variant:
        cfg = make_variant(cfg, spec.variant)
    return cfg


# ------------------------------------------------------------------ data


@dataclass
class Prepared:
    counts_panel: object
    trends: object
    counts: np.ndarray
    y: np.ndarray
    stream: object
    split: SplitConfig
    transform: object

    @property
    def fit_stop(self) -> int:
        return self.split.val_end + 1

    @property
    def test_months(self) -> np.ndarray:
        return np.arange(self.split.val_end + 1, self.split.test_end + 1)


def prepare(counts_path, trends_path) -> Prepared:
    cp = load_counts(counts_path)
    tr = load_trends(trends_path)
    align_origin(cp, tr)
    n = len(cp.months)
    split = SplitConfig.default_for(n)
    t = fit_response_transform(tr, (0, split.val_end), 1)
    y = apply_response_transform(t, tr, (0, n - 1)).values
    return Prepared(cp, tr, cp.counts, y, counts_to_stream(cp.counts), split, t)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    return {"coupled_nhp": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -------------------------------------------------------------- subcommands


def _fit_primary(cfg, d: Prepared):
    return fit_coupled(cfg, d.stream, d.y, d.fit_stop, counts=d.counts)


def _structure(model) -> dict:
    names = list(COMPONENTS)
    latents = [f"z{k + 1}" for k in range(model.config.K)]
    out = {}
    if model.gate_ir is not None:
        out["ir"] = structure_json(model.gate_ir, model.config.threshold, names, latents)
    else:
        out["ir"] = {"direction": "I->R", "edges": [], "density": 0.0}
    if model.gate_ri is not None:
        out["ri"] = structure_json(model.gate_ri, model.config.threshold, latents, names)
    else:
        out["ri"] = {"direction": "R->I", "edges": [], "density": 0.0}
    return out


def cmd_ingest(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    write_counts(d.counts_panel, spec.out / "counts.csv")
    write_trends(d.trends, spec.out / "trends.csv")
    d.transform.save(spec.out / "response_transform.json")
    with open(spec.out / "response.csv", "w") as fh:
        fh.write("month,y1\n")
        for m, v in enumerate(d.y[:, 0]):
            fh.write(f"{month_label(d.counts_panel.origin, m)},{v:.9f}\n")
    _write_json(spec.out / "split.json", {"train_end": d.split.train_end, "val_end": d.split.val_end,
                                          "test_end": d.split.test_end})
    outputs += ["counts.csv", "trends.csv", "response_transform.json", "response.csv", "split.json"]


def cmd_fit(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    model = _fit_primary(cfg, d)
    model.save(spec.out / "model.json")
    _write_json(spec.out / "structure.json", _structure(model))
    with open(spec.out / "objective_trace.csv", "w") as fh:
        fh.write("iteration,objective\n")
        for i, v in enumerate(model.objective_trace):
            fh.write(f"{i},{v:.9f}\n")
    outputs += ["model.json", "structure.json", "objective_trace.csv"]


def _score_all(models: dict, d: Prepared, base_seed: int, B: int):
    rows, cis_by_label, streams = [], {}, []
    for name, model in models.items():
        st, cis = evaluate_model(name, model, d.stream, d.y, d.counts, d.test_months, base_seed, B)
        rows.append(table2_row(name, cis))
        streams += list(st.values())
        for metric, ci in cis.items():
            cis_by_label[(name, metric)] = ci
    return rows, cis_by_label, streams


def cmd_evaluate(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    names = [m.strip() for m in spec.options["models"].split(",") if m.strip()]
    unknown = [m for m in names if m not in (PRIMARY,) + KINDS]
    if unknown:
        raise UsageError(f"unknown models: {unknown}")
    models = {}
    for name in names:
        if name == PRIMARY:
            models[name] = _fit_primary(cfg, d)
        else:
            models[name] = fit_baseline(name, d.stream, d.y, d.fit_stop, cfg, counts=d.counts)
    rows, cis, streams = _score_all(models, d, cfg.seed if spec.seed is not None else BASE_SEED,
                                    spec.options["resamples"])
    write_rows(spec.out / "table2.csv", TABLE2_COLUMNS, rows)
    write_metrics(spec.out / "metrics.csv", cis)
    write_streams(spec.out / "streams.csv", streams)
    if PRIMARY in models:
        _write_json(spec.out / "structure.json", _structure(models[PRIMARY]))
        outputs.append("structure.json")
    outputs += ["table2.csv", "metrics.csv", "streams.csv"]


def _streams_for(model, name, d: Prepared):
    m = d.test_months
    return {"count_pll": count_pll(model, d.stream, d.y, d.counts, m, f"{name}/count_pll"),
            "count_rmse": count_rmse(model, d.stream, d.y, d.counts, m, f"{name}/count_rmse"),
            "resp_rmse": response_rmse(model, d.y, d.counts, m, f"{name}/resp_rmse")}


def cmd_ablate(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    names = [v.strip() for v in spec.options["variants"].split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {unknown}")
    B = spec.options["resamples"]
    base_seed = cfg.seed if spec.seed is not None else BASE_SEED
    primary = _streams_for(_fit_primary(cfg, d), PRIMARY, d)
    rows, metric_rows, all_streams = [], [], list(primary.values())
    metric_rows.append(table2_row(PRIMARY, {k: block_bootstrap_ci(s, B=B, base_seed=base_seed)
                                            for k, s in primary.items()}))
    for v in names:
        model = fit_coupled(make_variant(cfg, v), d.stream, d.y, d.fit_stop, counts=d.counts)
        vs = _streams_for(model, v, d)
        all_streams += list(vs.values())
        row = {"variant": v}
        for metric, key in (("count_pll", "count_ll"), ("count_rmse", "count_rmse"),
                            ("resp_rmse", "resp_rmse")):
            ci = ablation_delta(primary[metric], vs[metric], metric, base_seed, B,
                                label=f"delta/{v}/{metric}")
            row[f"{key}_delta"] = ci.point
            row[f"{key}_lo"] = ci.lo
            row[f"{key}_hi"] = ci.hi
        rows.append(row)
        metric_rows.append(table2_row(v, {k: block_bootstrap_ci(s, B=B, base_seed=base_seed)
                                          for k, s in vs.items()}))
    write_rows(spec.out / "ablation.csv", ABLATION_COLUMNS, rows)
    write_rows(spec.out / "ablation_metrics.csv", TABLE2_COLUMNS, metric_rows)
    write_streams(spec.out / "streams.csv", all_streams)
    outputs += ["ablation.csv", "ablation_metrics.csv", "streams.csv"]


def cmd_bootstrap(spec, cfg, outputs):
    base_seed = spec.seed if spec.seed is not None else BASE_SEED
    cis = {}
    for s in read_streams(spec.inputs["streams"]):
        cis[(s.label, "rmse" if s.reduction == "rms" else "sum")] = block_bootstrap_ci(
            s, B=spec.options["resamples"], base_seed=base_seed)
    write_metrics(spec.out / "metrics.csv", cis)
    outputs.append("metrics.csv")


def cmd_semisynth(spec, cfg, outputs):
    n = 10 if spec.options["desk"] else spec.options["replications"]
    base = spec.seed if spec.seed is not None else STUDY_SEED
    res = run_study(n, spec.options["scenario"], cfg, base)
    res.to_csv(spec.out / "semisynth.csv")
    res.save_summary(spec.out / "semisynth_summary.json")
    outputs += ["semisynth.csv", "semisynth_summary.json"]


def default_candidates(d: Prepared) -> list[SplitCandidate]:
    origin = d.counts_panel.origin
    out = []
    for m in range(d.split.train_end + 1, d.split.val_end + 1):
        lab = month_label(origin, m)
        kind = "milestone" if lab in MILESTONES else "placebo"
        out.append(SplitCandidate(m, kind, MILESTONES.get(lab, lab)))
    return out


def parse_candidates(text: str, origin: str) -> list[SplitCandidate]:
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if not parts[0]:
            continue
        m = month_index(origin, parts[0])
        kind = parts[1] if len(parts) > 1 else "placebo"
        label = parts[2] if len(parts) > 2 else parts[0]
        out.append(SplitCandidate(m, kind, label))
    if not out:
        raise UsageError("no candidates given")
    return out


def cmd_regime(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    cands = (parse_candidates(spec.options["candidates"], d.counts_panel.origin)
             if spec.options.get("candidates") else default_candidates(d))
    rows, groups = placebo_rank(cands, d.stream, d.y, d.counts, cfg)
    for r in rows:
        r["month"] = month_label(d.counts_panel.origin, r["month"])
    write_regime_csv(spec.out / "regime.csv", rows)
    _write_json(spec.out / "regime_summary.json",
                {"groups": groups, "labels": {r["month"]: r["label"] for r in rows}})
    outputs += ["regime.csv", "regime_summary.json"]


def _stability_row(model, d: Prepared, months, key, value) -> dict:
    st = model.structure()
    m = np.asarray(months)
    return {key: value,
            "count_pll": count_pll(model, d.stream, d.y, d.counts, m).aggregate,
            "count_rmse": count_rmse(model, d.stream, d.y, d.counts, m).aggregate,
            "resp_rmse": response_rmse(model, d.y, d.counts, m).aggregate,
            "density_ir": st["ir"][1], "density_ri": st["ri"][1]}


def cmd_stability(spec, cfg, outputs):
    d = prepare(spec.inputs["counts"], spec.inputs["trends"])
    seed_rows = []
    for k in range(STABILITY_SEEDS):
        seed = cfg.seed + k
        model = _fit_primary(replace(cfg, seed=seed), d)
        seed_rows.append(_stability_row(model, d, d.test_months, "seed", seed))
    write_rows(spec.out / "stability_seeds.csv", ("seed",) + STABILITY_METRICS, seed_rows)

    thr_rows = []
    for label, path in (("balanced", spec.inputs["counts"]), ("low", spec.inputs["counts_low"])):
        dd = prepare(path, spec.inputs["trends"])
        model = _fit_primary(cfg, dd)
        thr_rows.append(_stability_row(model, dd, dd.test_months, "threshold", label))
    write_rows(spec.out / "stability_thresholds.csv", ("threshold",) + STABILITY_METRICS, thr_rows)

    win_rows = []
    n = len(d.counts)
    origin = d.counts_panel.origin
    for w in range(ROLLING_WINDOWS):
        start = w * ROLLING_STEP
        stop = start + ROLLING_TRAIN
        if stop + ROLLING_EVAL > n:
            break
        # response transform refit on each window's own training months
        t = fit_response_transform(d.trends, (start, stop - 1), 1)
        yw = apply_response_transform(t, d.trends, (start, stop + ROLLING_EVAL - 1)).values
        cw = d.counts[start:stop + ROLLING_EVAL]
        dw = Prepared(d.counts_panel, d.trends, cw, yw, counts_to_stream(cw),
                      SplitConfig(ROLLING_TRAIN - 2, ROLLING_TRAIN - 1,
                                  ROLLING_TRAIN + ROLLING_EVAL - 1), t)
        model = fit_coupled(cfg, dw.stream, yw, ROLLING_TRAIN, counts=cw)
        label = f"{month_label(origin, start)}..{month_label(origin, stop + ROLLING_EVAL - 1)}"
        row = _stability_row(model, dw, dw.test_months, "window", label)
        row.update({"train_start": month_label(origin, start),
                    "eval_start": month_label(origin, stop)})
        win_rows.append(row)
    write_rows(spec.out / "stability_windows.csv",
               ("window", "train_start", "eval_start") + STABILITY_METRICS, win_rows)
    outputs += ["stability_seeds.csv", "stability_thresholds.csv", "stability_windows.csv"]


def cmd_report(spec, cfg, outputs):
    import csv
    results = {}
    for path in spec.inputs["tables"]:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                results[r["model"]] = {m: (float(r[m]) if r.get(m) not in (None, "") else None)
                                       for m in ("count_pll", "count_rmse", "resp_rmse")}
    regret = regret_table(results)
    rows = [{"model": k, **v} for k, v in regret.items()]
    write_rows(spec.out / "regret.csv", ("model", "count_pll", "count_rmse", "resp_rmse"), rows)
    _write_json(spec.out / "report.json", {"metrics": results, "regret": regret})
    outputs += ["regret.csv", "report.json"]


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "bootstrap": cmd_bootstrap, "semisynth": cmd_semisynth, "regime": cmd_regime,
            "stability": cmd_stability, "report": cmd_report}


def execute(spec: CommandSpec) -> int:
    spec.out.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    try:
        cfg = resolve_config(spec)
        COMMANDS[spec.subcommand](spec, cfg, outputs)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - reported as machine-readable JSON
        err = {"error": type(e).__name__, "message": str(e),
               "traceback": traceback.format_exc().splitlines()[-5:]}
        _write_json(spec.out / "error.json", err)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    inputs = {}
    for key, val in spec.inputs.items():
        for p in ([val] if isinstance(val, str) else val):
            inputs[str(p)] = _sha256(p)
    _write_json(spec.out / "manifest.json", {
        "subcommand": spec.subcommand, "config": cfg.to_json(), "seed": cfg.seed,
        "base_seed": BASE_SEED, "variant": spec.variant, "options": spec.options,
        "inputs": inputs, "outputs": sorted(outputs), "versions": _versions(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())})
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    spec = parse_args(argv)
    return execute(spec)


if __name__ == "__main__":
    sys.exit(main())
