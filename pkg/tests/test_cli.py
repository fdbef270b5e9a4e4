import csv
import json

import numpy as np
import pytest

from coupled_nhp import toy_path
from coupled_nhp.cli import SUBCOMMANDS, execute, main, parse_args, resolve_config
from coupled_nhp.evaluation import TABLE2_COLUMNS
from coupled_nhp.trainer import FitConfig

COUNTS = toy_path("toy_counts.csv")
TRENDS = toy_path("toy_trends.csv")


def quick_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"em_iterations": 2}))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_fit_spec_parses():
    spec = parse_args(["fit", "--config", "cfg.json", "--counts", "c.csv", "--trends", "t.csv",
                       "--out", "run/"])
    assert spec.subcommand == "fit" and spec.config_path == "cfg.json"
    assert spec.inputs == {"counts": "c.csv", "trends": "t.csv"}


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        parse_args(["explode", "--out", "x"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_flag_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["fit", "--out", "x", "--counts", "c.csv"])
    assert e.value.code == 2


def test_all_subcommands_registered():
    assert set(SUBCOMMANDS) == {"ingest", "fit", "evaluate", "ablate", "bootstrap", "semisynth",
                                "regime", "stability", "report"}


def test_variant_and_seed_override(tmp_path):
    spec = parse_args(["fit", "--counts", "c", "--trends", "t", "--out", "o", "--seed", "17",
                       "--variant", "no_response_head"])
    cfg = resolve_config(spec)
    base = FitConfig()
    diff = [k for k, v in cfg.to_json().items() if base.to_json()[k] != v]
    assert sorted(diff) == ["enable_head", "seed"] and cfg.seed == 17


def test_runtime_error_exit_1(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("month,component,count\n2014-01,nonsense,3\n")
    code = main(["ingest", "--counts", str(bad), "--trends", TRENDS, "--out", str(tmp_path / "o")])
    assert code == 1
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["error"] == "PanelError"


def test_ingest_and_manifest(tmp_path):
    out = tmp_path / "ing"
    assert main(["ingest", "--counts", COUNTS, "--trends", TRENDS, "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert set(man) >= {"config", "seed", "versions", "inputs", "outputs"}
    assert len(man["inputs"][COUNTS]) == 64
    header, rows = read_csv(out / "response.csv")
    assert header == ["month", "y1"] and len(rows) == 120


def test_fit_writes_model(tmp_path):
    out = tmp_path / "fit"
    code = main(["fit", "--counts", COUNTS, "--trends", TRENDS, "--out", str(out),
                 "--config", quick_config(tmp_path)])
    assert code == 0
    st = json.loads((out / "structure.json").read_text())
    assert st["ir"]["direction"] == "I->R" and st["ri"]["density"] == 0.0
    from coupled_nhp.trainer import CoupledModel
    m = CoupledModel.load(out / "model.json")
    assert m.config.em_iterations == 2


def test_evaluate_deterministic_and_schema(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"ev{k}"
        code = main(["evaluate", "--counts", COUNTS, "--trends", TRENDS, "--out", str(out),
                     "--config", quick_config(tmp_path), "--models", "coupled,ar1,varx",
                     "--resamples", "200"])
        assert code == 0
        outs.append(out)
    header, rows = read_csv(outs[0] / "table2.csv")
    assert tuple(header) == TABLE2_COLUMNS
    assert [r[0] for r in rows] == ["coupled", "ar1", "varx"]
    for name in ("table2.csv", "metrics.csv", "streams.csv", "structure.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m0 = json.loads((outs[0] / "manifest.json").read_text())
    m1 = json.loads((outs[1] / "manifest.json").read_text())
    m0.pop("created"), m1.pop("created")
    assert m0 == m1


def test_unknown_model_is_usage_error(tmp_path):
    code = main(["evaluate", "--counts", COUNTS, "--trends", TRENDS, "--out", str(tmp_path / "x"),
                 "--models", "coupled,oracle"])
    assert code == 2


def test_bootstrap_and_report(tmp_path):
    streams = tmp_path / "s.csv"
    with open(streams, "w") as fh:
        fh.write("label,month,value\n")
        for m in range(12):
            fh.write(f"a/count_pll,{m},{-1 - 0.1 * m}\n")
            fh.write(f"a/resp_rmse,{m},{0.01 * m}\n")
    assert main(["bootstrap", "--streams", str(streams), "--out", str(tmp_path / "b"),
                 "--resamples", "100"]) == 0
    header, rows = read_csv(tmp_path / "b" / "metrics.csv")
    assert header == ["label", "metric", "point", "lo", "hi"] and len(rows) == 2

    t = tmp_path / "t.csv"
    t.write_text(",".join(TABLE2_COLUMNS) + "\n"
                 "x,-30,,,400,,,0.3,,\n"
                 "y,-35,,,500,,,0.2,,\n")
    assert main(["report", "--tables", str(t), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["regret"]["y"]["count_pll"] == 5.0 and rep["regret"]["x"]["resp_rmse"] == pytest.approx(0.1)


def test_semisynth_small(tmp_path, monkeypatch):
    import coupled_nhp.cli as cli
    from coupled_nhp import semisynthetic

    small = semisynthetic.ScenarioConfig(D=4, months=48, n_forward=2)
    monkeypatch.setattr(cli, "run_study",
                        lambda n, scen, cfg, base: semisynthetic.run_study(n, scen, cfg, base, small))
    out = tmp_path / "ss"
    assert main(["semisynth", "--replications", "2", "--out", str(out),
                 "--config", quick_config(tmp_path)]) == 0
    header, rows = read_csv(out / "semisynth.csv")
    assert header == ["replication", "model", "direction", "f1"] and len(rows) == 4
