import csv
import warnings

import numpy as np
import pytest

from helpers import tiny_config
from paramxfer.config import PRESETS, config_from_dict, config_hash, emit_config, parse_config, parse_configs, preset
from paramxfer.engine import RecordParseError, RunRecord, write_records_csv
from paramxfer.harness import (
    CURVE_COLUMNS,
    METRICS,
    ReportRow,
    aggregate,
    curve_rows,
    curves,
    emit_curves,
    output_root,
    read_table_csv,
    report,
    run_experiment,
    sweep,
)
from paramxfer.zoo import ConfigError

MINIMAL = """
models: {l: {kind: mlp_large}, s: {kind: mlp_small}}
datasets: {l: {}, s: {}}
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.total_steps == 1000 and cfg.seed == 0 and cfg.eval_every == 0
    assert cfg.plan.t_cycle == 4 and cfg.plan.directions == "both"
    assert cfg.plan.pairs == [["head", "head"]] and cfg.plan.freq_ratio == {"l": 1, "s": 1}
    assert cfg.adapter.kind == "lpka_full" and cfg.adapter.r == 8 and cfg.adapter.d == 16
    assert cfg.datasets["s"].source == "synthetic"


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match=r"plan\.t_cylce: unknown key"):
        parse_config(MINIMAL + "plan: {t_cylce: 3}\n")


def test_type_mismatch_is_rejected():
    with pytest.raises(ConfigError, match="total_steps"):
        parse_config(MINIMAL + "total_steps: '10'\n")
    with pytest.raises(ConfigError, match="adapter.kind"):
        parse_config(MINIMAL + "adapter: {kind: transformer}\n")
    with pytest.raises(ConfigError):
        parse_config("- not\n- a mapping\n")
    with pytest.raises(ConfigError, match="YAML"):
        parse_config("models: [unclosed\n")


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="kd"):
        config_from_dict(tiny_config(adapter={"kind": "kd"}, datasets={"l": {"classes": 5}, "s": {"classes": 4}}))
    with pytest.raises(ConfigError, match="frozen_source"):
        config_from_dict(tiny_config(plan={"frozen_source": True, "directions": "both"}))
    with pytest.raises(ConfigError, match="shape"):
        config_from_dict(tiny_config(models={"l": {"kind": "cnn_small"}, "s": {"kind": "mlp_small"}}))
    only_s = tiny_config()
    del only_s["models"]["l"]
    with pytest.raises(ConfigError, match="roles"):
        config_from_dict(only_s)
    with pytest.raises(ConfigError, match="path"):
        config_from_dict(tiny_config(datasets={"l": {"source": "cifar10"}, "s": {}}))


def test_emit_parse_roundtrip_and_hash():
    for name in PRESETS:
        for cfg in preset(name):
            assert parse_config(emit_config(cfg)) == cfg
    cfg = config_from_dict(tiny_config())
    assert config_hash(cfg) == config_hash(parse_config(emit_config(cfg)))
    assert config_hash(cfg) == config_hash(cfg.model_copy(update={"seed": 9, "output_dir": "/x"}))
    assert config_hash(cfg) != config_hash(config_from_dict(tiny_config(plan={"t_cycle": 8})))


def test_parse_configs_accepts_lists():
    assert len(parse_configs(f"- {{name: a, {MINIMAL.strip().replace(chr(10), ', ')}}}\n")) == 1
    with pytest.raises(ConfigError, match="empty"):
        parse_configs("[]")
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("nope")


def test_presets_have_expected_variants():
    names = {k: [c.name for c in preset(k)] for k in PRESETS}
    assert names["tcycle_sweep"] == [f"tcycle_{t}" for t in (1, 2, 4, 8, 16)]
    assert names["ablation_table7"] == ["mlp", "lpka_row_only", "lpka_avg", "lpka_full"]
    assert names["baselines"] == ["copy_share", "kd", "none"]
    assert all(c.self_transfer for c in preset("self_transfer"))


# ---------------------------------------------------------------------------


def test_run_directory_layout(tmp_path):
    res = run_experiment(config_from_dict(tiny_config()), tmp_path)
    files = {p.name for p in res.run_dir.iterdir()}
    assert files == {
        "config.yaml", "records.csv", "report.csv", "normalization.json", "timing.json",
        "model_l.ckpt", "model_s.ckpt", "adapters_pair0.ckpt",
    }
    assert res.run_dir.parent.name.startswith("tiny-") and res.run_dir.name == "seed0"
    assert res.row.status == "ok" and 0.0 <= res.row.metrics["s_final_top1"] <= 1.0
    assert res.row.metrics["s_best_top1"] >= res.row.metrics["s_final_top1"]


def test_rerun_is_bit_identical(tmp_path):
    cfg = config_from_dict(tiny_config(plan={"directions": "both"}))
    a = run_experiment(cfg, tmp_path / "a").run_dir
    b = run_experiment(cfg, tmp_path / "b").run_dir
    for name in ("records.csv", "report.csv", "model_s.ckpt", "model_l.ckpt", "adapters_pair0.ckpt", "config.yaml"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_changes_the_run(tmp_path):
    a = run_experiment(config_from_dict(tiny_config(seed=0)), tmp_path).run_dir
    b = run_experiment(config_from_dict(tiny_config(seed=1)), tmp_path).run_dir
    assert a.parent == b.parent
    assert (a / "records.csv").read_bytes() != (b / "records.csv").read_bytes()


def _losses(records):
    return [(r.step, r.model_id, r.loss, r.top1, r.top5) for r in records]


def test_transfer_that_never_fires_equals_vanilla(tmp_path):
    vanilla = run_experiment(config_from_dict(tiny_config(adapter={"kind": "none"})), tmp_path)
    idle = run_experiment(config_from_dict(tiny_config(plan={"t_cycle": 100})), tmp_path)
    assert _losses(vanilla.records) == _losses(idle.records)
    for mid in ("l", "s"):
        assert (vanilla.run_dir / f"model_{mid}.ckpt").read_bytes() == (idle.run_dir / f"model_{mid}.ckpt").read_bytes()


def test_frozen_source_checkpoint_unchanged(tmp_path):
    cfg = config_from_dict(tiny_config(plan={"frozen_source": True, "pretrain_steps": 5}))
    res = run_experiment(cfg, tmp_path)
    assert res.source_before == res.source_after
    assert (res.run_dir / "source_before.ckpt").read_bytes() == (res.run_dir / "model_l.ckpt").read_bytes()
    assert res.row.note == ""
    assert not any(r.model_id == "l" for r in res.records)
    assert res.row.metrics["l_final_top1"] == res.row.metrics["l_best_top1"] is not None


def test_self_transfer_runs(tmp_path):
    cfg = tiny_config(plan={"pairs": [["head", "fc2"]]})
    cfg["models"] = {"l": {"kind": "mlp_small"}}
    del cfg["datasets"]["s"]
    res = run_experiment(config_from_dict(cfg), tmp_path)
    assert res.row.status == "ok"
    assert res.row.metrics["s_final_top1"] is None and res.row.metrics["l_final_top1"] is not None
    assert any(r.phase == "transfer" for r in res.records)


@pytest.mark.parametrize("kind", ["mlp", "lpka_row_only", "lpka_avg", "copy_share", "kd"])
def test_every_adapter_kind_runs(kind, tmp_path):
    res = run_experiment(config_from_dict(tiny_config(adapter={"kind": kind})), tmp_path)
    assert res.row.status == "ok"
    has_adapter = kind not in ("copy_share", "kd")
    assert (res.run_dir / "adapters_pair0.ckpt").exists() == has_adapter


def test_cross_structure_pair_runs(tmp_path):
    cfg = tiny_config(
        models={"s": {"kind": "cnn_small"}},
        datasets={"s": {"dim": 48, "shape": [3, 4, 4]}},
        plan={"pairs": [["head", "conv2"]], "directions": "both"},
    )
    res = run_experiment(config_from_dict(cfg), tmp_path)
    assert res.row.status == "ok"
    assert {r.phase for r in res.records if r.model_id == "l"} == {"self", "transfer"}


def test_sweep_table_with_aggregate(tmp_path):
    result = sweep([config_from_dict(tiny_config())], [0, 1, 2], tmp_path)
    table = read_table_csv(tmp_path / "table.csv")
    assert [r.seed for r in table] == [0, 1, 2, "aggregate"]
    agg = table[-1]
    assert agg.n == 3 and agg.status == "ok"
    for m in METRICS:
        vals = np.array([r.metrics[m] for r in table[:3]])
        assert agg.metrics[m] == pytest.approx(vals.mean(), abs=1e-15)
        assert agg.std[m] == pytest.approx(vals.std(ddof=1), abs=1e-15)
    assert not result.failed
    with open(tmp_path / "table_timing.csv") as fh:
        assert len(list(csv.reader(fh))) == 4
    # collecting the same directories again reproduces the table
    report(tmp_path)
    assert read_table_csv(tmp_path / "table.csv") == table


def test_failed_run_is_reported_and_excluded(tmp_path):
    bad = config_from_dict(tiny_config(lr={"s": 1e6}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run = run_experiment(bad, tmp_path)
    assert run.row.status == "failed" and "non-finite" in run.row.note
    assert (run.run_dir / "records.csv").exists()
    assert all(v is None for v in run.row.metrics.values())

    rows = [ReportRow("h", "v", s, "ok", {m: float(s) for m in METRICS}) for s in (1, 2)]
    rows.append(ReportRow("h", "v", 3, "failed", {m: None for m in METRICS}))
    agg = aggregate(rows)
    assert agg.status == "partial" and agg.n == 2 and "1 failed" in agg.note
    assert agg.metrics["s_final_top1"] == 1.5
    assert agg.std["s_final_top1"] == pytest.approx(np.std([1.0, 2.0], ddof=1))
    single = aggregate(rows[:1])
    assert single.std["s_final_top1"] == 0.0
    assert aggregate(rows[2:]).status == "failed"


def test_output_root_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv("PARAMXFER_OUTPUT_ROOT", raising=False)
    assert str(output_root()) == "runs"
    monkeypatch.setenv("PARAMXFER_OUTPUT_ROOT", str(tmp_path))
    assert output_root() == tmp_path
    assert str(output_root("explicit")) == "explicit"


# ---------------------------------------------------------------------------


def test_curve_rows_format():
    records = [
        RunRecord(1, "self", "s", 2.0),
        RunRecord(4, "transfer", "s", 1.5, 0.5, 0.75, (0.1, 0.2, 0.3, 0.4)),
    ]
    rows = curve_rows(records, "lpka_full", 3)
    assert rows[0] == ["lpka_full", 3, 1, "s.loss", "2.0"]
    names = [r[3] for r in rows if r[2] == 4]
    assert names == ["s.loss", "s.top1", "s.top5", "s.omega_1", "s.omega_2", "s.omega_3", "s.omega_4"]
    assert rows[-1][4] == "0.4"


def test_emit_curves_merges_variants(tmp_path):
    for name in ("a", "b"):
        write_records_csv(tmp_path / f"{name}.csv", [RunRecord(1, "self", "s", 1.0, 0.5, 0.9)])
    text = emit_curves([("a", 0, tmp_path / "a.csv"), ("b", 0, tmp_path / "b.csv")])
    lines = text.splitlines()
    assert lines[0] == ",".join(CURVE_COLUMNS)
    assert {line.split(",")[0] for line in lines[1:]} == {"a", "b"}
    assert len(lines) == 1 + 2 * 3


def test_emit_curves_reports_bad_line(tmp_path):
    path = tmp_path / "r.csv"
    write_records_csv(path, [RunRecord(1, "self", "s", 1.0)] * 2)
    path.write_text(path.read_text().replace("1,self,s,1.0", "1,self,s", 1))
    with pytest.raises(RecordParseError, match=":2:"):
        emit_curves([("a", 0, path)])


def test_curves_from_run_directories(tmp_path):
    sweep([config_from_dict(tiny_config())], [0, 1], tmp_path)
    path = curves(tmp_path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert any(r["metric"] == "s.omega_1" for r in rows)
    assert {r["metric"].split(".")[0] for r in rows} == {"l", "s"}
    with pytest.raises(FileNotFoundError):
        curves(tmp_path / "empty")
