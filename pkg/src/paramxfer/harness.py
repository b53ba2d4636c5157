"""Config-driven runs, multi-seed sweeps and plot-ready CSV output.

A run directory holds everything needed to audit or repeat a run:

``config.yaml``         the fully resolved config
``records.csv``         per-step records (bit-identical on rerun)
``report.csv``          the single report row, without wall time
``normalization.json``  per-feature train statistics for each model
``timing.json``         wall time, kept apart so the CSVs stay deterministic
``model_<id>.ckpt``     final model parameters, adapters stripped
``adapters_pair<k>.ckpt`` adapter parameters per transfer pair
``source_before.ckpt``  frozen-source runs only: the source at the start
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import build_stack
from .codec import dump_checkpoint, save_checkpoint
from .config import DatasetSpec, ExperimentConfig, config_from_dict, config_hash, emit_config, parse_config
from .data import DataStream, Dataset, Standardizer, SyntheticTask, gen_synthetic, load_cifar_binary
from .engine import (
    Evaluator,
    InferenceBundle,
    KDSetup,
    Member,
    NonFiniteLoss,
    RunRecord,
    TransferPair,
    TransferPlan,
    read_records_csv,
    run_training,
    self_learning_step,
    strip_adapter,
    train_vanilla,
    write_records_csv,
)
from .zoo import build_model, evaluate, factorize_slot

OUTPUT_ENV = "PARAMXFER_OUTPUT_ROOT"
METRICS = [f"{role}_{which}_{k}" for role in ("l", "s") for which in ("final", "best") for k in ("top1", "top5")]
TABLE_COLUMNS = ["config_hash", "variant", "seed", "status", "n", *METRICS, *(f"{m}_std" for m in METRICS), "note"]
CURVE_COLUMNS = ["variant", "seed", "step", "metric", "value"]


@dataclass
class ReportRow:
    config_hash: str
    variant: str
    seed: int | str
    status: str  # ok, failed; aggregates also use partial
    metrics: dict[str, float | None] = field(default_factory=dict)
    wall_time: float | None = None
    n: int | None = None
    std: dict[str, float | None] = field(default_factory=dict)
    note: str = ""


@dataclass
class RunResult:
    row: ReportRow
    records: list[RunRecord]
    run_dir: Path
    bundle: InferenceBundle | None = None
    source_before: bytes | None = None
    source_after: bytes | None = None


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or "runs")


def run_dir_for(cfg: ExperimentConfig, root: str | os.PathLike | None = None) -> Path:
    base = Path(cfg.output_dir) if cfg.output_dir else output_root(root)
    return base / f"{cfg.name}-{config_hash(cfg)}" / f"seed{cfg.seed}"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def _child_seeds(seed: int) -> dict[str, int]:
    names = ("data_l", "data_s", "init_l", "init_s", "stream_l", "stream_s", "adapter")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def load_dataset(spec: DatasetSpec, sample_seed: int) -> tuple[Dataset, Dataset]:
    if spec.source == "synthetic":
        task = SyntheticTask(
            classes=spec.classes, dim=spec.dim, train_size=spec.train_size, test_size=spec.test_size,
            separation=spec.separation, components=spec.components, noise=spec.noise,
            informative_dims=spec.informative_dims, task_seed=spec.task_seed, sample_seed=sample_seed,
        )
        train, test = gen_synthetic(task)
        if spec.shape:
            for ds in (train, test):
                ds.x = ds.x.reshape(len(ds), *spec.shape)
        return train, test
    return (
        load_cifar_binary(spec.path, spec.source, spec.limit),
        load_cifar_binary(spec.test_path, spec.source, spec.test_limit),
    )


def _final_and_best(records: list[RunRecord], role: str) -> dict[str, float | None]:
    evals = [r for r in records if r.model_id == role and r.top1 is not None]
    if not evals:
        return {f"{role}_{w}_{k}": None for w in ("final", "best") for k in ("top1", "top5")}
    return {
        f"{role}_final_top1": evals[-1].top1,
        f"{role}_final_top5": evals[-1].top5,
        f"{role}_best_top1": max(r.top1 for r in evals),
        f"{role}_best_top5": max(r.top5 for r in evals),
    }


def _pretrain(member: Member, steps: int) -> None:
    for t in range(1, steps + 1):
        self_learning_step(member.model, member.stream.next(), member.lr, None, t, member.model_id)


def run_experiment(cfg: ExperimentConfig, root: str | os.PathLike | None = None) -> RunResult:
    """Train per ``cfg``, write the run directory and return the report row."""
    started = time.perf_counter()
    run_dir = run_dir_for(cfg, root)
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.yaml", emit_config(cfg))
    seeds = _child_seeds(cfg.seed)
    roles = sorted(cfg.models)

    # data, standardized with train statistics
    splits, norms = {}, {}
    for role in roles:
        train, test = load_dataset(cfg.datasets[role], seeds[f"data_{role}"])
        st = Standardizer.fit(train.x)
        train.x, test.x = st(train.x), st(test.x)
        splits[role], norms[role] = (train, test), st.to_dict()
    _atomic_write(run_dir / "normalization.json", json.dumps(norms))

    # models; pair slots are factorized for every adapter kind so all variants share one architecture
    pairs = [TransferPair(a, b) for a, b in cfg.plan.pairs]
    frozen = cfg.plan.frozen_source
    slots = {"l": [p.l_slot for p in pairs], "s": [p.s_slot for p in pairs]}
    if cfg.self_transfer:
        slots = {"l": slots["l"] + [s for s in slots["s"] if s not in slots["l"]]}
    members = {}
    for role in roles:
        ds = cfg.datasets[role]
        model = build_model(
            cfg.models[role].kind, ds.classes, ds.input_shape, cfg.adapter.r,
            [] if (frozen and role == "l") else slots[role], seed=seeds[f"init_{role}"],
        )
        stream = DataStream(splits[role][0], cfg.batch_size, seeds[f"stream_{role}"])
        members[role] = Member(role, model, stream, getattr(cfg.lr, role))
    if cfg.self_transfer:
        members["s"] = members["l"]

    source_before = None
    if frozen:
        _pretrain(members["l"], cfg.plan.pretrain_steps)
        for name in slots["l"]:
            factorize_slot(members["l"].model, name, cfg.adapter.r, iters=200, seed=seeds["init_l"])
        members["l"].frozen = True
        source_before = dump_checkpoint(members["l"].model.checkpoint_entries())
        with open(run_dir / "source_before.ckpt", "wb") as fh:
            fh.write(source_before)

    kind = cfg.adapter.kind
    plan = TransferPlan(
        pairs=pairs if cfg.transfers else [],
        directions=cfg.plan.directions,
        t_cycle=cfg.plan.t_cycle,
        freq_ratio=dict(cfg.plan.freq_ratio),
        frozen_source=frozen,
        eta_adapter=cfg.lr.adapter,
        literal_t0=cfg.plan.literal_t0,
        mechanism="copy_share" if kind == "copy_share" else "adapter",
    )
    stacks = None
    if cfg.transfers and kind != "copy_share":
        rng = np.random.default_rng(seeds["adapter"])
        stacks = [
            build_stack(
                kind, cfg.adapter.r,
                members["l"].model.factor(p.l_slot).cols, members["s"].model.factor(p.s_slot).cols,
                cfg.plan.directions, cfg.adapter.layers, cfg.adapter.d,
                cfg.adapter.omega_trainable, cfg.plan.residual, rng,
            )
            for p in pairs
        ]
    evaluator = Evaluator({m.model_id: (splits[m.model_id][1].x, splits[m.model_id][1].y) for m in members.values()}, cfg.eval_every)
    kd = KDSetup(temperature=cfg.kd.temperature, alpha=cfg.kd.alpha) if kind == "kd" else None

    status, note = "ok", ""
    try:
        if kind == "none":
            records = train_vanilla(members, cfg.total_steps, evaluator)
        else:
            records = run_training(plan, members, stacks, cfg.total_steps, evaluator, kd)
    except NonFiniteLoss as exc:
        records, status, note = exc.records, "failed", str(exc)
    write_records_csv(run_dir / "records.csv", records)

    bundle = source_after = None
    metrics: dict[str, float | None] = {}
    if status == "ok":
        for role in ("l", "s"):
            metrics |= _final_and_best(records, role)
        if frozen:
            # the source never steps, so one evaluation covers final and best
            top1, top5 = evaluate(members["l"].model, *evaluator.test_sets["l"])
            metrics |= {"l_final_top1": top1, "l_best_top1": top1, "l_final_top5": top5, "l_best_top5": top5}
        bundle = strip_adapter(members)
        for mid, model in bundle.models.items():
            save_checkpoint(run_dir / f"model_{mid}.ckpt", model.checkpoint_entries())
        for k, stack in enumerate(stacks or []):
            save_checkpoint(run_dir / f"adapters_pair{k}.ckpt", stack.checkpoint_entries())
        if frozen:
            source_after = dump_checkpoint(members["l"].model.checkpoint_entries())
            if source_after != source_before:
                note = "source checkpoint changed"
    else:
        metrics = {m: None for m in METRICS}

    row = ReportRow(config_hash(cfg), cfg.name, cfg.seed, status, metrics, note=note)
    _atomic_write(run_dir / "report.csv", table_to_csv([row]))
    row.wall_time = time.perf_counter() - started
    _atomic_write(run_dir / "timing.json", json.dumps({"wall_time": row.wall_time}))
    return RunResult(row, records, run_dir, bundle, source_before, source_after)


# ---------------------------------------------------------------------------
# tables


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow(
            [r.config_hash, r.variant, r.seed, r.status, _cell(r.n)]
            + [_cell(r.metrics.get(m)) for m in METRICS]
            + [_cell(r.std.get(m)) for m in METRICS]
            + [r.note]
        )
    return buf.getvalue()


def read_table_csv(path: str | os.PathLike) -> list[ReportRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for d in rows:
        seed = int(d["seed"]) if d["seed"].lstrip("-").isdigit() else d["seed"]
        num = lambda v: float(v) if v else None  # noqa: E731
        out.append(
            ReportRow(
                d["config_hash"], d["variant"], seed, d["status"],
                {m: num(d[m]) for m in METRICS}, None, int(d["n"]) if d["n"] else None,
                {m: num(d[f"{m}_std"]) for m in METRICS}, d["note"],
            )
        )
    return out


def aggregate(rows: list[ReportRow]) -> ReportRow:
    """Mean and standard deviation over the surviving runs of one config."""
    ok = [r for r in rows if r.status == "ok"]
    n = len(ok)
    status = "ok" if n == len(rows) else ("partial" if n else "failed")
    mean, std = {}, {}
    for m in METRICS:
        vals = [r.metrics.get(m) for r in ok]
        if not vals or any(v is None for v in vals):
            mean[m] = std[m] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        mean[m] = float(arr.mean())
        std[m] = float(arr.std(ddof=1)) if n > 1 else 0.0
    failed = len(rows) - n
    note = f"{failed} failed run(s) excluded" if failed else ""
    return ReportRow(rows[0].config_hash, rows[0].variant, "aggregate", status, mean, None, n, std, note)


def build_table(rows: list[ReportRow]) -> list[ReportRow]:
    """Run rows grouped by config in first-seen order, each group followed by its aggregate."""
    groups: dict[tuple[str, str], list[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.config_hash, r.variant), []).append(r)
    out = []
    for group in groups.values():
        out += group
        out.append(aggregate(group))
    return out


@dataclass
class SweepResult:
    rows: list[ReportRow]
    table: list[ReportRow]
    results: list[RunResult]

    @property
    def failed(self) -> bool:
        return any(r.status != "ok" for r in self.rows)


def _run_payload(payload: tuple[dict, str | None]) -> RunResult:
    data, root = payload
    res = run_experiment(config_from_dict(data), root)
    res.bundle = None  # keep the cross-process payload small
    return res


def sweep(
    configs: list[ExperimentConfig],
    seeds: list[int],
    root: str | os.PathLike | None = None,
    workers: int = 1,
    table_path: str | os.PathLike | None = None,
) -> SweepResult:
    """Run every config under every seed; write ``table.csv`` with aggregates."""
    if not configs or not seeds:
        raise ValueError("a sweep needs at least one config and one seed")
    jobs = [cfg.model_copy(update={"seed": s}) for cfg in configs for s in seeds]
    return run_jobs(jobs, root, workers, table_path)


def run_jobs(
    jobs: list[ExperimentConfig],
    root: str | os.PathLike | None = None,
    workers: int = 1,
    table_path: str | os.PathLike | None = None,
) -> SweepResult:
    """Run fully specified configs (seed included) and write the table."""
    if workers > 1:
        payloads = [(j.model_dump(mode="json"), None if root is None else os.fspath(root)) for j in jobs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_payload, payloads))
    else:
        results = [run_experiment(j, root) for j in jobs]
    rows = [r.row for r in results]
    table = build_table(rows)
    path = Path(table_path) if table_path else output_root(root) / "table.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, table_to_csv(table))
    _atomic_write(path.with_name(path.stem + "_timing.csv"), timing_csv(rows))
    return SweepResult(rows, table, results)


def timing_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "variant", "seed", "wall_time"])
    for r in rows:
        w.writerow([r.config_hash, r.variant, r.seed, _cell(r.wall_time)])
    return buf.getvalue()


def _run_dirs(directory: str | os.PathLike) -> list[Path]:
    found = [p.parent for p in Path(directory).rglob("report.csv")]

    def key(p: Path):
        seed = p.name[4:]
        return (str(p.parent), int(seed) if seed.lstrip("-").isdigit() else 0)

    return sorted(found, key=key)


def report(directory: str | os.PathLike) -> list[ReportRow]:
    """Collect every run under ``directory`` into ``table.csv`` there."""
    rows = []
    for d in _run_dirs(directory):
        rows += read_table_csv(d / "report.csv")
        timing = d / "timing.json"
        if timing.exists():
            rows[-1].wall_time = json.loads(timing.read_text())["wall_time"]
    if not rows:
        raise FileNotFoundError(f"no run directories under {directory}")
    table = build_table(rows)
    _atomic_write(Path(directory) / "table.csv", table_to_csv(table))
    return table


# ---------------------------------------------------------------------------
# curves


def curve_rows(records: list[RunRecord], variant: str, seed: int | str = "") -> list[list]:
    out = []
    for r in records:
        values = [("loss", r.loss), ("top1", r.top1), ("top5", r.top5)]
        if r.omega is not None:
            values += [(f"omega_{i}", w) for i, w in enumerate(r.omega, start=1)]
        for name, v in values:
            if v is not None and not (isinstance(v, float) and math.isnan(v)):
                out.append([variant, seed, r.step, f"{r.model_id}.{name}", repr(float(v))])
    return out


def emit_curves(runs: list[tuple[str, int | str, str | os.PathLike]]) -> str:
    """Long-format CSV from ``(variant, seed, records.csv path)`` triples."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for variant, seed, path in runs:
        w.writerows(curve_rows(read_records_csv(path), variant, seed))
    return buf.getvalue()


def curves(directory: str | os.PathLike) -> Path:
    """Write ``curves.csv`` for every run under ``directory``."""
    runs = []
    for d in _run_dirs(directory):
        cfg = parse_config((d / "config.yaml").read_text(encoding="utf-8"))
        runs.append((cfg.name, cfg.seed, d / "records.csv"))
    if not runs:
        raise FileNotFoundError(f"no run directories under {directory}")
    out = Path(directory) / "curves.csv"
    _atomic_write(out, emit_curves(runs))
    return out
