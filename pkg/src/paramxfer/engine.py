"""Interleaved knowledge-transfer / self-learning training.

Two roles take part: ``"l"`` (the larger model) and ``"s"`` (the smaller one).
Direction ``l2s`` writes the small model's ``a`` factor, ``s2l`` the large
model's. Self-transfer binds both roles to one model.

Per step ``t`` (1-based unless ``literal_t0``):

1. if a transfer is due, update each pair's adapters from the previous event
   with the delta rule, then generate and write new ``a`` factors;
2. every unfrozen model takes one SGD step on its own batch.
"""

from __future__ import annotations

import copy
import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .adapters import KtlStack, LpkaAdapter, ktl_apply
from .autodiff import GradTape, Tensor
from .baselines import copy_share_baseline, kd_loss
from .codec import ContractError
from .data import Batch, DataStream
from .zoo import ZooModel, evaluate

WRITES = {"l2s": "s", "s2l": "l"}
READS = {"l2s": "l", "s2l": "s"}


class PlanError(ValueError):
    """Inconsistent transfer plan."""


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, model_id: str, value: float):
        super().__init__(f"non-finite loss {value} for model {model_id!r} at step {step}")
        self.step, self.model_id, self.value = step, model_id, value
        self.records: list = []  # records produced before the failure


@dataclass
class TransferPair:
    l_slot: str
    s_slot: str


@dataclass
class TransferPlan:
    pairs: list[TransferPair] = field(default_factory=list)
    directions: str = "both"
    t_cycle: int = 4
    freq_ratio: dict[str, int] = field(default_factory=lambda: {"l": 1, "s": 1})
    frozen_source: bool = False
    eta_adapter: float = 0.01
    literal_t0: bool = False
    mechanism: str = "adapter"  # or "copy_share"

    def __post_init__(self):
        if self.directions not in ("l2s", "s2l", "both"):
            raise PlanError(f"directions must be l2s, s2l or both, not {self.directions!r}")
        if self.t_cycle < 1:
            raise PlanError("t_cycle must be >= 1")
        if any(int(v) < 1 for v in self.freq_ratio.values()):
            raise PlanError("freq_ratio entries must be positive integers")
        if self.frozen_source and self.directions != "l2s":
            raise PlanError("a frozen source only supports the l2s direction")
        if self.mechanism not in ("adapter", "copy_share"):
            raise PlanError(f"unknown transfer mechanism {self.mechanism!r}")

    @property
    def direction_list(self) -> tuple[str, ...]:
        return ("l2s", "s2l") if self.directions == "both" else (self.directions,)

    def due(self, t: int) -> tuple[str, ...]:
        """Directions whose target model is scheduled for a transfer at step ``t``."""
        return tuple(
            d
            for d in self.direction_list
            if should_transfer(t, self.t_cycle, self.freq_ratio.get(WRITES[d], 1), self.literal_t0)
        )


def should_transfer(t: int, t_cycle: int, ratio: int = 1, literal: bool = False) -> bool:
    """True iff ``t mod (t_cycle * ratio) == 0``.

    Steps are 1-based by default, so the first event lands at ``t_cycle * ratio``.
    ``literal`` counts from 0 and therefore also fires before any learning.
    """
    if t < (0 if literal else 1):
        raise ContractError(f"step {t} is out of range")
    return t % (t_cycle * ratio) == 0


@dataclass
class Member:
    """One trainable model with its data stream and learning rate."""

    model_id: str
    model: ZooModel
    stream: DataStream
    lr: float
    frozen: bool = False


@dataclass(frozen=True)
class TransferEvent:
    step: int
    pair: int
    directions: tuple[str, ...]
    inputs: dict  # role -> a factor fed to the adapter
    generated: dict  # written role -> generated a factor


@dataclass
class RunRecord:
    step: int
    phase: str
    model_id: str
    loss: float
    top1: float | None = None
    top5: float | None = None
    omega: tuple[float, ...] | None = None


# ---------------------------------------------------------------------------


def _factor(members: dict[str, Member], role: str, pair: TransferPair):
    slot = pair.l_slot if role == "l" else pair.s_slot
    return members[role].model.factor(slot)


def _frozen_view(arr: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out.setflags(write=False)
    return out


def transfer_step(
    plan: TransferPlan,
    members: dict[str, Member],
    stacks: list[KtlStack] | None,
    step: int,
    directions: Iterable[str] | None = None,
) -> list[TransferEvent]:
    """Generate new ``a`` factors for every pair and write them in place."""
    directions = tuple(plan.direction_list if directions is None else directions)
    if plan.frozen_source and "s2l" in directions:
        raise PlanError("a frozen source cannot receive transfers")
    events = []
    for k, pair in enumerate(plan.pairs):
        a_l, a_s = _factor(members, "l", pair).a, _factor(members, "s", pair).a
        if a_l.shape[0] != a_s.shape[0]:
            raise ContractError(f"pair {k}: rank {a_l.shape[0]} vs {a_s.shape[0]}")
        inputs = {"l": _frozen_view(a_l.data), "s": _frozen_view(a_s.data)}
        if plan.mechanism == "copy_share":
            for d in directions:
                src, dst = READS[d], WRITES[d]
                slot = {"l": pair.l_slot, "s": pair.s_slot}
                copy_share_baseline(members[src].model, members[dst].model, {slot[src]: slot[dst]})
            generated = {WRITES[d]: _frozen_view(_factor(members, WRITES[d], pair).a.data) for d in directions}
        else:
            out_l, out_s = ktl_apply(stacks[k], Tensor(inputs["l"]), Tensor(inputs["s"]), directions)
            generated = {}
            if "l2s" in directions:
                a_s.data[...] = out_s.data
                generated["s"] = _frozen_view(out_s.data)
            if "s2l" in directions:
                a_l.data[...] = out_l.data
                generated["l"] = _frozen_view(out_l.data)
        events.append(TransferEvent(step, k, directions, inputs, generated))
    return events


def adapter_update(
    event: TransferEvent,
    members: dict[str, Member],
    pair: TransferPair,
    stack: KtlStack,
    eta: float,
) -> None:
    """Delta rule ``phi <- phi - eta * (d A_gen / d phi)^T delta``.

    ``delta = A_generated - A_current`` per written factor, i.e. how far
    self-learning moved the factor since it was generated, with the sign that
    makes the step pull future generations toward where training took them.
    The vector-Jacobian product is taken as the gradient of the surrogate
    ``sum <A_gen(phi), stop_grad(delta)>``, re-running the recorded generation.
    """
    if not event.generated:
        raise ContractError("transfer event carries no generated snapshot")
    deltas = {role: Tensor(snap - _factor(members, role, pair).a.data) for role, snap in event.generated.items()}
    params = stack.parameters()
    for p in params:
        p.grad = None
    with GradTape() as tape:
        out_l, out_s = ktl_apply(stack, Tensor(event.inputs["l"]), Tensor(event.inputs["s"]), event.directions)
        outs = {"l": out_l, "s": out_s}
        terms = [ad.vdot(outs[role], delta) for role, delta in deltas.items()]
        surrogate = terms[0]
        for t in terms[1:]:
            surrogate = ad.add(surrogate, t)
    if surrogate.requires_grad:
        tape.backward(surrogate)
    for p in params:
        if p.grad is not None:
            p.data -= eta * p.grad
            p.grad = None


LossFn = Callable[[Tensor, Batch], Tensor]


def self_learning_step(model: ZooModel, batch: Batch, eta: float, loss_fn: LossFn | None = None, step: int = 0, model_id: str = "") -> float:
    """One plain SGD step over every model parameter; returns the batch loss."""
    with GradTape() as tape:
        logits = model.forward(Tensor(batch.inputs))
        loss = loss_fn(logits, batch) if loss_fn else ad.cross_entropy(logits, batch.labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(step, model_id, value)
    tape.backward(loss)
    for p in model.parameters():
        if p.grad is not None:
            p.data -= eta * p.grad
            p.grad = None
    return value


@dataclass
class KDSetup:
    teacher: str = "l"
    student: str = "s"
    temperature: float = 4.0
    alpha: float = 0.9


@dataclass
class Evaluator:
    """Test splits per model id, scored every ``every`` steps and at the end."""

    test_sets: dict[str, tuple[np.ndarray, np.ndarray]]
    every: int = 0

    def due(self, t: int, last: int) -> bool:
        return t == last or (self.every > 0 and t % self.every == 0)


def _unique_members(members: dict[str, Member]) -> list[Member]:
    seen, out = set(), []
    for m in members.values():
        if id(m) not in seen:
            seen.add(id(m))
            out.append(m)
    return out


def _omega_for(stacks: list[KtlStack] | None, role: str) -> tuple[float, ...] | None:
    if not stacks:
        return None
    direction = "l2s" if role == "s" else "s2l"
    adapter = stacks[0].layers[0].get(direction)
    if isinstance(adapter, LpkaAdapter):
        return tuple(float(v) for v in adapter.omega.data)
    return None


def _loss_fn_for(member: Member, members: dict[str, Member], kd: KDSetup | None) -> LossFn | None:
    if kd is None or member.model_id != members[kd.student].model_id:
        return None
    teacher = members[kd.teacher].model

    def fn(logits: Tensor, batch: Batch) -> Tensor:
        t_logits = teacher.forward(Tensor(batch.inputs)).data
        return kd_loss(logits, t_logits, kd.temperature, kd.alpha, batch.labels)

    return fn


def _self_learn_all(members, kd, t, phase_of, evaluator, last, stacks) -> list[RunRecord]:
    records = []
    for m in _unique_members(members):
        if m.frozen:
            continue
        loss = self_learning_step(m.model, m.stream.next(), m.lr, _loss_fn_for(m, members, kd), t, m.model_id)
        rec = RunRecord(t, phase_of(m.model_id), m.model_id, loss)
        if evaluator is not None and evaluator.due(t, last) and m.model_id in evaluator.test_sets:
            rec.top1, rec.top5 = evaluate(m.model, *evaluator.test_sets[m.model_id])
        rec.omega = _omega_for(stacks, "s" if m is members.get("s") else "l")
        records.append(rec)
    return records


def run_training(
    plan: TransferPlan,
    members: dict[str, Member],
    stacks: list[KtlStack] | None,
    total_steps: int,
    evaluator: Evaluator | None = None,
    kd: KDSetup | None = None,
    on_event: Callable[[list[TransferEvent]], None] | None = None,
) -> list[RunRecord]:
    if plan.pairs and plan.mechanism == "adapter" and (stacks is None or len(stacks) != len(plan.pairs)):
        raise PlanError("one adapter stack per pair is required")
    if plan.frozen_source:
        members["l"].frozen = True
    first = 0 if plan.literal_t0 else 1
    last = first + total_steps - 1
    previous: dict[int, TransferEvent] = {}
    records: list[RunRecord] = []
    try:
        for t in range(first, last + 1):
            written: set[str] = set()
            due = plan.due(t) if plan.pairs else ()
            if due:
                if plan.mechanism == "adapter":
                    for k, pair in enumerate(plan.pairs):
                        if k in previous:
                            adapter_update(previous[k], members, pair, stacks[k], plan.eta_adapter)
                events = transfer_step(plan, members, stacks, t, due)
                for ev in events:
                    previous[ev.pair] = ev
                written = {members[WRITES[d]].model_id for d in due}
                if on_event:
                    on_event(events)
            records += _self_learn_all(
                members, kd, t, lambda mid: "transfer" if mid in written else "self", evaluator, last, stacks
            )
    except NonFiniteLoss as exc:
        exc.records = records
        raise
    return records


def train_vanilla(
    members: dict[str, Member],
    total_steps: int,
    evaluator: Evaluator | None = None,
) -> list[RunRecord]:
    """Reference trainer: self-learning only, no transfer machinery."""
    records = []
    try:
        for t in range(1, total_steps + 1):
            for m in _unique_members(members):
                if m.frozen:
                    continue
                loss = self_learning_step(m.model, m.stream.next(), m.lr, None, t, m.model_id)
                rec = RunRecord(t, "self", m.model_id, loss)
                if evaluator is not None and evaluator.due(t, total_steps) and m.model_id in evaluator.test_sets:
                    rec.top1, rec.top5 = evaluate(m.model, *evaluator.test_sets[m.model_id])
                records.append(rec)
    except NonFiniteLoss as exc:
        exc.records = records
        raise
    return records


@dataclass
class InferenceBundle:
    """Model parameters only; nothing from the adapters survives."""

    models: dict[str, ZooModel]

    def forward(self, model_id: str, x: np.ndarray) -> np.ndarray:
        return self.models[model_id].forward(Tensor(x)).data

    def parameter_count(self, model_id: str | None = None) -> int:
        ids = [model_id] if model_id else list(self.models)
        return sum(self.models[i].parameter_count() for i in ids)

    def checkpoint_entries(self, model_id: str) -> dict:
        return self.models[model_id].checkpoint_entries()


def strip_adapter(members: dict[str, Member]) -> InferenceBundle:
    return InferenceBundle({m.model_id: copy.deepcopy(m.model) for m in _unique_members(members)})


# ---------------------------------------------------------------------------
# RunRecord CSV

RECORD_COLUMNS = ["step", "phase", "model_id", "loss", "top1", "top5", "omega_1", "omega_2", "omega_3", "omega_4"]


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def records_to_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        omega = list(r.omega) if r.omega is not None else [None] * 4
        w.writerow([r.step, r.phase, r.model_id, _fmt(r.loss), _fmt(r.top1), _fmt(r.top5), *map(_fmt, omega)])
    return buf.getvalue()


def write_records_csv(path: str | os.PathLike, records: list[RunRecord]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(records_to_csv(records))
    os.replace(tmp, path)


class RecordParseError(ValueError):
    pass


def read_records_csv(path: str | os.PathLike) -> list[RunRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RECORD_COLUMNS:
        raise RecordParseError(f"{path}:1: expected header {','.join(RECORD_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(RECORD_COLUMNS):
            raise RecordParseError(f"{path}:{lineno}: expected {len(RECORD_COLUMNS)} fields, got {len(row)}")
        try:
            opt = [float(v) if v else None for v in row[3:]]
            omega = tuple(opt[3:]) if all(v is not None for v in opt[3:]) else None
            out.append(RunRecord(int(row[0]), row[1], row[2], opt[0], opt[1], opt[2], omega))
        except ValueError as exc:
            raise RecordParseError(f"{path}:{lineno}: {exc}") from None
    return out
