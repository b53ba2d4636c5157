"""Small two-model setups shared by the engine and acceptance tests."""

import numpy as np

from paramxfer.adapters import build_stack
from paramxfer.data import DataStream, SyntheticTask, gen_synthetic
from paramxfer.engine import Member, TransferPair, TransferPlan
from paramxfer.zoo import build_model


def tiny_task(dim=8, classes=4, n=256, seed=0):
    return gen_synthetic(SyntheticTask(classes=classes, dim=dim, train_size=n, test_size=n, task_seed=seed, sample_seed=seed))


def tiny_members(seed=0, r=4, slot="fc1", dim=8, classes=4, lr=0.05, kinds=("mlp_large", "mlp_small")):
    train, _ = tiny_task(dim, classes, seed=seed)
    out = {}
    for i, (role, kind) in enumerate(zip(("l", "s"), kinds)):
        model = build_model(kind, classes, (dim,), r=r, transfer_slots=[slot], seed=seed * 10 + i)
        out[role] = Member(f"{role}_{kind}", model, DataStream(train, 16, seed * 10 + i + 100), lr)
    return out


def tiny_plan(slot="fc1", directions="l2s", **kw):
    return TransferPlan([TransferPair(slot, slot)], directions=directions, **kw)


def tiny_stacks(members, plan, kind="lpka_full", seed=0, d=4, **kw):
    stacks = []
    for pair in plan.pairs:
        a_l = members["l"].model.factor(pair.l_slot).a
        a_s = members["s"].model.factor(pair.s_slot).a
        stacks.append(
            build_stack(kind, a_l.shape[0], a_l.shape[1], a_s.shape[1], plan.directions, d=d, rng=np.random.default_rng(seed), **kw)
        )
    return stacks


def tiny_config(**over):
    """A config dict that trains in well under a second."""
    task = {"classes": 4, "dim": 8, "train_size": 200, "test_size": 100, "informative_dims": 3, "task_seed": 1}
    cfg = {
        "name": "tiny",
        "total_steps": 12,
        "eval_every": 4,
        "batch_size": 16,
        "models": {"l": {"kind": "mlp_large"}, "s": {"kind": "mlp_small"}},
        "datasets": {"l": dict(task), "s": dict(task)},
        "plan": {"pairs": [["fc1", "fc1"]], "directions": "l2s"},
        "adapter": {"kind": "lpka_full", "r": 4, "d": 4},
    }
    for key, value in over.items():
        cfg[key] = cfg[key] | value if isinstance(value, dict) and isinstance(cfg.get(key), dict) else value
    return cfg
