"""Parameter adapters that map one model's low-rank factor onto another's.

``LpkaAdapter`` runs softmax attention between row/column token views of the
target factor (queries) and the source factor (keys and values), in four
flatten combinations mixed by learnable weights. ``MlpAdapter`` is the
shape-mapping baseline that ignores the target. ``KtlStack`` chains adapter
layers for both transfer directions.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import ContractError

COMBOS = ("RR", "RL", "LR", "LL")
VARIANTS = ("full", "row_only", "avg_attn")
DIRECTIONS = ("l2s", "s2l", "both")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _tokens(a: Tensor, how: str) -> Tensor:
    return ad.flatten_rows(a) if how == "R" else ad.flatten_cols(a)


class LpkaAdapter:
    """Attention fuser producing an ``r x m`` target factor from an ``r x M`` source.

    Projection sizes per combo (query flatten, key/value flatten):

    =====  ==========  ===========  ============
    combo  query len   key/val len  output token
    =====  ==========  ===========  ============
    RR     m           M            m
    RL     m           r            m
    LR     r           M            r (transposed back)
    LL     r           r            r (transposed back)
    =====  ==========  ===========  ============
    """

    def __init__(
        self,
        r: int,
        m: int,
        M: int,
        d: int = 16,
        variant: str = "full",
        rng: np.random.Generator | None = None,
        omega_trainable: bool = True,
        residual: bool = False,
    ):
        if variant not in VARIANTS:
            raise ContractError(f"unknown LPKA variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.r, self.m, self.M, self.d = r, m, M, d
        self.variant = variant
        self.residual = residual
        self.combos = ("RR",) if variant == "row_only" else COMBOS
        self.proj: dict[str, dict[str, Tensor]] = {}
        for combo in self.combos:
            q_len = m if combo[0] == "R" else r
            kv_len = M if combo[1] == "R" else r
            self.proj[combo] = {
                "wq": _uniform(rng, q_len, (q_len, d), f"{combo}/wq"),
                "wk": _uniform(rng, kv_len, (kv_len, d), f"{combo}/wk"),
                "wv": _uniform(rng, kv_len, (kv_len, d), f"{combo}/wv"),
                "wo": _uniform(rng, d, (d, q_len), f"{combo}/wo"),
            }
        self.omega = Tensor(np.full(4, 0.25), requires_grad=omega_trainable, name="omega")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"{c}/{k}": t for c, projs in self.proj.items() for k, t in projs.items()}
        out["omega"] = self.omega
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def __call__(self, a_target: Tensor, a_source: Tensor) -> Tensor:
        return lpka_forward(self, a_target, a_source, self.variant)


def lpka_forward(
    adapter: LpkaAdapter,
    a_target: Tensor,
    a_source: Tensor,
    variant: str = "full",
    attention: dict | None = None,
) -> Tensor:
    """Fuse source knowledge into the target factor.

    If ``attention`` is a dict, each combo's softmax matrix is stored in it.
    """
    r, m = a_target.shape
    if a_source.shape[0] != r:
        raise ContractError(f"rank mismatch: target {a_target.shape} vs source {a_source.shape}")
    if (r, m, a_source.shape[1]) != (adapter.r, adapter.m, adapter.M):
        raise ContractError(
            f"adapter bound to r={adapter.r}, m={adapter.m}, M={adapter.M}; "
            f"got target {a_target.shape}, source {a_source.shape}"
        )
    if variant not in VARIANTS:
        raise ContractError(f"unknown LPKA variant {variant!r}")
    active = ("RR",) if variant == "row_only" else COMBOS
    missing = [c for c in active if c not in adapter.proj]
    if missing:
        raise ContractError(f"variant {variant!r} needs combos {missing} absent from the adapter")

    inv_sqrt_d = 1.0 / math.sqrt(adapter.d)
    heads = []
    for combo in active:
        p = adapter.proj[combo]
        q_tok = _tokens(a_target, combo[0])
        kv_tok = _tokens(a_source, combo[1])
        q = ad.matmul(q_tok, p["wq"])
        k = ad.matmul(kv_tok, p["wk"])
        v = ad.matmul(kv_tok, p["wv"])
        weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_d))
        if attention is not None:
            attention[combo] = weights.data
        head = ad.matmul(ad.matmul(weights, v), p["wo"])
        heads.append(head if combo[0] == "R" else ad.transpose(head))

    if variant == "avg_attn":
        terms = [ad.scale(h, 0.25) for h in heads]
    else:
        terms = [ad.mul(h, ad.take(adapter.omega, i)) for i, h in enumerate(heads)]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    if adapter.residual:
        out = ad.add(a_target, out)
    assert out.shape == (r, m)
    return out


class MlpAdapter:
    """Two per-axis linear maps with a transpose between them.

    ``xi1`` maps each length-``M`` row of the ``N x M`` source to length ``n``,
    the ``N x n`` result is transposed, and ``xi2`` maps each length-``N`` row to
    length ``m``. The target's own parameters are never read.
    """

    def __init__(self, N: int, M: int, n: int, m: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.N, self.M, self.n, self.m = N, M, n, m
        self.w1 = _uniform(rng, M, (M, n), "xi1/w")
        self.b1 = _uniform(rng, M, (n,), "xi1/b")
        self.w2 = _uniform(rng, N, (N, m), "xi2/w")
        self.b2 = _uniform(rng, N, (m,), "xi2/b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {"xi1/w": self.w1, "xi1/b": self.b1, "xi2/w": self.w2, "xi2/b": self.b2}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def __call__(self, a_target: Tensor, a_source: Tensor) -> Tensor:
        if a_target.shape != (self.n, self.m):
            raise ContractError(f"mlp adapter emits {(self.n, self.m)}, target is {a_target.shape}")
        return mlp_forward(self, a_source)


def mlp_forward(adapter: MlpAdapter, w_source: Tensor) -> Tensor:
    if w_source.shape != (adapter.N, adapter.M):
        raise ContractError(f"mlp adapter expects source {(adapter.N, adapter.M)}, got {w_source.shape}")
    h = ad.add_bias(ad.matmul(w_source, adapter.w1), adapter.b1)
    return ad.add_bias(ad.matmul(ad.transpose(h), adapter.w2), adapter.b2)


class KtlStack:
    """``L`` knowledge-transfer layers, each holding one adapter per direction.

    ``layers[i]`` maps ``"l2s"`` (writes the small model's factor) and/or
    ``"s2l"`` to an adapter. Adapters are independent across layers and
    directions unless a caller deliberately shares objects.
    """

    def __init__(self, layers: list[dict]):
        if not layers:
            raise ContractError("a transfer stack needs at least one layer")
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    def directions(self) -> set[str]:
        return set().union(*(layer.keys() for layer in self.layers))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        seen = set()
        for i, layer in enumerate(self.layers):
            for direction, adapter in layer.items():
                for name, t in adapter.named_parameters().items():
                    if id(t) in seen:
                        continue
                    seen.add(id(t))
                    out[f"{i}/{direction}/{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def checkpoint_entries(self) -> dict[str, Tensor]:
        """Entries keyed ``adapter/<layer>/<combo>/<role>``; role carries direction."""
        out = {}
        for key, t in self.named_parameters().items():
            layer, direction, name = key.split("/", 2)
            combo, _, role = name.rpartition("/")
            combo = combo or "all"
            out[f"adapter/{layer}/{combo}/{direction}.{role}"] = t
        return out


def build_stack(
    kind: str,
    r: int,
    M: int,
    m: int,
    directions: str,
    layers: int = 1,
    d: int = 16,
    omega_trainable: bool = True,
    residual: bool = False,
    rng: np.random.Generator | None = None,
) -> KtlStack:
    """Stack for a slot pair: large-model factor ``r x M``, small-model ``r x m``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    wanted = ("l2s", "s2l") if directions == "both" else (directions,)
    out = []
    for _ in range(layers):
        layer = {}
        for direction in wanted:
            tgt, src = (m, M) if direction == "l2s" else (M, m)
            if kind == "mlp":
                layer[direction] = MlpAdapter(r, src, r, tgt, rng=rng)
            elif kind.startswith("lpka_"):
                variant = {"lpka_full": "full", "lpka_row_only": "row_only", "lpka_avg": "avg_attn"}[kind]
                layer[direction] = LpkaAdapter(
                    r, tgt, src, d=d, variant=variant, rng=rng, omega_trainable=omega_trainable, residual=residual
                )
            else:
                raise ContractError(f"no adapter stack for kind {kind!r}")
        out.append(layer)
    return KtlStack(out)


def ktl_apply(stack: KtlStack, a_l: Tensor, a_s: Tensor, directions: str | Iterable[str] = "both") -> tuple[Tensor, Tensor]:
    """Run every layer; within a layer both directions read that layer's inputs."""
    wanted = {"l2s", "s2l"} if directions == "both" else ({directions} if isinstance(directions, str) else set(directions))
    for i, layer in enumerate(stack.layers):
        missing = wanted - set(layer)
        if missing:
            raise ContractError(f"layer {i} has no adapter for {sorted(missing)}")
        new_s = layer["l2s"](a_s, a_l) if "l2s" in wanted else a_s
        new_l = layer["s2l"](a_l, a_s) if "s2l" in wanted else a_l
        a_l, a_s = new_l, new_s
    return a_l, a_s
