"""Low-rank parameter factors and their on-disk format."""

from __future__ import annotations

import io
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, ShapeError, Tensor, matmul


class ContractError(ValueError):
    """A documented precondition was violated."""


class CheckpointError(ValueError):
    pass


@dataclass
class LowRankParam:
    """A weight stored as ``b @ a`` with ``b: rows x r`` and ``a: r x cols``."""

    b: Tensor
    a: Tensor
    slot_id: str = ""
    # original tensor shape when the 2-D view came from a conv kernel
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"factor shapes {self.b.shape} and {self.a.shape} do not chain")
        if self.rank > min(self.rows, self.cols):
            raise ContractError(f"rank {self.rank} exceeds min({self.rows}, {self.cols})")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def rows(self) -> int:
        return self.b.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.b, self.a]


@dataclass
class ParamPartition:
    transfer_slots: list[str]
    frozen_or_local: list[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.transfer_slots) & set(self.frozen_or_local)
        if overlap:
            raise ContractError(f"slots both transferred and local: {sorted(overlap)}")


def densify(p: LowRankParam) -> Tensor:
    return matmul(p.b, p.a)


@dataclass
class SVDResult:
    param: LowRankParam
    iterations: int
    converged: bool
    singular_values: np.ndarray


def reencode_truncated_svd(
    w: Tensor | np.ndarray,
    r: int,
    iters: int = 50,
    seed: int = 0,
    tol: float = 1e-10,
    oversample: int = 8,
    slot_id: str = "",
) -> SVDResult:
    """Best rank-``r`` factorization by orthogonal iteration on ``w @ w.T``.

    A block of ``r + oversample`` vectors (capped at the matrix size) starts from
    a seeded Gaussian draw and is re-orthonormalized with QR each sweep. After
    every sweep a Rayleigh-Ritz step extracts the leading ``r`` pairs; iteration
    stops once their eigen-residual relative to ``||w||_F^2`` drops below ``tol``.
    Singular values end up in ``b`` (``b = U S``, ``a = V^T``).
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=DTYPE)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    rows, cols = w.shape
    if not 1 <= r <= min(rows, cols):
        raise ContractError(f"rank {r} outside [1, {min(rows, cols)}] for shape {w.shape}")
    if iters < 1:
        raise ContractError("iters must be >= 1")

    k = min(r + max(oversample, 0), rows, cols)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    scale2 = max(float(np.sum(w * w)), np.finfo(DTYPE).tiny)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        q, _ = np.linalg.qr(w @ (w.T @ q))
        c = q.T @ w
        evals, evecs = np.linalg.eigh(c @ c.T)
        order = np.argsort(evals)[::-1][:r]
        u = q @ evecs[:, order]
        resid = w @ (w.T @ u) - u * evals[order]
        if np.linalg.norm(resid) / scale2 < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"subspace iteration did not converge in {iters} sweeps", RuntimeWarning, stacklevel=2)

    evals = evals[order]
    sigma = np.sqrt(np.clip(evals, 0.0, None))
    vt = evecs[:, order].T @ c
    nonzero = sigma > sigma.max(initial=0.0) * 1e-14
    vt[nonzero] /= sigma[nonzero, None]
    vt[~nonzero] = 0.0
    param = LowRankParam(Tensor(u * sigma), Tensor(vt), slot_id=slot_id)
    return SVDResult(param, it, converged, sigma)


def reshape_conv_kernel(k: Tensor) -> Tensor:
    """``(out, in, kh, kw)`` kernel to its ``(out, in*kh*kw)`` matrix view."""
    if k.ndim != 4:
        raise ShapeError(f"expected a 4-D kernel, got shape {k.shape}")
    return Tensor(k.data.reshape(k.shape[0], -1).copy(), requires_grad=k.requires_grad)


def unreshape_conv_kernel(m: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    if m.ndim != 2 or m.shape != (shape[0], int(np.prod(shape[1:]))):
        raise ShapeError(f"matrix {m.shape} is not a view of kernel {tuple(shape)}")
    return Tensor(m.data.reshape(shape).copy(), requires_grad=m.requires_grad)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic  b"PXCKPT01"
#   u64    manifest length (little endian)
#   bytes  UTF-8 JSON manifest: {"entries": [{slot_id, rows, cols, r, shape}]}
#   bytes  float64 LE payloads in manifest order; factorized entries (r > 0)
#          store b then a, dense entries (r == 0) store rows*cols values.

MAGIC = b"PXCKPT01"


def _entry_arrays(value) -> tuple[dict, list[np.ndarray]]:
    if isinstance(value, LowRankParam):
        meta = {"rows": value.rows, "cols": value.cols, "r": value.rank}
        if value.shape is not None:
            meta["shape"] = list(value.shape)
        return meta, [value.b.data, value.a.data]
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    mat = arr.reshape(arr.shape[0], -1) if arr.ndim >= 2 else arr.reshape(1, -1)
    return {"rows": mat.shape[0], "cols": mat.shape[1], "r": 0, "shape": list(arr.shape)}, [arr]


def dump_checkpoint(entries: dict) -> bytes:
    """Serialize ``{slot_id: LowRankParam | Tensor | ndarray}`` in insertion order."""
    manifest = []
    payload = io.BytesIO()
    for slot_id, value in entries.items():
        meta, arrays = _entry_arrays(value)
        manifest.append({"slot_id": slot_id, **meta})
        for arr in arrays:
            payload.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    head = json.dumps({"entries": manifest}, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + payload.getvalue()


def save_checkpoint(path: str | os.PathLike, entries: dict) -> None:
    blob = dump_checkpoint(entries)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def parse_checkpoint(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("header truncated")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))["entries"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    offset = 16 + n
    out = {}

    def read(count: int) -> np.ndarray:
        nonlocal offset
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"payload truncated at byte {offset}")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(DTYPE)
        offset = end
        return arr

    for e in manifest:
        rows, cols, r = e["rows"], e["cols"], e["r"]
        shape = tuple(e["shape"]) if "shape" in e else None
        if r > 0:
            b = read(rows * r).reshape(rows, r)
            a = read(r * cols).reshape(r, cols)
            out[e["slot_id"]] = LowRankParam(Tensor(b), Tensor(a), e["slot_id"], shape)
        else:
            out[e["slot_id"]] = read(rows * cols).reshape(shape)
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payloads")
    return out


def load_checkpoint(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
