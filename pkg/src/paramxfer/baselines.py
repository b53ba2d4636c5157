"""Comparison methods: logit distillation and direct parameter copying."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import ContractError
from .zoo import ZooModel


def kd_loss(
    student: Tensor,
    teacher: np.ndarray | Tensor,
    temperature: float,
    alpha: float,
    labels: np.ndarray,
) -> Tensor:
    """``alpha * T^2 * KL(p_teacher || p_student) + (1 - alpha) * CE(student, labels)``.

    Temperature-softened distributions, batch-mean KL. The teacher is treated as
    a constant.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=student.data.dtype)
    if t.shape != student.shape:
        raise ContractError(f"teacher logits {t.shape} do not match student {student.shape}")
    n = student.shape[0]
    tz = t / temperature
    tz = tz - tz.max(axis=1, keepdims=True)
    log_pt = tz - np.log(np.exp(tz).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax_rows(ad.scale(student, 1.0 / temperature))
    # KL = sum p_t log p_t - sum p_t log p_s, batch mean
    entropy_term = float(np.sum(pt * log_pt)) / n
    cross = ad.scale(ad.sum(ad.mul(log_ps, Tensor(pt))), -1.0 / n)
    kl = ad.add(cross, Tensor(entropy_term))
    soft = ad.scale(kl, alpha * temperature**2)
    if alpha == 1.0:
        return soft
    return ad.add(soft, ad.scale(ad.cross_entropy(student, labels), 1.0 - alpha))


def _overlap_copy(dst: np.ndarray, src: np.ndarray) -> None:
    region = tuple(slice(0, min(a, b)) for a, b in zip(dst.shape, src.shape))
    if any(s.stop == 0 for s in region):
        raise ContractError(f"no overlap between shapes {src.shape} and {dst.shape}")
    dst[region] = src[region]


def copy_share_baseline(source: ZooModel, target: ZooModel, slot_map: dict[str, str]) -> None:
    """Overwrite the top-left overlap of each mapped target slot with the source's.

    Factorized slots exchange their ``a`` factor (the same object the adapters
    transfer); dense slots exchange the weight matrix.
    """
    for src_name, dst_name in slot_map.items():
        src, dst = source.slot(src_name), target.slot(dst_name)
        if src.factorized and dst.factorized:
            _overlap_copy(dst.weight.a.data, src.weight.a.data)
        elif not src.factorized and not dst.factorized:
            _overlap_copy(dst.weight.data, src.weight.data)
        else:
            raise ContractError(f"slots {src_name!r} and {dst_name!r} must both be factorized or both dense")
