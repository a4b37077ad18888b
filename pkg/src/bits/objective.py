"""Binary agreement losses, the coding-rate regularizer and the total loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

AGREEMENT_MODES = ("bce-hard", "bce-soft", "cosine")
BIT_NORMALIZATIONS = ("mean-over-bits", "sum-over-bits")


class DivergenceError(FloatingPointError):
    """Raised when training produces NaN or infinite values."""


@dataclass
class AgreementConfig:
    mode: str = "bce-hard"
    beta: float = 0.1
    eps: float = 0.5
    tau: float = 0.1
    bit_normalization: str = "mean-over-bits"
    rate_scale: float | None = None  # the constant d in d/eps^2; None means the logit width

    def __post_init__(self):
        if self.mode not in AGREEMENT_MODES:
            raise ValueError(f"unknown agreement mode {self.mode!r}; expected one of {AGREEMENT_MODES}")
        if self.bit_normalization not in BIT_NORMALIZATIONS:
            raise ValueError(f"unknown bit normalization {self.bit_normalization!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.eps <= 0 or self.tau <= 0:
            raise ValueError("eps and tau must be > 0")


@dataclass
class LossBreakdown:
    bce: float
    rate: float
    total: float
    agreement_rate: float

    def as_dict(self) -> dict:
        return {"bce": self.bce, "rate": self.rate, "total": self.total, "agreement_rate": self.agreement_rate}


def binarize_targets(teacher_logits) -> np.ndarray:
    """Hard teacher bits: 1 where the logit is strictly positive."""
    a = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if np.isnan(a).any():
        raise DivergenceError("NaN in teacher logits")
    return (a > 0).astype(np.uint8)


def default_pairing(n_student_views: int, n_global: int) -> list[tuple[int, int]]:
    """Every student view predicts every teacher global view except its own crop.

    Views are ordered globals first, so student view ``v < n_global`` is the same
    crop as teacher view ``v``.
    """
    return [(s, t) for s in range(n_student_views) for t in range(n_global) if s != t]


def _check_pairing(pairing):
    if not pairing:
        raise ValueError("pairing is empty")


def _reduce_bits(per_elem: Tensor, bit_normalization: str) -> Tensor:
    if bit_normalization == "mean-over-bits":
        return ad.mean(per_elem)
    return ad.mean(ad.sum_(per_elem, axis=1))


def binary_agreement_loss(
    student_logits: Sequence[Tensor],
    teacher_bits: Sequence[np.ndarray],
    pairing: Sequence[tuple[int, int]] | None = None,
    bit_normalization: str = "mean-over-bits",
) -> Tensor:
    """Per-bit BCE of student logits against teacher bits, averaged over view pairs."""
    if pairing is None:
        pairing = default_pairing(len(student_logits), len(teacher_bits))
    _check_pairing(pairing)
    terms = [
        _reduce_bits(ad.bce_with_logits(student_logits[s], teacher_bits[t]), bit_normalization)
        for s, t in pairing
    ]
    return ad.scale(_sum(terms), 1.0 / len(terms))


def soft_agreement_loss(
    student_logits: Sequence[Tensor],
    teacher_logits: Sequence[np.ndarray],
    tau: float,
    pairing: Sequence[tuple[int, int]] | None = None,
    bit_normalization: str = "mean-over-bits",
) -> Tensor:
    """BCE against tempered teacher probabilities sigmoid(logit / tau)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    targets = []
    for t in teacher_logits:
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        if np.isnan(t).any():
            raise DivergenceError("NaN in teacher logits")
        targets.append(ad.stable_sigmoid(t.astype(np.float64) / tau))
    if pairing is None:
        pairing = default_pairing(len(student_logits), len(targets))
    _check_pairing(pairing)
    terms = [
        _reduce_bits(ad.bce_with_logits(student_logits[s], targets[t]), bit_normalization) for s, t in pairing
    ]
    return ad.scale(_sum(terms), 1.0 / len(terms))


def cosine_agreement_loss(
    student_logits: Sequence[Tensor],
    teacher_bits: Sequence[np.ndarray],
    pairing: Sequence[tuple[int, int]] | None = None,
) -> Tensor:
    """Mean of 1 - cos(student logits, 2*bits - 1) over pairs and batch."""
    if pairing is None:
        pairing = default_pairing(len(student_logits), len(teacher_bits))
    _check_pairing(pairing)
    terms = []
    for s, t in pairing:
        student = student_logits[s]
        signs = 2.0 * np.asarray(teacher_bits[t], dtype=student.dtype) - 1.0
        signs /= np.sqrt(signs.shape[1])
        cos = ad.sum_(ad.mul(ad.l2_normalize_rows(student), signs), axis=1)
        terms.append(ad.mean(1.0 - cos))
    return ad.scale(_sum(terms), 1.0 / len(terms))


def coding_rate(global_logits: Sequence[Tensor], eps: float, scale_dim: float | None = None) -> Tensor:
    """R_eps of the row-normalized logits of all global views stacked along the batch."""
    stacked = ad.concat(list(global_logits), axis=0) if len(global_logits) > 1 else global_logits[0]
    return ad.logdet_regularized_cov(ad.l2_normalize_rows(stacked), eps, scale_dim)


def agreement_rate(student_logits: Sequence, teacher_bits: Sequence[np.ndarray], pairing) -> float:
    hits = total = 0
    for s, t in pairing:
        a = student_logits[s].data if isinstance(student_logits[s], Tensor) else student_logits[s]
        hits += int(((a > 0) == teacher_bits[t].astype(bool)).sum())
        total += teacher_bits[t].size
    return hits / total


def loss_from_logits(
    student_logits: Sequence[Tensor],
    teacher_logits: Sequence[np.ndarray],
    cfg: AgreementConfig,
    n_global: int | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Total loss L_agree + beta * L_rate given per-view logits.

    ``student_logits`` holds every view (globals first); ``teacher_logits`` holds
    the global views only.
    """
    n_global = len(teacher_logits) if n_global is None else n_global
    if n_global < 2:
        raise ValueError("at least 2 global views are required")
    pairing = default_pairing(len(student_logits), n_global)
    bits = [binarize_targets(t) for t in teacher_logits]
    if cfg.mode == "bce-hard":
        agree = binary_agreement_loss(student_logits, bits, pairing, cfg.bit_normalization)
    elif cfg.mode == "bce-soft":
        agree = soft_agreement_loss(student_logits, teacher_logits, cfg.tau, pairing, cfg.bit_normalization)
    else:
        agree = cosine_agreement_loss(student_logits, bits, pairing)

    if cfg.beta > 0:
        rate_value = ad.scale(coding_rate(student_logits[:n_global], cfg.eps, cfg.rate_scale), -1.0)
        total = ad.add(agree, ad.scale(rate_value, cfg.beta))
        rate = float(rate_value.data)
    else:
        with ad.no_grad():
            rate = -float(coding_rate(student_logits[:n_global], cfg.eps, cfg.rate_scale).data)
        total = agree
    breakdown = LossBreakdown(
        bce=float(agree.data),
        rate=rate,
        total=float(total.data),
        agreement_rate=agreement_rate(student_logits, bits, pairing),
    )
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss: {breakdown}")
    return total, breakdown


def total_loss(pair, views, cfg: AgreementConfig, n_global: int = 2) -> tuple[Tensor, LossBreakdown]:
    """Teacher targets from the global views, student logits from all views, then the loss.

    ``views`` is a list of NHWC pixel batches (globals first) accepted by
    :meth:`bits.model.ModelPair.forward`.
    """
    teacher = [pair.forward("teacher", v)[1].data for v in views[:n_global]]
    student = [pair.forward("student", v)[1] for v in views]
    return loss_from_logits(student, teacher, cfg, n_global)


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
