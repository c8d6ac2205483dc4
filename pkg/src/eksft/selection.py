"""Per-token uncertainty statistics and Top-K union masking.

A batch's valid tokens T are ranked twice, once by next-token entropy and
once by KL to the frozen reference model. Each criterion keeps exactly
k = ceil(rho * |T|) tokens (ties broken by ascending (sequence, position)),
and the final mask is the union of the two sets. Selection is a hard,
non-differentiable choice: downstream losses treat the mask as a constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

DIST_TOL = 1e-9  # exp(log_probs) must sum to 1 within this much
KL_FLOOR = -1e-9  # tolerated negative KL before we call it an input problem


class TokenRef(NamedTuple):
    """Identity of one valid token within a batch; tuple order is the tie-break key."""

    sequence_index: int
    token_position: int


@dataclass(frozen=True)
class TokenStats:
    ref: TokenRef
    entropy: float
    kl: float


@dataclass(frozen=True)
class MaskSet:
    m_entropy: frozenset[TokenRef]
    m_kl: frozenset[TokenRef]
    m_union: frozenset[TokenRef]
    k: int
    total_valid: int

    @staticmethod
    def empty(total_valid: int = 0) -> "MaskSet":
        return MaskSet(frozenset(), frozenset(), frozenset(), 0, total_valid)


def _check_log_prob_row(row: np.ndarray, name: str) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise InputError(f"{name} must be a vector of >= 2 log-probabilities, got shape {row.shape}")
    total = np.exp(row).sum()
    if not np.isfinite(total) or abs(total - 1.0) > DIST_TOL:
        raise InputError(f"{name} is not a normalized log-probability vector (exp-sum {total})")
    return row


def _zero_where_unsupported(p: np.ndarray, x: np.ndarray) -> np.ndarray:
    # p * x with the convention 0 * (-inf) == 0, without tripping NaN warnings.
    return p * np.where(p > 0.0, x, 0.0)


def token_entropy(log_probs_row: np.ndarray) -> float:
    """Shannon entropy -sum(p log p) in nats from one row of log-probabilities."""
    lp = _check_log_prob_row(log_probs_row, "log_probs_row")
    p = np.exp(lp)
    h = -float(np.sum(_zero_where_unsupported(p, lp)))
    return max(h, 0.0)


def token_kl(policy_log_probs: np.ndarray, reference_log_probs: np.ndarray) -> float:
    """KL(policy || reference) in nats; tiny negatives from roundoff clip to 0."""
    plp = _check_log_prob_row(policy_log_probs, "policy_log_probs")
    rlp = _check_log_prob_row(reference_log_probs, "reference_log_probs")
    if plp.shape != rlp.shape:
        raise InputError(f"vocabulary sizes differ: {plp.shape} vs {rlp.shape}")
    p = np.exp(plp)
    kl = float(np.sum(_zero_where_unsupported(p, plp - rlp)))
    if kl < 0.0:
        kl = 0.0 if kl >= KL_FLOOR else kl
    return kl


def batch_entropy(log_probs: np.ndarray) -> np.ndarray:
    """Entropy per row for log_probs (..., V)."""
    p = np.exp(log_probs)
    return -np.sum(_zero_where_unsupported(p, log_probs), axis=-1)


def batch_kl(policy_log_probs: np.ndarray, reference_log_probs: np.ndarray) -> np.ndarray:
    """KL per row for aligned (..., V) log-prob arrays."""
    if policy_log_probs.shape != reference_log_probs.shape:
        raise InputError(
            f"policy/reference shapes differ: {policy_log_probs.shape} vs {reference_log_probs.shape}"
        )
    p = np.exp(policy_log_probs)
    kl = np.sum(_zero_where_unsupported(p, policy_log_probs - reference_log_probs), axis=-1)
    return np.where((kl < 0.0) & (kl >= KL_FLOOR), 0.0, kl)


def rank(value: float, values: Iterable[float]) -> int:
    """Number of elements >= value (so the unique maximum has rank 1)."""
    return int(sum(1 for v in values if v >= value))


def selected_count(rho: float, total: int) -> int:
    """k = ceil(rho * total) for rho > 0; rho == 0 selects nothing."""
    if rho < 0.0 or rho > 1.0:
        raise ConfigError(f"top-k ratio must lie in [0, 1], got {rho}")
    if rho == 0.0 or total == 0:
        return 0
    return int(-(-rho * total // 1))  # ceil without importing math for floats


def topk_select(stats: Sequence[tuple[TokenRef, float]], rho: float) -> frozenset[TokenRef]:
    """Exactly ceil(rho*|T|) refs with the largest values; ties broken by ascending ref."""
    k = selected_count(rho, len(stats))
    if k == 0:
        return frozenset()
    ordered = sorted(stats, key=lambda item: (-item[1], item[0]))
    return frozenset(ref for ref, _ in ordered[:k])


def build_mask(stats: Sequence[TokenStats], rho: float, per_sequence: bool = False) -> MaskSet:
    """Union of entropy Top-K and KL Top-K over one batch's valid tokens.

    Ranking is batch-global. per_sequence=True is an experimental variant
    that ranks within each sequence independently (k per sequence); it is
    not used by any training path and is untested.
    """
    k = selected_count(rho, len(stats))
    if not stats:
        log.warning("build_mask called with zero valid tokens; returning empty mask")
        return MaskSet.empty(0)
    if k == 0:
        return MaskSet.empty(len(stats))
    if per_sequence:
        by_seq: dict[int, list[TokenStats]] = {}
        for s in stats:
            by_seq.setdefault(s.ref.sequence_index, []).append(s)
        m_entropy: frozenset[TokenRef] = frozenset()
        m_kl: frozenset[TokenRef] = frozenset()
        for group in by_seq.values():
            m_entropy |= topk_select([(s.ref, s.entropy) for s in group], rho)
            m_kl |= topk_select([(s.ref, s.kl) for s in group], rho)
        return MaskSet(m_entropy, m_kl, m_entropy | m_kl, len(m_entropy), len(stats))
    m_entropy = topk_select([(s.ref, s.entropy) for s in stats], rho)
    m_kl = topk_select([(s.ref, s.kl) for s in stats], rho)
    return MaskSet(m_entropy, m_kl, m_entropy | m_kl, k, len(stats))


def iou(a: frozenset | set, b: frozenset | set) -> float:
    """Intersection over union; both empty counts as full agreement (1.0)."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def stats_from_log_probs(
    log_probs: np.ndarray, reference_log_probs: np.ndarray, valid_mask: np.ndarray
) -> list[TokenStats]:
    """TokenStats for every valid (sequence, position) in a batch.

    log_probs and reference_log_probs are (B, L, V); valid_mask is (B, L)
    bool selecting the response-token positions that make up T.
    """
    ent = batch_entropy(log_probs)
    kl = batch_kl(log_probs, reference_log_probs)
    out = []
    for b, t in zip(*np.nonzero(valid_mask)):
        out.append(TokenStats(TokenRef(int(b), int(t)), float(ent[b, t]), float(kl[b, t])))
    return out


def mask_dump_rows(step: int, stats: Sequence[TokenStats], mask: MaskSet, seq_offset: int = 0) -> list[dict]:
    """JSONL-ready rows {step, seq, pos, entropy, kl, in_mH, in_mKL}.

    seq_offset shifts sequence indices so micro-batches within one optimizer
    step get distinct ids.
    """
    rows = []
    for s in stats:
        rows.append(
            {
                "step": step,
                "seq": s.ref.sequence_index + seq_offset,
                "pos": s.ref.token_position,
                "entropy": s.entropy,
                "kl": s.kl,
                "in_mH": s.ref in mask.m_entropy,
                "in_mKL": s.ref in mask.m_kl,
            }
        )
    return rows
