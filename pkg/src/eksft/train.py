"""Optimizer and the two training loops (supervised stage, then RL stage).

Supervised stage: per optimizer step, G micro-batches are processed; each
contributes unnormalized loss sums (and their logit-gradient sums), which
are normalized once per step. That makes accumulation over G micro-batches
numerically equal to a single step on the concatenated batch, with masks
still built per micro-batch (the unit whose logits coexist).

RL stage: group rollouts per prompt, binary verifier rewards, group-mean
normalized advantages, and an asymmetrically clipped policy-gradient
surrogate (clip band [1 - c_l, 1 + c_h]). No reference/KL term. A step
whose gradient is exactly zero (all groups reward-uniform) is skipped so
parameters stay bit-identical.

Wall-clock timings go to a separate timings.csv: metrics.csv must stay
byte-identical across reruns of the same config.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as mdl
from . import numerics as nk
from . import objective as obj
from . import selection as sel
from .errors import ConfigError, InputError, LengthError, NumericError
from .evaluation import sample_group
from .tasks import PAD, Sample

log = logging.getLogger(__name__)

SFT_METRICS_COLUMNS = [
    "step", "epoch", "method", "loss_total", "ce_masked", "entropy_reg", "kl_reg",
    "n_supervised", "n_masked", "mean_entropy", "mean_kl", "mask_iou",
]
RL_METRICS_COLUMNS = [
    "step", "pg_loss", "mean_reward", "zero_variance_frac", "mean_entropy", "mean_gen_len",
]


@dataclass(frozen=True)
class SftConfig:
    method: str = "sft"
    learning_rate: float = 1e-5
    epochs: int = 8
    grad_accum: int = 8
    batch_size: int = 1
    rho: float = 0.2
    lambda_h: float = 0.05
    lambda_kl: float = 0.05
    drop_fraction: float = 0.10
    weight_decay: float = 0.0
    seed: int = 0
    max_sample_len: int | None = None
    supervise_prompt: bool = False

    def __post_init__(self):
        if self.method not in obj.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {obj.METHODS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.grad_accum < 1 or self.batch_size < 1:
            raise ConfigError("epochs, grad_accum and batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.lambda_h < 0 or self.lambda_kl < 0:
            raise ConfigError("regularizer weights must be >= 0")
        if not (0.0 <= self.drop_fraction < 1.0):
            raise ConfigError("drop_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class RlConfig:
    learning_rate: float = 1e-6
    total_steps: int = 200
    rollout_group_size: int = 16
    prompts_per_step: int = 8
    clip_low: float = 0.2
    clip_high: float = 0.28
    temperature: float = 1.0
    max_gen_len: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.clip_low < 1.0):
            raise ConfigError(f"clip_low must lie in (0, 1), got {self.clip_low}")
        if self.clip_high <= 0:
            raise ConfigError(f"clip_high must be > 0, got {self.clip_high}")
        if self.rollout_group_size < 2:
            raise ConfigError("rollout_group_size must be >= 2")
        if self.total_steps < 1 or self.prompts_per_step < 1:
            raise ConfigError("total_steps and prompts_per_step must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass
class SftMetricsRecord:
    step: int
    epoch: int
    method: str
    loss_total: float
    ce_masked: float
    entropy_reg: float
    kl_reg: float
    n_supervised: int
    n_masked: int
    mean_entropy: float
    mean_kl: float
    mask_iou: float | None


@dataclass
class RlMetricsRecord:
    step: int
    pg_loss: float
    mean_reward: float
    zero_variance_frac: float
    mean_entropy: float
    mean_gen_len: float


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: Path, columns: list[str], records: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, col)) for col in columns])


# -----------------------------------------------------------------------------
# AdamW
# -----------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adamw_init(params: mdl.ParameterSet) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
    )


def adamw_step(
    params: mdl.ParameterSet,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        diag = {name: {"shape": list(grads[name].shape)} for name in bad}
        log.error("non-finite gradients at step %d: %s", state.t + 1, json.dumps(diag))
        raise NumericError(f"non-finite gradient for tensors {bad}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update


# -----------------------------------------------------------------------------
# batching
# -----------------------------------------------------------------------------


def batchify(samples: Sequence[Sample], supervise_prompt: bool = False):
    """Pack samples into (inputs, targets, valid_mask) arrays.

    Inputs are tokens[:-1], targets tokens[1:]; valid marks the positions
    whose target is a response token (or every real position when
    supervise_prompt is set, as in pretraining).
    """
    if not samples:
        raise InputError("empty batch")
    max_len = max(len(s.tokens) for s in samples) - 1
    B = len(samples)
    inputs = np.full((B, max_len), PAD, dtype=np.int64)
    targets = np.full((B, max_len), PAD, dtype=np.int64)
    valid = np.zeros((B, max_len), dtype=bool)
    for i, s in enumerate(samples):
        toks = np.asarray(s.tokens, dtype=np.int64)
        n = toks.size - 1
        inputs[i, :n] = toks[:-1]
        targets[i, :n] = toks[1:]
        start = 0 if supervise_prompt else len(s.prompt_tokens) - 1
        valid[i, start:n] = True
    return inputs, targets, valid


# -----------------------------------------------------------------------------
# supervised stage
# -----------------------------------------------------------------------------


def _accumulate(total: dict[str, np.ndarray] | None, part: dict[str, np.ndarray]):
    if total is None:
        return {k: v.copy() for k, v in part.items()}
    for k, v in part.items():
        total[k] += v
    return total


def _combine_step_grads(params, sup, n_sup, reg, n_reg):
    grads = mdl.zero_grads(params)
    if sup is not None and n_sup > 0:
        for k in grads:
            grads[k] += sup[k] / n_sup
    if reg is not None and n_reg > 0:
        for k in grads:
            grads[k] += reg[k] / n_reg
    return grads


def train_sft(
    params: mdl.ParameterSet,
    reference: mdl.ReferenceModel,
    dataset: Sequence[Sample],
    config: SftConfig,
    run_dir: str | Path | None = None,
) -> tuple[mdl.ParameterSet, list[SftMetricsRecord]]:
    """Algorithmic core of the supervised stage; mutates and returns params."""
    if not dataset:
        raise InputError("empty dataset")
    cfg_model = params.config
    limit = config.max_sample_len or cfg_model.context_len
    for i, s in enumerate(dataset):
        if len(s.tokens) - 1 > min(limit, cfg_model.context_len):
            raise LengthError(f"sample {i} has {len(s.tokens)} tokens, limit is {limit}")

    out_dir = Path(run_dir) if run_dir is not None else None
    dump_rows: list[dict] = []
    records: list[SftMetricsRecord] = []
    timings: list[tuple[int, float]] = []
    opt = adamw_init(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    group_size = config.batch_size * config.grad_accum
    step = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        for g0 in range(0, len(order), group_size):
            t_start = time.perf_counter()
            group_idx = order[g0 : g0 + group_size]
            sup_grads = reg_grads = None
            ce_sum = h_sum = kl_sum = 0.0
            n_sup = n_reg = n_masked = 0
            step_mh: set = set()
            step_mkl: set = set()
            ent_vals: list[float] = []
            kl_vals: list[float] = []
            lambda_h, lambda_kl = config.lambda_h, config.lambda_kl
            uses_mask = config.method in ("eksft", "random_mask")

            for micro, m0 in enumerate(range(0, len(group_idx), config.batch_size)):
                batch = [dataset[i] for i in group_idx[m0 : m0 + config.batch_size]]
                inputs, targets, valid = batchify(batch, config.supervise_prompt)
                logits, cache = mdl.forward(params, inputs)
                ref_logits = reference.logits(inputs)
                rng = (
                    np.random.default_rng([config.seed, 2, step, micro])
                    if config.method == "random_mask"
                    else None
                )
                terms = obj.objective_terms(
                    config.method,
                    logits,
                    ref_logits,
                    targets,
                    valid,
                    rho=config.rho,
                    lambda_h=lambda_h,
                    lambda_kl=lambda_kl,
                    drop_fraction=config.drop_fraction,
                    rng=rng,
                )
                if terms.n_sup > 0:
                    sup_grads = _accumulate(sup_grads, mdl.backward(params, cache, terms.d_ce_sum))
                if terms.d_reg_sum is not None:
                    reg_grads = _accumulate(reg_grads, mdl.backward(params, cache, terms.d_reg_sum))
                ce_sum += terms.ce_sum
                h_sum += terms.h_sum
                kl_sum += terms.kl_sum
                n_sup += terms.n_sup
                n_reg += terms.n_reg
                ent_vals.extend(s.entropy for s in terms.stats)
                kl_vals.extend(s.kl for s in terms.stats)
                if terms.mask is not None:
                    n_masked += len(terms.mask.m_union)
                    offset = micro * config.batch_size
                    if uses_mask:
                        dump_rows.extend(sel.mask_dump_rows(step, terms.stats, terms.mask, offset))
                    step_mh.update(
                        (r.sequence_index + offset, r.token_position) for r in terms.mask.m_entropy
                    )
                    step_mkl.update(
                        (r.sequence_index + offset, r.token_position) for r in terms.mask.m_kl
                    )

            grads = _combine_step_grads(params, sup_grads, n_sup, reg_grads, n_reg)
            adamw_step(
                params, grads, opt, config.learning_rate, weight_decay=config.weight_decay
            )

            ce = ce_sum / n_sup if n_sup else 0.0
            h = h_sum / n_reg if n_reg else 0.0
            kl = kl_sum / n_reg if n_reg else 0.0
            records.append(
                SftMetricsRecord(
                    step=step,
                    epoch=epoch,
                    method=config.method,
                    loss_total=obj.compose_total(ce, h, kl, lambda_h, lambda_kl),
                    ce_masked=ce,
                    entropy_reg=h,
                    kl_reg=kl,
                    n_supervised=n_sup,
                    n_masked=n_masked,
                    mean_entropy=float(np.mean(ent_vals)) if ent_vals else 0.0,
                    mean_kl=float(np.mean(kl_vals)) if kl_vals else 0.0,
                    mask_iou=sel.iou(step_mh, step_mkl) if uses_mask else None,
                )
            )
            timings.append((step, time.perf_counter() - t_start))
            step += 1

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", SFT_METRICS_COLUMNS, records)
        if dump_rows:
            with open(out_dir / "mask_dump.jsonl", "w", encoding="utf-8") as fh:
                for row in dump_rows:
                    fh.write(json.dumps(row) + "\n")
        with open(out_dir / "timings.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "seconds"])
            w.writerows(timings)
        mdl.save_checkpoint(params, out_dir / "checkpoints" / "final")
    return params, records


# -----------------------------------------------------------------------------
# RL stage
# -----------------------------------------------------------------------------


def group_advantages(rewards) -> np.ndarray:
    """Group-mean-centered, std-normalized advantages; uniform groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise InputError(f"group size must be >= 2, got {r.size}")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + 1e-8)


def clipped_pg_loss(
    new_logprobs, old_logprobs, advantages, c_l: float, c_h: float
) -> tuple[float, np.ndarray]:
    """Token-mean of -min(ratio*A, clip(ratio, 1-c_l, 1+c_h)*A); grad w.r.t. new logprobs."""
    new = np.asarray(new_logprobs, dtype=np.float64)
    old = np.asarray(old_logprobs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if not (new.shape == old.shape == adv.shape):
        raise InputError(
            f"misaligned shapes: new {new.shape}, old {old.shape}, advantages {adv.shape}"
        )
    with np.errstate(over="ignore"):
        ratio = np.exp(new - old)
    if not np.all(np.isfinite(ratio)):
        raise NumericError("non-finite importance ratio")
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - c_l, 1.0 + c_h) * adv
    n = new.size
    loss = float(-np.minimum(s1, s2).sum() / n)
    # Gradient flows only where the unclipped branch is active (ties included).
    d = np.where(s1 <= s2, -adv * ratio, 0.0) / n
    return loss, d


def train_rl(
    params: mdl.ParameterSet,
    prompts: Sequence[Sample],
    verifier: Callable[[Sample, list[int]], bool],
    config: RlConfig,
    run_dir: str | Path | None = None,
) -> tuple[mdl.ParameterSet, list[RlMetricsRecord]]:
    """Group-rollout clipped policy gradient with binary verifier rewards."""
    if not prompts:
        raise InputError("empty prompt set")
    opt = adamw_init(params)
    records: list[RlMetricsRecord] = []
    timings: list[tuple[int, float]] = []
    out_dir = Path(run_dir) if run_dir is not None else None
    G = config.rollout_group_size

    for step in range(config.total_steps):
        t_start = time.perf_counter()
        step_rng = np.random.default_rng([config.seed, 3, step])
        n_take = min(config.prompts_per_step, len(prompts))
        chosen = step_rng.choice(len(prompts), size=n_take, replace=False)

        episodes = []  # (sample, generated tokens, old logprobs, advantage)
        rewards_all: list[float] = []
        ent_vals: list[float] = []
        gen_lens: list[int] = []
        zero_var = 0
        for pi in chosen:
            s = prompts[int(pi)]
            rng = np.random.default_rng([config.seed, 4, step, int(pi)])
            group = sample_group(
                params, s.prompt_tokens, G, config.temperature, config.max_gen_len, rng
            )
            rewards = []
            for g in group:
                try:
                    rewards.append(1.0 if verifier(s, g.tokens) else 0.0)
                except Exception:
                    log.warning("verifier raised; scoring 0", exc_info=True)
                    rewards.append(0.0)
            rewards_all.extend(rewards)
            adv = group_advantages(rewards)
            if np.all(adv == 0.0):
                zero_var += 1
            for g, a in zip(group, adv):
                if g.tokens:
                    episodes.append((s, g.tokens, g.logprobs, float(a)))
                ent_vals.extend(g.entropies)
                gen_lens.append(len(g.tokens))

        pg_loss = 0.0
        if episodes:
            pg_loss = _rl_update(params, opt, episodes, config)
        records.append(
            RlMetricsRecord(
                step=step,
                pg_loss=pg_loss,
                mean_reward=float(np.mean(rewards_all)) if rewards_all else 0.0,
                zero_variance_frac=zero_var / max(len(chosen), 1),
                mean_entropy=float(np.mean(ent_vals)) if ent_vals else 0.0,
                mean_gen_len=float(np.mean(gen_lens)) if gen_lens else 0.0,
            )
        )
        timings.append((step, time.perf_counter() - t_start))

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", RL_METRICS_COLUMNS, records)
        with open(out_dir / "timings.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "seconds"])
            w.writerows(timings)
        mdl.save_checkpoint(params, out_dir / "checkpoints" / "final")
    return params, records


def _rl_update(params, opt, episodes, config: RlConfig) -> float:
    """One clipped-PG update over all episodes of a step; returns the loss."""
    cfg = params.config
    max_len = max(len(s.prompt_tokens) + len(toks) for s, toks, _, _ in episodes) - 1
    max_len = min(max_len, cfg.context_len)
    B = len(episodes)
    inputs = np.full((B, max_len), PAD, dtype=np.int64)
    gen_pos: list[tuple[int, int, int]] = []  # (row, position, token)
    old_lp: list[float] = []
    adv: list[float] = []
    for i, (s, toks, lps, a) in enumerate(episodes):
        full = list(s.prompt_tokens) + list(toks)
        n_in = min(len(full) - 1, max_len)
        inputs[i, :n_in] = full[: n_in]
        p0 = len(s.prompt_tokens) - 1
        for j, (token, lp) in enumerate(zip(toks, lps)):
            pos = p0 + j
            if pos >= max_len:
                break
            gen_pos.append((i, pos, token))
            old_lp.append(lp)
            adv.append(a)

    logits, cache = mdl.forward(params, inputs)
    log_probs = nk.log_softmax(logits / config.temperature)
    rows = np.array([(r, p) for r, p, _ in gen_pos], dtype=np.int64)
    tok = np.array([t for _, _, t in gen_pos], dtype=np.int64)
    new_lp = log_probs[rows[:, 0], rows[:, 1], tok]

    loss, d_lp = clipped_pg_loss(new_lp, np.array(old_lp), np.array(adv), config.clip_low, config.clip_high)

    dlogits = np.zeros_like(logits)
    probs = np.exp(log_probs[rows[:, 0], rows[:, 1]])
    contrib = -d_lp[:, None] * probs
    contrib[np.arange(tok.size), tok] += d_lp
    # d log_softmax(z/T)/dz = (onehot - softmax) / T
    np.add.at(dlogits, (rows[:, 0], rows[:, 1]), contrib / config.temperature)

    grads = mdl.backward(params, cache, dlogits)
    if any(np.any(g != 0.0) for g in grads.values()):
        adamw_step(params, grads, opt, config.learning_rate, weight_decay=config.weight_decay)
    return loss
