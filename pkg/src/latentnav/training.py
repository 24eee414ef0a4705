"""Gated-trace training: data-mixture recipe and cross-mode aligned recipe.

Two binary gates select what the response must contain before the action
chunk: nothing (0,0), the textual trace (1,0), the latent visual trace
(0,1), or both traces in textual-then-visual order (1,1).

The mixture recipe samples a gate pair per example and minimizes plain CE
over the full response. The aligned recipe alternates, every iteration:
(i) one optimizer step on the direct (0,0) action loss, (ii) a re-forward
of the updated model to harvest detached per-action soft targets, then
(iii/iv) teacher-forced passes of the three trace modes and one optimizer
step on lambda_align * L_align + L_trace, where L_align distills the soft
targets into each trace mode's action positions and L_trace carries the
hard trace supervision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TrainingSample
from .errors import ContextOverflowError, DivergenceError, PositionMismatchError
from .gridworld import ACTIONS_BY_NAME
from .model import ModelConfig, SGDMomentum, backward_from_dlogits, forward
from .vocab import Vocabulary

ALL_MODES: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (1, 1))
MODE_NAMES = {(0, 0): "non-cot", (1, 0): "t-cot", (0, 1): "v-cot", (1, 1): "mm-cot"}
MODES_BY_NAME = {v: k for k, v in MODE_NAMES.items()}
COT_MODES: tuple[tuple[int, int], ...] = ((1, 0), (0, 1), (1, 1))


def parse_mode(name: str) -> tuple[int, int]:
    if name not in MODES_BY_NAME:
        raise ValueError(f"unknown mode {name!r}; expected one of {sorted(MODES_BY_NAME)}")
    return MODES_BY_NAME[name]


@dataclass(frozen=True)
class TrainConfig:
    recipe: str = "aligned"  # "mixture" | "aligned"
    enabled_modes: tuple[tuple[int, int], ...] = ALL_MODES
    lr: float = 0.2
    momentum: float = 0.9
    lambda_align: float = 1.0
    steps: int = 600
    batch_size: int = 8
    seed: int = 0
    k: int = 5
    trace_budget: int = 48
    include_hard_actions_in_cot: bool = False
    early_stop: bool = True
    early_stop_delta: float = 1e-4
    early_stop_window: int = 200

    def validate(self) -> None:
        if self.recipe not in ("mixture", "aligned"):
            raise ValueError(f"unknown recipe {self.recipe!r}")
        if self.lambda_align < 0:
            raise ValueError("lambda_align must be >= 0")
        for m in self.enabled_modes:
            if tuple(m) not in ALL_MODES:
                raise ValueError(f"unknown mode {m!r}")
        if self.recipe == "aligned" and (0, 0) not in [tuple(m) for m in self.enabled_modes]:
            raise ValueError("aligned recipe requires the non-cot mode")

    def to_json(self) -> dict:
        return {
            "recipe": self.recipe,
            "enabled_modes": [MODE_NAMES[tuple(m)] for m in self.enabled_modes],
            "lr": self.lr,
            "momentum": self.momentum,
            "lambda_align": self.lambda_align,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "k": self.k,
            "trace_budget": self.trace_budget,
            "include_hard_actions_in_cot": self.include_hard_actions_in_cot,
            "early_stop": self.early_stop,
            "early_stop_delta": self.early_stop_delta,
            "early_stop_window": self.early_stop_window,
        }

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "enabled_modes" in doc:
            doc["enabled_modes"] = tuple(parse_mode(m) for m in doc["enabled_modes"])
        return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# Sequence building


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (L,) int64
    query_len: int
    mode: tuple[int, int]
    trace_span: tuple[int, int]  # [start, end) token positions of the trace
    action_span: tuple[int, int]  # [start, end) token positions of the actions
    eos_pos: int
    dropped_history: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def response_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=np.float64)
        m[self.query_len :] = 1.0
        return m


def build_query(
    vocab: Vocabulary,
    instruction,
    history: list[list[int]],
    current: list[list[int]],
    stop_count: int,
    mode: tuple[int, int],
) -> list[int]:
    q: list[int] = [vocab.nav]
    q += vocab.encode_words(instruction)
    for frame in history:
        q.append(vocab.hist_open)
        q += [vocab.latent_token(c) for c in frame]
        q.append(vocab.hist_close)
    for view in current:
        q.append(vocab.obs_open)
        q += [vocab.latent_token(c) for c in view]
        q.append(vocab.obs_close)
    q.append(vocab.stop_count_token(stop_count))
    q += list(vocab.gating_tokens(*mode))
    return q


def build_sequence(
    sample: TrainingSample,
    mode: tuple[int, int],
    vocab: Vocabulary,
    context: int,
) -> TokenSequence:
    """Query + response per the gate pair; oldest history frames are dropped
    one at a time if the sequence would overflow the context."""
    g_t, g_v = mode
    trace: list[int] = []
    if g_t:
        trace.append(vocab.think_open)
        trace += vocab.encode_words(sample.t_cot)
        trace.append(vocab.think_close)
    if g_v:
        trace += [vocab.latent_token(c) for c in sample.v_cot]
    actions = [vocab.action_token(ACTIONS_BY_NAME[a]) for a in sample.actions]

    history = list(sample.history)
    dropped = 0
    while True:
        query = build_query(vocab, sample.instruction, history, sample.current, sample.stop_count, mode)
        total = len(query) + len(trace) + len(actions) + 1
        if total <= context:
            break
        if not history:
            raise ContextOverflowError(
                f"sequence of {total} tokens exceeds context {context} with no history left to drop"
            )
        history = history[1:]
        dropped += 1

    tokens = np.array(query + trace + actions + [vocab.eos], dtype=np.int64)
    ql = len(query)
    return TokenSequence(
        tokens=tokens,
        query_len=ql,
        mode=mode,
        trace_span=(ql, ql + len(trace)),
        action_span=(ql + len(trace), ql + len(trace) + len(actions)),
        eos_pos=ql + len(trace) + len(actions),
        dropped_history=dropped,
    )


def pad_batch(seqs: list[TokenSequence], pad_id: int) -> np.ndarray:
    length = max(len(s) for s in seqs)
    out = np.full((len(seqs), length), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s.tokens
    return out


def _shifted_targets(tokens_b: np.ndarray, seqs: list[TokenSequence], spans="response"):
    """Targets/mask aligned with logits: position t predicts token t+1.

    spans: "response" masks the whole response; a list of (start, end) pairs
    per sequence masks just those token positions.
    """
    B, L = tokens_b.shape
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, :-1] = tokens_b[:, 1:]
    mask = np.zeros((B, L), dtype=np.float64)
    for i, s in enumerate(seqs):
        if spans == "response":
            mask[i, s.query_len - 1 : len(s) - 1] = 1.0
        else:
            start, end = spans[i]
            if end > start:
                mask[i, start - 1 : end - 1] = 1.0
    return targets, mask


def _ce_stats(logits, targets, mask):
    """Loss, dlogits and per-sample masked means in one pass (float64)."""
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    logp = x - (np.log(z) + m)
    b_idx, t_idx = np.indices(targets.shape)
    nll = -logp[b_idx, t_idx, targets]
    n = mask.sum()
    loss = float((nll * mask).sum() / n)
    d = probs
    d[b_idx, t_idx, targets] -= 1.0
    d *= mask[..., None] / n
    per_sample = (nll * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1.0)
    return loss, d, per_sample


def sample_modes(
    rng: np.random.Generator, enabled: tuple[tuple[int, int], ...], n: int
) -> list[tuple[int, int]]:
    """Uniform gate-pair sampling, one draw per example."""
    picks = rng.integers(0, len(enabled), size=n)
    return [tuple(enabled[int(i)]) for i in picks]


# ---------------------------------------------------------------------------
# Mixture recipe


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    optimizer_steps: int = 0
    phase_direct_steps: int = 0
    phase_joint_steps: int = 0
    stopped_early: bool = False


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became non-finite at step {step}")


def _plateaued(losses: list[float], window: int, delta: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    cur = float(np.mean(losses[-window:]))
    return prev - cur < delta


def train_mixture(
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    vocab: Vocabulary,
    samples: list[TrainingSample],
    config: TrainConfig,
) -> TrainResult:
    """Eq.-style joint mixture: per example draw a gate pair uniformly from the
    enabled modes and minimize CE over the masked response."""
    config.validate()
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    enabled = tuple(tuple(m) for m in config.enabled_modes)
    opt = SGDMomentum(params, config.lr, config.momentum, total_steps=config.steps)
    result = TrainResult()
    losses: list[float] = []

    for step_i in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        modes = sample_modes(rng, enabled, config.batch_size)
        seqs = [
            build_sequence(samples[int(j)], mode, vocab, model_config.context)
            for j, mode in zip(idx, modes)
        ]
        tokens_b = pad_batch(seqs, vocab.pad)
        targets, mask = _shifted_targets(tokens_b, seqs)
        logits, cache = forward(params, tokens_b, model_config, want_cache=True)
        loss, dlogits, per_sample = _ce_stats(logits, targets, mask)
        _check_finite(loss, step_i)
        grads = backward_from_dlogits(params, cache, dlogits.astype(model_config.np_dtype), model_config)
        opt.step(params, grads)
        result.optimizer_steps += 1

        row = {"step": step_i, "loss": loss}
        for mode in enabled:
            vals = [per_sample[i] for i in range(len(modes)) if modes[i] == mode]
            row[f"loss_{MODE_NAMES[mode]}"] = float(np.mean(vals)) if vals else ""
        result.history.append(row)
        losses.append(loss)
        if config.early_stop and _plateaued(losses, config.early_stop_window, config.early_stop_delta):
            result.stopped_early = True
            break
    return result


# ---------------------------------------------------------------------------
# Aligned recipe


def soft_action_targets(
    logits: np.ndarray, seqs: list[TokenSequence], vocab: Vocabulary
) -> list[np.ndarray]:
    """Per-sample detached action-token distributions read off teacher-forced
    non-cot logits at each action position. Rows live on the 4-way action
    simplex (softmax over the action-token slice)."""
    lo, hi = vocab.action_range.start, vocab.action_range.stop
    out = []
    for i, s in enumerate(seqs):
        start, end = s.action_span
        rows = logits[i, start - 1 : end - 1, lo:hi].astype(np.float64)
        rows = rows - rows.max(axis=-1, keepdims=True)
        rows = np.exp(rows)
        rows /= rows.sum(axis=-1, keepdims=True)
        out.append(rows)
    return out


def align_loss(mode_logits, soft_targets: np.ndarray) -> float:
    """Sum over modes of the mean per-position soft cross-entropy.

    mode_logits: one (n_positions, n_actions) logit array per trace mode.
    Equals len(mode_logits) * H(soft_targets) iff every mode matches them.
    """
    soft_targets = np.asarray(soft_targets, dtype=np.float64)
    total = 0.0
    for logits in mode_logits:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != soft_targets.shape:
            raise PositionMismatchError(
                f"logits shape {logits.shape} vs soft targets {soft_targets.shape}"
            )
        m = logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m
        logp = logits - logz
        total += float(-(soft_targets * logp).sum(axis=-1).mean())
    return total


def _joint_mode_pass(
    params,
    model_config: ModelConfig,
    vocab: Vocabulary,
    seqs: list[TokenSequence],
    soft: list[np.ndarray],
    lam: float,
    include_hard_actions: bool,
):
    """One trace mode's teacher-forced pass inside phase (iv).

    Returns gradients plus (align CE, trace CE, mean KL(soft || predicted)).
    Soft targets enter only as constants: no gradient flows through them.
    """
    tokens_b = pad_batch(seqs, vocab.pad)
    logits, cache = forward(params, tokens_b, model_config, want_cache=True)
    x = logits.astype(np.float64)
    dlogits = np.zeros_like(x)

    # hard CE on trace positions (plus actions+eos when ablating)
    spans = [s.trace_span for s in seqs]
    if include_hard_actions:
        spans = [(s.trace_span[0], s.eos_pos + 1) for s in seqs]
    targets, mask = _shifted_targets(tokens_b, seqs, spans)
    n_trace = mask.sum()
    l_trace = 0.0
    if n_trace > 0:
        l_trace, d_trace, _ = _ce_stats(x.copy(), targets, mask)
        dlogits += d_trace

    # soft alignment on action positions
    lo, hi = vocab.action_range.start, vocab.action_range.stop
    n_act = sum(len(q) for q in soft)
    l_align = 0.0
    kl_sum = 0.0
    for i, s in enumerate(seqs):
        start, end = s.action_span
        rows = x[i, start - 1 : end - 1, lo:hi]
        if rows.shape[0] != len(soft[i]):
            raise PositionMismatchError("action position count mismatch across modes")
        rows = rows - rows.max(axis=-1, keepdims=True)
        e = np.exp(rows)
        p = e / e.sum(axis=-1, keepdims=True)
        q = soft[i]
        logp = np.log(p + 1e-300)
        l_align += float(-(q * logp).sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            logq = np.where(q > 0, np.log(np.maximum(q, 1e-300)), 0.0)
        kl_sum += float((q * (logq - logp)).sum())
        dlogits[i, start - 1 : end - 1, lo:hi] += lam * (p - q) / max(n_act, 1)
    l_align = l_align / max(n_act, 1)
    kl = kl_sum / max(n_act, 1)

    grads = backward_from_dlogits(params, cache, dlogits.astype(model_config.np_dtype), model_config)
    return grads, l_align, l_trace, kl


def train_aligned(
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    vocab: Vocabulary,
    samples: list[TrainingSample],
    config: TrainConfig,
) -> TrainResult:
    """Alternating cross-mode aligned training; see the module docstring for
    the per-iteration phase order. Exactly two optimizer steps per iteration."""
    config.validate()
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    cot_modes = tuple(m for m in config.enabled_modes if tuple(m) in COT_MODES)
    if not cot_modes:
        raise ValueError("aligned recipe needs at least one trace mode enabled")
    opt = SGDMomentum(params, config.lr, config.momentum, total_steps=2 * config.steps)
    result = TrainResult()
    joint_losses: list[float] = []
    direct_losses: list[float] = []

    for it in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        batch = [samples[int(j)] for j in idx]

        # phase (i): direct-mode step on hard action targets
        seqs00 = [build_sequence(s, (0, 0), vocab, model_config.context) for s in batch]
        tokens00 = pad_batch(seqs00, vocab.pad)
        targets, mask = _shifted_targets(tokens00, seqs00)
        logits, cache = forward(params, tokens00, model_config, want_cache=True)
        l_non, dlogits, _ = _ce_stats(logits, targets, mask)
        _check_finite(l_non, it)
        grads = backward_from_dlogits(params, cache, dlogits.astype(model_config.np_dtype), model_config)
        opt.step(params, grads)
        result.phase_direct_steps += 1

        # phase (ii): refresh soft targets from the updated parameters
        logits_new = forward(params, tokens00, model_config)
        soft = soft_action_targets(logits_new, seqs00, vocab)

        # phases (iii)/(iv): teacher-forced trace modes, one combined step
        grads_sum: dict[str, np.ndarray] | None = None
        l_align_total = 0.0
        l_trace_total = 0.0
        kl_vals = []
        for mode in cot_modes:
            seqs = [build_sequence(s, tuple(mode), vocab, model_config.context) for s in batch]
            g, l_align, l_trace, kl = _joint_mode_pass(
                params, model_config, vocab, seqs, soft,
                config.lambda_align, config.include_hard_actions_in_cot,
            )
            l_align_total += l_align
            l_trace_total += l_trace
            kl_vals.append(kl)
            if grads_sum is None:
                grads_sum = g
            else:
                for key in grads_sum:
                    grads_sum[key] += g[key]
        l_joint = config.lambda_align * l_align_total + l_trace_total
        _check_finite(l_joint, it)
        opt.step(params, grads_sum)
        result.phase_joint_steps += 1

        result.history.append(
            {
                "step": it,
                "loss_non_cot": l_non,
                "loss_align": l_align_total,
                "loss_cot": l_trace_total,
                "loss_joint": l_joint,
                "kl_soft_vs_cot": float(np.mean(kl_vals)),
            }
        )
        joint_losses.append(l_joint)
        direct_losses.append(l_non)
        if (
            config.early_stop
            and _plateaued(direct_losses, config.early_stop_window, config.early_stop_delta)
            and _plateaued(joint_losses, config.early_stop_window, config.early_stop_delta)
        ):
            result.stopped_early = True
            break
    result.optimizer_steps = result.phase_direct_steps + result.phase_joint_steps
    return result


def train(
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    vocab: Vocabulary,
    samples: list[TrainingSample],
    config: TrainConfig,
) -> TrainResult:
    if config.recipe == "mixture":
        return train_mixture(params, model_config, vocab, samples, config)
    return train_aligned(params, model_config, vocab, samples, config)


def write_training_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
