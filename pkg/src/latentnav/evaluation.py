"""Online multi-stage evaluation: episode loop, metric suite, APS timing.

The episode loop talks to the world only through render/step/success-check.
On a stop token the current subtask is verified and the agent moves on from
wherever it stands; exhausting the per-subtask action budget marks the
subtask failed and also moves on. T_nav accumulates policy time only
(decide calls, including observation encoding); environment render time is
tracked separately.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import gridworld as gw
from .data import DEFAULT_HISTORY_CAP, DEFAULT_K, DEFAULT_PREFIX, encode_view
from .model import ModelConfig, decode_greedy
from .training import MODE_NAMES, build_query
from .vocab import ResponseGrammar, Vocabulary


@dataclass(frozen=True)
class EvalConfig:
    k: int = DEFAULT_K
    prefix: int = DEFAULT_PREFIX
    history_cap: int = DEFAULT_HISTORY_CAP
    constrained: bool = True
    trace_budget: int = 48


@dataclass
class Decision:
    actions: list[gw.Action]
    generated: int
    grammar_ok: bool
    trace_len: int


class ModelPolicy:
    """Wraps (params, codec, vocab) behind the decide() interface."""

    def __init__(
        self,
        params,
        model_config: ModelConfig,
        vocab: Vocabulary,
        codec: codec_mod.Codec,
        eval_config: EvalConfig | None = None,
    ):
        self.params = params
        self.model_config = model_config
        self.vocab = vocab
        self.codec = codec
        self.cfg = eval_config or EvalConfig()

    def _encode_views(self, obs: gw.Observation) -> list[list[int]]:
        return [encode_view(self.codec, v, self.cfg.prefix) for v in obs.views()]

    def decide(self, instruction, history_views, obs, stop_count, mode) -> Decision:
        cfg = self.cfg
        hist_codes = [encode_view(self.codec, img, cfg.prefix) for img in history_views[-cfg.history_cap :]]
        cur_codes = self._encode_views(obs)
        latent_tokens = self.codec.config.schedule.token_count(cfg.prefix)
        g_t, g_v = mode
        worst = (2 + cfg.trace_budget if g_t else 0) + (latent_tokens if g_v else 0) + cfg.k + 1 + 4
        while True:
            query = build_query(self.vocab, instruction, hist_codes, cur_codes, stop_count, mode)
            if len(query) + worst <= self.model_config.context or not hist_codes:
                break
            hist_codes = hist_codes[1:]
        result = decode_greedy(
            self.params,
            self.model_config,
            self.vocab,
            query,
            mode,
            k=cfg.k,
            constrained=cfg.constrained,
            trace_budget=cfg.trace_budget,
            latent_tokens=latent_tokens,
        )
        grammar = ResponseGrammar(self.vocab, mode, cfg.k, cfg.trace_budget, latent_tokens)
        trace, action_tokens, _ = grammar.split(result.tokens)
        actions = [self.vocab.action_from_token(t) for t in action_tokens]
        return Decision(
            actions=actions,
            generated=result.generated,
            grammar_ok=result.grammar_ok,
            trace_len=len(trace),
        )


class ExpertPolicy:
    """Replays the shortest-path expert's actions chunk by chunk; the oracle
    upper bound for the harness."""

    def __init__(self, world: gw.GridWorld, task: gw.Task, k: int = DEFAULT_K):
        self.script = [a for seg in gw.expert_segments(world, task) for a in seg]
        self.k = k
        self.cursor = 0

    def decide(self, instruction, history_views, obs, stop_count, mode) -> Decision:
        chunk = self.script[self.cursor : self.cursor + self.k]
        self.cursor += len(chunk)
        return Decision(actions=list(chunk), generated=len(chunk) + 1, grammar_ok=True, trace_len=0)


@dataclass
class EpisodeReport:
    task_id: str
    mode: str
    subtask_success: list[int]
    agent_lengths: list[int]
    expert_lengths: list[int]
    n_actions: int
    t_nav: float  # policy seconds (decide calls)
    t_total: float  # wall clock including environment time
    generated_tokens: int
    decisions: int
    grammar_violations: int

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "mode": self.mode,
            "subtask_success": self.subtask_success,
            "agent_lengths": self.agent_lengths,
            "expert_lengths": self.expert_lengths,
            "n_actions": self.n_actions,
            "t_nav": self.t_nav,
            "t_total": self.t_total,
            "generated_tokens": self.generated_tokens,
            "decisions": self.decisions,
            "grammar_violations": self.grammar_violations,
        }


def run_episode(
    policy,
    world: gw.GridWorld,
    task: gw.Task,
    mode: tuple[int, int],
    cfg: EvalConfig | None = None,
    task_id: str = "task",
) -> EpisodeReport:
    cfg = cfg or EvalConfig()
    n_sub = len(task.subgoals)
    budgets = list(task.budgets) if task.budgets else None
    expert_lengths = list(task.expert_lengths) if task.expert_lengths else None
    if budgets is None or expert_lengths is None:
        segments = gw.expert_segments(world, task)
        expert_lengths = [len(s) for s in segments]
        budgets = [
            world.config.budget_factor * n + world.config.budget_slack for n in expert_lengths
        ]

    state = task.start
    subtask = 0
    success = [0] * n_sub
    agent_lengths = [0] * n_sub
    history: list[np.ndarray] = []
    budget_used = 0
    n_actions = 0
    generated = 0
    decisions = 0
    violations = 0
    t_policy = 0.0
    t_start = time.perf_counter()

    while subtask < n_sub:
        obs = gw.render(world, state)
        t0 = time.perf_counter()
        decision = policy.decide(task.instruction, history, obs, subtask, mode)
        t_policy += time.perf_counter() - t0
        decisions += 1
        generated += decision.generated

        if not decision.actions:
            # malformed decode: burn one budget unit so episodes terminate
            violations += 1
            budget_used += 1
            if budget_used >= budgets[subtask]:
                subtask += 1
                budget_used = 0
            continue
        if not decision.grammar_ok:
            violations += 1

        current_obs = obs
        for j, action in enumerate(decision.actions[: cfg.k]):
            if subtask >= n_sub:
                break
            if j > 0:
                current_obs = gw.render(world, state)
            history.append(current_obs.front)
            state = gw.step(world, state, action)
            agent_lengths[subtask] += 1
            budget_used += 1
            n_actions += 1
            if action == gw.Action.STOP:
                if gw.check_subtask_success(world, state, task.subgoals[subtask]):
                    success[subtask] = 1
                subtask += 1
                budget_used = 0
            elif budget_used >= budgets[subtask]:
                subtask += 1
                budget_used = 0
        history = history[-cfg.history_cap :]

    return EpisodeReport(
        task_id=task_id,
        mode=MODE_NAMES[tuple(mode)],
        subtask_success=success,
        agent_lengths=agent_lengths,
        expert_lengths=expert_lengths,
        n_actions=n_actions,
        t_nav=t_policy,
        t_total=time.perf_counter() - t_start,
        generated_tokens=generated,
        decisions=decisions,
        grammar_violations=violations,
    )


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricSummary:
    sr: float
    isr: float
    csr: float
    cgt: float
    aps: float
    episodes: int
    aps_total: float = 0.0
    tokens_per_action: float = 0.0

    def to_json(self) -> dict:
        return {
            "sr": self.sr,
            "isr": self.isr,
            "csr": self.csr,
            "cgt": self.cgt,
            "aps": self.aps,
            "aps_total": self.aps_total,
            "tokens_per_action": self.tokens_per_action,
            "episodes": self.episodes,
        }


def metrics(reports: list[EpisodeReport]) -> MetricSummary:
    """SR/ISR/CSR/CGT are episode means; CSR uses the prefix-success
    indicator and CGT weights it by expert-vs-agent length per subtask."""
    if not reports:
        raise ValueError("no episode reports")
    sr_vals, isr_vals, csr_vals, cgt_vals = [], [], [], []
    for rep in reports:
        succ = rep.subtask_success
        m = len(succ)
        sr_vals.append(1.0 if all(succ) else 0.0)
        isr_vals.append(sum(succ) / m)
        prefix = []
        ok = True
        for j in range(m):
            ok = ok and bool(succ[j])
            prefix.append(1.0 if ok else 0.0)
        csr_vals.append(sum(prefix) / m)
        cgt = 0.0
        for j in range(m):
            lgt = rep.expert_lengths[j]
            lag = rep.agent_lengths[j]
            cgt += prefix[j] * (lgt / max(lgt, lag, 1))
        cgt_vals.append(cgt / m)
    total_actions = sum(r.n_actions for r in reports)
    total_t = sum(r.t_nav for r in reports)
    total_t_all = sum(r.t_total for r in reports)
    total_gen = sum(r.generated_tokens for r in reports)
    return MetricSummary(
        sr=float(np.mean(sr_vals)),
        isr=float(np.mean(isr_vals)),
        csr=float(np.mean(csr_vals)),
        cgt=float(np.mean(cgt_vals)),
        aps=(total_actions / total_t) if total_t > 0 and total_actions > 0 else 0.0,
        aps_total=(total_actions / total_t_all) if total_t_all > 0 and total_actions > 0 else 0.0,
        tokens_per_action=(total_gen / total_actions) if total_actions > 0 else 0.0,
        episodes=len(reports),
    )


def measure_aps(
    policy,
    episodes: list[tuple[gw.GridWorld, gw.Task]],
    mode: tuple[int, int],
    cfg: EvalConfig | None = None,
    warmup: int = 1,
) -> dict:
    """Wall-clock APS over a task set after a discarded warm-up episode."""
    cfg = cfg or EvalConfig()
    if warmup and episodes:
        run_episode(policy, episodes[0][0], episodes[0][1], mode, cfg, task_id="warmup")
    reports = [
        run_episode(policy, world, task, mode, cfg, task_id=f"aps-{i}")
        for i, (world, task) in enumerate(episodes)
    ]
    summary = metrics(reports)
    return {
        "aps": summary.aps,
        "aps_total": summary.aps_total,
        "tokens_per_action": summary.tokens_per_action,
        "n_actions": sum(r.n_actions for r in reports),
        "t_nav": sum(r.t_nav for r in reports),
        "reports": reports,
    }


# ---------------------------------------------------------------------------
# Report output


def write_reports_jsonl(reports: list[EpisodeReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
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


def svg_bar_chart(labels: list[str], series: dict[str, list[float]], title: str, path: str | Path) -> None:
    """Dependency-free grouped bar chart."""
    width, height, pad = 640, 360, 48
    n_groups = max(1, len(labels))
    n_series = max(1, len(series))
    vmax = max((max(vals) if vals else 0.0) for vals in series.values()) or 1.0
    group_w = (width - 2 * pad) / n_groups
    bar_w = group_w / (n_series + 1)
    palette = ["#4878cf", "#e24a33", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
    ]
    for gi, label in enumerate(labels):
        x0 = pad + gi * group_w
        parts.append(
            f'<text x="{x0 + group_w/2}" y="{height-pad+16}" text-anchor="middle" font-size="10">{label}</text>'
        )
        for si, (name, vals) in enumerate(series.items()):
            v = vals[gi] if gi < len(vals) else 0.0
            h = (height - 2 * pad) * (v / vmax)
            x = x0 + (si + 0.5) * bar_w
            y = height - pad - h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="{palette[si % len(palette)]}"/>'
            )
    for si, name in enumerate(series):
        parts.append(
            f'<rect x="{pad + si*120}" y="28" width="10" height="10" fill="{palette[si % len(palette)]}"/>'
            f'<text x="{pad + si*120 + 14}" y="38" font-size="10">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def svg_line_chart(xs: list[float], series: dict[str, list[float]], title: str, path: str | Path) -> None:
    width, height, pad = 640, 360, 48
    vmax = max((max(vals) if vals else 0.0) for vals in series.values()) or 1.0
    xmin, xmax = (min(xs), max(xs)) if xs else (0.0, 1.0)
    span = (xmax - xmin) or 1.0
    palette = ["#4878cf", "#e24a33", "#6acc65", "#d65f5f", "#956cb4"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
    ]
    for si, (name, vals) in enumerate(series.items()):
        pts = []
        for x, v in zip(xs, vals):
            px = pad + (width - 2 * pad) * ((x - xmin) / span)
            py = height - pad - (height - 2 * pad) * (v / vmax)
            pts.append(f"{px:.1f},{py:.1f}")
        parts.append(
            f'<polyline points="{" ".join(pts)}" fill="none" stroke="{palette[si % len(palette)]}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{pad + si*120}" y="38" font-size="10" fill="{palette[si % len(palette)]}">{name}</text>'
        )
    for x, lab in zip(xs, xs):
        px = pad + (width - 2 * pad) * ((x - xmin) / span)
        parts.append(f'<text x="{px:.1f}" y="{height-pad+16}" text-anchor="middle" font-size="10">{lab}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
