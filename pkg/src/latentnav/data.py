"""Expert trajectories -> sliced, annotated, tokenized training samples.

Each trajectory is cut into non-overlapping k-action slices (start indices
1, 1+k, ...; the final slice keeps the remainder). A slice becomes one
training sample holding the instruction, tokenized history/current
observations, a deterministic template-generated textual trace, the latent
visual trace (front view after the chunk, encoded and flattened), and the
ground-truth action chunk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import gridworld as gw
from .errors import HashMismatchError, ReplayError
from .serialization import canonical_json, sha256_bytes

DATASET_FORMAT_VERSION = 1

DEFAULT_K = 5
DEFAULT_PREFIX = 4
DEFAULT_HISTORY_CAP = 10


@dataclass
class ExpertTrajectory:
    world: gw.GridWorld
    task: gw.Task
    pairs: list[tuple[gw.Observation, gw.Action]]
    uid: str = ""


@dataclass
class Slice:
    t: int  # 1-indexed start position within the trajectory
    state: gw.AgentState  # agent state before executing the chunk
    history_fronts: list[np.ndarray]  # front views before each earlier action
    current: gw.Observation
    actions: list[gw.Action]
    stop_count: int


@dataclass
class TrainingSample:
    uid: str
    world_seed: int
    task_index: int
    instruction: tuple[str, ...]
    t: int
    stop_count: int
    state: tuple[int, int, int]  # x, y, heading
    history: list[list[int]]  # latent codes per retained front view
    current: list[list[int]]  # left/front/right latent codes
    t_cot: tuple[str, ...]
    v_cot: list[int]
    actions: tuple[str, ...]
    augmented: bool = False

    def key_fields(self) -> tuple:
        """Supervised targets; augmentation must never touch these."""
        return (self.instruction, tuple(self.t_cot), tuple(self.v_cot), self.actions)


def slice_trajectory(traj: ExpertTrajectory, k: int = DEFAULT_K) -> list[Slice]:
    """Non-overlapping slices whose chunks concatenate to the full action list."""
    if not traj.pairs:
        raise ValueError("empty trajectory")
    actions = [a for _, a in traj.pairs]
    slices = []
    state = traj.task.start
    stop_count = 0
    fronts: list[np.ndarray] = []
    for start in range(0, len(actions), k):
        chunk = actions[start : start + k]
        slices.append(
            Slice(
                t=start + 1,
                state=state,
                history_fronts=list(fronts),
                current=traj.pairs[start][0],
                actions=list(chunk),
                stop_count=stop_count,
            )
        )
        for offset, action in enumerate(chunk):
            fronts.append(traj.pairs[start + offset][0].front)
            state = gw.step(traj.world, state, action)
            if action == gw.Action.STOP:
                stop_count += 1
    return slices


# ---------------------------------------------------------------------------
# Textual trace annotation (deterministic template oracle)


def _distance_bucket(dist: int) -> str:
    if dist <= 2:
        return "near"
    if dist <= 6:
        return "mid"
    return "far"


def annotate_textual(slc: Slice, world: gw.GridWorld, task: gw.Task) -> tuple[str, ...]:
    """Four-part trace from ground truth: plan, progress, action rationale,
    expected view after the chunk. Closed template vocabulary."""
    words: list[str] = ["plan"]
    for i, obj_id in enumerate(task.subgoals):
        obj = world.objects[obj_id]
        if i > 0:
            words.append("then")
        words.extend(["visit", obj.color, obj.type_])

    cur_idx = min(slc.stop_count, len(task.subgoals) - 1)
    cur_obj = world.objects[task.subgoals[cur_idx]]
    dist = gw.chebyshev(slc.state.pos, cur_obj.cell)
    words += ["done", str(min(slc.stop_count, 9)), "stops"]
    words += ["target", cur_obj.color, cur_obj.type_, "distance", _distance_bucket(dist)]

    words.append("next")
    words += [gw.ACTION_NAMES[a] for a in slc.actions]
    if gw.Action.STOP in slc.actions:
        words += ["approach", cur_obj.color, cur_obj.type_]
    else:
        words += ["continue", "toward", cur_obj.color, cur_obj.type_]

    end_state = gw.replay(world, slc.state, slc.actions)
    stops_after = slc.stop_count + sum(1 for a in slc.actions if a == gw.Action.STOP)
    next_idx = min(stops_after, len(task.subgoals) - 1)
    next_obj = world.objects[task.subgoals[next_idx]]
    frustum = gw.visible_cells(world, end_state.pos, end_state.heading)
    if next_obj.cell in frustum:
        words += ["expect", next_obj.color, next_obj.type_, "visible"]
    else:
        words += ["expect", "path", "clear"]
    return tuple(words)


def encode_view(codec: codec_mod.Codec, image: np.ndarray, prefix: int = DEFAULT_PREFIX) -> list[int]:
    return [int(i) for i in codec_mod.encode(codec, image).flatten(prefix)]


def extract_visual_target(
    slc: Slice, world: gw.GridWorld, codec: codec_mod.Codec, prefix: int = DEFAULT_PREFIX
) -> list[int]:
    """Latent codes of the front view after replaying the chunk."""
    try:
        end_state = gw.replay(world, slc.state, slc.actions)
    except Exception as exc:  # pragma: no cover - replay is total by contract
        raise ReplayError(str(exc)) from exc
    view = gw.render(world, end_state).front
    return encode_view(codec, view, prefix)


def sample_from_slice(
    slc: Slice,
    traj: ExpertTrajectory,
    codec: codec_mod.Codec,
    prefix: int = DEFAULT_PREFIX,
    history_cap: int = DEFAULT_HISTORY_CAP,
    task_index: int = 0,
) -> TrainingSample:
    world, task = traj.world, traj.task
    fronts = slc.history_fronts[-history_cap:] if history_cap else list(slc.history_fronts)
    return TrainingSample(
        uid=f"{traj.uid}-t{slc.t}",
        world_seed=world.seed,
        task_index=task_index,
        instruction=tuple(task.instruction),
        t=slc.t,
        stop_count=slc.stop_count,
        state=(slc.state.pos[0], slc.state.pos[1], int(slc.state.heading)),
        history=[encode_view(codec, img, prefix) for img in fronts],
        current=[encode_view(codec, v, prefix) for v in slc.current.views()],
        t_cot=annotate_textual(slc, world, task),
        v_cot=extract_visual_target(slc, world, codec, prefix),
        actions=tuple(gw.ACTION_NAMES[a] for a in slc.actions),
    )


# ---------------------------------------------------------------------------
# History augmentation


def augment(sample: TrainingSample, rng: np.random.Generator) -> list[TrainingSample]:
    """Up to two variants perturbing only the history frames.

    Variant A (needs >=10 frames, p=0.5): stride-2 subsample {h1, h3, h5, ...}.
    Variant B (needs >=7 frames): remove the first two frames with p=0.5,
    and/or (p=0.5, only while >=7 frames remain) a random consecutive pair;
    discarded unless at least one perturbation actually triggered.
    """
    variants: list[TrainingSample] = []
    n = len(sample.history)

    if n >= 10 and rng.random() < 0.5:
        hist = [list(f) for f in sample.history[::2]]
        variants.append(_with_history(sample, hist))

    if n >= 7:
        hist = [list(f) for f in sample.history]
        triggered = False
        if rng.random() < 0.5:
            hist = hist[2:]
            triggered = True
        if rng.random() < 0.5 and len(hist) >= 7:
            cut = int(rng.integers(0, len(hist) - 1))
            hist = hist[:cut] + hist[cut + 2 :]
            triggered = True
        if triggered:
            variants.append(_with_history(sample, hist))

    return variants


def _with_history(sample: TrainingSample, history: list[list[int]]) -> TrainingSample:
    return TrainingSample(
        uid=sample.uid + "-aug",
        world_seed=sample.world_seed,
        task_index=sample.task_index,
        instruction=sample.instruction,
        t=sample.t,
        stop_count=sample.stop_count,
        state=sample.state,
        history=history,
        current=[list(v) for v in sample.current],
        t_cot=sample.t_cot,
        v_cot=list(sample.v_cot),
        actions=sample.actions,
        augmented=True,
    )


# ---------------------------------------------------------------------------
# Dataset building and serialization


@dataclass
class DatasetStats:
    n_trajectories: int = 0
    n_slices: int = 0
    n_augmented: int = 0
    action_hist: dict = field(default_factory=dict)
    chunk_lengths: dict = field(default_factory=dict)
    mean_history_len: float = 0.0

    def to_json(self) -> dict:
        return {
            "n_trajectories": self.n_trajectories,
            "n_slices": self.n_slices,
            "n_augmented": self.n_augmented,
            "action_hist": self.action_hist,
            "chunk_lengths": self.chunk_lengths,
            "mean_history_len": self.mean_history_len,
        }


def samples_from_trajectory(
    traj: ExpertTrajectory,
    codec: codec_mod.Codec,
    k: int = DEFAULT_K,
    prefix: int = DEFAULT_PREFIX,
    history_cap: int = DEFAULT_HISTORY_CAP,
    task_index: int = 0,
) -> list[TrainingSample]:
    return [
        sample_from_slice(s, traj, codec, prefix, history_cap, task_index)
        for s in slice_trajectory(traj, k)
    ]


def build_samples(
    trajectories: list[ExpertTrajectory],
    codec: codec_mod.Codec,
    k: int = DEFAULT_K,
    prefix: int = DEFAULT_PREFIX,
    history_cap: int = DEFAULT_HISTORY_CAP,
    augment_rng: np.random.Generator | None = None,
) -> tuple[list[TrainingSample], DatasetStats]:
    stats = DatasetStats(n_trajectories=len(trajectories))
    samples: list[TrainingSample] = []
    hist_total = 0
    for ti, traj in enumerate(trajectories):
        base = samples_from_trajectory(traj, codec, k, prefix, history_cap, ti)
        for s in base:
            samples.append(s)
            stats.n_slices += 1
            hist_total += len(s.history)
            stats.chunk_lengths[len(s.actions)] = stats.chunk_lengths.get(len(s.actions), 0) + 1
            for a in s.actions:
                stats.action_hist[a] = stats.action_hist.get(a, 0) + 1
            if augment_rng is not None:
                for v in augment(s, augment_rng):
                    samples.append(v)
                    stats.n_augmented += 1
    if stats.n_slices:
        stats.mean_history_len = hist_total / stats.n_slices
    return samples, stats


def _sample_to_record(s: TrainingSample) -> dict:
    return {
        "uid": s.uid,
        "ws": s.world_seed,
        "ti": s.task_index,
        "instr": list(s.instruction),
        "t": s.t,
        "sc": s.stop_count,
        "st": list(s.state),
        "hist": s.history,
        "cur": s.current,
        "tcot": list(s.t_cot),
        "vcot": list(s.v_cot),
        "act": list(s.actions),
        "aug": int(s.augmented),
    }


def _sample_from_record(r: dict) -> TrainingSample:
    return TrainingSample(
        uid=r["uid"],
        world_seed=r["ws"],
        task_index=r["ti"],
        instruction=tuple(r["instr"]),
        t=r["t"],
        stop_count=r["sc"],
        state=tuple(r["st"]),
        history=[list(h) for h in r["hist"]],
        current=[list(c) for c in r["cur"]],
        t_cot=tuple(r["tcot"]),
        v_cot=list(r["vcot"]),
        actions=tuple(r["act"]),
        augmented=bool(r["aug"]),
    )


def serialize_dataset(
    samples: list[TrainingSample],
    path: str | Path,
    vocab_hash: str,
    codec_hash: str,
    k: int,
    seeds: dict,
    history_cap: int = DEFAULT_HISTORY_CAP,
    prefix: int = DEFAULT_PREFIX,
) -> str:
    header = {
        "format": "latentnav-dataset",
        "version": DATASET_FORMAT_VERSION,
        "k": k,
        "prefix": prefix,
        "history_cap": history_cap,
        "seeds": seeds,
        "vocab_sha256": vocab_hash,
        "codec_sha256": codec_hash,
        "count": len(samples),
    }
    lines = [canonical_json(header)]
    lines += [canonical_json(_sample_to_record(s)) for s in samples]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def load_dataset(
    path: str | Path,
    expect_vocab_hash: str | None = None,
    expect_codec_hash: str | None = None,
) -> tuple[list[TrainingSample], dict]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError("empty dataset file")
    header = json.loads(text[0])
    if header.get("format") != "latentnav-dataset" or header.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError("unrecognized dataset format/version")
    if expect_vocab_hash is not None and header["vocab_sha256"] != expect_vocab_hash:
        raise HashMismatchError("dataset was built against a different vocabulary")
    if expect_codec_hash is not None and header["codec_sha256"] != expect_codec_hash:
        raise HashMismatchError("dataset was built against a different codec")
    samples = [_sample_from_record(json.loads(line)) for line in text[1:] if line]
    if len(samples) != header["count"]:
        raise ValueError("dataset record count does not match header")
    return samples, header


def verify_sample_replays(sample: TrainingSample, world: gw.GridWorld) -> bool:
    """Expert chunks never hit walls: every forward move must change position."""
    state = gw.AgentState(
        pos=(sample.state[0], sample.state[1]), heading=gw.Heading(sample.state[2])
    )
    for name in sample.actions:
        action = gw.ACTIONS_BY_NAME[name]
        nxt = gw.step(world, state, action)
        if action == gw.Action.FORWARD and nxt.pos == state.pos:
            return False
        state = nxt
    return True
