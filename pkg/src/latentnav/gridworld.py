"""Procedural multi-room gridworld with egocentric rendering and a shortest-path expert.

Coordinates are (x, y) with x growing east and y growing south; heading is one
of N/E/S/W. Worlds, tasks and agent states are immutable values: stepping
returns a new state, so episodes can be evaluated in parallel safely.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import GenerationError, UnreachableGoalError

FLOOR = 0
WALL = 1

FLOOR_COLOR = (0.80, 0.80, 0.78)
WALL_COLOR = (0.22, 0.22, 0.26)
VOID_COLOR = (0.0, 0.0, 0.0)

COLOR_TABLE: dict[str, tuple[float, float, float]] = {
    "red": (0.88, 0.10, 0.10),
    "green": (0.10, 0.72, 0.18),
    "blue": (0.15, 0.25, 0.92),
    "yellow": (0.92, 0.86, 0.10),
    "purple": (0.55, 0.15, 0.78),
    "orange": (0.95, 0.55, 0.08),
    "cyan": (0.08, 0.80, 0.85),
    "pink": (0.95, 0.45, 0.68),
}

OBJECT_TYPES = ("chest", "lamp", "plant", "table", "chair", "crate", "sign", "ball")

ROOM_LABELS = ("hall", "office", "kitchen", "store", "lab", "lounge")


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


class Action(IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3


ACTION_NAMES = {
    Action.FORWARD: "forward",
    Action.LEFT: "left",
    Action.RIGHT: "right",
    Action.STOP: "stop",
}
ACTIONS_BY_NAME = {v: k for k, v in ACTION_NAMES.items()}

# Unit vectors per heading, (dx, dy).
_HEADING_VEC = {
    Heading.N: (0, -1),
    Heading.E: (1, 0),
    Heading.S: (0, 1),
    Heading.W: (-1, 0),
}


def heading_vec(h: Heading) -> tuple[int, int]:
    return _HEADING_VEC[Heading(h)]


def turn_left(h: Heading) -> Heading:
    return Heading((int(h) - 1) % 4)


def turn_right(h: Heading) -> Heading:
    return Heading((int(h) + 1) % 4)


@dataclass(frozen=True)
class Room:
    x: int
    y: int
    w: int
    h: int
    label: str

    def center(self) -> tuple[int, int]:
        return (self.x + self.w // 2, self.y + self.h // 2)


@dataclass(frozen=True)
class WorldObject:
    obj_id: int
    color: str
    type_: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class AgentState:
    pos: tuple[int, int]
    heading: Heading
    steps_taken: int = 0
    stops_emitted: int = 0


@dataclass(frozen=True)
class WorldConfig:
    width: int = 16
    height: int = 16
    n_rooms: int = 3
    n_objects: int = 4
    view_size: int = 16
    view_depth: int = 4
    max_room_side: int = 7
    max_subgoals: int = 2
    budget_slack: int = 10
    budget_factor: int = 2

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("world dimensions must be at least 8x8")
        if self.n_rooms < 2:
            raise ValueError("at least 2 rooms required")
        if self.view_size % self.view_depth != 0:
            raise ValueError("view_size must be divisible by view_depth")
        if self.n_objects > len(COLOR_TABLE):
            raise ValueError("n_objects exceeds available colors")
        if not (1 <= self.max_subgoals <= 4):
            raise ValueError("max_subgoals must be in [1, 4]")


@dataclass(frozen=True)
class GridWorld:
    width: int
    height: int
    cells: np.ndarray  # uint8 (height, width), FLOOR/WALL
    rooms: tuple[Room, ...]
    objects: tuple[WorldObject, ...]
    seed: int
    config: WorldConfig

    def is_floor(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y, x] == FLOOR

    def object_by_id(self, obj_id: int) -> WorldObject:
        return self.objects[obj_id]

    def object_at(self, cell: tuple[int, int]) -> WorldObject | None:
        for obj in self.objects:
            if obj.cell == cell:
                return obj
        return None


@dataclass(frozen=True)
class Task:
    instruction: tuple[str, ...]
    subgoals: tuple[int, ...]
    start: AgentState
    budgets: tuple[int, ...]  # per-subtask action budget, 2*expert_len + slack
    expert_lengths: tuple[int, ...]  # expert segment lengths incl. the stop


@dataclass(frozen=True)
class Observation:
    left: np.ndarray
    front: np.ndarray
    right: np.ndarray
    view_depth: int

    def views(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.left, self.front, self.right)


# ---------------------------------------------------------------------------
# World generation


def _floor_components(cells: np.ndarray) -> int:
    """Number of 4-connected floor components."""
    h, w = cells.shape
    seen = np.zeros_like(cells, dtype=bool)
    comps = 0
    for y in range(h):
        for x in range(w):
            if cells[y, x] == FLOOR and not seen[y, x]:
                comps += 1
                queue = deque([(x, y)])
                seen[y, x] = True
                while queue:
                    cx, cy = queue.popleft()
                    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        nx, ny = cx + dx, cy + dy
                        if 0 <= nx < w and 0 <= ny < h and cells[ny, nx] == FLOOR and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((nx, ny))
    return comps


def _try_generate(seed: int, config: WorldConfig, attempt: int) -> GridWorld | None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
    cells = np.full((config.height, config.width), WALL, dtype=np.uint8)

    rooms: list[Room] = []
    tries = 0
    while len(rooms) < config.n_rooms and tries < 300:
        tries += 1
        max_w = min(config.max_room_side, config.width - 2)
        max_h = min(config.max_room_side, config.height - 2)
        w = int(rng.integers(3, max_w + 1))
        h = int(rng.integers(3, max_h + 1))
        x = int(rng.integers(1, config.width - w))
        y = int(rng.integers(1, config.height - h))
        # keep one wall cell between rooms
        clash = any(
            x < r.x + r.w + 1 and r.x < x + w + 1 and y < r.y + r.h + 1 and r.y < y + h + 1
            for r in rooms
        )
        if clash:
            continue
        label = ROOM_LABELS[len(rooms) % len(ROOM_LABELS)]
        rooms.append(Room(x, y, w, h, label))
    if len(rooms) < config.n_rooms:
        return None

    for room in rooms:
        cells[room.y : room.y + room.h, room.x : room.x + room.w] = FLOOR

    # L-shaped corridors between consecutive room centers
    for a, b in zip(rooms, rooms[1:]):
        (ax, ay), (bx, by) = a.center(), b.center()
        horizontal_first = bool(rng.integers(0, 2))
        if horizontal_first:
            for x in range(min(ax, bx), max(ax, bx) + 1):
                cells[ay, x] = FLOOR
            for y in range(min(ay, by), max(ay, by) + 1):
                cells[y, bx] = FLOOR
        else:
            for y in range(min(ay, by), max(ay, by) + 1):
                cells[y, ax] = FLOOR
            for x in range(min(ax, bx), max(ax, bx) + 1):
                cells[by, x] = FLOOR

    if _floor_components(cells) != 1:
        return None

    floor_cells = [(int(x), int(y)) for y, x in np.argwhere(cells == FLOOR)]
    if len(floor_cells) < config.n_objects + 1:
        return None
    picks = rng.choice(len(floor_cells), size=config.n_objects, replace=False)
    colors = list(rng.permutation(list(COLOR_TABLE)))[: config.n_objects]
    types = [OBJECT_TYPES[int(i)] for i in rng.integers(0, len(OBJECT_TYPES), config.n_objects)]
    objects = tuple(
        WorldObject(i, colors[i], types[i], floor_cells[int(picks[i])])
        for i in range(config.n_objects)
    )

    return GridWorld(
        width=config.width,
        height=config.height,
        cells=cells,
        rooms=tuple(rooms),
        objects=objects,
        seed=seed,
        config=config,
    )


def generate_world(seed: int, config: WorldConfig | None = None, max_retries: int = 20) -> GridWorld:
    """Generate a world; identical seeds yield bit-identical worlds."""
    config = config or WorldConfig()
    config.validate()
    for attempt in range(max_retries):
        world = _try_generate(seed, config, attempt)
        if world is not None:
            return world
    raise GenerationError(
        f"could not generate a valid world for seed={seed} after {max_retries} retries"
    )


def validate_world(world: GridWorld) -> None:
    """Raise if any structural invariant is violated."""
    seen_cells = set()
    for obj in world.objects:
        if not world.is_floor(obj.cell):
            raise AssertionError(f"object {obj.obj_id} not on floor")
        if obj.cell in seen_cells:
            raise AssertionError(f"objects share cell {obj.cell}")
        seen_cells.add(obj.cell)
    if _floor_components(world.cells) != 1:
        raise AssertionError("floor is not a single connected component")


# ---------------------------------------------------------------------------
# Dynamics


def step(world: GridWorld, state: AgentState, action: Action) -> AgentState:
    """Apply one action. Blocked forward moves are no-ops; steps always count."""
    action = Action(action)
    pos, heading = state.pos, state.heading
    stops = state.stops_emitted
    if action == Action.FORWARD:
        dx, dy = heading_vec(heading)
        target = (pos[0] + dx, pos[1] + dy)
        if world.is_floor(target):
            pos = target
    elif action == Action.LEFT:
        heading = turn_left(heading)
    elif action == Action.RIGHT:
        heading = turn_right(heading)
    elif action == Action.STOP:
        stops += 1
    return AgentState(pos=pos, heading=heading, steps_taken=state.steps_taken + 1, stops_emitted=stops)


def replay(world: GridWorld, state: AgentState, actions) -> AgentState:
    for action in actions:
        state = step(world, state, action)
    return state


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def check_subtask_success(world: GridWorld, state: AgentState, subgoal_id: int) -> bool:
    """Within one cell (Chebyshev) of the subgoal object."""
    return chebyshev(state.pos, world.objects[subgoal_id].cell) <= 1


# ---------------------------------------------------------------------------
# Rendering

_PATTERN_CACHE: dict[tuple[str, int], np.ndarray] = {}


def _type_pattern(type_: str, px: int) -> np.ndarray:
    """Boolean px*px mask giving each object type a distinct footprint."""
    key = (type_, px)
    if key in _PATTERN_CACHE:
        return _PATTERN_CACHE[key]
    m = np.zeros((px, px), dtype=bool)
    idx = OBJECT_TYPES.index(type_)
    ii, jj = np.mgrid[0:px, 0:px]
    if idx == 0:  # chest: solid
        m[:] = True
    elif idx == 1:  # lamp: centered dot
        q = max(1, px // 4)
        m[q : px - q, q : px - q] = True
    elif idx == 2:  # plant: checker
        m = (ii + jj) % 2 == 0
    elif idx == 3:  # table: top half
        m[: max(1, px // 2), :] = True
    elif idx == 4:  # chair: left half
        m[:, : max(1, px // 2)] = True
    elif idx == 5:  # crate: border
        m[0, :] = m[-1, :] = True
        m[:, 0] = m[:, -1] = True
    elif idx == 6:  # sign: middle stripe
        m[px // 2, :] = True
        if px > 2:
            m[px // 2 - 1, :] = True
    else:  # ball: plus
        m[px // 2, :] = True
        m[:, px // 2] = True
    _PATTERN_CACHE[key] = m
    return m


def _render_view(world: GridWorld, pos: tuple[int, int], heading: Heading) -> np.ndarray:
    cfg = world.config
    d = cfg.view_depth
    px = cfg.view_size // d
    img = np.zeros((cfg.view_size, cfg.view_size, 3), dtype=np.float64)
    fx, fy = heading_vec(heading)
    rx, ry = heading_vec(turn_right(heading))
    objects_at = {obj.cell: obj for obj in world.objects}
    for row in range(d):
        dist = d - row  # nearest row at the bottom
        for col in range(d):
            lateral = col - d // 2
            cx = pos[0] + fx * dist + rx * lateral
            cy = pos[1] + fy * dist + ry * lateral
            if not (0 <= cx < world.width and 0 <= cy < world.height):
                color = VOID_COLOR
                obj = None
            elif world.cells[cy, cx] == WALL:
                color = WALL_COLOR
                obj = None
            else:
                color = FLOOR_COLOR
                obj = objects_at.get((cx, cy))
            block = img[row * px : (row + 1) * px, col * px : (col + 1) * px]
            block[:] = color
            if obj is not None:
                mask = _type_pattern(obj.type_, px)
                block[mask] = COLOR_TABLE[obj.color]
    return img


def render(world: GridWorld, state: AgentState) -> Observation:
    """Egocentric left/front/right views; a pure function of (world, state)."""
    return Observation(
        left=_render_view(world, state.pos, turn_left(state.heading)),
        front=_render_view(world, state.pos, state.heading),
        right=_render_view(world, state.pos, turn_right(state.heading)),
        view_depth=world.config.view_depth,
    )


def visible_cells(world: GridWorld, pos: tuple[int, int], heading: Heading) -> set[tuple[int, int]]:
    """Cells inside one view window (the frustum for locality checks)."""
    d = world.config.view_depth
    fx, fy = heading_vec(heading)
    rx, ry = heading_vec(turn_right(heading))
    cells = set()
    for dist in range(1, d + 1):
        for lateral in range(-(d // 2), d - d // 2):
            cells.add((pos[0] + fx * dist + rx * lateral, pos[1] + fy * dist + ry * lateral))
    return cells


# ---------------------------------------------------------------------------
# Expert oracle

_ACTION_ORDER = (Action.FORWARD, Action.LEFT, Action.RIGHT)


def shortest_path_actions(
    world: GridWorld, start: AgentState, goal_cell: tuple[int, int], radius: int = 1
) -> list[Action]:
    """BFS over (cell, heading) states; returns a minimal action sequence
    reaching within `radius` (Chebyshev) of goal_cell. Deterministic: FIFO
    expansion in forward/left/right order."""
    if chebyshev(start.pos, goal_cell) <= radius:
        return []
    init = (start.pos, Heading(start.heading))
    parents: dict[tuple, tuple] = {init: None}
    queue = deque([init])
    goal_state = None
    while queue:
        node = queue.popleft()
        (pos, heading) = node
        for action in _ACTION_ORDER:
            if action == Action.FORWARD:
                dx, dy = heading_vec(heading)
                npos = (pos[0] + dx, pos[1] + dy)
                if not world.is_floor(npos):
                    continue
                nxt = (npos, heading)
            elif action == Action.LEFT:
                nxt = (pos, turn_left(heading))
            else:
                nxt = (pos, turn_right(heading))
            if nxt in parents:
                continue
            parents[nxt] = (node, action)
            if chebyshev(nxt[0], goal_cell) <= radius:
                goal_state = nxt
                queue.clear()
                break
            queue.append(nxt)
    if goal_state is None:
        raise UnreachableGoalError(f"no path from {start.pos} to {goal_cell}")
    actions: list[Action] = []
    node = goal_state
    while parents[node] is not None:
        node, action = parents[node]
        actions.append(action)
    actions.reverse()
    return actions


def expert_segments(world: GridWorld, task: Task) -> list[list[Action]]:
    """Per-subgoal shortest action sequences, each terminated by STOP."""
    state = task.start
    segments = []
    for obj_id in task.subgoals:
        moves = shortest_path_actions(world, state, world.objects[obj_id].cell)
        segment = moves + [Action.STOP]
        state = replay(world, state, segment)
        segments.append(segment)
    return segments


def expert_trajectory(world: GridWorld, task: Task) -> list[tuple[Observation, Action]]:
    """Concatenated expert segments, each action paired with the observation
    rendered before executing it."""
    pairs = []
    state = task.start
    for segment in expert_segments(world, task):
        for action in segment:
            pairs.append((render(world, state), action))
            state = step(world, state, action)
    return pairs


# ---------------------------------------------------------------------------
# Tasks


def instruction_words(world: GridWorld, subgoals) -> tuple[str, ...]:
    """Closed-grammar instruction: go to the <color> <type> [then <color> <type>]*."""
    words: list[str] = ["go", "to", "the"]
    for i, obj_id in enumerate(subgoals):
        obj = world.objects[obj_id]
        if i > 0:
            words.append("then")
        words.extend([obj.color, obj.type_])
    return tuple(words)


def random_floor_cell(world: GridWorld, rng: np.random.Generator) -> tuple[int, int]:
    floor_cells = np.argwhere(world.cells == FLOOR)
    y, x = floor_cells[int(rng.integers(0, len(floor_cells)))]
    return (int(x), int(y))


def generate_task(
    world: GridWorld,
    rng: np.random.Generator,
    n_subgoals: int | None = None,
    min_start_distance: int = 2,
) -> Task:
    cfg = world.config
    if n_subgoals is None:
        n_subgoals = int(rng.integers(1, cfg.max_subgoals + 1))
    n_subgoals = min(n_subgoals, len(world.objects))
    subgoals = tuple(int(i) for i in rng.choice(len(world.objects), size=n_subgoals, replace=False))
    first_goal = world.objects[subgoals[0]].cell
    for _ in range(200):
        pos = random_floor_cell(world, rng)
        if chebyshev(pos, first_goal) >= min_start_distance:
            break
    heading = Heading(int(rng.integers(0, 4)))
    start = AgentState(pos=pos, heading=heading)
    task = Task(
        instruction=instruction_words(world, subgoals),
        subgoals=subgoals,
        start=start,
        budgets=(),
        expert_lengths=(),
    )
    lengths = tuple(len(seg) for seg in expert_segments(world, task))
    budgets = tuple(cfg.budget_factor * n + cfg.budget_slack for n in lengths)
    return replace(task, budgets=budgets, expert_lengths=lengths)


# ---------------------------------------------------------------------------
# Serialization

WORLD_FORMAT_VERSION = 1


def _rle_encode(flat: np.ndarray) -> list[list[int]]:
    runs = []
    prev, count = int(flat[0]), 0
    for v in flat:
        v = int(v)
        if v == prev:
            count += 1
        else:
            runs.append([prev, count])
            prev, count = v, 1
    runs.append([prev, count])
    return runs


def _rle_decode(runs: list[list[int]], size: int) -> np.ndarray:
    out = np.empty(size, dtype=np.uint8)
    pos = 0
    for value, count in runs:
        out[pos : pos + count] = value
        pos += count
    if pos != size:
        raise ValueError("RLE length mismatch")
    return out


def world_to_json(world: GridWorld) -> dict:
    return {
        "version": WORLD_FORMAT_VERSION,
        "width": world.width,
        "height": world.height,
        "seed": world.seed,
        "grid_rle": _rle_encode(world.cells.reshape(-1)),
        "rooms": [
            {"x": r.x, "y": r.y, "w": r.w, "h": r.h, "label": r.label} for r in world.rooms
        ],
        "objects": [
            {"id": o.obj_id, "color": o.color, "type": o.type_, "cell": list(o.cell)}
            for o in world.objects
        ],
        "config": {
            "width": world.config.width,
            "height": world.config.height,
            "n_rooms": world.config.n_rooms,
            "n_objects": world.config.n_objects,
            "view_size": world.config.view_size,
            "view_depth": world.config.view_depth,
            "max_room_side": world.config.max_room_side,
            "max_subgoals": world.config.max_subgoals,
            "budget_slack": world.config.budget_slack,
            "budget_factor": world.config.budget_factor,
        },
    }


def world_from_json(doc: dict) -> GridWorld:
    if doc.get("version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format version {doc.get('version')}")
    cfg = WorldConfig(**doc["config"])
    cells = _rle_decode(doc["grid_rle"], doc["width"] * doc["height"]).reshape(
        doc["height"], doc["width"]
    )
    return GridWorld(
        width=doc["width"],
        height=doc["height"],
        cells=cells,
        rooms=tuple(Room(r["x"], r["y"], r["w"], r["h"], r["label"]) for r in doc["rooms"]),
        objects=tuple(
            WorldObject(o["id"], o["color"], o["type"], tuple(o["cell"])) for o in doc["objects"]
        ),
        seed=doc["seed"],
        config=cfg,
    )


def task_to_json(task: Task) -> dict:
    return {
        "version": WORLD_FORMAT_VERSION,
        "instruction": list(task.instruction),
        "subgoals": list(task.subgoals),
        "start": {
            "pos": list(task.start.pos),
            "heading": int(task.start.heading),
            "steps_taken": task.start.steps_taken,
            "stops_emitted": task.start.stops_emitted,
        },
        "budgets": list(task.budgets),
        "expert_lengths": list(task.expert_lengths),
    }


def task_from_json(doc: dict) -> Task:
    s = doc["start"]
    return Task(
        instruction=tuple(doc["instruction"]),
        subgoals=tuple(doc["subgoals"]),
        start=AgentState(
            pos=tuple(s["pos"]),
            heading=Heading(s["heading"]),
            steps_taken=s["steps_taken"],
            stops_emitted=s["stops_emitted"],
        ),
        budgets=tuple(doc["budgets"]),
        expert_lengths=tuple(doc["expert_lengths"]),
    )


def save_image_png(image: np.ndarray, path: str | Path, upscale: int = 1) -> None:
    """Export a [0,1] float image as PNG (inspection only)."""
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if upscale > 1:
        arr = np.repeat(np.repeat(arr, upscale, axis=0), upscale, axis=1)
    Image.fromarray(arr).save(Path(path))
