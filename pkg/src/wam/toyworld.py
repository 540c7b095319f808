"""Tabletop push-and-place world with three rendered views and a scripted expert.

Coordinates live in the unit square; ``y`` grows downward so that image row
follows ``y`` directly ("top" means small ``y``). One object, one goal, one
gripper. The expert is a two-phase proportional controller.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .diffcore import Rng

V_MAX = 0.05
GRASP_RADIUS = 0.06
SUCCESS_RADIUS = 0.05
GRIP_THRESHOLD = 0.5

# expert tuning: all strictly inside the radii above
EXPERT_GAIN = 0.5
EXPERT_GRIP_DIST = 0.036
EXPERT_RELEASE_DIST = 0.02

STATE_DIM = 5
ACTION_DIM = 3
VIEWS = ("left", "front", "right")
WRIST_OFFSET = 0.1
WRIST_SPAN = 0.5  # 2x zoom

PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],  # red
        [0.20, 0.80, 0.20],  # green
        [0.20, 0.40, 1.00],  # blue
        [0.95, 0.85, 0.10],  # yellow
    ],
    dtype=np.float32,
)
COLOR_NAMES = ("red", "green", "blue", "yellow")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
GOAL_COLOR = np.array([0.6, 0.6, 0.6], dtype=np.float32)
GRIPPER_COLOR = np.array([1.0, 1.0, 1.0], dtype=np.float32)

# the goal ring's hole matches the object disc, so a placed object leaves the ring visible
OBJECT_RADIUS = 0.06
GOAL_HALF = 0.12
GOAL_LINE = 0.06
CROSS_HALF = 0.07
CROSS_WIDTH = 0.02
SUPERSAMPLE = 4

WORDS = ("push", "block", "to") + COLOR_NAMES + QUADRANTS
WORD_IDS = {w: i for i, w in enumerate(WORDS)}
N_TASKS = len(COLOR_NAMES) * len(QUADRANTS)


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float]
    object: tuple[float, float]
    goal: tuple[float, float]
    grip: bool = False
    color: int = 0
    steps: int = 0
    ever_grasped: bool = False

    def vector(self) -> np.ndarray:
        """Proprioceptive state: gripper xy, grip flag, object xy."""
        return np.array(
            [self.gripper[0], self.gripper[1], float(self.grip), self.object[0], self.object[1]],
            dtype=np.float32,
        )


@dataclass
class Trajectory:
    instruction: list[int]
    frames: np.ndarray  # (T, 3, H, W, 3) float32 in [0, 1]
    states: np.ndarray  # (T, STATE_DIM)
    actions: np.ndarray  # (T, ACTION_DIM)
    success: bool

    def __post_init__(self):
        T = len(self.frames)
        if len(self.states) != T or len(self.actions) != T:
            raise ValueError(f"stream lengths differ: {T}, {len(self.states)}, {len(self.actions)}")

    @property
    def length(self) -> int:
        return len(self.frames)


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def step(state: WorldState, action) -> WorldState:
    """Advance one control step.

    The grip flag is decided from the pre-move distance: a closing command
    only latches when the object is within the grasp radius. A held object
    follows the gripper's (clamped) displacement.
    """
    vx = float(np.clip(action[0], -V_MAX, V_MAX))
    vy = float(np.clip(action[1], -V_MAX, V_MAX))
    closing = float(action[2]) >= GRIP_THRESHOLD
    if closing:
        grip = state.grip or _dist(state.gripper, state.object) <= GRASP_RADIUS
    else:
        grip = False
    gx, gy = state.gripper
    new_gripper = (_clip01(gx + vx), _clip01(gy + vy))
    obj = state.object
    if grip:
        dx, dy = new_gripper[0] - gx, new_gripper[1] - gy
        obj = (_clip01(obj[0] + dx), _clip01(obj[1] + dy))
    return replace(
        state,
        gripper=new_gripper,
        object=obj,
        grip=grip,
        steps=state.steps + 1,
        ever_grasped=state.ever_grasped or grip,
    )


def success(state: WorldState) -> bool:
    return (not state.grip) and _dist(state.object, state.goal) <= SUCCESS_RADIUS


def graded_score(state: WorldState) -> float:
    """0.5 for having grasped the object at some point, 0.5 more for a completed place."""
    score = 0.5 if state.ever_grasped else 0.0
    if success(state):
        score = 1.0
    return score


def expert_action(state: WorldState) -> np.ndarray:
    obj, goal, grip_pos = state.object, state.goal, state.gripper
    if _dist(obj, goal) <= EXPERT_RELEASE_DIST:
        return np.zeros(ACTION_DIM, dtype=np.float32)
    if not state.grip:
        vel = np.clip(EXPERT_GAIN * (np.subtract(obj, grip_pos)), -V_MAX, V_MAX)
        close = _dist(grip_pos, obj) <= EXPERT_GRIP_DIST
        return np.array([vel[0], vel[1], 1.0 if close else 0.0], dtype=np.float32)
    vel = np.clip(EXPERT_GAIN * (np.subtract(goal, obj)), -V_MAX, V_MAX)
    return np.array([vel[0], vel[1], 1.0], dtype=np.float32)


# ---------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=32)
def _subsample_grid(h: int, w: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-square sample coordinates (u, v), each (h*s, w*s), for an h x w raster."""
    offs = (np.arange(s) + 0.5) / s
    u = ((np.arange(w)[:, None] + offs[None, :]).reshape(-1)) / w
    v = ((np.arange(h)[:, None] + offs[None, :]).reshape(-1)) / h
    uu, vv = np.meshgrid(u, v)
    return uu, vv


def _coverage(inside: np.ndarray, h: int, w: int, s: int) -> np.ndarray:
    return inside.reshape(h, s, w, s).mean(axis=(1, 3), dtype=np.float64).astype(np.float32)


def _composite(img: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> np.ndarray:
    a = alpha[..., None]
    return img * (np.float32(1.0) - a) + color[None, None, :] * a


def render_view(state: WorldState, view: str, h: int = 16, w: int = 16) -> np.ndarray:
    """Render one camera as an (h, w, 3) float32 image in [0, 1].

    ``front`` is the whole table top-down with the gripper drawn as a white
    cross. ``left``/``right`` are 2x-zoom wrist crops centred half a grasp
    width to either side of the gripper; they do not see the gripper itself
    and everything off the table is black.
    """
    if h < 8 or w < 8:
        raise ValueError("views must be at least 8x8")
    uu, vv = _subsample_grid(h, w, SUPERSAMPLE)
    if view == "front":
        x, y = uu, vv
        draw_gripper = True
    elif view in ("left", "right"):
        cx = state.gripper[0] + (-WRIST_OFFSET if view == "left" else WRIST_OFFSET)
        cy = state.gripper[1]
        x = cx - WRIST_SPAN / 2 + uu * WRIST_SPAN
        y = cy - WRIST_SPAN / 2 + vv * WRIST_SPAN
        draw_gripper = False
    else:
        raise ValueError(f"unknown view {view!r}")
    on_table = (x >= 0.0) & (x <= 1.0) & (y >= 0.0) & (y <= 1.0)
    img = np.zeros((h, w, 3), dtype=np.float32)

    gdx = np.abs(x - state.goal[0])
    gdy = np.abs(y - state.goal[1])
    cheb = np.maximum(gdx, gdy)
    goal = on_table & (cheb <= GOAL_HALF) & (cheb >= GOAL_HALF - GOAL_LINE)
    img = _composite(img, _coverage(goal, h, w, SUPERSAMPLE), GOAL_COLOR)

    odx = x - state.object[0]
    ody = y - state.object[1]
    obj = on_table & (odx * odx + ody * ody <= OBJECT_RADIUS**2)
    img = _composite(img, _coverage(obj, h, w, SUPERSAMPLE), PALETTE[state.color])

    if draw_gripper:
        cdx = np.abs(x - state.gripper[0])
        cdy = np.abs(y - state.gripper[1])
        cross = ((cdx <= CROSS_HALF) & (cdy <= CROSS_WIDTH / 2)) | ((cdy <= CROSS_HALF) & (cdx <= CROSS_WIDTH / 2))
        img = _composite(img, _coverage(cross, h, w, SUPERSAMPLE), GRIPPER_COLOR)
    return img


def render_views(state: WorldState, h: int = 16, w: int = 16) -> np.ndarray:
    """All three views stacked as (3, h, w, 3) in left, front, right order."""
    return np.stack([render_view(state, v, h, w) for v in VIEWS])


# ---------------------------------------------------------------------------
# tasks and demonstrations


def task_parts(task_id: int) -> tuple[int, int]:
    if not 0 <= task_id < N_TASKS:
        raise ValueError(f"task id {task_id} outside [0, {N_TASKS})")
    return divmod(task_id, len(QUADRANTS))


def instruction_text(task_id: int) -> str:
    color, quad = task_parts(task_id)
    return f"push {COLOR_NAMES[color]} block to {QUADRANTS[quad]}"


def tokenize(text: str) -> list[int]:
    try:
        return [WORD_IDS[w] for w in text.split()]
    except KeyError as e:
        raise ValueError(f"word {e.args[0]!r} not in vocabulary") from None


def instruction_tokens(task_id: int) -> list[int]:
    return tokenize(instruction_text(task_id))


def reset(rng: Rng, task_id: int) -> WorldState:
    """Random start: gripper and object anywhere, goal inside the task's quadrant."""
    color, quad = task_parts(task_id)
    qx, qy = quad % 2, quad // 2
    while True:
        u = rng.uniform(6)
        gripper = (0.1 + 0.8 * u[0], 0.1 + 0.8 * u[1])
        obj = (0.1 + 0.8 * u[2], 0.1 + 0.8 * u[3])
        goal = (0.5 * qx + 0.1 + 0.3 * u[4], 0.5 * qy + 0.1 + 0.3 * u[5])
        if _dist(obj, goal) > 0.2:
            return WorldState(gripper=gripper, object=obj, goal=goal, color=color)


def task_for_seed(seed: int) -> int:
    return int(Rng(seed ^ 0x5EED).integers(N_TASKS, 1)[0])


def generate_demo(
    seed: int,
    task_id: int | None = None,
    h: int = 16,
    w: int = 16,
    t_max: int = 200,
    horizon: int = 16,
) -> Trajectory:
    """Roll the expert from a seeded reset and record every stream.

    After success the expert idles for ``horizon`` more steps so every
    window that starts at or before the success step has its full action
    chunk and future frames. ``horizon`` should be at least ``p + K * delta``.
    """
    if task_id is None:
        task_id = task_for_seed(seed)
    rng = Rng(seed)
    state = reset(rng, task_id)
    frames, states, actions = [], [], []
    done_at = None
    t = 0
    while True:
        a = expert_action(state)
        frames.append(render_views(state, h, w))
        states.append(state.vector())
        actions.append(a)
        state = step(state, a)
        t += 1
        if done_at is None and success(state):
            done_at = t
        if done_at is not None and t >= done_at + horizon:
            break
        if done_at is None and t >= t_max:
            break
    while len(frames) < horizon:
        a = expert_action(state)
        frames.append(render_views(state, h, w))
        states.append(state.vector())
        actions.append(a)
        state = step(state, a)
    return Trajectory(
        instruction=instruction_tokens(task_id),
        frames=np.stack(frames).astype(np.float32),
        states=np.stack(states).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        success=done_at is not None,
    )


def random_action(rng: Rng) -> np.ndarray:
    u = rng.uniform(3)
    return np.array([(2 * u[0] - 1) * V_MAX, (2 * u[1] - 1) * V_MAX, u[2]], dtype=np.float32)
