"""Deterministic pixel jumping tasks.

A rectangular agent walks right along a floor whose height varies by task and
must leap a block obstacle whose horizontal position varies by task. Jumps
are fixed ballistic arcs: diagonally up for jump_rise steps, diagonally down
for jump_fall steps, actions ignored while airborne. Every step advances the
agent one pixel to the right, so every non-colliding trajectory earns the
same return and the whole task reduces to timing a single jump.

With the default geometry, initiating the jump when the agent's left edge is
exactly trigger_gap = 14 pixels left of the obstacle's left edge is the only
trigger in [1, 30] that clears, and the resulting return is exactly 81;
calibrate_geometry re-proves both facts by exhaustive simulation before any
training run is allowed to use a config.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError

RIGHT = 0
JUMP = 1
ACTION_NAMES = ("right", "jump")


class TaskSpec(NamedTuple):
    obstacle_x: int
    floor_y: int


@dataclasses.dataclass(frozen=True)
class EnvConfig:
    screen: int = 84
    agent_w: int = 4
    agent_h: int = 10
    obstacle_w: int = 6
    obstacle_h: int = 11
    jump_rise: int = 15
    jump_fall: int = 15
    agent_start_x: int = 0
    trigger_gap: int = 14
    optimal_return: float = 81.0
    agent_intensity: float = 1.0
    obstacle_intensity: float = 0.5
    floor_intensity: float = 0.25
    calibrated: bool = False

    @property
    def max_episode_steps(self) -> int:
        return self.screen + self.jump_rise + self.jump_fall


@dataclasses.dataclass(frozen=True)
class WorldState:
    task: TaskSpec
    agent_x: int
    agent_alt: int
    phase_step: int  # 0 grounded, 1..rise+fall-1 airborne progress
    steps: int
    terminated: bool
    outcome: str | None  # None | "crossed" | "collision"


class StepInfo(NamedTuple):
    """Ground-truth per-step record kept alongside each observation."""
    task: TaskSpec
    agent_x: int
    agent_alt: int
    phase_step: int

    @property
    def gap(self) -> int:
        return self.task.obstacle_x - self.agent_x

    @property
    def grounded(self) -> bool:
        return self.phase_step == 0

    @property
    def cache_key(self):
        return (self.task, self.agent_x, self.agent_alt)


def make_task_grids() -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Source grid (obstacle x 15..45 step 5, floor y 5..50 step 5) and the
    downstream grid shifted +2 in both coordinates. 70 tasks each, disjoint."""
    source = [TaskSpec(x, y) for x in range(15, 50, 5) for y in range(5, 55, 5)]
    downstream = [TaskSpec(t.obstacle_x + 2, t.floor_y + 2) for t in source]
    return source, downstream


def _overlaps(cfg: EnvConfig, task: TaskSpec, x: int, alt: int) -> bool:
    horiz = (x + cfg.agent_w - 1 >= task.obstacle_x
             and x <= task.obstacle_x + cfg.obstacle_w - 1)
    return horiz and alt < cfg.obstacle_h


class JumpEnv:
    def __init__(self, config: EnvConfig):
        self.config = config

    def reset(self, task: TaskSpec) -> WorldState:
        return WorldState(task=task, agent_x=self.config.agent_start_x,
                          agent_alt=0, phase_step=0, steps=0,
                          terminated=False, outcome=None)

    def step(self, state: WorldState, action: int) -> tuple[WorldState, float]:
        if state.terminated:
            raise RuntimeError("step() on a terminated episode")
        cfg = self.config
        airtime = cfg.jump_rise + cfg.jump_fall
        ps = state.phase_step
        if ps == 0:
            ps = 1 if action == JUMP else 0
        else:
            ps += 1
            if ps == airtime:
                ps = 0
        x = state.agent_x + 1
        alt = 0 if ps == 0 else (ps if ps <= cfg.jump_rise else airtime - ps)

        terminated, outcome, reward = False, None, 1.0
        if x + cfg.agent_w > cfg.screen:
            terminated, outcome = True, "crossed"
        elif _overlaps(cfg, state.task, x, alt):
            # the colliding step does not complete: no reward for it
            terminated, outcome, reward = True, "collision", 0.0
        return WorldState(task=state.task, agent_x=x, agent_alt=alt,
                          phase_step=ps, steps=state.steps + 1,
                          terminated=terminated, outcome=outcome), reward

    def render(self, state: WorldState) -> np.ndarray:
        """Grayscale (1, screen, screen) float32 frame, intensities 0/0.25/0.5/1."""
        cfg = self.config
        n = cfg.screen
        img = np.zeros((n, n), dtype=np.float32)
        floor = state.task.floor_y
        img[n - 1 - floor, :] = cfg.floor_intensity
        self._draw(img, state.task.obstacle_x, cfg.obstacle_w,
                   floor + 1, cfg.obstacle_h, cfg.obstacle_intensity)
        self._draw(img, state.agent_x, cfg.agent_w,
                   floor + 1 + state.agent_alt, cfg.agent_h, cfg.agent_intensity)
        return img[None]

    def _draw(self, img, x, w, bottom, h, value):
        n = self.config.screen
        c0, c1 = max(0, x), min(n, x + w)
        r0, r1 = n - 1 - (bottom + h - 1), n - 1 - bottom
        if c0 < c1:
            img[max(0, r0):min(n, r1 + 1), c0:c1] = value

    def info(self, state: WorldState) -> StepInfo:
        return StepInfo(state.task, state.agent_x, state.agent_alt,
                        state.phase_step)


def optimal_action(cfg: EnvConfig, state: WorldState) -> int:
    """Jump exactly when grounded at the trigger gap; otherwise walk."""
    gap = state.task.obstacle_x - state.agent_x
    if state.phase_step == 0 and gap == cfg.trigger_gap:
        return JUMP
    return RIGHT


def _run_trigger(cfg: EnvConfig, task: TaskSpec, trigger: int) -> tuple[float, str]:
    env = JumpEnv(cfg)
    s = env.reset(task)
    total = 0.0
    while not s.terminated:
        if s.steps > cfg.max_episode_steps:
            raise ConfigError(f"episode failed to terminate on task {task!r}")
        gap = task.obstacle_x - s.agent_x
        a = JUMP if (s.phase_step == 0 and gap == trigger) else RIGHT
        s, r = env.step(s, a)
        total += r
    return total, s.outcome


def trigger_sweep(cfg: EnvConfig, task: TaskSpec, triggers) -> dict[int, float]:
    """Return of the walk-then-jump-at-gap-d policy for each trigger d."""
    return {d: _run_trigger(cfg, task, d)[0] for d in triggers}


def calibrate_geometry(cfg: EnvConfig) -> EnvConfig:
    """Exhaustively verify the geometry before any training uses it.

    Over all 140 default-grid tasks: (a) the trigger-14 scripted policy must
    score exactly optimal_return with a crossing, and (b) no other trigger in
    [1, 30] may match it. Returns the config stamped calibrated; raises
    ConfigError naming the offending task otherwise.
    """
    source, downstream = make_task_grids()
    for task in source + downstream:
        results = {d: _run_trigger(cfg, task, d) for d in range(1, 31)}
        total, outcome = results[cfg.trigger_gap]
        if total != cfg.optimal_return or outcome != "crossed":
            raise ConfigError(
                f"trigger {cfg.trigger_gap} scores {total} ({outcome}) on "
                f"task {task!r}; expected {cfg.optimal_return} via crossing")
        best = max(v for v, _ in results.values())
        ties = [d for d, (v, _) in results.items() if v == best]
        if ties != [cfg.trigger_gap]:
            raise ConfigError(
                f"trigger sweep on task {task!r} has argmax {ties}, "
                f"expected [{cfg.trigger_gap}]")
    return dataclasses.replace(cfg, calibrated=True)


@dataclasses.dataclass
class Episode:
    task: TaskSpec
    observations: np.ndarray  # (T, 1, H, W) float32
    actions: np.ndarray       # (T,) int64
    rewards: np.ndarray       # (T,) float32
    log_probs: np.ndarray     # (T,) float32
    values: np.ndarray        # (T,) float32
    infos: list[StepInfo]
    outcome: str

    def total_return(self) -> float:
        return float(self.rewards.sum())


PolicyFn = Callable[[np.ndarray, list], dict]


def batched_rollout(env: JumpEnv, tasks: list[TaskSpec], policy_fn: PolicyFn,
                    seed: int) -> list[Episode]:
    """Run one episode per entry of `tasks`, stepping all of them in lockstep.

    The policy sees the stacked observations of the still-running episodes
    plus their (task, x, alt) cache keys and returns {"logits": (B, 2),
    "values": (B,)}. Actions are sampled from per-episode generators spawned
    off the master seed, so the result is independent of how episodes are
    batched together.
    """
    children = np.random.SeedSequence(seed).spawn(len(tasks))
    rngs = [np.random.default_rng(c) for c in children]
    states = [env.reset(t) for t in tasks]
    recs = [dict(obs=[], act=[], rew=[], lp=[], val=[], info=[]) for _ in tasks]
    alive = list(range(len(tasks)))

    while alive:
        obs_batch = np.stack([env.render(states[i]) for i in alive])
        keys = [env.info(states[i]).cache_key for i in alive]
        out = policy_fn(obs_batch, keys)
        logits = np.asarray(out["logits"], dtype=np.float32)
        values = np.asarray(out["values"], dtype=np.float32)
        # stable log-softmax, float32, same arithmetic the trainer uses
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        probs = np.exp(logp.astype(np.float64))
        probs /= probs.sum(axis=-1, keepdims=True)

        next_alive = []
        for row, i in enumerate(alive):
            u = rngs[i].random()
            a = RIGHT if u < probs[row, RIGHT] else JUMP
            rec = recs[i]
            rec["obs"].append(obs_batch[row])
            rec["info"].append(env.info(states[i]))
            rec["act"].append(a)
            rec["lp"].append(logp[row, a])
            rec["val"].append(values[row])
            states[i], r = env.step(states[i], a)
            rec["rew"].append(r)
            if not states[i].terminated:
                next_alive.append(i)
        alive = next_alive

    episodes = []
    for i, task in enumerate(tasks):
        rec = recs[i]
        episodes.append(Episode(
            task=task,
            observations=np.stack(rec["obs"]),
            actions=np.array(rec["act"], dtype=np.int64),
            rewards=np.array(rec["rew"], dtype=np.float32),
            log_probs=np.array(rec["lp"], dtype=np.float32),
            values=np.array(rec["val"], dtype=np.float32),
            infos=rec["info"],
            outcome=states[i].outcome,
        ))
    return episodes


def write_pgm(path, img01: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255, for a (H, W) float frame in [0, 1]."""
    arr = np.asarray(img01)
    if arr.ndim == 3:
        arr = arr[0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
