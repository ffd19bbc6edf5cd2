"""Clipped-surrogate policy optimization with GAE and the auxiliary hook.

One training iteration collects a fixed number of episodes, computes
advantages and discounted-return targets once from the collection-time
values, then runs a fixed number of minibatch updates on shuffled
transitions. Old log-probs are the ones stored at collection; no frozen
policy copy is kept. The minimized objective is

    -L_pi + value_coef * L_V + pisco_weight * L_aux - entropy_coef * H

where L_pi is the clipped surrogate (maximized), L_V the half mean squared
value error against discounted returns, and H the mean policy entropy.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    clip,
    entropy_from_logits,
    exp,
    log_softmax,
    minimum,
    mul,
    take_along_last,
    tape,
    tensor_mean,
)
from .env import JumpEnv, batched_rollout
from .errors import ConfigError, NumericError
from .optim import Adam
from .pisco import NEGATIVE_COSINE, POLICY_KL, RandomShift, pisco_loss


@dataclasses.dataclass(frozen=True)
class PPOConfig:
    iterations: int = 500
    episodes_per_iter: int = 80
    updates_per_iter: int = 320
    batch_size: int = 64
    gamma: float = 0.99
    clip_eps: float = 0.2
    gae_tau: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    head_lr: float = 5e-4
    encoder_lr: float = 5e-4
    lr_decay: float = 0.99
    lr_decay_every: int = 320
    normalize_advantages: bool = False
    pisco_weight: float = 0.0
    pisco_kind: str = POLICY_KL
    augment: object = RandomShift(4)
    use_projector: bool = True

    def __post_init__(self):
        for name in ("iterations", "episodes_per_iter", "updates_per_iter",
                     "batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if not 0.0 <= self.gae_tau <= 1.0:
            raise ConfigError("gae_tau must lie in [0, 1]")
        for name in ("value_coef", "entropy_coef", "pisco_weight"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("head_lr", "encoder_lr"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.pisco_kind not in (POLICY_KL, NEGATIVE_COSINE):
            raise ConfigError(f"unknown pisco_kind {self.pisco_kind!r}")


@dataclasses.dataclass
class TransitionBatch:
    """Parallel arrays over every step collected in one iteration."""
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    cache_keys: list

    def __len__(self):
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(
            observations=self.observations[idx],
            actions=self.actions[idx],
            old_log_probs=self.old_log_probs[idx],
            rewards=self.rewards[idx],
            values=self.values[idx],
            advantages=self.advantages[idx],
            returns=self.returns[idx],
            cache_keys=[self.cache_keys[i] for i in idx],
        )


@dataclasses.dataclass
class TrainLogRow:
    iteration: int
    mean_return: float
    loss_pi: float
    loss_v: float
    loss_pisco: float | None
    entropy: float
    lr_heads: float
    lr_encoder: float


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Reverse-scan discounted reward sums with terminal bootstrap zero."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma: float, tau: float) -> np.ndarray:
    """Generalized advantage estimation over one episode, bootstrap zero."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.ndim != 1 or r.shape != v.shape:
        raise DimensionError("gae expects matching 1-d reward and value arrays")
    adv = np.empty_like(r)
    acc = 0.0
    nxt = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * nxt - v[t]
        acc = delta + gamma * tau * acc
        adv[t] = acc
        nxt = v[t]
    return adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    a = np.asarray(adv, dtype=np.float32)
    return (a - a.mean()) / (a.std() + 1e-8)


def assemble_batch(episodes, gamma: float, tau: float) -> TransitionBatch:
    """Flatten episodes; advantages and returns never cross episode ends."""
    advantages = np.concatenate(
        [gae(e.rewards, e.values, gamma, tau) for e in episodes])
    returns = np.concatenate(
        [discounted_returns(e.rewards, gamma) for e in episodes])
    return TransitionBatch(
        observations=np.concatenate([e.observations for e in episodes]),
        actions=np.concatenate([e.actions for e in episodes]),
        old_log_probs=np.concatenate([e.log_probs for e in episodes]),
        rewards=np.concatenate([e.rewards for e in episodes]),
        values=np.concatenate([e.values for e in episodes]),
        advantages=advantages.astype(np.float32),
        returns=returns.astype(np.float32),
        cache_keys=[info.cache_key for e in episodes for info in e.infos],
    )


def ppo_losses(logits: Tensor, values: Tensor, batch: TransitionBatch,
               clip_eps: float):
    """Clipped surrogate L_pi, value loss L_V (with the 0.5 factor), entropy H."""
    new_lp = take_along_last(log_softmax(logits), batch.actions)
    # overflow to inf is caught by the finiteness check below
    with np.errstate(over="ignore"):
        ratio = exp(new_lp - Tensor(batch.old_log_probs))
    if not np.all(np.isfinite(ratio.data)):
        raise NumericError("non-finite policy ratio in the surrogate loss")
    adv = Tensor(batch.advantages)
    surrogate = minimum(mul(ratio, adv),
                        mul(clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv))
    l_pi = tensor_mean(surrogate)
    diff = values - Tensor(batch.returns)
    l_v = mul(tensor_mean(mul(diff, diff)), 0.5)
    h = tensor_mean(entropy_from_logits(logits))
    return l_pi, l_v, h


def total_loss(l_pi: Tensor, l_v: Tensor, h: Tensor, cfg: PPOConfig,
               aux: Tensor | None = None) -> Tensor:
    loss = -l_pi + cfg.value_coef * l_v - cfg.entropy_coef * h
    if aux is not None:
        loss = loss + cfg.pisco_weight * aux
    return loss


class TrainState:
    """Everything one training run mutates: parameters, optimizer, rngs.

    When an encoder prefix is frozen, its per-state outputs are memoized by
    (task, x, alt) and replayed as constants, for both rollouts and updates.
    Cached entries depend on which batch first computed them (BLAS row
    results shift in the last bits with batch shape), so the cache is
    deterministic per run but only numerically equal to recomputation.
    """

    def __init__(self, agent, env: JumpEnv, tasks, cfg: PPOConfig, seed: int,
                 freeze_upto, use_feature_cache: bool, cache_cap_bytes: int):
        self.agent = agent
        self.env = env
        self.tasks = list(tasks)
        self.cfg = cfg
        self.freeze_upto = freeze_upto
        self.use_feature_cache = bool(use_feature_cache) and freeze_upto is not None
        self.cache_cap_bytes = int(cache_cap_bytes)
        root = np.random.SeedSequence(seed)
        ss_roll, ss_shuffle, ss_aug = root.spawn(3)
        self._rng_rollout = np.random.default_rng(ss_roll)
        self._rng_shuffle = np.random.default_rng(ss_shuffle)
        # advanced only by auxiliary-loss augmentation draws; a zero-weight
        # run must reproduce a plain run bit-for-bit
        self._rng_aug = np.random.default_rng(ss_aug)
        self.iteration = 0
        self.update_count = 0
        self._task_offset = 0
        self._cache: dict = {}
        self._cache_bytes = 0
        head_params = {k: t for k, t in agent.params().items()
                       if not k.startswith("encoder.")}
        self.opt = Adam(groups=[(head_params, cfg.head_lr),
                                (agent.trainable_encoder_params(), cfg.encoder_lr)])

    # -- feature paths ----------------------------------------------------

    def _prefix_for(self, obs: np.ndarray, keys: list) -> np.ndarray:
        cache = self._cache
        overlay: dict = {}
        first_row: dict = {}
        for row, k in enumerate(keys):
            if k not in cache and k not in first_row:
                first_row[k] = row
        if first_row:
            uniq = list(first_row)
            sub = obs[[first_row[k] for k in uniq]]
            out = self.agent.encoder.forward_upto(Tensor(sub), self.freeze_upto).data
            for n, k in enumerate(uniq):
                entry = out[n]
                if self._cache_bytes + entry.nbytes <= self.cache_cap_bytes:
                    cache[k] = entry
                    self._cache_bytes += entry.nbytes
                else:
                    overlay[k] = entry
        return np.stack([cache[k] if k in cache else overlay[k] for k in keys])

    def encode(self, obs: np.ndarray, keys: list | None = None) -> np.ndarray:
        """Policy features (B, feature_dim) for raw observations."""
        if not self.use_feature_cache or keys is None:
            return self.agent.encoder.forward(Tensor(obs)).data
        prefix = self._prefix_for(obs, keys)
        return self.agent.encoder.forward_from(Tensor(prefix), self.freeze_upto).data

    def _train_features(self, mb: TransitionBatch) -> Tensor:
        if self.use_feature_cache:
            prefix = self._prefix_for(mb.observations, mb.cache_keys)
            return self.agent.encoder.forward_from(Tensor(prefix), self.freeze_upto)
        return self.agent.encoder.forward(Tensor(mb.observations))

    def _policy_fn(self, obs: np.ndarray, keys: list) -> dict:
        z = Tensor(self.encode(obs, keys))
        return {"logits": self.agent.policy_logits(z).data,
                "values": self.agent.value(z).data}


def init_training(agent, env_cfg, tasks, cfg: PPOConfig, seed: int,
                  freeze_upto: str | None = None, use_feature_cache: bool = True,
                  cache_cap_bytes: int = 1 << 30) -> TrainState:
    if not getattr(env_cfg, "calibrated", False):
        raise ConfigError(
            "environment config has not passed geometry calibration; "
            "run calibrate_geometry first")
    if not tasks:
        raise ConfigError("at least one task is required")
    agent.freeze_upto(freeze_upto)
    return TrainState(agent, JumpEnv(env_cfg), tasks, cfg, seed, freeze_upto,
                      use_feature_cache, cache_cap_bytes)


def train_iteration(state: TrainState) -> TrainLogRow:
    """Collect episodes, refresh advantages once, then run minibatch updates."""
    st = state
    cfg = st.cfg
    agent = st.agent
    st.iteration += 1

    n_tasks = len(st.tasks)
    tasks = [st.tasks[(st._task_offset + j) % n_tasks]
             for j in range(cfg.episodes_per_iter)]
    st._task_offset = (st._task_offset + cfg.episodes_per_iter) % n_tasks
    seed = int(st._rng_rollout.integers(0, 2 ** 63))
    episodes = batched_rollout(st.env, tasks, st._policy_fn, seed)
    mean_return = float(np.mean([e.total_return() for e in episodes]))
    batch = assemble_batch(episodes, cfg.gamma, cfg.gae_tau)

    n = len(batch)
    encode_views = agent.encoder.forward
    if cfg.pisco_weight > 0.0 and st.freeze_upto is not None:
        # run the frozen prefix outside the tape so view backprop stops at
        # the first trainable layer; updates are unchanged because frozen
        # parameters take no step either way
        def encode_views(x, _depth=st.freeze_upto):
            prefix = agent.encoder.forward_upto(x, _depth)
            return agent.encoder.forward_from(Tensor(prefix.data), _depth)
    buffer: list = []
    sum_pi = sum_v = sum_h = sum_aux = 0.0
    for _ in range(cfg.updates_per_iter):
        while len(buffer) < cfg.batch_size:
            buffer.extend(st._rng_shuffle.permutation(n).tolist())
        idx = np.asarray(buffer[:cfg.batch_size])
        del buffer[:cfg.batch_size]
        mb = batch.take(idx)
        if cfg.normalize_advantages:
            mb = dataclasses.replace(
                mb, advantages=normalize_advantages(mb.advantages))
        with tape() as t:
            z = st._train_features(mb)
            logits = agent.policy_logits(z)
            values = agent.value(z)
            l_pi, l_v, h = ppo_losses(logits, values, mb, cfg.clip_eps)
            aux = None
            if cfg.pisco_weight > 0.0:
                aux = pisco_loss(mb.observations, encode_views,
                                 agent.project, agent.policy_logits,
                                 cfg.augment, cfg.pisco_kind, st._rng_aug,
                                 use_projector=cfg.use_projector)
            loss = total_loss(l_pi, l_v, h, cfg, aux=aux)
            t.backward(loss)
        st.opt.step()
        st.opt.zero_grad()
        st.update_count += 1
        if st.update_count % cfg.lr_decay_every == 0:
            st.opt.scale_lrs(cfg.lr_decay)
        sum_pi += -l_pi.item()
        sum_v += l_v.item()
        sum_h += h.item()
        if aux is not None:
            sum_aux += aux.item()

    u = cfg.updates_per_iter
    return TrainLogRow(
        iteration=st.iteration,
        mean_return=mean_return,
        loss_pi=sum_pi / u,
        loss_v=sum_v / u,
        loss_pisco=(sum_aux / u) if cfg.pisco_weight > 0.0 else None,
        entropy=sum_h / u,
        lr_heads=st.opt.lrs[0],
        lr_encoder=st.opt.lrs[1],
    )


def train(state: TrainState, iterations: int | None = None,
          on_row=None) -> list[TrainLogRow]:
    rows = []
    count = state.cfg.iterations if iterations is None else iterations
    for _ in range(count):
        row = train_iteration(state)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
