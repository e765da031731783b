"""Seeded toy continuous-control environments and scripted behavior policies.

All environments are batched: states have shape (n, d_s) and every call to
``step`` advances n independent copies at once.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import Episode, OfflineDataset, TIER_ALIASES, build_dataset


class EnvFault(RuntimeError):
    pass


class EnvConfigError(ValueError):
    pass


def rng_stream(seed: int, name: str, worker: int = 0) -> np.random.Generator:
    """Independent generator for a named sub-stream of a root seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()), worker)))


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    episode_len: int
    r_random: float
    r_expert: float

    def __post_init__(self) -> None:
        if not self.r_expert > self.r_random:
            raise EnvConfigError(f"{self.name}: r_expert {self.r_expert} must exceed r_random {self.r_random}")
        if self.episode_len < 10:
            raise EnvConfigError("episode_len must be at least 10")

    def normalized_return(self, r: float) -> float:
        return (r - self.r_random) / (self.r_expert - self.r_random)


class ToyEnv:
    name = "toy"
    d_s = 0
    d_a = 0
    episode_len = 50

    def __init__(self, sigma: float = 0.0, seed: int = 0) -> None:
        if sigma < 0:
            raise EnvConfigError("process noise std must be non-negative")
        self.sigma = float(sigma)
        self.rng = np.random.default_rng(seed)

    def _noise(self, shape) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(shape)
        return self.sigma * self.rng.standard_normal(shape)

    def _check(self, s: np.ndarray) -> None:
        if not np.all(np.isfinite(s)):
            raise EnvFault(f"{self.name}: non-finite state")

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PointMass2D(ToyEnv):
    """Planar point mass, state (x, y, vx, vy), force-controlled toward a fixed goal.

    s' = A s + B a + noise, reward = -|pos(s') - goal| - 0.01 |a|^2.
    """

    name = "pointmass2d"
    d_s = 4
    d_a = 2
    episode_len = 50

    def __init__(self, sigma: float = 0.0, seed: int = 0, dt: float = 0.1, force: float = 4.0,
                 damping: float = 0.5, goal=(0.0, 0.0), A: np.ndarray | None = None,
                 B: np.ndarray | None = None, kp: float = 5.0, kd: float = 0.6) -> None:
        super().__init__(sigma, seed)
        I = np.eye(2)
        Z = np.zeros((2, 2))
        self.A = np.asarray(A, dtype=np.float64) if A is not None else np.block(
            [[I, dt * I], [Z, (1.0 - damping) * I]])
        self.B = np.asarray(B, dtype=np.float64) if B is not None else np.vstack(
            [0.5 * dt * dt * force * I, dt * force * I])
        self.goal = np.asarray(goal, dtype=np.float64)
        self.force = force
        self.kp, self.kd = kp, kd

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # start on the unit circle around the goal, at rest
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        s = np.zeros((n, 4))
        s[:, 0] = self.goal[0] + np.cos(phi)
        s[:, 1] = self.goal[1] + np.sin(phi)
        return s

    def step(self, state, action):
        state = np.asarray(state, dtype=np.float64)
        self._check(state)
        a = np.clip(action, -1.0, 1.0)
        nxt = state @ self.A.T + a @ self.B.T + self._noise(state.shape)
        reward = -np.linalg.norm(nxt[..., :2] - self.goal, axis=-1) - 0.01 * np.sum(a * a, axis=-1)
        return nxt, reward

    def expert_action(self, state):
        u = self.kp * (self.goal - state[..., :2]) - self.kd * state[..., 2:]
        return np.clip(u, -1.0, 1.0)

    def inverse_action(self, state, next_state):
        """Least-squares action explaining (s, s'); exact when noise-free and unclipped."""
        resid = next_state - state @ self.A.T
        return np.linalg.lstsq(self.B, resid.T, rcond=None)[0].T


class Pendulum(ToyEnv):
    """Damped pendulum swing-up, state (cos th, sin th, th_dot), th = 0 upright."""

    name = "pendulum"
    d_s = 3
    d_a = 1
    episode_len = 60

    def __init__(self, sigma: float = 0.0, seed: int = 0, dt: float = 0.05, gravity: float = 10.0,
                 torque: float = 15.0, damping: float = 0.1) -> None:
        super().__init__(sigma, seed)
        self.dt, self.gravity, self.torque, self.damping = dt, gravity, torque, damping

    def reset(self, rng, n):
        th = np.pi + rng.uniform(-0.5, 0.5, size=n)
        thd = rng.uniform(-0.5, 0.5, size=n)
        return np.stack([np.cos(th), np.sin(th), thd], axis=1)

    def step(self, state, action):
        state = np.asarray(state, dtype=np.float64)
        self._check(state)
        a = np.clip(action, -1.0, 1.0)[..., 0]
        th = np.arctan2(state[..., 1], state[..., 0])
        thd = state[..., 2]
        acc = self.gravity * np.sin(th) - self.damping * thd + self.torque * a
        thd2 = thd + self.dt * acc + self._noise(thd.shape)
        th2 = th + self.dt * thd2
        nxt = np.stack([np.cos(th2), np.sin(th2), thd2], axis=-1)
        reward = -(np.arctan2(nxt[..., 1], nxt[..., 0]) ** 2 + 0.1 * thd2 ** 2 + 0.001 * a ** 2)
        return nxt, reward

    def expert_action(self, state):
        th = np.arctan2(state[..., 1], state[..., 0])
        u = (-25.0 * th - 6.0 * state[..., 2] - self.gravity * np.sin(th)) / self.torque
        return np.clip(u, -1.0, 1.0)[..., None]


ENVS = {"pointmass2d": PointMass2D, "pendulum": Pendulum}


def make_env(name: str, sigma: float = 0.0, seed: int = 0) -> ToyEnv:
    try:
        return ENVS[name](sigma=sigma, seed=seed)
    except KeyError:
        raise EnvConfigError(f"unknown environment {name!r}; known: {sorted(ENVS)}") from None


# -- behavior policies ------------------------------------------------------

POLICY_KINDS = ("random", "medium", "expert")
MEDIUM_NOISE = 0.3


@dataclass(frozen=True)
class BehaviorPolicy:
    kind: str
    noise_std: float = MEDIUM_NOISE

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def act(self, env: ToyEnv, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = state.shape[0]
        if self.kind == "random":
            return rng.uniform(-1.0, 1.0, size=(n, env.d_a))
        a = env.expert_action(state)
        if self.kind == "medium":
            a = np.clip(a + self.noise_std * rng.standard_normal(a.shape), -1.0, 1.0)
        return a


def rollout(env: ToyEnv, policy, n_episodes: int, rng: np.random.Generator,
            episode_len: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run n episodes in lockstep. ``policy(states) -> actions`` or a BehaviorPolicy.

    Returns states (n, T+1, d_s), actions (n, T, d_a), rewards (n, T).
    """
    T = episode_len or env.episode_len
    s = env.reset(rng, n_episodes)
    S = np.zeros((n_episodes, T + 1, env.d_s))
    A = np.zeros((n_episodes, T, env.d_a))
    R = np.zeros((n_episodes, T))
    S[:, 0] = s
    for t in range(T):
        if isinstance(policy, BehaviorPolicy):
            a = policy.act(env, s, rng)
        else:
            a = policy(s)
        a = np.clip(a, -1.0, 1.0)
        s, r = env.step(s, a)
        A[:, t] = a
        R[:, t] = r
        S[:, t + 1] = s
    return S, A, R


TIER_MIX = {
    "medium": ("medium", "medium"),
    "medium-replay": ("random", "medium"),
    "medium-expert": ("medium", "expert"),
}


def tier_assignment(tier: str, n_episodes: int, rng: np.random.Generator) -> list[str]:
    """Per-episode policy kinds; two-policy tiers are split 50/50 in seeded order."""
    first, second = TIER_MIX[tier]
    kinds = [first] * (n_episodes // 2) + [second] * (n_episodes - n_episodes // 2)
    order = rng.permutation(n_episodes)
    return [kinds[i] for i in order]


def generate_dataset(env: ToyEnv | str, tier: str, n_episodes: int, seed: int,
                     gamma: float = 0.99) -> OfflineDataset:
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    env = make_env(env, seed=seed) if isinstance(env, str) else env
    tier = TIER_ALIASES.get(tier, tier)
    if tier not in TIER_MIX:
        raise ValueError(f"unknown tier {tier!r}")
    rng = rng_stream(seed, "data")
    kinds = tier_assignment(tier, n_episodes, rng)
    episodes: list[Episode | None] = [None] * n_episodes
    for kind in POLICY_KINDS:
        idx = [i for i, k in enumerate(kinds) if k == kind]
        if not idx:
            continue
        S, A, R = rollout(env, BehaviorPolicy(kind), len(idx), rng)
        for j, i in enumerate(idx):
            episodes[i] = Episode(S[j], A[j], R[j])
    ds = build_dataset(episodes, tier=tier, env=env.name, gamma=gamma)
    ds.meta["policy_kinds"] = kinds
    return ds


def reference_returns(env: ToyEnv | str, n_episodes: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean returns of the random and the expert policy."""
    if n_episodes < 100:
        raise ValueError("reference returns need at least 100 episodes")
    env = make_env(env) if isinstance(env, str) else env
    _, _, R_rand = rollout(env, BehaviorPolicy("random"), n_episodes, rng_stream(seed, "reference-random"))
    _, _, R_exp = rollout(env, BehaviorPolicy("expert"), n_episodes, rng_stream(seed, "reference-expert"))
    r_random, r_expert = float(R_rand.sum(axis=1).mean()), float(R_exp.sum(axis=1).mean())
    if r_expert <= r_random:
        raise EnvConfigError(f"{env.name}: expert return {r_expert} does not exceed random return {r_random}")
    return r_random, r_expert


@lru_cache(maxsize=None)
def env_spec(name: str) -> EnvSpec:
    env = make_env(name)
    r_random, r_expert = reference_returns(env, 1000, seed=0)
    return EnvSpec(name, env.d_s, env.d_a, env.episode_len, r_random, r_expert)
