"""One-step TD offline learners: TD3+BC and implicit Q-learning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import (AdamState, Mlp, MlpSpec, NonFiniteGradientError, ParamStore, adam_step, load_checkpoint,
                 polyak_update, save_checkpoint)

LOG_2PI = math.log(2.0 * math.pi)
AGENT_KINDS = ("td3bc", "iql")


class AgentFault(FloatingPointError):
    pass


@dataclass
class AgentConfig:
    kind: str = "td3bc"
    hidden: int = 64
    n_hidden: int = 2
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 30_000
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    # td3bc
    alpha_bc: float = 2.5
    smoothing: bool = True
    target_noise: float = 0.2
    noise_clip: float = 0.5
    # iql
    expectile: float = 0.7
    beta: float = 3.0
    adv_clip: float = 100.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    strict_order: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}; expected one of {AGENT_KINDS}")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be at least 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")


class Net:
    """An MLP with its own parameter store and optimizer state."""

    def __init__(self, name: str, widths: list[int], rng, output_activation: str = "identity",
                 zero_last: bool = False, lr: float = 1e-4, store: ParamStore | None = None,
                 dtype: str = "float64") -> None:
        self.store = store if store is not None else ParamStore(dtype)
        self.mlp = Mlp(self.store, name, MlpSpec(widths, "relu", output_activation, zero_last), rng)
        self.adam = AdamState(lr=lr)

    def forward(self, x):
        return self.mlp.forward(self.store.cast(x))

    def backward(self, g):
        return self.mlp.backward(self.store.cast(g))

    def step(self) -> None:
        adam_step(self.store, self.adam)

    def frozen_copy(self, name: str, widths: list[int], output_activation: str = "identity") -> "Net":
        return Net(name, widths, None, output_activation, store=self.store.copy())


def expectile_loss(u: np.ndarray, tau: float) -> np.ndarray:
    """|tau - 1[u < 0]| u^2, elementwise."""
    return np.abs(tau - (u < 0)) * u * u


def awr_weights(adv: np.ndarray, beta: float, clip: float = 100.0) -> np.ndarray:
    return np.minimum(np.exp(np.minimum(beta * adv, math.log(clip) + 1.0)), clip)


class Agent:
    """State shared by both learners: config, observation normalizer and twin critics."""

    kind = "base"

    def __init__(self, d_s: int, d_a: int, cfg: AgentConfig, obs_mean: np.ndarray, obs_std: np.ndarray,
                 rng: np.random.Generator | None) -> None:
        self.d_s, self.d_a, self.cfg = d_s, d_a, cfg
        self.obs_mean = np.asarray(obs_mean, dtype=np.float64)
        self.obs_std = np.asarray(obs_std, dtype=np.float64)
        self.iteration = 0
        h = [cfg.hidden] * cfg.n_hidden
        self.critic_widths = [d_s + d_a] + h + [1]
        self.critic1 = Net("q1", self.critic_widths, rng, lr=cfg.lr, dtype=cfg.dtype)
        self.critic2 = Net("q2", self.critic_widths, rng, lr=cfg.lr, dtype=cfg.dtype)
        self.critic1_t = self.critic1.frozen_copy("q1", self.critic_widths)
        self.critic2_t = self.critic2.frozen_copy("q2", self.critic_widths)

    def norm(self, s: np.ndarray) -> np.ndarray:
        return (s - self.obs_mean) / self.obs_std

    @staticmethod
    def q(net: Net, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return net.forward(np.concatenate([s, a], axis=1))[:, 0]

    def _check_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise ValueError("act: non-finite state")
        return state

    def networks(self) -> dict[str, Net]:
        raise NotImplementedError

    def update(self, batch: dict, rng: np.random.Generator) -> dict[str, float]:
        raise NotImplementedError

    def act(self, state: np.ndarray, deterministic: bool = True, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def save(self, path: str | Path) -> None:
        spec = {"kind": self.kind, "d_s": self.d_s, "d_a": self.d_a, "config": asdict(self.cfg),
                "obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist()}
        save_checkpoint(path, "agent", spec, {k: n.store for k, n in self.networks().items()}, step=self.iteration)


def critic_regression(agent: Agent, s: np.ndarray, a: np.ndarray, y: np.ndarray,
                      backward: bool = True) -> tuple[float, float]:
    """Squared error of both online critics against a fixed target y."""
    B = len(y)
    out = []
    for net in (agent.critic1, agent.critic2):
        d = agent.q(net, s, a) - y
        out.append(float(np.mean(d * d)))
        if backward:
            net.backward((2.0 * d / B)[:, None])
    return out[0], out[1]


# -- TD3+BC -----------------------------------------------------------------

class Td3bcAgent(Agent):
    kind = "td3bc"

    def __init__(self, d_s, d_a, cfg, obs_mean, obs_std, rng) -> None:
        super().__init__(d_s, d_a, cfg, obs_mean, obs_std, rng)
        self.actor_widths = [d_s] + [cfg.hidden] * cfg.n_hidden + [d_a]
        self.actor = Net("pi", self.actor_widths, rng, "tanh", zero_last=True, lr=cfg.lr, dtype=cfg.dtype)
        self.actor_t = self.actor.frozen_copy("pi", self.actor_widths, "tanh")

    def networks(self) -> dict[str, Net]:
        return {"actor": self.actor, "actor_t": self.actor_t, "critic1": self.critic1, "critic2": self.critic2,
                "critic1_t": self.critic1_t, "critic2_t": self.critic2_t}

    def smoothing_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if not self.cfg.smoothing:
            return np.zeros((n, self.d_a))
        c = self.cfg.noise_clip
        return np.clip(self.cfg.target_noise * rng.standard_normal((n, self.d_a)), -c, c)

    def target(self, r: np.ndarray, s2: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """y = r + gamma min_j Q'_j(s', clip(pi'(s') + noise))."""
        a2 = np.clip(self.actor_t.forward(s2) + noise, -1.0, 1.0)
        q = np.minimum(self.q(self.critic1_t, s2, a2), self.q(self.critic2_t, s2, a2))
        return r + self.cfg.gamma * q

    def critic_loss(self, batch: dict, noise: np.ndarray, backward: bool = True) -> tuple[float, float]:
        s, s2 = self.norm(batch["states"]), self.norm(batch["next_states"])
        y = self.target(batch["rewards"], s2, noise)
        return critic_regression(self, s, batch["actions"], y, backward)

    def actor_loss(self, batch: dict, lam: float | None = None, backward: bool = True) -> tuple[float, float]:
        """-lam mean Q1(s, pi(s)) + mean |a - pi(s)|^2 with lam = alpha / mean|Q1| held constant."""
        s, a = self.norm(batch["states"]), batch["actions"]
        B = len(s)
        pi = self.actor.forward(s)
        q = self.q(self.critic1, s, pi)
        if lam is None:
            lam = self.cfg.alpha_bc / max(float(np.mean(np.abs(q))), 1e-8)
        d = pi - a
        loss = -lam * float(q.mean()) + float(np.mean(np.sum(d * d, axis=1)))
        if backward:
            g_in = self.critic1.backward(np.full((B, 1), -lam / B))
            self.critic1.store.zero_grad()
            self.actor.backward(g_in[:, self.d_s:] + 2.0 * d / B)
        return loss, lam

    def update(self, batch: dict, rng: np.random.Generator) -> dict[str, float]:
        self.iteration += 1
        noise = self.smoothing_noise(rng, len(batch["rewards"]))
        l1, l2 = self.critic_loss(batch, noise)
        self.critic1.step()
        self.critic2.step()
        rec = {"critic1": l1, "critic2": l2}
        if self.iteration % self.cfg.policy_delay == 0:
            la, lam = self.actor_loss(batch)
            self.actor.step()
            for net, tgt in ((self.actor, self.actor_t), (self.critic1, self.critic1_t), (self.critic2, self.critic2_t)):
                polyak_update(tgt.store, net.store, self.cfg.tau)
            rec.update(actor=la, lam=lam)
        return rec

    def act(self, state, deterministic: bool = True, rng=None):
        s = self._check_state(state)
        return np.clip(self.actor.forward(self.norm(s)), -1.0, 1.0)


# -- IQL --------------------------------------------------------------------

class IqlAgent(Agent):
    kind = "iql"

    def __init__(self, d_s, d_a, cfg, obs_mean, obs_std, rng) -> None:
        super().__init__(d_s, d_a, cfg, obs_mean, obs_std, rng)
        h = [cfg.hidden] * cfg.n_hidden
        self.value_widths = [d_s] + h + [1]
        self.actor_widths = [d_s] + h + [d_a]
        self.value = Net("v", self.value_widths, rng, lr=cfg.lr, dtype=cfg.dtype)
        self.actor = Net("pi", self.actor_widths, rng, "tanh", zero_last=True, lr=cfg.lr, dtype=cfg.dtype)
        self.log_std = self.actor.store.add("pi.log_std", np.zeros(d_a))
        self.g_log_std = self.actor.store.grads["pi.log_std"]

    def networks(self) -> dict[str, Net]:
        return {"actor": self.actor, "value": self.value, "critic1": self.critic1, "critic2": self.critic2,
                "critic1_t": self.critic1_t, "critic2_t": self.critic2_t}

    def v(self, s: np.ndarray) -> np.ndarray:
        return self.value.forward(s)[:, 0]

    def td_target(self, r: np.ndarray, s2_norm: np.ndarray) -> np.ndarray:
        return r + self.cfg.gamma * self.v(s2_norm)

    def value_loss(self, batch: dict, backward: bool = True) -> float:
        s, a = self.norm(batch["states"]), batch["actions"]
        q = np.minimum(self.q(self.critic1_t, s, a), self.q(self.critic2_t, s, a))
        u = q - self.v(s)
        B = len(u)
        if backward:
            w = np.abs(self.cfg.expectile - (u < 0))
            self.value.backward((-2.0 * w * u / B)[:, None])
        return float(np.mean(expectile_loss(u, self.cfg.expectile)))

    def critic_loss(self, batch: dict, y: np.ndarray | None = None, backward: bool = True) -> tuple[float, float]:
        s = self.norm(batch["states"])
        if y is None:
            y = self.td_target(batch["rewards"], self.norm(batch["next_states"]))
        return critic_regression(self, s, batch["actions"], y, backward)

    def clamped_log_std(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.cfg.log_std_min, self.cfg.log_std_max
        return np.clip(self.log_std, lo, hi), (self.log_std > lo) & (self.log_std < hi)

    def log_prob(self, mu: np.ndarray, a: np.ndarray) -> np.ndarray:
        ls, _ = self.clamped_log_std()
        d = (a - mu) * np.exp(-ls)
        return -0.5 * np.sum(d * d + 2.0 * ls + LOG_2PI, axis=1)

    def advantage(self, s_norm: np.ndarray, a: np.ndarray) -> np.ndarray:
        q = np.minimum(self.q(self.critic1, s_norm, a), self.q(self.critic2, s_norm, a))
        return q - self.v(s_norm)

    def actor_loss(self, batch: dict, backward: bool = True) -> float:
        """-mean(w log pi(a|s)) with w = min(exp(beta A), clip) toward the batch actions."""
        s, a = self.norm(batch["states"]), batch["actions"]
        w = awr_weights(self.advantage(s, a), self.cfg.beta, self.cfg.adv_clip)
        mu = self.actor.forward(s)
        lp = self.log_prob(mu, a)
        B = len(s)
        if backward:
            ls, mask = self.clamped_log_std()
            inv_var = np.exp(-2.0 * ls)
            d = a - mu
            self.actor.backward(-(w[:, None] * d * inv_var) / B)
            g_ls = -np.sum(w[:, None] * (d * d * inv_var - 1.0), axis=0) / B
            self.g_log_std += g_ls * mask
        return float(-np.mean(w * lp))

    def update(self, batch: dict, rng: np.random.Generator) -> dict[str, float]:
        self.iteration += 1
        y = self.td_target(batch["rewards"], self.norm(batch["next_states"]))
        lv = self.value_loss(batch)
        self.value.step()
        l1, l2 = self.critic_loss(batch, y)
        self.critic1.step()
        self.critic2.step()
        rec = {"value": lv, "critic1": l1, "critic2": l2}
        if self.iteration % self.cfg.policy_delay == 0:
            rec["actor"] = self.actor_loss(batch)
            self.actor.step()
            polyak_update(self.critic1_t.store, self.critic1.store, self.cfg.tau)
            polyak_update(self.critic2_t.store, self.critic2.store, self.cfg.tau)
        return rec

    def act(self, state, deterministic: bool = True, rng=None):
        s = self._check_state(state)
        mu = self.actor.forward(self.norm(s))
        if not deterministic:
            if rng is None:
                raise ValueError("stochastic act needs an rng")
            ls, _ = self.clamped_log_std()
            mu = mu + np.exp(ls) * rng.standard_normal(mu.shape)
        return np.clip(mu, -1.0, 1.0)


AGENTS = {"td3bc": Td3bcAgent, "iql": IqlAgent}


def make_agent(cfg: AgentConfig, d_s: int, d_a: int, obs_mean, obs_std, rng) -> Agent:
    return AGENTS[cfg.kind](d_s, d_a, cfg, obs_mean, obs_std, rng)


def load_agent(path: str | Path) -> Agent:
    header, stores = load_checkpoint(path)
    if header["kind"] != "agent":
        raise ValueError(f"{path}: checkpoint kind {header['kind']!r}, expected 'agent'")
    s = header["spec"]
    cfg = AgentConfig(**s["config"])
    agent = make_agent(cfg, s["d_s"], s["d_a"], np.asarray(s["obs_mean"]), np.asarray(s["obs_std"]), None)
    for name, net in agent.networks().items():
        net.store.assign(stores[name])
    agent.iteration = header["step"]
    return agent


def buffer_obs_stats(states: np.ndarray, floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    return states.mean(axis=0), np.maximum(states.std(axis=0), floor)


def train_agent(agent: Agent, buffer: dict[str, np.ndarray], steps: int, rng: np.random.Generator,
                on_record=None, on_checkpoint=None, checkpoint_every: int = 10_000) -> list[dict]:
    """Uniform minibatch updates (or in-order sweeps with ``strict_order``); one record per iteration."""
    n = len(buffer["rewards"])
    if n == 0:
        raise ValueError("cannot train on an empty buffer")
    B = min(agent.cfg.batch_size, n)
    records = []
    cursor = 0
    for it in range(steps):
        if agent.cfg.strict_order:
            idx = (cursor + np.arange(B)) % n
            cursor = (cursor + B) % n
        else:
            idx = rng.integers(0, n, size=B)
        batch = {k: buffer[k][idx] for k in ("states", "actions", "rewards", "next_states")}
        try:
            rec = agent.update(batch, rng)
        except NonFiniteGradientError as e:
            raise AgentFault(f"non-finite gradient at iteration {agent.iteration}: {e}") from e
        if not all(math.isfinite(v) for v in rec.values()):
            raise AgentFault(f"non-finite loss at iteration {agent.iteration}: {rec}")
        rec["iteration"] = agent.iteration
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if on_checkpoint is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            on_checkpoint(agent)
    return records
