"""Inverse dynamics: a diagonal Gaussian over a_t given (s_{t-m..t-1}, s_t, s_{t+1})."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import NormStats, OfflineDataset, Transition, TrajectorySegment
from .nn import (AdamState, Dense, Activation, ParamStore, ShapeError, StateError, adam_step,
                 load_checkpoint, save_checkpoint)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class IdmConfig:
    context: int = 1          # m, number of history states
    hidden: int = 1024
    lr: float = 1e-4
    batch_size: int = 256
    steps: int = 20_000
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    sample: bool = False      # draw actions instead of returning the mean
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.context < 0:
            raise ValueError("context length must be non-negative")
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")


class IdmModel:
    """Two single-hidden-layer heads: tanh-squashed mean and clamped log-std."""

    def __init__(self, d_s: int, d_a: int, cfg: IdmConfig, norm_stats: NormStats,
                 rng: np.random.Generator | None = None, store: ParamStore | None = None) -> None:
        self.d_s, self.d_a, self.cfg, self.norm_stats = d_s, d_a, cfg, norm_stats
        self.store = store if store is not None else ParamStore(cfg.dtype)
        n_in, hid = self.in_dim, cfg.hidden
        self.mu_l0 = Dense(self.store, "mu.l0", n_in, hid, rng)
        self.mu_a0 = Activation("relu")
        self.mu_l1 = Dense(self.store, "mu.l1", hid, d_a, rng)
        self.mu_out = Activation("tanh")
        self.ls_l0 = Dense(self.store, "logstd.l0", n_in, hid, rng)
        self.ls_a0 = Activation("relu")
        self.ls_l1 = Dense(self.store, "logstd.l1", hid, d_a, rng)
        self._clamp_mask = None

    @property
    def in_dim(self) -> int:
        return (self.cfg.context + 2) * self.d_s

    def features(self, window: np.ndarray) -> np.ndarray:
        """(n, m+2, d_s) raw states -> (n, (m+2) d_s) normalized input."""
        if window.ndim != 3 or window.shape[1:] != (self.cfg.context + 2, self.d_s):
            raise ShapeError(f"idm: expected window (n, {self.cfg.context + 2}, {self.d_s}), got {window.shape}")
        return self.norm_stats.norm_states(window).reshape(len(window), -1)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.store.cast(x)
        mu = self.mu_out.forward(self.mu_l1.forward(self.mu_a0.forward(self.mu_l0.forward(x))))
        raw = self.ls_l1.forward(self.ls_a0.forward(self.ls_l0.forward(x)))
        lo, hi = self.cfg.log_std_min, self.cfg.log_std_max
        self._clamp_mask = (raw > lo) & (raw < hi)
        return mu, np.clip(raw, lo, hi)

    def backward(self, g_mu: np.ndarray, g_log_std: np.ndarray) -> None:
        if self._clamp_mask is None:
            raise StateError("idm: backward called without a matching forward")
        mask, self._clamp_mask = self._clamp_mask, None
        g_mu, g_log_std = self.store.cast(g_mu), self.store.cast(g_log_std)
        self.mu_l0.backward(self.mu_a0.backward(self.mu_l1.backward(self.mu_out.backward(g_mu))), input_grad=False)
        self.ls_l0.backward(self.ls_a0.backward(self.ls_l1.backward(g_log_std * mask)), input_grad=False)

    def nll(self, x: np.ndarray, actions: np.ndarray, backward: bool = True) -> float:
        """Batch mean of -log N(a; mu, diag sigma^2)."""
        mu, ls = self.forward(x)
        inv_var = np.exp(-2.0 * ls)
        d = actions - mu
        per = 0.5 * np.sum(d * d * inv_var + 2.0 * ls + LOG_2PI, axis=1)
        B = len(x)
        if backward:
            self.backward(-d * inv_var / B, (1.0 - d * d * inv_var) / B)
        else:
            self._clamp_mask = None
        return float(per.mean())

    def infer(self, window: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Actions for raw-state windows (n, m+2, d_s); the Gaussian mean unless sampling is on."""
        if not np.all(np.isfinite(window)):
            raise ValueError("idm: non-finite input states")
        mu, ls = self.forward(self.features(window))
        self._clamp_mask = None
        if self.cfg.sample:
            if rng is None:
                raise ValueError("idm: sampling mode needs an rng")
            mu = np.clip(mu + np.exp(ls) * rng.standard_normal(mu.shape), -1.0, 1.0)
        return mu

    def save(self, path: str | Path, step: int = 0) -> None:
        spec = {"d_s": self.d_s, "d_a": self.d_a, "config": asdict(self.cfg),
                "norm_stats": self.norm_stats.to_json()}
        save_checkpoint(path, "idm", spec, {"online": self.store}, step=step)

    @classmethod
    def load(cls, path: str | Path) -> "IdmModel":
        header, stores = load_checkpoint(path)
        if header["kind"] != "idm":
            raise ValueError(f"{path}: checkpoint kind {header['kind']!r}, expected 'idm'")
        s = header["spec"]
        return cls(s["d_s"], s["d_a"], IdmConfig(**s["config"]), NormStats.from_json(s["norm_stats"]),
                   store=stores["online"])


def idm_windows(dataset: OfflineDataset, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Real (s_{t-m..t+1}, a_t) windows. Only t >= m is used, so no window reaches before an episode start."""
    W, A = [], []
    for ep in dataset.episodes:
        T = ep.n_steps
        if T <= context:
            continue
        t = np.arange(context, T)
        idx = t[:, None] + np.arange(-context, 2)[None, :]
        W.append(ep.states[idx])
        A.append(ep.actions[t])
    if not W:
        raise ValueError(f"no episode is long enough for context length {context}")
    return np.concatenate(W), np.concatenate(A)


def train_idm(dataset: OfflineDataset, cfg: IdmConfig, rng: np.random.Generator, steps: int | None = None,
              log_every: int = 0, on_log=None) -> tuple[IdmModel, list[float]]:
    """Maximum likelihood on real windows only."""
    windows, actions = idm_windows(dataset, cfg.context)
    model = IdmModel(dataset.d_s, dataset.d_a, cfg, dataset.norm_stats, rng)
    x_all = model.features(windows)
    adam = AdamState(lr=cfg.lr)
    steps = cfg.steps if steps is None else steps
    losses = []
    n = len(x_all)
    for it in range(steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        losses.append(model.nll(x_all[idx], actions[idx]))
        adam_step(model.store, adam)
        if log_every and on_log is not None and (it + 1) % log_every == 0:
            on_log(it + 1, float(np.mean(losses[-log_every:])))
    return model, losses


@dataclass
class CompletedSegments:
    """Transitions from n anchors, each (H+1) long, stored as (n, H+1, ...) arrays."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def flat(self) -> dict[str, np.ndarray]:
        n, L = self.rewards.shape
        return {"states": self.states.reshape(n * L, -1), "actions": self.actions.reshape(n * L, -1),
                "rewards": self.rewards.reshape(n * L), "next_states": self.next_states.reshape(n * L, -1)}


def complete_segments(model: IdmModel, anchor_states: np.ndarray, anchor_actions: np.ndarray,
                      segments: np.ndarray, rng: np.random.Generator | None = None) -> CompletedSegments:
    """Label generated segments (n, H+1, d_s+1) with actions.

    Transition 0 keeps the real (s_t, a_t); transition h >= 1 gets its action from
    the IDM over the generated sequence, with history before s_t padded by s_t.
    """
    n, L, c = segments.shape
    d_s = model.d_s
    if c != d_s + 1 or anchor_states.shape != (n, d_s) or anchor_actions.shape != (n, model.d_a):
        raise ShapeError("complete_segments: anchor and segment shapes disagree")
    H = L - 1
    m = model.cfg.context
    gen = segments[:, :, :d_s]
    chain = np.concatenate([np.repeat(anchor_states[:, None, :], m, axis=1), anchor_states[:, None, :], gen], axis=1)
    # chain[:, m + j] is the state at offset j from the anchor (j = 0 is s_t)
    states = chain[:, m:m + L]
    next_states = gen
    actions = np.empty((n, L, model.d_a))
    actions[:, 0] = anchor_actions
    if H > 0:
        h = np.arange(1, L)
        idx = (m + h)[:, None] + np.arange(-m, 2)[None, :]          # (H, m+2)
        win = chain[:, idx]                                          # (n, H, m+2, d_s)
        actions[:, 1:] = model.infer(win.reshape(n * H, m + 2, d_s), rng).reshape(n, H, -1)
    return CompletedSegments(states, actions, segments[:, :, d_s].copy(), next_states)


def complete_segment(model: IdmModel, anchor: tuple[np.ndarray, np.ndarray], seg: TrajectorySegment,
                     horizon: int | None = None, rng: np.random.Generator | None = None) -> list[Transition]:
    """Single-anchor form; every returned transition is flagged synthetic."""
    if horizon is not None and seg.horizon != horizon:
        raise ValueError(f"segment horizon {seg.horizon} does not match expected {horizon}")
    s, a = anchor
    arr = np.concatenate([seg.states, seg.rewards[:, None]], axis=1)[None]
    out = complete_segments(model, s[None], a[None], arr, rng)
    return [Transition(out.states[0, h], out.actions[0, h], float(out.rewards[0, h]), out.next_states[0, h],
                       synthetic=True) for h in range(seg.horizon + 1)]
