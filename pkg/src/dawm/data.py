"""Offline datasets: episodes, transitions, diffusion segments and their file format."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

TIERS = ("medium", "medium-replay", "medium-expert")
TIER_ALIASES = {"m": "medium", "mr": "medium-replay", "me": "medium-expert"}
STD_FLOOR = 1e-6
DATASET_MAGIC = b"DAWMDS01"
FORMAT_VERSION = 1


class DataIntegrityError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files; ``code`` identifies the failure."""

    code = "format"


class BadMagicError(DatasetFormatError):
    code = "bad-magic"


class VersionMismatchError(DatasetFormatError):
    code = "version-mismatch"


class TruncatedFileError(DatasetFormatError):
    code = "truncated"


class DimensionMismatchError(DatasetFormatError):
    code = "dimension-mismatch"


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    synthetic: bool = False

    def __post_init__(self) -> None:
        if self.state.ndim != 1 or self.state.size == 0:
            raise DataIntegrityError("state must be a non-empty vector")
        if self.next_state.shape != self.state.shape:
            raise DataIntegrityError(f"state {self.state.shape} and next_state {self.next_state.shape} differ")
        if self.action.ndim != 1 or self.action.size == 0:
            raise DataIntegrityError("action must be a non-empty vector")
        if not (np.all(np.isfinite(self.action)) and math.isfinite(self.reward)):
            raise DataIntegrityError("non-finite action or reward")


@dataclass(frozen=True)
class TrajectorySegment:
    """Future states s_{t+1..t+H+1} paired with rewards r_{t..t+H}."""

    states: np.ndarray   # (H+1, d_s)
    rewards: np.ndarray  # (H+1,)

    def __post_init__(self) -> None:
        if self.states.ndim != 2 or self.rewards.ndim != 1 or len(self.states) != len(self.rewards):
            raise DataIntegrityError(
                f"segment needs H+1 states and H+1 rewards, got {self.states.shape} and {self.rewards.shape}")

    @property
    def horizon(self) -> int:
        return len(self.rewards) - 1

    def flat(self) -> np.ndarray:
        """Interleaved (state, reward) rows flattened to (H+1)*(d_s+1)."""
        return np.concatenate([self.states, self.rewards[:, None]], axis=1).ravel()

    @classmethod
    def from_array(cls, x: np.ndarray, d_s: int) -> "TrajectorySegment":
        x = x.reshape(-1, d_s + 1)
        return cls(x[:, :d_s].copy(), x[:, d_s].copy())


@dataclass(frozen=True)
class ConditioningTuple:
    state: np.ndarray
    action: np.ndarray
    rtg: float
    null_flag: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.rtg):
            raise DataIntegrityError("return-to-go must be finite")


@dataclass(frozen=True)
class Episode:
    """``len(states) == len(actions) + 1``; the episode length is the number of states."""

    states: np.ndarray   # (T+1, d_s)
    actions: np.ndarray  # (T, d_a)
    rewards: np.ndarray  # (T,)

    def __post_init__(self) -> None:
        T = len(self.actions)
        if self.states.shape[0] != T + 1 or self.rewards.shape != (T,):
            raise DataIntegrityError(
                f"episode arrays inconsistent: states {self.states.shape}, actions {self.actions.shape}, "
                f"rewards {self.rewards.shape}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    reward_mean: float
    reward_std: float

    def to_json(self) -> dict:
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "reward_mean": self.reward_mean, "reward_std": self.reward_std}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["state_mean"], dtype=np.float64), np.asarray(d["state_std"], dtype=np.float64),
                   float(d["reward_mean"]), float(d["reward_std"]))

    def norm_states(self, s: np.ndarray) -> np.ndarray:
        return (s - self.state_mean) / self.state_std

    def denorm_states(self, s: np.ndarray) -> np.ndarray:
        return s * self.state_std + self.state_mean

    def norm_rewards(self, r: np.ndarray) -> np.ndarray:
        return (r - self.reward_mean) / self.reward_std

    def denorm_rewards(self, r: np.ndarray) -> np.ndarray:
        return r * self.reward_std + self.reward_mean


@dataclass(frozen=True)
class OfflineDataset:
    episodes: tuple[Episode, ...]
    norm_stats: NormStats
    rtg_scale: float
    tier: str = "medium"
    env: str = ""
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rtg_scale <= 0:
            raise DataIntegrityError("rtg_scale must be positive")
        if np.any(self.norm_stats.state_std <= 0) or self.norm_stats.reward_std <= 0:
            raise DataIntegrityError("normalization std must be strictly positive")

    @property
    def d_s(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def d_a(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_transitions(self) -> int:
        return sum(ep.n_steps for ep in self.episodes)

    def transitions(self) -> dict[str, np.ndarray]:
        """All real (s, a, r, s') as stacked arrays."""
        return {
            "states": np.concatenate([ep.states[:-1] for ep in self.episodes]),
            "actions": np.concatenate([ep.actions for ep in self.episodes]),
            "rewards": np.concatenate([ep.rewards for ep in self.episodes]),
            "next_states": np.concatenate([ep.states[1:] for ep in self.episodes]),
        }

    def returns(self) -> np.ndarray:
        return np.array([ep.rewards.sum() for ep in self.episodes])


# -- return-to-go -----------------------------------------------------------

def compute_rtg(rewards: Sequence[float], gamma: float) -> float:
    """Discounted sum of every reward in the window, sum_k gamma^k r_k."""
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise DataIntegrityError("non-finite reward in return-to-go window")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    return float(np.sum(r * gamma ** np.arange(len(r))))


def discounted_rtg_curve(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def round_up_one_sig(x: float) -> float:
    if x <= 0:
        return 1.0
    mag = 10.0 ** math.floor(math.log10(x))
    return math.ceil(round(x / mag, 12)) * mag


def rtg_scale_for(episodes: Sequence[Episode], gamma: float = 0.99) -> float:
    """Largest |discounted return-to-go| in the data, rounded up to one significant figure."""
    peak = max(float(np.max(np.abs(discounted_rtg_curve(ep.rewards, gamma)))) for ep in episodes)
    return round_up_one_sig(peak)


# -- construction & normalisation ------------------------------------------

def compute_norm_stats(episodes: Sequence[Episode], floor: float = STD_FLOOR) -> NormStats:
    if not episodes:
        raise DataIntegrityError("cannot compute statistics of an empty dataset")
    s = np.concatenate([ep.states for ep in episodes])
    r = np.concatenate([ep.rewards for ep in episodes])
    return NormStats(s.mean(axis=0), np.maximum(s.std(axis=0), floor),
                     float(r.mean()), float(max(r.std(), floor)))


def build_dataset(episodes: Sequence[Episode], tier: str = "medium", env: str = "",
                  gamma: float = 0.99, rtg_scale: float | None = None) -> OfflineDataset:
    episodes = tuple(episodes)
    if not episodes:
        raise DataIntegrityError("dataset has no episodes")
    tier = TIER_ALIASES.get(tier, tier)
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}")
    d_s, d_a = episodes[0].states.shape[1], episodes[0].actions.shape[1]
    for i, ep in enumerate(episodes):
        if ep.states.shape[1] != d_s or ep.actions.shape[1] != d_a:
            raise DataIntegrityError(f"episode {i} has different dimensions")
        if not (np.all(np.isfinite(ep.states)) and np.all(np.isfinite(ep.actions)) and np.all(np.isfinite(ep.rewards))):
            raise DataIntegrityError(f"episode {i} contains non-finite values")
    scale = rtg_scale if rtg_scale is not None else rtg_scale_for(episodes, gamma)
    return OfflineDataset(episodes, compute_norm_stats(episodes), float(scale), tier, env)


def normalize(dataset: OfflineDataset) -> OfflineDataset:
    """Standardize states and rewards with the stored statistics; actions untouched."""
    if not dataset.episodes:
        raise DataIntegrityError("cannot normalize an empty dataset")
    if dataset.normalized:
        return dataset
    ns = dataset.norm_stats
    eps = tuple(Episode(ns.norm_states(ep.states), ep.actions, ns.norm_rewards(ep.rewards)) for ep in dataset.episodes)
    return replace(dataset, episodes=eps, normalized=True)


def denormalize(dataset: OfflineDataset) -> OfflineDataset:
    if not dataset.normalized:
        return dataset
    ns = dataset.norm_stats
    eps = tuple(Episode(ns.denorm_states(ep.states), ep.actions, ns.denorm_rewards(ep.rewards))
                for ep in dataset.episodes)
    return replace(dataset, episodes=eps, normalized=False)


# -- segments ---------------------------------------------------------------

@dataclass
class SegmentArrays:
    """Stacked training pairs in raw env units: conditions plus x0 targets."""

    states: np.ndarray    # (n, d_s)   s_t
    actions: np.ndarray   # (n, d_a)   a_t
    rtg: np.ndarray       # (n,)       normalized return-to-go g
    x0: np.ndarray        # (n, H+1, d_s+1)

    def __len__(self) -> int:
        return len(self.rtg)


def n_segments(episode_len: int, H: int) -> int:
    return max(0, episode_len - (H + 1))


def extract_segment_arrays(dataset: OfflineDataset, H: int, gamma: float = 0.99) -> SegmentArrays:
    if H < 1:
        raise ValueError("horizon must be a positive integer")
    ds = denormalize(dataset)
    shortest = min(range(len(ds.episodes)), key=lambda i: len(ds.episodes[i]))
    if H >= len(ds.episodes[shortest]):
        raise DataIntegrityError(
            f"horizon {H} >= length {len(ds.episodes[shortest])} of episode {shortest}")
    disc = gamma ** np.arange(H + 1)
    S, A, G, X = [], [], [], []
    for ep in ds.episodes:
        n = n_segments(len(ep), H)
        if n == 0:
            continue
        if not np.all(np.isfinite(ep.rewards)):
            raise DataIntegrityError("non-finite reward in episode")
        idx = np.arange(n)[:, None] + np.arange(H + 1)[None, :]
        rw = ep.rewards[idx]
        S.append(ep.states[:n])
        A.append(ep.actions[:n])
        G.append(rw @ disc / ds.rtg_scale)
        X.append(np.concatenate([ep.states[idx + 1], rw[:, :, None]], axis=2))
    if not S:
        d_s, d_a = ds.d_s, ds.d_a
        return SegmentArrays(np.zeros((0, d_s)), np.zeros((0, d_a)), np.zeros(0), np.zeros((0, H + 1, d_s + 1)))
    return SegmentArrays(np.concatenate(S), np.concatenate(A), np.concatenate(G), np.concatenate(X))


def extract_segments(dataset: OfflineDataset, H: int, gamma: float = 0.99
                     ) -> list[tuple[ConditioningTuple, TrajectorySegment]]:
    arr = extract_segment_arrays(dataset, H, gamma)
    d_s = arr.states.shape[1]
    return [(ConditioningTuple(arr.states[i], arr.actions[i], float(arr.rtg[i])),
             TrajectorySegment(arr.x0[i, :, :d_s], arr.x0[i, :, d_s]))
            for i in range(len(arr))]


# -- persistence ------------------------------------------------------------

def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """Magic, one JSON header line, then float64 LE payload: per step (s, a, r), then the final state."""
    ds = denormalize(dataset)
    header = {
        "format_version": FORMAT_VERSION,
        "d_s": ds.d_s, "d_a": ds.d_a,
        "n_episodes": len(ds.episodes),
        "episode_lengths": [len(ep) for ep in ds.episodes],
        "tier": ds.tier, "env": ds.env,
        "rtg_scale": ds.rtg_scale,
        "norm_stats": ds.norm_stats.to_json(),
        "meta": ds.meta,
    }
    parts = []
    for ep in ds.episodes:
        steps = np.concatenate([ep.states[:-1], ep.actions, ep.rewards[:, None]], axis=1)
        parts.append(steps.ravel())
        parts.append(ep.states[-1])
    payload = np.concatenate(parts).astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)


def load_dataset(path: str | Path) -> OfflineDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file shorter than the magic header")
    if raw[:8] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    nl = raw.find(b"\n", 8)
    if nl < 0:
        raise TruncatedFileError(f"{path}: header line not terminated")
    try:
        h = json.loads(raw[8:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: unreadable header ({e})") from e
    if h.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {h.get('format_version')}, reader supports {FORMAT_VERSION}")
    d_s, d_a = int(h["d_s"]), int(h["d_a"])
    lengths = h["episode_lengths"]
    ns = NormStats.from_json(h["norm_stats"])
    if len(lengths) != h["n_episodes"] or ns.state_mean.shape != (d_s,):
        raise DimensionMismatchError(f"{path}: header dimensions disagree with episode table / stats")
    expected = sum((L - 1) * (d_s + d_a + 1) + d_s for L in lengths)
    payload = raw[nl + 1:]
    if len(payload) != 8 * expected:
        if len(payload) < 8 * expected:
            raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {8 * expected}")
        raise DimensionMismatchError(f"{path}: payload larger than declared dimensions")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    episodes = []
    i = 0
    w = d_s + d_a + 1
    for L in lengths:
        T = L - 1
        steps = data[i:i + T * w].reshape(T, w)
        i += T * w
        final = data[i:i + d_s]
        i += d_s
        episodes.append(Episode(np.concatenate([steps[:, :d_s], final[None]], axis=0),
                                steps[:, d_s:d_s + d_a].copy(), steps[:, d_s + d_a].copy()))
    return OfflineDataset(tuple(episodes), ns, float(h["rtg_scale"]), h["tier"], h.get("env", ""),
                          meta=h.get("meta", {}))


def export_csv(dataset: OfflineDataset, path: str | Path) -> None:
    """One transition per row, for inspection."""
    ds = denormalize(dataset)
    d_s, d_a = ds.d_s, ds.d_a
    cols = (["episode", "t"] + [f"s{i}" for i in range(d_s)] + [f"a{i}" for i in range(d_a)]
            + ["r"] + [f"s_next{i}" for i in range(d_s)])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for e, ep in enumerate(ds.episodes):
            for t in range(ep.n_steps):
                row = np.concatenate([ep.states[t], ep.actions[t], [ep.rewards[t]], ep.states[t + 1]])
                w.writerow([e, t, *(repr(float(v)) for v in row)])
