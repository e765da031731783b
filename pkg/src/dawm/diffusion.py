"""Conditional diffusion world model over future (state, reward) segments.

The denoiser predicts the injected noise for an (H+1) x (d_s+1) segment given
the diffusion step and a condition (s_t, a_t, g). A single learned null
embedding stands in for the whole condition when it is dropped, which is what
makes classifier-free guidance possible at sampling time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import NormStats, OfflineDataset, SegmentArrays, extract_segment_arrays
from .nn import (Activation, AdamState, Dense, EmaState, Mlp, MlpSpec, ParamStore, ResidualTemporalBlock,
                 ShapeError, StateError, adam_step, ema_update, load_checkpoint, save_checkpoint)


class SamplingFault(FloatingPointError):
    pass


# -- schedule ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self) -> None:
        b = self.betas
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")

    @classmethod
    def cosine(cls, K: int, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = np.cos((np.arange(K + 1) / K + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, max_beta)
        return cls(betas)

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar_0 .. alpha_bar_K, with alpha_bar_0 = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])


def forward_noising(x0: np.ndarray, k, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    k_arr = np.asarray(k)
    if np.any(k_arr < 1) or np.any(k_arr > schedule.K):
        raise ValueError(f"diffusion step must lie in 1..{schedule.K}, got {k}")
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} differs from x0 shape {x0.shape}")
    ab = schedule.alpha_bars[k_arr]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def strided_steps(K: int, N: int) -> list[int]:
    """N descending diffusion steps from K to 1, e.g. K=5, N=3 -> [5, 3, 1]."""
    if not 1 <= N <= K:
        raise ValueError(f"need 1 <= N <= K, got N={N}, K={K}")
    if N == 1:
        return [K]
    return [int(v) for v in np.round(np.linspace(K, 1, N))]


# -- denoiser ---------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserSpec:
    horizon: int
    d_s: int
    d_a: int
    K: int = 5
    width: int = 64
    n_blocks: int = 3
    kernel: int = 3
    emb_dim: int = 32
    positional_cond: bool = True
    film: bool = True

    @property
    def length(self) -> int:
        return self.horizon + 1

    @property
    def channels(self) -> int:
        return self.d_s + 1

    @property
    def cond_dim(self) -> int:
        return self.d_s + 2 * self.emb_dim


def timestep_embedding(k: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Noise predictor eps(x_k, k, condition)."""

    def __init__(self, spec: DenoiserSpec, rng: np.random.Generator | None = None,
                 store: ParamStore | None = None, dtype: str = "float64") -> None:
        self.spec = spec
        self.store = store if store is not None else ParamStore(dtype)
        st, E = self.store, spec.emb_dim
        self.time_mlp = Mlp(st, "time", MlpSpec([E, 2 * E, E], "mish"), rng)
        self.rtg_mlp = Mlp(st, "rtg", MlpSpec([1, E, E, E], "mish"), rng)
        self.act_mlp = Mlp(st, "act", MlpSpec([spec.d_a, E, E, E], "mish"), rng)
        self.null = st.add("null", np.zeros(spec.cond_dim))
        self.g_null = st.grads["null"]
        self.cond_act = Activation("mish", "cond_act")
        cvec_dim = E + spec.cond_dim
        self.blocks = []
        c_in = spec.channels
        for i in range(spec.n_blocks):
            self.blocks.append(ResidualTemporalBlock(st, f"block{i}", c_in, spec.width, cvec_dim, spec.kernel, rng,
                                                     length=spec.length if spec.positional_cond else None,
                                                     film=spec.film))
            c_in = spec.width
        self.out = Dense(st, "out", spec.width, spec.channels, rng, init="zeros")
        self._cache = None

    def forward(self, x, k, state, action, rtg, null_mask) -> np.ndarray:
        sp = self.spec
        B = x.shape[0]
        if x.shape[1:] != (sp.length, sp.channels):
            raise ShapeError(f"denoiser: expected segment shape ({sp.length}, {sp.channels}), got {x.shape[1:]}")
        if state.shape != (B, sp.d_s) or action.shape != (B, sp.d_a):
            raise ShapeError(f"denoiser: condition shapes {state.shape}, {action.shape} do not match batch {B}")
        cast = self.store.cast
        b = cast(null_mask).reshape(B, 1)
        t_emb = self.time_mlp.forward(cast(timestep_embedding(np.asarray(k), sp.emb_dim)))
        g_proj = self.rtg_mlp.forward(cast(rtg).reshape(B, 1))
        a_proj = self.act_mlp.forward(cast(action))
        cond = np.concatenate([cast(state), a_proj, g_proj], axis=1)
        cond = (1.0 - b) * cond + b * self.null
        cvec = self.cond_act.forward(np.concatenate([t_emb, cond], axis=1))
        h = cast(x)
        for blk in self.blocks:
            h = blk.forward(h, cvec)
        self._cache = b
        return self.out.forward(h)

    def backward(self, g: np.ndarray) -> None:
        if self._cache is None:
            raise StateError("denoiser: backward called without a matching forward")
        b, self._cache = self._cache, None
        sp, E = self.spec, self.spec.emb_dim
        gh = self.out.backward(g)
        g = self.store.cast(g)
        gcvec = np.zeros((g.shape[0], E + sp.cond_dim), dtype=self.store.dtype)
        for blk in reversed(self.blocks):
            gh, gc = blk.backward(gh)
            gcvec += gc
        gcvec = self.cond_act.backward(gcvec)
        self.time_mlp.backward(gcvec[:, :E])
        gcond = gcvec[:, E:]
        self.g_null += (b * gcond).sum(axis=0)
        gcond = (1.0 - b) * gcond
        self.act_mlp.backward(gcond[:, sp.d_s:sp.d_s + E])
        self.rtg_mlp.backward(gcond[:, sp.d_s + E:])

    def condition_param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.split(".")[0] in ("rtg", "act")]


# -- training objective -----------------------------------------------------

def draw_training_noise(rng: np.random.Generator, batch_size: int, shape: tuple, K: int, p_null: float):
    k = rng.integers(1, K + 1, size=batch_size)
    eps = rng.standard_normal((batch_size,) + tuple(shape))
    null = rng.random(batch_size) < p_null
    return k, eps, null


def noise_prediction_loss(denoiser: Denoiser, schedule: NoiseSchedule, batch: dict, k, eps, null,
                          backward: bool = True) -> float:
    """Batch mean of |eps_pred - eps|^2 with condition dropped where ``null`` is set."""
    xk = forward_noising(batch["x0"], k, eps, schedule)
    pred = denoiser.forward(xk, k, batch["state"], batch["action"], batch["rtg"], null)
    diff = pred - eps
    B = diff.shape[0]
    loss = float(np.sum(diff * diff) / B)
    if backward:
        denoiser.backward(2.0 * diff / B)
    else:
        denoiser._cache = None
    return loss


def training_loss(batch: dict, schedule: NoiseSchedule, denoiser: Denoiser, p_null: float,
                  rng: np.random.Generator) -> tuple[float, float]:
    """One stochastic draw of the masked score-matching loss; grads accumulate into the denoiser.

    Returns the loss and the fraction of samples whose condition was nulled.
    """
    B = batch["x0"].shape[0]
    if B == 0:
        raise ValueError("empty batch")
    k, eps, null = draw_training_noise(rng, B, batch["x0"].shape[1:], schedule.K, p_null)
    return noise_prediction_loss(denoiser, schedule, batch, k, eps, null), float(null.mean())


# -- guidance & sampling ----------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.0
    p_null: float = 0.25
    n_steps: int = 3
    alpha_temp: float = 0.5
    g_eval: float | None = None

    def validate(self, K: int) -> None:
        if not 0.0 <= self.p_null <= 1.0:
            raise ValueError("p_null must lie in [0, 1]")
        if not 1 <= self.n_steps <= K:
            raise ValueError(f"n_steps must lie in 1..{K}")
        if self.alpha_temp < 0:
            raise ValueError("alpha_temp must be non-negative")


def cfg_epsilon(denoiser: Denoiser, x_k, k, state, action, rtg, omega: float) -> np.ndarray:
    """eps_null + (1 + omega) (eps_cond - eps_null), from two denoiser evaluations."""
    B = x_k.shape[0]
    kk = np.broadcast_to(np.asarray(k), (B,))
    eps_c = denoiser.forward(x_k, kk, state, action, rtg, np.zeros(B))
    eps_u = denoiser.forward(x_k, kk, state, action, rtg, np.ones(B))
    denoiser._cache = None
    if omega == -1.0:
        return eps_u
    # written so that omega = 0 returns eps_c exactly
    return eps_c + omega * (eps_c - eps_u)


def posterior_coefficients(schedule: NoiseSchedule, t: int, s: int) -> tuple[float, float, float]:
    """q(x_s | x_t, x_0) for s < t: mean = c0 * x0 + ct * x_t, variance var."""
    ab = schedule.alpha_bars
    a_t, a_s = ab[t], ab[s]
    alpha_ts = a_t / a_s
    beta_ts = 1.0 - alpha_ts
    c0 = math.sqrt(a_s) * beta_ts / (1.0 - a_t)
    ct = math.sqrt(alpha_ts) * (1.0 - a_s) / (1.0 - a_t)
    var = (1.0 - a_s) / (1.0 - a_t) * beta_ts
    return c0, ct, var


def reverse_diffusion(denoiser: Denoiser, schedule: NoiseSchedule, state, action, rtg,
                      guidance: GuidanceConfig, rng: np.random.Generator, x0_clip: float = 5.0) -> np.ndarray:
    """Guided ancestral sampling over the strided step subset, in normalized units."""
    sp = denoiser.spec
    B = state.shape[0]
    steps = strided_steps(schedule.K, guidance.n_steps)
    temp = guidance.alpha_temp
    ab = schedule.alpha_bars
    x = temp * rng.standard_normal((B, sp.length, sp.channels))
    for i, t in enumerate(steps):
        s = steps[i + 1] if i + 1 < len(steps) else 0
        eps = cfg_epsilon(denoiser, x, t, state, action, rtg, guidance.omega)
        x0 = np.clip((x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t]), -x0_clip, x0_clip)
        if s == 0:
            x = x0
        else:
            c0, ct, var = posterior_coefficients(schedule, t, s)
            x = c0 * x0 + ct * x + temp * math.sqrt(var) * rng.standard_normal(x.shape)
    return x


# -- world model bundle -----------------------------------------------------

@dataclass(frozen=True)
class SegmentCoder:
    """Maps raw segments to the diffusion space and back.

    States are stored as offsets from the anchor state s_t; every (step, channel)
    cell is then standardized on its own, so the one-step offset is not dwarfed
    by the larger offsets further out in the horizon.
    """

    mean: np.ndarray   # (H+1, d_s+1)
    std: np.ndarray

    @classmethod
    def fit(cls, x0: np.ndarray, anchors: np.ndarray, floor: float = 1e-6) -> "SegmentCoder":
        z = cls._offsets(x0, anchors)
        return cls(z.mean(axis=0), np.maximum(z.std(axis=0), floor))

    @staticmethod
    def _offsets(x0, anchors):
        d_s = anchors.shape[-1]
        z = np.array(x0, dtype=np.float64, copy=True)
        z[..., :d_s] -= anchors[:, None, :]
        return z

    def encode(self, x0: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        return (self._offsets(x0, anchors) - self.mean) / self.std

    def decode(self, z: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        d_s = anchors.shape[-1]
        x = z * self.std + self.mean
        x[..., :d_s] += anchors[:, None, :]
        return x

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SegmentCoder":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class DiffusionConfig:
    K: int = 5
    width: int = 32
    n_blocks: int = 3
    kernel: int = 3
    emb_dim: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 50_000
    p_null: float = 0.25
    decay: float = 0.995
    decay_mode: str = "ema"   # "ema": weight EMA; "adam_beta2": use decay as Adam beta2, no EMA
    lr_schedule: str = "cosine"   # or "constant"; cosine anneals to zero over the run
    gamma: float = 0.99
    x0_clip: float = 3.0
    positional_cond: bool = True
    film: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.decay_mode not in ("ema", "adam_beta2"):
            raise ValueError(f"decay_mode must be 'ema' or 'adam_beta2', got {self.decay_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


class WorldModel:
    """Trained denoiser plus everything needed to turn samples back into env units."""

    def __init__(self, spec: DenoiserSpec, schedule: NoiseSchedule, denoiser: Denoiser, ema: EmaState | None,
                 norm_stats: NormStats, coder: SegmentCoder, rtg_scale: float, g_range: tuple[float, float],
                 config: DiffusionConfig, step: int = 0) -> None:
        self.spec = spec
        self.schedule = schedule
        self.denoiser = denoiser
        self.ema = ema
        self.norm_stats = norm_stats
        self.coder = coder
        self.rtg_scale = rtg_scale
        self.g_range = g_range
        self.config = config
        self.step = step
        self._inference = None

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    def inference_denoiser(self) -> Denoiser:
        if self.ema is None:
            return self.denoiser
        if self._inference is None:
            self._inference = Denoiser(self.spec, store=self.ema.shadow)
        return self._inference

    def default_g_eval(self) -> float:
        lo, hi = self.g_range
        return lo + 0.9 * (hi - lo)

    def guidance(self, omega: float = 1.0, n_steps: int = 3, alpha_temp: float = 0.5,
                 g_eval: float | None = None) -> GuidanceConfig:
        g = self.default_g_eval() if g_eval is None else g_eval
        return GuidanceConfig(omega, self.config.p_null, n_steps, alpha_temp, g)

    def sample(self, states: np.ndarray, actions: np.ndarray, guidance: GuidanceConfig,
               rng: np.random.Generator, rtg: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Segments in env units, shape (n, H+1, d_s+1), and a per-row fault mask."""
        guidance.validate(self.schedule.K)
        n = states.shape[0]
        if rtg is None:
            g = guidance.g_eval if guidance.g_eval is not None else self.default_g_eval()
            rtg = np.full(n, g)
        z = reverse_diffusion(self.inference_denoiser(), self.schedule, self.norm_stats.norm_states(states),
                              actions, rtg, guidance, rng, self.config.x0_clip)
        out = self.coder.decode(z, states)
        faulted = ~np.all(np.isfinite(out.reshape(n, -1)), axis=1)
        return out, faulted

    def save(self, path: str | Path) -> None:
        stores = {"online": self.denoiser.store}
        if self.ema is not None:
            stores["ema"] = self.ema.shadow
        spec = {"denoiser": asdict(self.spec), "config": asdict(self.config),
                "betas": self.schedule.betas.tolist(), "norm_stats": self.norm_stats.to_json(),
                "coder": self.coder.to_json(),
                "rtg_scale": self.rtg_scale, "g_range": list(self.g_range)}
        save_checkpoint(path, "dwm", spec, stores, step=self.step, ema=self.ema is not None)

    @classmethod
    def load(cls, path: str | Path) -> "WorldModel":
        header, stores = load_checkpoint(path)
        if header["kind"] != "dwm":
            raise ValueError(f"{path}: checkpoint kind {header['kind']!r}, expected 'dwm'")
        s = header["spec"]
        spec = DenoiserSpec(**s["denoiser"])
        cfg = DiffusionConfig(**s["config"])
        den = Denoiser(spec, store=stores["online"])
        ema = EmaState(stores["ema"], cfg.decay) if header["ema"] else None
        return cls(spec, NoiseSchedule(np.asarray(s["betas"])), den, ema, NormStats.from_json(s["norm_stats"]),
                   SegmentCoder.from_json(s["coder"]),
                   s["rtg_scale"], tuple(s["g_range"]), cfg, header["step"])


def normalized_training_set(seg: SegmentArrays, ns: NormStats, coder: SegmentCoder) -> dict:
    return {"x0": coder.encode(seg.x0, seg.states), "state": ns.norm_states(seg.states),
            "action": seg.actions, "rtg": seg.rtg}


def train_world_model(dataset: OfflineDataset, horizon: int, cfg: DiffusionConfig, rng: np.random.Generator,
                      steps: int | None = None, log_every: int = 0, on_log=None) -> tuple[WorldModel, list[float]]:
    seg = extract_segment_arrays(dataset, horizon, cfg.gamma)
    if len(seg) == 0:
        raise ValueError("dataset yields no training segments at this horizon")
    coder = SegmentCoder.fit(seg.x0, seg.states)
    train = normalized_training_set(seg, dataset.norm_stats, coder)
    spec = DenoiserSpec(horizon, dataset.d_s, dataset.d_a, cfg.K, cfg.width, cfg.n_blocks, cfg.kernel, cfg.emb_dim,
                        cfg.positional_cond, cfg.film)
    schedule = NoiseSchedule.cosine(cfg.K)
    den = Denoiser(spec, rng, dtype=cfg.dtype)
    if cfg.decay_mode == "ema":
        adam = AdamState(lr=cfg.lr)
        ema = EmaState.from_store(den.store, cfg.decay)
    else:
        adam = AdamState(lr=cfg.lr, beta2=cfg.decay)
        ema = None
    n = len(seg)
    steps = cfg.steps if steps is None else steps
    losses = []
    for it in range(steps):
        if cfg.lr_schedule == "cosine":
            adam.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * it / steps))
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        batch = {key: v[idx] for key, v in train.items()}
        loss, _ = training_loss(batch, schedule, den, cfg.p_null, rng)
        adam_step(den.store, adam)
        if ema is not None:
            ema_update(ema, den.store)
        losses.append(loss)
        if log_every and on_log is not None and (it + 1) % log_every == 0:
            on_log(it + 1, float(np.mean(losses[-log_every:])))
    g_range = (float(seg.rtg.min()), float(seg.rtg.max()))
    wm = WorldModel(spec, schedule, den, ema, dataset.norm_stats, coder, dataset.rtg_scale, g_range, cfg, steps)
    return wm, losses
