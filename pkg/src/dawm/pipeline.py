"""End-to-end orchestration: data, world model, IDM, synthesis, agent training, evaluation."""

from __future__ import annotations

import csv
import dataclasses
import difflib
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .agents import Agent, AgentConfig, buffer_obs_stats, make_agent, train_agent
from .data import OfflineDataset
from .diffusion import DiffusionConfig, GuidanceConfig, WorldModel, train_world_model
from .envs import BehaviorPolicy, EnvSpec, TIER_MIX, env_spec, generate_dataset, make_env, rng_stream, rollout
from .idm import IdmConfig, IdmModel, complete_segments, train_idm


class ConfigError(ValueError):
    pass


class SynthesisFault(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------

@dataclass
class SynthesisConfig:
    horizon: int = 7
    T: int = 1                   # anchor subsampling divisor; 1 uses every anchor
    omega: float = 1.0
    g_eval: float | None = None  # fixed mode; None means g_min + 0.9 (g_max - g_min) over training windows
    g_mode: str = "anchor"       # "anchor": each anchor's own dataset g; "fixed": g_eval for every anchor
    n_steps: int = 3
    alpha_temp: float = 0.5
    chunk: int = 512
    fault_tolerance: float = 0.01

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.g_mode not in ("fixed", "anchor"):
            raise ValueError("g_mode must be 'fixed' or 'anchor'")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")


@dataclass
class RunConfig:
    env: str = "pointmass2d"
    tier: str = "medium"
    n_episodes: int = 200
    env_noise: float = 0.0
    seed: int = 100
    source: str = "dawm"         # "dawm": train the agent on synthetic data; "real": on the dataset itself
    mix_real: bool = False
    interleaved: bool = False
    eval_episodes: int = 100
    threads: int = 1
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    def __post_init__(self) -> None:
        if self.source not in ("dawm", "real"):
            raise ValueError(f"source must be 'dawm' or 'real', got {self.source!r}")
        if self.tier not in TIER_MIX:
            raise ValueError(f"unknown tier {self.tier!r}; expected one of {sorted(TIER_MIX)}")
        if self.n_episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def digest(self, *sections: str) -> str:
        """Stable hash of selected top-level fields (all when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _nearest(key: str, options) -> str:
    match = difflib.get_close_matches(key, list(options), n=1, cutoff=0.0)
    return match[0] if match else ""


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in fields:
            full = prefix + k
            raise ConfigError(f"unknown config key {full!r}; nearest valid key: {prefix + _nearest(k, fields)!r}")
        sub = _section_type(cls, k)
        kwargs[k] = _build(sub, v, f"{prefix}{k}.") if sub is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from None


SECTIONS = {"diffusion": DiffusionConfig, "idm": IdmConfig, "agent": AgentConfig, "synthesis": SynthesisConfig}


def _section_type(cls, name: str):
    return SECTIONS.get(name) if cls is RunConfig else None


def _all_keys(d: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        out.extend(_all_keys(v, f"{prefix}{k}.") if isinstance(v, dict) else [prefix + k])
    return out


def _parse_value(text: str, current: Any):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
        if value != int(value):
            raise ConfigError(f"expected an integer, got {text!r}")
        value = int(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides; unknown keys name the closest valid key."""
    d = cfg.to_dict()
    valid = _all_keys(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}; nearest valid key: {_nearest(key, valid)!r}")
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = _parse_value(text, node[parts[-1]])
    return RunConfig.from_dict(d)


def load_config(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        cfg = RunConfig.from_dict(d)
    else:
        cfg = RunConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return apply_overrides(cfg, list(overrides))


# -- transition buffers -----------------------------------------------------

BUFFER_KEYS = ("states", "actions", "rewards", "next_states", "synthetic")


def make_buffer(states, actions, rewards, next_states, synthetic) -> dict[str, np.ndarray]:
    n = len(rewards)
    syn = np.broadcast_to(np.asarray(synthetic, dtype=bool), (n,)).copy()
    return {"states": np.asarray(states, dtype=np.float64), "actions": np.asarray(actions, dtype=np.float64),
            "rewards": np.asarray(rewards, dtype=np.float64),
            "next_states": np.asarray(next_states, dtype=np.float64), "synthetic": syn}


def real_buffer(dataset: OfflineDataset) -> dict[str, np.ndarray]:
    tr = dataset.transitions()
    return make_buffer(tr["states"], tr["actions"], tr["rewards"], tr["next_states"], False)


def concat_buffers(*bufs) -> dict[str, np.ndarray]:
    return {k: np.concatenate([b[k] for b in bufs]) for k in BUFFER_KEYS}


def save_buffer(buf: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **buf)


def load_buffer(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        missing = [k for k in BUFFER_KEYS if k not in z]
        if missing:
            raise ValueError(f"{path}: buffer lacks {missing}")
        return {k: z[k] for k in BUFFER_KEYS}


# -- synthesis --------------------------------------------------------------

@dataclass
class SynthesisStats:
    n_anchors: int
    n_used: int
    n_faulted: int
    n_transitions: int
    sample_seconds: float
    idm_seconds: float


def anchor_indices(n_anchors: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """All anchors in order when T = 1, else a seeded shuffle cut to ceil(n / T)."""
    if T == 1:
        return np.arange(n_anchors)
    return rng.permutation(n_anchors)[:math.ceil(n_anchors / T)]


def _worker_models(wm: WorldModel, idm: IdmModel) -> tuple[WorldModel, IdmModel]:
    """Fresh module objects over the same read-only parameters, so forward caches stay per-thread."""
    w = WorldModel(wm.spec, wm.schedule, wm.denoiser, wm.ema, wm.norm_stats, wm.coder, wm.rtg_scale,
                   wm.g_range, wm.config, wm.step)
    i = IdmModel(idm.d_s, idm.d_a, idm.cfg, idm.norm_stats, store=idm.store)
    return w, i


def synthesize_chunks(wm: WorldModel, idm: IdmModel, states: np.ndarray, actions: np.ndarray,
                      rtg: np.ndarray | None, guidance: GuidanceConfig, seed: int, chunk: int = 512,
                      threads: int = 1):
    """Generate and label segments chunk by chunk, yielding results in input order.

    Chunk i always draws from stream ("synthesis", i), so the output does not depend on
    the thread count. Yields (i, CompletedSegments, fault mask, sample seconds, idm seconds).
    """
    n = len(states)
    bounds = [(i, lo, min(lo + chunk, n)) for i, lo in enumerate(range(0, n, chunk))]

    def run(item, models):
        i, lo, hi = item
        w, d = models
        rng = rng_stream(seed, "synthesis", i)
        t0 = time.perf_counter()
        seg, faulted = w.sample(states[lo:hi], actions[lo:hi], guidance, rng,
                                rtg=None if rtg is None else rtg[lo:hi])
        t1 = time.perf_counter()
        ok = ~faulted
        done = complete_segments(d, states[lo:hi][ok], actions[lo:hi][ok], seg[ok], rng)
        return i, done, faulted, t1 - t0, time.perf_counter() - t1

    if threads <= 1:
        for item in bounds:
            yield run(item, (wm, idm))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(lambda item: run(item, _worker_models(wm, idm)), bounds)


def synthesis_guidance(wm: WorldModel, cfg: SynthesisConfig) -> GuidanceConfig:
    return wm.guidance(omega=cfg.omega, n_steps=cfg.n_steps, alpha_temp=cfg.alpha_temp, g_eval=cfg.g_eval)


def synthesis_anchors(dataset: OfflineDataset, wm: WorldModel, cfg: SynthesisConfig, seed: int,
                      limit: int | None = None):
    """(states, actions, per-anchor rtg or None) for the anchors a run will use."""
    tr = dataset.transitions()
    S, A = tr["states"], tr["actions"]
    rtg = anchor_rtg(dataset, wm.horizon, wm.config.gamma) if cfg.g_mode == "anchor" else None
    if limit is not None:
        S, A = S[:limit], A[:limit]
        rtg = None if rtg is None else rtg[:limit]
    idx = anchor_indices(len(S), cfg.T, rng_stream(seed, "anchors"))
    return S[idx], A[idx], None if rtg is None else rtg[idx]


def synthesize_dataset(wm: WorldModel, idm: IdmModel, dataset: OfflineDataset, cfg: SynthesisConfig,
                       seed: int, threads: int = 1, anchor_limit: int | None = None
                       ) -> tuple[dict[str, np.ndarray], SynthesisStats]:
    """Synthetic transitions from real anchors; n_used * (H+1) of them when nothing faults."""
    if wm.horizon != cfg.horizon:
        raise ConfigError(f"world model horizon {wm.horizon} differs from synthesis horizon {cfg.horizon}")
    n_anchors = dataset.n_transitions if anchor_limit is None else min(anchor_limit, dataset.n_transitions)
    S, A, rtg = synthesis_anchors(dataset, wm, cfg, seed, anchor_limit)
    guidance = synthesis_guidance(wm, cfg)
    parts, n_faulted, ts, ti = [], 0, 0.0, 0.0
    for _, done, faulted, t_s, t_i in synthesize_chunks(wm, idm, S, A, rtg, guidance, seed, cfg.chunk, threads):
        parts.append(done.flat())
        n_faulted += int(faulted.sum())
        ts += t_s
        ti += t_i
    used = len(S)
    if n_faulted > cfg.fault_tolerance * used:
        raise SynthesisFault(f"{n_faulted} of {used} anchors faulted during sampling "
                             f"(tolerance {cfg.fault_tolerance:.1%})")
    flat = {k: np.concatenate([p[k] for p in parts]) for k in ("states", "actions", "rewards", "next_states")}
    buf = make_buffer(flat["states"], flat["actions"], flat["rewards"], flat["next_states"], True)
    return buf, SynthesisStats(n_anchors, used, n_faulted, len(buf["rewards"]), ts, ti)


def anchor_rtg(dataset: OfflineDataset, horizon: int, gamma: float) -> np.ndarray:
    """Window return-to-go of every transition, truncated at the episode end, over rtg_scale."""
    disc = gamma ** np.arange(horizon + 1)
    out = []
    for ep in dataset.episodes:
        r = np.concatenate([ep.rewards, np.zeros(horizon + 1)])
        idx = np.arange(ep.n_steps)[:, None] + np.arange(horizon + 1)[None, :]
        out.append(r[idx] @ disc)
    return np.concatenate(out) / dataset.rtg_scale


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    env: str
    n_episodes: int
    mean_return: float
    std_return: float
    normalized_return: float
    r_random: float
    r_expert: float
    timings: dict = field(default_factory=dict)   # wall-clock seconds; never written to report.json

    def to_dict(self) -> dict:
        """Deterministic fields only, so equal runs serialize identically."""
        d = asdict(self)
        del d["timings"]
        return d


def normalized_return(r: float, r_random: float, r_expert: float) -> float:
    return (r - r_random) / (r_expert - r_random)


def evaluate(policy: Callable[[np.ndarray], np.ndarray], env_name: str, n_episodes: int, seed: int,
             env_noise: float = 0.0) -> EvalReport:
    """Seeded lockstep rollouts of a deterministic policy, scored against the env's reference returns."""
    spec: EnvSpec = env_spec(env_name)
    env = make_env(env_name, sigma=env_noise, seed=int(rng_stream(seed, "eval-noise").integers(2 ** 31)))
    _, _, R = rollout(env, policy, n_episodes, rng_stream(seed, "eval"))
    returns = R.sum(axis=1)
    mean = float(returns.mean())
    return EvalReport(env_name, n_episodes, mean, float(returns.std()),
                      normalized_return(mean, spec.r_random, spec.r_expert), spec.r_random, spec.r_expert)


def expert_policy(env_name: str) -> Callable:
    env = make_env(env_name)
    return env.expert_action


def random_policy(env_name: str, seed: int) -> Callable:
    env = make_env(env_name)
    rng = rng_stream(seed, "random-policy")
    return lambda s: BehaviorPolicy("random").act(env, s, rng)


def agent_policy(agent: Agent) -> Callable:
    return lambda s: agent.act(s, deterministic=True)


# -- single runs ------------------------------------------------------------

class RunDir:
    """config.json, metrics.jsonl, report.json, timings.json and ckpt/ under one directory."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            (self.path / "ckpt").mkdir(parents=True, exist_ok=True)
            self._metrics = open(self.path / "metrics.jsonl", "w")
        else:
            self._metrics = None

    def log(self, record: dict) -> None:
        if self._metrics is not None:
            self._metrics.write(json.dumps(record, sort_keys=True) + "\n")

    def write_json(self, name: str, obj) -> None:
        if self.path is not None:
            (self.path / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def ckpt(self, name: str) -> Path | None:
        return None if self.path is None else self.path / "ckpt" / name

    def close(self) -> None:
        if self._metrics is not None:
            self._metrics.close()
            self._metrics = None


@dataclass
class RunResult:
    report: EvalReport
    timings: dict
    synthesis: SynthesisStats | None
    agent: Agent
    n_train_transitions: int


class ArtifactCache:
    """Memoizes deterministic intermediate artifacts (world models, IDMs) by config digest."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)

    def get_or_build(self, key: str, build: Callable[[], Any], save: Callable[[Any, Path], None],
                     load: Callable[[Path], Any]):
        if self.path is None:
            return build(), False
        f = self.path / key
        if f.exists():
            return load(f), True
        obj = build()
        tmp = f.with_name(f"{f.name}.{os.getpid()}.tmp")
        save(obj, tmp)
        tmp.replace(f)
        return obj, False


def _dataset_key(cfg: RunConfig) -> str:
    return RunConfig.digest(cfg, "env", "tier", "n_episodes", "env_noise", "seed")


def build_dataset_for(cfg: RunConfig) -> OfflineDataset:
    env = make_env(cfg.env, sigma=cfg.env_noise, seed=int(rng_stream(cfg.seed, "env-noise").integers(2 ** 31)))
    return generate_dataset(env, cfg.tier, cfg.n_episodes, cfg.seed, gamma=cfg.diffusion.gamma)


def fit_world_model(cfg: RunConfig, dataset: OfflineDataset, run: RunDir | None = None) -> WorldModel:
    def log(it, loss):
        if run is not None:
            run.log({"phase": "dwm", "iteration": it, "loss": loss})
    wm, _ = train_world_model(dataset, cfg.synthesis.horizon, cfg.diffusion, rng_stream(cfg.seed, "dwm"),
                              log_every=100, on_log=log)
    return wm


def fit_idm(cfg: RunConfig, dataset: OfflineDataset, run: RunDir | None = None) -> IdmModel:
    def log(it, loss):
        if run is not None:
            run.log({"phase": "idm", "iteration": it, "loss": loss})
    model, _ = train_idm(dataset, cfg.idm, rng_stream(cfg.seed, "idm"), log_every=100, on_log=log)
    return model


def run_pipeline(cfg: RunConfig, out: str | Path | None = None, cache_dir: str | Path | None = None) -> RunResult:
    """One full run. report.json holds only deterministic quantities; wall-clock goes to timings.json."""
    run = RunDir(out)
    cache = ArtifactCache(cache_dir)
    run.write_json("config.json", cfg.to_dict())
    timings = {}
    try:
        t0 = time.perf_counter()
        dataset = build_dataset_for(cfg)
        timings["dataset"] = time.perf_counter() - t0
        stats = None
        agent_rng_init = rng_stream(cfg.seed, "agent-init")
        agent_rng = rng_stream(cfg.seed, "agent")
        if cfg.source == "real":
            buffer = real_buffer(dataset)
        else:
            t0 = time.perf_counter()
            dkey = cfg.digest("env", "tier", "n_episodes", "env_noise", "seed", "diffusion") + \
                f"-h{cfg.synthesis.horizon}.dwm"
            wm, _ = cache.get_or_build(dkey, lambda: fit_world_model(cfg, dataset, run),
                                       lambda m, p: m.save(p), WorldModel.load)
            timings["train_dwm"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            ikey = cfg.digest("env", "tier", "n_episodes", "env_noise", "seed", "idm") + ".idm"
            idm, _ = cache.get_or_build(ikey, lambda: fit_idm(cfg, dataset, run),
                                        lambda m, p: m.save(p), IdmModel.load)
            timings["train_idm"] = time.perf_counter() - t0
            if run.path is not None:
                wm.save(run.ckpt("dwm.ckpt"))
                idm.save(run.ckpt("idm.ckpt"))
            if cfg.interleaved:
                return _interleaved(cfg, dataset, wm, idm, run, timings)
            t0 = time.perf_counter()
            buffer, stats = synthesize_dataset(wm, idm, dataset, cfg.synthesis, cfg.seed, cfg.threads)
            timings["synthesis"] = time.perf_counter() - t0
            run.log({"phase": "synthesis", **asdict(stats)})
            if cfg.mix_real:
                buffer = concat_buffers(buffer, real_buffer(dataset))
        agent = _train_on(cfg, buffer, run, agent_rng_init, agent_rng, timings)
        return _finish(cfg, agent, run, timings, stats, len(buffer["rewards"]))
    finally:
        run.close()


def _train_on(cfg, buffer, run, rng_init, rng, timings) -> Agent:
    mean, std = buffer_obs_stats(buffer["states"])
    agent = make_agent(cfg.agent, buffer["states"].shape[1], buffer["actions"].shape[1], mean, std, rng_init)
    t0 = time.perf_counter()

    record = _agent_logger(run)

    def checkpoint(a):
        if run.path is not None:
            a.save(run.ckpt(f"agent_{a.iteration:07d}.ckpt"))

    try:
        train_agent(agent, buffer, cfg.agent.steps, rng, on_record=record, on_checkpoint=checkpoint)
    finally:
        timings["train_agent"] = time.perf_counter() - t0
    return agent


def _agent_logger(run: RunDir):
    return lambda rec: run.log({"phase": "agent", **rec}) if rec["iteration"] % 100 == 0 else None


def _finish(cfg, agent, run, timings, stats, n_train) -> RunResult:
    if run.path is not None:
        agent.save(run.ckpt("agent.ckpt"))
    t0 = time.perf_counter()
    report = evaluate(agent_policy(agent), cfg.env, cfg.eval_episodes, cfg.seed, cfg.env_noise)
    timings["eval"] = time.perf_counter() - t0
    report.timings = timings
    out = report.to_dict()
    out["n_train_transitions"] = n_train
    if stats is not None:
        out["synthesis"] = {k: v for k, v in asdict(stats).items() if not k.endswith("seconds")}
        timings["synthesis_sample"] = stats.sample_seconds
        timings["synthesis_idm"] = stats.idm_seconds
    run.write_json("report.json", out)
    run.write_json("timings.json", timings)
    return RunResult(report, timings, stats, agent, n_train)


def _interleaved(cfg: RunConfig, dataset, wm, idm, run, timings) -> RunResult:
    """Synthesis and agent updates alternate chunk by chunk over a growing buffer."""
    sc = cfg.synthesis
    S, A, rtg = synthesis_anchors(dataset, wm, sc, cfg.seed)
    guidance = synthesis_guidance(wm, sc)
    rng_init, rng = rng_stream(cfg.seed, "agent-init"), rng_stream(cfg.seed, "agent")
    agent = None
    parts: list[dict] = []
    n_faulted, done_updates = 0, 0
    t0 = time.perf_counter()
    for _, done, faulted, _, _ in synthesize_chunks(wm, idm, S, A, rtg, guidance, cfg.seed, sc.chunk):
        n_faulted += int(faulted.sum())
        f = done.flat()
        parts.append(make_buffer(f["states"], f["actions"], f["rewards"], f["next_states"], True))
        buf = concat_buffers(*parts)
        if agent is None:
            mean, std = buffer_obs_stats(buf["states"])
            agent = make_agent(cfg.agent, buf["states"].shape[1], buf["actions"].shape[1], mean, std, rng_init)
        target = round(cfg.agent.steps * sum(len(p["rewards"]) for p in parts) / (len(S) * (sc.horizon + 1)))
        n = min(target, cfg.agent.steps) - done_updates
        if n > 0:
            train_agent(agent, buf, n, rng, on_record=_agent_logger(run))
            done_updates += n
    if n_faulted > sc.fault_tolerance * len(S):
        raise SynthesisFault(f"{n_faulted} of {len(S)} anchors faulted during sampling")
    rest = cfg.agent.steps - done_updates
    if rest > 0:
        train_agent(agent, buf, rest, rng, on_record=_agent_logger(run))
    timings["synthesis_and_agent"] = time.perf_counter() - t0
    stats = SynthesisStats(dataset.n_transitions, len(S), n_faulted, len(buf["rewards"]), 0.0, 0.0)
    return _finish(cfg, agent, run, timings, stats, len(buf["rewards"]))


# -- experiment matrices ----------------------------------------------------

SWEEPS = {
    "H": ("synthesis.horizon", [1, 3, 7]),
    "T": ("synthesis.T", [1, 8]),
    "source": ("source", ["real", "dawm"]),
    "agent": ("agent.kind", ["td3bc", "iql"]),
}


@dataclass
class CellResult:
    variant: str
    env: str
    seed: int
    normalized_return: float | None
    error: str | None = None


def _variant_label(assign: dict[str, Any]) -> str:
    return ",".join(f"{k.split('.')[-1]}={v}" for k, v in assign.items())


def matrix_cells(base: RunConfig, sweep: dict[str, list], seeds: list[int], envs: list[str] | None = None):
    """Cartesian product of sweep values x envs x seeds as (variant, env, seed, RunConfig)."""
    keys = list(sweep)
    combos = [dict()]
    for k in keys:
        combos = [dict(c, **{k: v}) for c in combos for v in sweep[k]]
    cells = []
    for assign in combos:
        for env in envs or [base.env]:
            for seed in seeds:
                ov = [f"{k}={json.dumps(v)}" for k, v in assign.items()] + [f"env={json.dumps(env)}"]
                cfg = apply_overrides(dataclasses.replace(base, seed=seed), ov)
                cells.append((_variant_label(assign), env, seed, cfg))
    return cells


def _run_cell(variant: str, env: str, seed: int, cfg: RunConfig, cell_dir: Path, cache_dir) -> CellResult:
    try:
        res = run_pipeline(cfg, cell_dir, cache_dir)
        return CellResult(variant, env, seed, res.report.normalized_return)
    except Exception as e:  # recorded per cell; the matrix continues
        cr = CellResult(variant, env, seed, None, f"{type(e).__name__}: {e}")
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "error.txt").write_text(cr.error + "\n")
        return cr


def cell_dir_name(variant: str) -> str:
    return variant.replace(",", "_").replace("=", "-") or "base"


def run_matrix(base: RunConfig, sweep: dict[str, list], seeds: list[int], out: str | Path,
               envs: list[str] | None = None, cache_dir: str | Path | None = None,
               on_cell: Callable[[CellResult], None] | None = None, jobs: int = 1) -> list[CellResult]:
    """Every cell runs independently under out/<variant>/<env>/seed<k>; failures are recorded, not raised.

    With jobs > 1 cells run in separate processes. Two cells that need the same uncached
    artifact may then both build it; the results are identical, so the last write wins harmlessly.
    """
    out = Path(out)
    cells = [(v, e, sd, cfg, out / cell_dir_name(v) / e / f"seed{sd}")
             for v, e, sd, cfg in matrix_cells(base, sweep, seeds, envs)]
    results = []
    if jobs <= 1:
        for c in cells:
            results.append(_run_cell(*c, cache_dir))
            if on_cell is not None:
                on_cell(results[-1])
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, *c, cache_dir) for c in cells]
            for f in futures:
                results.append(f.result())
                if on_cell is not None:
                    on_cell(results[-1])
    write_table(results, out / "table.csv")
    return results


def aggregate(results: list[CellResult]) -> tuple[list[str], list[str], dict]:
    variants = list(dict.fromkeys(r.variant for r in results))
    envs = sorted({r.env for r in results})
    table = {}
    for v in variants:
        for e in envs:
            vals = [r.normalized_return for r in results if r.variant == v and r.env == e]
            ok = [x for x in vals if x is not None]
            failed = len(ok) < len(vals)
            table[v, e] = (ok, failed)
    return variants, envs, table


def write_table(results: list[CellResult], path: str | Path) -> None:
    """One row per variant: variant, n_seeds, then mean and std of normalized return per env."""
    variants, envs, table = aggregate(results)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "n_seeds"] + [c for e in envs for c in (f"{e}_mean", f"{e}_std")])
        for v in variants:
            n = max(len(table[v, e][0]) + (1 if table[v, e][1] else 0) for e in envs)
            row = [v, n]
            for e in envs:
                ok, failed = table[v, e]
                if failed or not ok:
                    row += ["FAILED", "FAILED"]
                else:
                    row += [repr(float(np.mean(ok))), repr(float(np.std(ok)))]
            w.writerow(row)
