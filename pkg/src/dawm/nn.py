"""Small numpy network substrate with hand-written reverse-mode gradients.

Every layer follows the same protocol: ``forward`` caches what ``backward``
needs, ``backward`` consumes that cache, accumulates parameter gradients into
the owning :class:`ParamStore` and returns the gradient w.r.t. the input.
Only the architectures used in this package are supported.

Each :class:`ParamStore` fixes a floating dtype. Training runs in float32 for
speed; gradient checks build float64 stores so central differences resolve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("mish", "relu", "tanh", "identity")


class NnError(Exception):
    pass


class ShapeError(NnError, ValueError):
    pass


class StateError(NnError, RuntimeError):
    pass


class NonFiniteGradientError(NnError, FloatingPointError):
    pass


class ParamStore:
    """Named parameter arrays with a gradient buffer of identical shapes.

    Layers hold direct references to the arrays, so every mutation here is
    in place.
    """

    def __init__(self, dtype="float64") -> None:
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype("float32"), np.dtype("float64")):
            raise ValueError(f"unsupported parameter dtype {self.dtype}")
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=self.dtype)
        if name in self.params:
            existing = self.params[name]
            if existing.shape != value.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {existing.shape}, declared {value.shape}")
            return existing
        self.params[name] = value.copy()
        self.grads[name] = np.zeros_like(value)
        return self.params[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def cast(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name, p in self.params.items():
            out.add(name, p)
        return out

    def assign(self, other: "ParamStore") -> None:
        for name, p in self.params.items():
            p[...] = other.params[name]

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.n_params:
            raise ShapeError(f"flat vector has {vec.size} entries, store has {self.n_params}")
        i = 0
        for p in self.params.values():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    def equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(p, other.params[n]) for n, p in self.params.items())


def polyak_update(target: ParamStore, source: ParamStore, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, element-wise."""
    for name, t in target.params.items():
        t[...] = tau * source.params[name] + (1.0 - tau) * t


# -- initialisation ---------------------------------------------------------

def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- layers -----------------------------------------------------------------

class Module:
    name = "module"

    def __init__(self) -> None:
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def mish(x: np.ndarray) -> np.ndarray:
    return x * np.tanh(_softplus(x))


class Activation(Module):
    def __init__(self, kind: str, name: str = "act") -> None:
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
        self.kind = kind
        self.name = name

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "mish":
            # tanh(softplus(x)) = n(n+2) / (n(n+2) + 2) with n = e^x, one exp instead of three
            n = np.exp(np.minimum(x, 20.0))
            q = n * (n + 2.0)
            t = q / (q + 2.0)
            self._cache = (x, t, n / (1.0 + n))
            return x * t
        if self.kind == "relu":
            self._cache = x > 0
            return np.maximum(x, 0.0)
        if self.kind == "tanh":
            y = np.tanh(x)
            self._cache = y
            return y
        self._cache = True
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        cache = self._take_cache()
        if self.kind == "mish":
            x, t, sig = cache
            return g * (t + x * (1.0 - t * t) * sig)
        if self.kind == "relu":
            return g * cache
        if self.kind == "tanh":
            return g * (1.0 - cache * cache)
        return g


class Dense(Module):
    """Affine map on the last axis; leading axes are treated as batch."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, init: str = "fan_in") -> None:
        super().__init__()
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        if init == "zeros" or rng is None:
            w0, b0 = np.zeros((n_in, n_out)), np.zeros(n_out)
        else:
            w0 = fan_in_uniform(rng, (n_in, n_out), n_in)
            b0 = fan_in_uniform(rng, (n_out,), n_in)
        self.W = store.add(f"{name}.W", w0)
        self.b = store.add(f"{name}.b", b0)
        self.gW = store.grads[f"{name}.W"]
        self.gb = store.grads[f"{name}.b"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: expected input width {self.n_in}, got {x.shape[-1]}")
        self._cache = x
        y = x.reshape(-1, self.n_in) @ self.W
        y += self.b
        return y.reshape(x.shape[:-1] + (self.n_out,))

    def backward(self, g: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        """Accumulates parameter gradients; skips the input gradient when ``input_grad`` is false."""
        x = self._take_cache()
        x2 = x.reshape(-1, self.n_in)
        g2 = g.reshape(-1, self.n_out)
        self.gW += x2.T @ g2
        self.gb += g2.sum(axis=0)
        if not input_grad:
            return None
        return (g2 @ self.W.T).reshape(x.shape)


@dataclass
class MlpSpec:
    widths: Sequence[int]
    activation: str = "mish"
    output_activation: str = "identity"
    zero_last: bool = False

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")


class Mlp(Module):
    def __init__(self, store: ParamStore, name: str, spec: MlpSpec, rng: np.random.Generator | None) -> None:
        super().__init__()
        self.name = name
        self.spec = spec
        self.layers: list[Module] = []
        w = list(spec.widths)
        n = len(w) - 1
        for i in range(n):
            last = i == n - 1
            init = "zeros" if (last and spec.zero_last) else "fan_in"
            self.layers.append(Dense(store, f"{name}.l{i}", w[i], w[i + 1], rng, init=init))
            act = spec.output_activation if last else spec.activation
            if act != "identity":
                self.layers.append(Activation(act, f"{name}.a{i}"))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class Conv1d(Module):
    """Temporal convolution over (batch, length, channels) with same-padding."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same-padding")
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        fan_in = c_in * kernel
        w0 = fan_in_uniform(rng, (fan_in, c_out), fan_in) if rng is not None else np.zeros((fan_in, c_out))
        b0 = fan_in_uniform(rng, (c_out,), fan_in) if rng is not None else np.zeros(c_out)
        self.W = store.add(f"{name}.W", w0)
        self.b = store.add(f"{name}.b", b0)
        self.gW = store.grads[f"{name}.W"]
        self.gb = store.grads[f"{name}.b"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeError(f"{self.name}: expected (batch, length, {self.c_in}), got {x.shape}")
        B, L, C = x.shape
        p = self.k // 2
        xp = np.zeros((B, L + 2 * p, C), dtype=x.dtype)
        xp[:, p:p + L] = x
        cols = np.concatenate([xp[:, j:j + L] for j in range(self.k)], axis=2).reshape(B * L, -1)
        self._cache = (cols, B, L)
        return (cols @ self.W + self.b).reshape(B, L, self.c_out)

    def backward(self, g: np.ndarray) -> np.ndarray:
        cols, B, L = self._take_cache()
        g2 = g.reshape(B * L, self.c_out)
        self.gW += cols.T @ g2
        self.gb += g2.sum(axis=0)
        gcols = (g2 @ self.W.T).reshape(B, L, -1)
        p = self.k // 2
        gxp = np.zeros((B, L + 2 * p, self.c_in), dtype=g.dtype)
        for j in range(self.k):
            gxp[:, j:j + L] += gcols[:, :, j * self.c_in:(j + 1) * self.c_in]
        return gxp[:, p:p + L]


class ResidualTemporalBlock(Module):
    """conv -> mish -> (conditioning) -> conv -> mish, plus skip.

    The skip path is the identity when channel counts agree and a learned
    per-position projection otherwise. Sequence length is preserved.

    Conditioning is additive by default. ``film`` switches to a scale and
    shift, h * (1 + scale) + shift. With ``length`` set, the projection emits
    separate values for every position instead of one vector broadcast over time.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, cond_dim: int,
                 kernel: int, rng: np.random.Generator | None, length: int | None = None,
                 film: bool = False) -> None:
        super().__init__()
        self.name = name
        self.c_out = c_out
        self.length = length
        self.film = film
        n_mod = 2 if film else 1
        self.conv1 = Conv1d(store, f"{name}.conv1", c_in, c_out, kernel, rng)
        self.act1 = Activation("mish", f"{name}.act1")
        self.cond = Dense(store, f"{name}.cond", cond_dim, n_mod * c_out * (length or 1), rng)
        self.conv2 = Conv1d(store, f"{name}.conv2", c_out, c_out, kernel, rng)
        self.act2 = Activation("mish", f"{name}.act2")
        self.skip = Dense(store, f"{name}.skip", c_in, c_out, rng) if c_in != c_out else None

    def forward(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        if self.length is not None and x.shape[1] != self.length:
            raise ShapeError(f"{self.name}: built for length {self.length}, got {x.shape[1]}")
        h1 = self.act1.forward(self.conv1.forward(x))
        proj = self.cond.forward(c).reshape(len(c), self.length or 1, -1)
        if self.film:
            scale = proj[..., :self.c_out]
            h = h1 * (1.0 + scale) + proj[..., self.c_out:]
            self._cache = (h1, scale)
        else:
            h = h1 + proj
            self._cache = (None, None)
        h = self.act2.forward(self.conv2.forward(h))
        res = self.skip.forward(x) if self.skip is not None else x
        return h + res

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h1, scale = self._take_cache()
        gx = self.skip.backward(g) if self.skip is not None else g.copy()
        gh = self.conv2.backward(self.act2.backward(g))
        if self.film:
            g_proj = np.concatenate([gh * h1, gh], axis=2)
            gh = gh * (1.0 + scale)
        else:
            g_proj = gh
        if self.length is None:
            g_proj = g_proj.sum(axis=1)
        gc = self.cond.backward(g_proj.reshape(len(g_proj), -1))
        gx = gx + self.conv1.backward(self.act1.backward(gh))
        return gx, gc


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, g in store.grads.items():
        # a finite sum rules out inf/nan cheaply; only a non-finite sum needs the full scan
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    step_size = state.lr / c1
    inv_sqrt_c2 = 1.0 / np.sqrt(c2)
    for name, p in store.params.items():
        g = store.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        g *= g
        g *= 1.0 - state.beta2
        v += g
        denom = np.sqrt(v)
        denom *= inv_sqrt_c2
        denom += state.eps
        p -= step_size * m / denom
    store.zero_grad()


@dataclass
class EmaState:
    shadow: ParamStore
    decay: float = 0.995

    @classmethod
    def from_store(cls, store: ParamStore, decay: float = 0.995) -> "EmaState":
        return cls(store.copy(), decay)


def ema_update(ema: EmaState, store: ParamStore) -> None:
    rho = ema.decay
    for name, s in ema.shadow.params.items():
        s *= rho
        s += (1.0 - rho) * store.params[name]


# -- gradient checking ------------------------------------------------------

def finite_difference_grad(loss_fn: Callable[[], float], store: ParamStore, h: float = 1e-5,
                           names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of the named parameters."""
    out = {}
    for name in names if names is not None else store.names():
        p = store.params[name]
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        out[name] = fd
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < floor:
        return 0.0 if num < floor else float("inf")
    return num / den


def gradient_check(loss_and_grad: Callable[[], float], loss_only: Callable[[], float],
                   store: ParamStore, h: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error between analytic and central-difference gradients.

    ``loss_and_grad`` must accumulate gradients into ``store``; ``loss_only``
    must be a pure function of the current parameters.
    """
    store.zero_grad()
    loss_and_grad()
    analytic = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    fd = finite_difference_grad(loss_only, store, h)
    return {n: relative_error(analytic[n], fd[n]) for n in store.names()}


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"DAWMCK01"


class CheckpointError(NnError, ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, spec: dict, stores: dict[str, ParamStore],
                    step: int = 0, ema: bool = False) -> None:
    """Write named stores as magic + JSON header line + little-endian float64 payload."""
    layout = []
    chunks = []
    dtypes = {sname: store.dtype.name for sname, store in stores.items()}
    for sname, store in stores.items():
        for pname, p in store.params.items():
            layout.append([sname, pname, list(p.shape)])
            chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    header = {"kind": kind, "spec": spec, "step": int(step), "ema": bool(ema), "layout": layout,
              "dtypes": dtypes}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, ParamStore]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    nl = raw.find(b"\n", 8)
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[8:nl].decode("utf-8"))
    offset = nl + 1
    stores: dict[str, ParamStore] = {}
    for sname, pname, shape in header["layout"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {sname}/{pname}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        if sname not in stores:
            stores[sname] = ParamStore(header.get("dtypes", {}).get(sname, "float64"))
        stores[sname].add(pname, arr)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, stores

