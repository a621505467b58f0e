"""Small float64 numpy core with hand-written backward passes.

Layers read their weights from a :class:`ParamStore` by name and accumulate
gradients into it; there is no graph autodiff.  Every array carries a leading
batch dimension.

Randomness: all generators are numpy PCG64 instances created by
:func:`make_rng`, which keys a ``SeedSequence`` on ``(seed, crc32(stream))`` so
independent streams (init, shuffling, spawns, ...) never share state.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"GRIDQACK"
CKPT_VERSION = 1


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())]))


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class ParamStore:
    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = np.array(value, dtype=np.float64)
        z = np.zeros_like(value)
        self.params[name] = Param(value, z.copy(), z.copy(), z.copy())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def scale_grad(self, factor: float) -> None:
        for p in self.params.values():
            p.grad *= factor

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params.values())))

    def clone(self) -> ParamStore:
        out = ParamStore()
        for name, p in self.params.items():
            out.params[name] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.t)
        return out

    def reset_optimizer(self) -> None:
        for p in self.params.values():
            p.m[...] = 0.0
            p.v[...] = 0.0
            p.t = 0

    def equal(self, other: ParamStore) -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(p.value, q.value) and np.array_equal(p.m, q.m)
            and np.array_equal(p.v, q.v) and p.t == q.t
            for p, q in zip(self.params.values(), other.params.values())
        )


# ---------------------------------------------------------------- initialisers

def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                scale: float | None = None) -> None:
    s = 1.0 / np.sqrt(n_in) if scale is None else scale
    store.add(f"{name}.W", rng.uniform(-s, s, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_embedding(store: ParamStore, name: str, n_rows: int, dim: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.E", rng.normal(0.0, 0.1, size=(n_rows, dim)))


def init_lstm(store: ParamStore, name: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    s = 1.0 / np.sqrt(n_hidden)
    store.add(f"{name}.W", rng.uniform(-s, s, size=(n_in + n_hidden, 4 * n_hidden)))
    b = np.zeros(4 * n_hidden)
    b[n_hidden : 2 * n_hidden] = 1.0  # forget gate
    store.add(f"{name}.b", b)


# ---------------------------------------------------------------- layers

def linear(store: ParamStore, name: str, x: np.ndarray):
    W, b = store[f"{name}.W"], store[f"{name}.b"]
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b, x


def linear_backward(store: ParamStore, name: str, cache: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x = cache
    W = store[f"{name}.W"]
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    store.grad(f"{name}.W")[...] += x2.T @ dy2
    store.grad(f"{name}.b")[...] += dy2.sum(axis=0)
    return dy @ W.T


def embedding(store: ParamStore, name: str, index) -> tuple[np.ndarray, np.ndarray]:
    E = store[f"{name}.E"]
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= E.shape[0]):
        raise IndexError(f"{name}: index out of range [0, {E.shape[0]})")
    return E[idx], idx


def embedding_backward(store: ParamStore, name: str, cache: np.ndarray, dvec: np.ndarray) -> None:
    np.add.at(store.grad(f"{name}.E"), cache, dvec)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell(store: ParamStore, name: str, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    W, b = store[f"{name}.W"], store[f"{name}.b"]
    H = h.shape[-1]
    if x.shape[-1] + H != W.shape[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} + {H} != {W.shape[0]}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ W + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H : 2 * H])
    o = sigmoid(z[:, 2 * H : 3 * H])
    g = np.tanh(z[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def lstm_cell_backward(store: ParamStore, name: str, cache, dh: np.ndarray, dc: np.ndarray, deferred=None):
    """Returns ``(dx, dh_prev, dc_prev)``.

    Weight gradients are accumulated into ``store`` unless ``deferred`` is a
    list, in which case ``(xh, dz)`` is appended for a later batched update
    (see :func:`flush_deferred`).
    """
    xh, c, i, f, o, g, tc = cache
    W = store[f"{name}.W"]
    H = dh.shape[-1]
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dct * g * i * (1.0 - i), dct * c * f * (1.0 - f), do * o * (1.0 - o), dct * i * (1.0 - g * g)],
        axis=-1,
    )
    if deferred is None:
        store.grad(f"{name}.W")[...] += xh.T @ dz
        store.grad(f"{name}.b")[...] += dz.sum(axis=0)
    else:
        deferred.append((xh, dz))
    dxh = dz @ W.T
    n_in = xh.shape[-1] - H
    return dxh[:, :n_in], dxh[:, n_in:], dct * f


def flush_deferred(store: ParamStore, name: str, deferred) -> None:
    xh = np.concatenate([d[0] for d in deferred], axis=0)
    dz = np.concatenate([d[1] for d in deferred], axis=0)
    store.grad(f"{name}.W")[...] += xh.T @ dz
    store.grad(f"{name}.b")[...] += dz.sum(axis=0)


def zero_state(names, batch: int, store: ParamStore):
    out = []
    for n in names:
        H = store[f"{n}.W"].shape[1] // 4
        out.append((np.zeros((batch, H)), np.zeros((batch, H))))
    return out


def lstm_stack_step(store: ParamStore, names, x: np.ndarray, state):
    """One time step through stacked layers; ``state`` is a list of (h, c)."""
    new_state, caches = [], []
    inp = x
    for n, (h, c) in zip(names, state):
        h, c, cache = lstm_cell(store, n, inp, h, c)
        new_state.append((h, c))
        caches.append(cache)
        inp = h
    return new_state, caches


def lstm_seq(store: ParamStore, names, xs, state=None):
    """Run a stacked LSTM over a list of ``(batch, in)`` inputs from zero state.

    Returns the per-step top-layer hidden states, the final state and the
    caches needed by :func:`lstm_seq_backward`.
    """
    state = state if state is not None else zero_state(names, xs[0].shape[0], store)
    tops, caches = [], []
    for x in xs:
        state, cache = lstm_stack_step(store, names, x, state)
        tops.append(state[-1][0])
        caches.append(cache)
    return tops, state, caches


def lstm_seq_backward(store: ParamStore, names, caches, dtops) -> list[np.ndarray]:
    """BPTT through :func:`lstm_seq`; ``dtops[t]`` is dL/d(top hidden at t) or None."""
    n_layers = len(names)
    deferred = [[] for _ in names]
    dh_next = [None] * n_layers
    dc_next = [None] * n_layers
    dxs = [None] * len(caches)
    for t in reversed(range(len(caches))):
        d_in = dtops[t]
        for layer in reversed(range(n_layers)):
            cache = caches[t][layer]
            H = cache[2].shape[-1]
            B = cache[2].shape[0]
            dh = np.zeros((B, H)) if dh_next[layer] is None else dh_next[layer]
            if d_in is not None:
                dh = dh + d_in
            dc = np.zeros((B, H)) if dc_next[layer] is None else dc_next[layer]
            d_in, dh_next[layer], dc_next[layer] = lstm_cell_backward(
                store, names[layer], cache, dh, dc, deferred[layer]
            )
        dxs[t] = d_in
    for name, d in zip(names, deferred):
        if d:
            flush_deferred(store, name, d)
    return dxs


# ---------------------------------------------------------------- losses

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    zs = z - z.max(axis=axis, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels, weights=None):
    """Weighted sum of per-row ``-log softmax(logits)[label]`` and its gradient.

    With ``weights=None`` every row has weight one, so a single row gives the
    plain cross-entropy.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError("label out of range")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-(w * logp[rows, labels]).sum())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * w[:, None]


def cosine_loss(a: np.ndarray, b: np.ndarray, weights=None):
    """Weighted sum over rows of ``1 - cos(a, b)``; gradient w.r.t. ``a`` only.

    The norm product is taken as ``sqrt(|a|^2 |b|^2)`` so identical rows give
    a loss and gradient of exactly zero.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    aa = (a * a).sum(axis=-1)
    bb = (b * b).sum(axis=-1)
    w = np.ones(a.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    live = w != 0
    if ((aa == 0) | (bb == 0))[live].any():
        raise ValueError("cosine loss needs nonzero vectors")
    aa = np.where(live, aa, 1.0)
    bb = np.where(live, bb, 1.0)
    norm = np.sqrt(aa * bb)
    ab = (a * b).sum(axis=-1)
    cos = ab / norm
    loss = float((w * (1.0 - cos)).sum())
    # d(1 - cos)/da = -(b |a|^2 - (a.b) a) / (norm |a|^2); the numerator cancels exactly when a == b
    grad = -(b * aa[:, None] - ab[:, None] * a) / (norm * aa)[:, None]
    return loss, grad * w[:, None]


# ---------------------------------------------------------------- optimiser

class NumericError(FloatingPointError):
    """A non-finite gradient reached the optimizer; parameters are left untouched."""


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names=None) -> None:
    names = store.names() if names is None else names
    for name in names:
        if not np.isfinite(store.params[name].grad).all():
            raise NumericError(f"non-finite gradient in {name}")
    for name in names:
        p = store.params[name]
        p.t += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.t)
        v_hat = p.v / (1.0 - beta2**p.t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g[...] = 0.0


# ---------------------------------------------------------------- verification

def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / (|a| + |b|)``, 0 when both vanish."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(loss_fn, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return out


def grad_check(loss_fn, store: ParamStore, h: float = 1e-6, names=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the scalar loss and leave analytic gradients in
    ``store`` (it is called once with zeroed grads before the perturbations).
    """
    store.zero_grad()
    loss_fn()
    analytic = {n: store.grad(n).copy() for n in store.names()}
    worst = 0.0
    for n in store.names() if names is None else names:
        num = numeric_grad(loss_fn, store[n], h)
        worst = max(worst, rel_error(analytic[n], num))
    store.zero_grad()
    return worst


# ---------------------------------------------------------------- checkpoints

def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, store: ParamStore, config: dict) -> None:
    """Binary little-endian checkpoint; layout documented in FORMATS.md."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(store.params))]
    for name, p in store.params.items():
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(struct.pack("<Q", p.t))
        for arr in (p.value, p.m, p.v):
            parts.append(_pack_array(arr))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> tuple[ParamStore, dict]:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 12
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    config = json.loads(data[off : off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    store = ParamStore()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (t,) = struct.unpack_from("<Q", data, off)
        off += 8
        size = int(np.prod(shape)) if shape else 1
        arrs = []
        for _ in range(3):
            arrs.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape))
            off += 8 * size
        store.params[name] = Param(arrs[0], np.zeros(shape), arrs[1], arrs[2], int(t))
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return store, config
