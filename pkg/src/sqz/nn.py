"""Minimal dense-tensor autodiff and the neural blocks built on it.

Reverse-mode gradients over a fixed op set (matmul, conv1d, layer norm,
attention, GELU, reshapes/reductions), an Adam optimizer, a finite-difference
gradient checker, and the checkpoint container.  Training runs in float32;
gradient verification runs the same modules in float64.

This is deliberately not a general autodiff: every op's backward is written
by hand so the whole library is checkable against central differences.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, DomainError, ShapeError, StateError

_NAN_GUARD = False


def set_nan_guard(enabled: bool) -> None:
    """Validate every op output for NaN/Inf (slow; meant for tests)."""
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d array node in a dynamically built reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        if _NAN_GUARD and self.data.size and not np.all(np.isfinite(self.data)):
            raise DomainError("non-finite values produced by a tensor op")

    # -- graph ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise StateError("backward() expects a scalar loss tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(g)
            b._accum(g)

        return Tensor(a.data + b.data, parents=(a, b), backward=bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.data, parents=(a,), backward=lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(g * b.data)
            b._accum(g * a.data)

        return Tensor(a.data * b.data, parents=(a, b), backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(g / b.data)
            b._accum(-g * a.data / (b.data**2))

        return Tensor(a.data / b.data, parents=(a, b), backward=bwd)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
            b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

        return Tensor(np.matmul(a.data, b.data), parents=(a, b), backward=bwd)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        a = self
        old = a.data.shape
        return Tensor(
            a.data.reshape(*shape), parents=(a,), backward=lambda g: a._accum(g.reshape(old))
        )

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.data.ndim)))
        inv = np.argsort(axes)
        return Tensor(
            a.data.transpose(axes), parents=(a,), backward=lambda g: a._accum(g.transpose(inv))
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        a = self

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor(a.data[key], parents=(a,), backward=bwd)

    # -- reductions / elementwise --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=bwd)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor(out_data, parents=(a,), backward=lambda g: a._accum(g * out_data))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor(out_data, parents=(a,), backward=lambda g: a._accum(g * 0.5 / out_data))

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def concat(tensors, axis: int = 0) -> Tensor:
    parts = list(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(parts, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor(np.concatenate([t.data for t in parts], axis=axis), parents=tuple(parts), backward=bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    u = x.data
    cdf = 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * u**2) / np.sqrt(2.0 * np.pi)
    out = (u * cdf).astype(u.dtype)
    local = (cdf + u * pdf).astype(u.dtype)
    return Tensor(out, parents=(x,), backward=lambda g: x._accum(g * local))


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis (shift by a constant max for stability)."""
    shift = Tensor(np.max(x.data, axis=-1, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1-D convolution: (C_in, T) -> (C_out, T), odd kernel."""
    c_out, c_in, k = weight.data.shape
    if x.data.ndim != 2 or x.data.shape[0] != c_in:
        raise ShapeError(f"conv1d input {x.data.shape} does not match weight in-channels {c_in}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (C_in, T, K)
    out = np.einsum("oik,itk->ot", weight.data, cols, optimize=True) + bias.data[:, None]
    t = x.data.shape[1]

    def bwd(g):
        bias._accum(g.sum(axis=1))
        weight._accum(np.einsum("ot,itk->oik", g, cols, optimize=True))
        if x.requires_grad:
            grad_cols = np.einsum("ot,oik->itk", g, weight.data, optimize=True)
            grad_xp = np.zeros_like(xp)
            for kk in range(k):
                grad_xp[:, kk:kk + t] += grad_cols[:, :, kk]
            x._accum(grad_xp[:, pad:pad + t] if pad else grad_xp)

    return Tensor(out.astype(x.data.dtype), parents=(x, weight, bias), backward=bwd)


def sinusoidal_embedding(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos embedding, shape (n, dim); ``dim`` must be even."""
    if dim % 2:
        raise DomainError(f"embedding dim must be even, got {dim}")
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    angles = v[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ---------------------------------------------------------------------------
# Modules


class Module:
    """Container of named parameters and sub-modules.

    Forward passes are pure functions of (parameters, inputs); parameter
    shapes are fixed at construction.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}

        def walk(value, key):
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    walk(item, f"{key}.{i}")

        for name in sorted(vars(self)):
            walk(getattr(self, name), f"{prefix}{name}")
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, zero_init: bool = False,
                 bias: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out)) / np.sqrt(d_in)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.weight.data.shape[0]:
            raise ShapeError(
                f"linear expects last dim {self.weight.data.shape[0]}, got {x.data.shape}"
            )
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, dtype=np.float32, zero_init: bool = False):
        if kernel % 2 == 0:
            raise DomainError(f"kernel must be odd for same padding, got {kernel}")
        if zero_init:
            w = np.zeros((c_out, c_in, kernel))
        else:
            w = rng.normal((c_out, c_in, kernel)) / np.sqrt(c_in * kernel)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        if self.affine:
            return normed * self.weight + self.bias
        return normed


class MultiheadAttention(Module):
    """Scaled dot-product attention; self-attention when kv is the query."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        if dim % heads:
            raise DomainError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng.child("q"), dtype)
        # A key bias is cancelled by the softmax, so it stays out of the
        # parameter set (it would be untrainable noise in gradient checks).
        self.k = Linear(dim, dim, rng.child("k"), dtype, bias=False)
        self.v = Linear(dim, dim, rng.child("v"), dtype)
        self.out = Linear(dim, dim, rng.child("o"), dtype)

    def __call__(self, query: Tensor, kv: Tensor | None = None) -> Tensor:
        kv = query if kv is None else kv
        tq, dim = query.data.shape
        tk = kv.data.shape[0]
        h, dh = self.heads, self.head_dim
        q = self.q(query).reshape(tq, h, dh).transpose(1, 0, 2)
        k = self.k(kv).reshape(tk, h, dh).transpose(1, 0, 2)
        v = self.v(kv).reshape(tk, h, dh).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        weights = softmax_last(scores)
        mixed = weights @ v  # (H, Tq, dh)
        return self.out(mixed.transpose(1, 0, 2).reshape(tq, dim))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng.child("fc1"), dtype)
        self.fc2 = Linear(hidden, dim, rng.child("fc2"), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class DiTBlock(Module):
    """Transformer block with adaptive layer-norm shift/scale conditioning."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype, affine=False)
        self.attn = MultiheadAttention(dim, heads, rng.child("attn"), dtype)
        self.ln2 = LayerNorm(dim, dtype, affine=False)
        self.mlp = Mlp(dim, 4 * dim, rng.child("mlp"), dtype)
        # Zero-init so the block starts as an unconditioned pre-norm block.
        self.mod = Linear(dim, 4 * dim, rng.child("mod"), dtype, zero_init=True)

    def __call__(self, x: Tensor, cond_vec: Tensor) -> Tensor:
        dim = x.data.shape[-1]
        m = self.mod(gelu(cond_vec))  # (1, 4*dim)
        s1, b1 = m[:, :dim], m[:, dim:2 * dim]
        s2, b2 = m[:, 2 * dim:3 * dim], m[:, 3 * dim:]
        h = x + self.attn(self.ln1(x) * (1.0 + s1) + b1)
        return h + self.mlp(self.ln2(h) * (1.0 + s2) + b2)


class DitConfig:
    """Shape family shared by the refiner, composer, and accompaniment DiTs.

    ``cond_skip`` adds the first ``bins`` conditioning channels to the output,
    so a refiner whose condition is already an estimate of the target starts
    from that estimate and learns a residual.
    """

    def __init__(self, bins=80, cond_bins=80, patch=4, dim=256, depth=8, heads=4,
                 t_dim=128, cond_skip=False):
        self.bins = bins
        self.cond_bins = cond_bins
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.t_dim = t_dim
        self.cond_skip = cond_skip

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DitConfig":
        return cls(**d)


class MelDiT(Module):
    """Noise-conditional transformer denoiser over patched mel frames.

    Tokens are ``patch`` consecutive frames of the noisy input concatenated
    channel-wise with the conditioning frames.  The noise level enters through
    a sinusoidal embedding driving per-block layer-norm shift/scale.  Output
    is the denoised mel directly (x0 prediction), zero at initialization.
    """

    def __init__(self, cfg: DitConfig, rng, dtype=np.float32, sigma_data: float = 1.0):
        self.cfg = cfg
        self.sigma_data = float(sigma_data)
        self.token_count = 0  # frame-token instrumentation, incremented per forward
        in_dim = cfg.patch * (cfg.bins + cfg.cond_bins)
        self.embed = Linear(in_dim, cfg.dim, rng.child("embed"), dtype)
        self.t_fc1 = Linear(cfg.t_dim, cfg.dim, rng.child("t1"), dtype)
        self.t_fc2 = Linear(cfg.dim, cfg.dim, rng.child("t2"), dtype)
        self.blocks = [DiTBlock(cfg.dim, cfg.heads, rng.child("block", i), dtype) for i in range(cfg.depth)]
        self.ln_out = LayerNorm(cfg.dim, dtype)
        self.head = Linear(cfg.dim, cfg.patch * cfg.bins, rng.child("head"), dtype, zero_init=True)
        self._dtype = dtype

    def forward(self, x_noisy: np.ndarray, sigma: float, cond: np.ndarray) -> Tensor:
        cfg = self.cfg
        x_noisy = np.asarray(x_noisy)
        cond = np.asarray(cond)
        if x_noisy.ndim != 2 or x_noisy.shape[1] != cfg.bins:
            raise ShapeError(f"denoiser input shape {x_noisy.shape}, expected (F, {cfg.bins})")
        if cond.shape[0] != x_noisy.shape[0] or cond.shape[1] != cfg.cond_bins:
            raise ShapeError(
                f"conditioning shape {cond.shape}, expected ({x_noisy.shape[0]}, {cfg.cond_bins})"
            )
        n_frames = x_noisy.shape[0]
        c_in = 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)
        z = np.concatenate([x_noisy * c_in, cond], axis=1).astype(self._dtype)
        n_tokens = -(-n_frames // cfg.patch)
        pad = n_tokens * cfg.patch - n_frames
        if pad:
            z = np.pad(z, ((0, pad), (0, 0)))
        tokens = Tensor(z.reshape(n_tokens, cfg.patch * z.shape[1]))
        pos = sinusoidal_embedding(np.arange(n_tokens), cfg.dim).astype(self._dtype)
        h = self.embed(tokens) + Tensor(pos)

        t_in = sinusoidal_embedding([np.log(sigma) / 4.0], cfg.t_dim).astype(self._dtype)
        tvec = self.t_fc2(gelu(self.t_fc1(Tensor(t_in))))

        for block in self.blocks:
            h = block(h, tvec)
        out = self.head(self.ln_out(h))  # (T, patch*bins)
        out = out.reshape(n_tokens * cfg.patch, cfg.bins)[:n_frames]
        if cfg.cond_skip:
            out = out + Tensor(cond[:, :cfg.bins].astype(self._dtype))
        self.token_count += n_tokens
        return out

    def denoise(self, x_noisy: np.ndarray, sigma: float, cond: np.ndarray) -> np.ndarray:
        """Inference path: forward without keeping gradients."""
        return self.forward(x_noisy, sigma, cond).data.astype(np.float64)


# ---------------------------------------------------------------------------
# Optimizer and gradient checking


class Adam:
    """Standard Adam with bias correction over a named-parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
            m = self._m[name]
            v = self._v[name]
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def grad_check(loss_fn, params: dict[str, Tensor], eps: float = 1e-4) -> float:
    """Max relative error of analytic vs central-difference parameter grads.

    ``loss_fn`` must rebuild the forward graph on every call and return a
    scalar Tensor.  Parameters must be float64 and small (the check visits
    every coordinate).
    """
    total = sum(p.data.size for p in params.values())
    if total > 20000:
        raise DomainError(f"grad_check is exhaustive; {total} parameters is too many")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise DomainError(f"grad_check requires float64 parameters ({name} is {p.data.dtype})")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = loss_fn().item()
            flat[i] = saved - eps
            down = loss_fn().item()
            flat[i] = saved
            numeric = (up - down) / (2 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    for p in params.values():
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container

CHECKPOINT_VERSION = 1
_CRC = struct.Struct("<I")


def save_checkpoint(path, module_kind: str, hyperparams: dict, tensors: dict[str, np.ndarray]) -> None:
    """One-file container: JSON header line, float32 LE payload, trailing CRC32."""
    index = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index[name] = [offset, list(arr.shape)]
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "module_kind": module_kind,
            "hyperparams": hyperparams,
            "tensors": index,
        },
        sort_keys=True,
    ).encode("utf-8")
    Path(path).write_bytes(header + b"\n" + payload + _CRC.pack(zlib.crc32(payload)))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = raw[nl + 1:-_CRC.size]
    (crc,) = _CRC.unpack(raw[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload CRC mismatch")
    tensors = {}
    for name, (offset, shape) in header["tensors"].items():
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    return header["module_kind"], header["hyperparams"], tensors


def fingerprint(obj) -> str:
    """Stable 16-hex-digit digest of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
