"""Minimal sequential neural-network toolkit on numpy.

Dense and 2-d convolution layers, leaky-rectifier activations, nearest
neighbor resizing, reverse-mode gradients, Adam, finite-difference gradient
checking, and a self-describing binary model format.  Everything is float64
and deterministic given the seed; networks are single-writer objects.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as _sp

from .errors import DimensionMismatchError, TrainingError

__all__ = [
    "Tensor",
    "Layer",
    "Dense",
    "Conv2d",
    "LeakyReLU",
    "Flatten",
    "Reshape",
    "Resize",
    "Network",
    "AdamState",
    "adam_step",
    "forward",
    "backward",
    "grad_check",
    "save_model",
    "load_model",
    "dumps_model",
    "loads_model",
]


@dataclass(eq=False)
class Tensor:
    """Dense real array plus an optional gradient of the same shape."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def set_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.values.shape:
            raise DimensionMismatchError(f"grad shape {g.shape} != value shape {self.values.shape}")
        self.grad = g


class Layer:
    """Base layer: caches its forward input, exposes named parameters."""

    kind = "base"

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def hyper(self) -> dict:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, want_param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        self.w = Tensor(w)
        self.b = Tensor(np.zeros(out_dim))
        self._x = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def hyper(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatchError(f"dense expects (batch, {self.in_dim}), got {x.shape}")
        self._x = x
        return x @ self.w.values.T + self.b.values

    def backward(self, dy, want_param_grads=True):
        if self._x is None:
            raise TrainingError("backward before forward on dense layer")
        if want_param_grads:
            self.w.set_grad(dy.T @ self._x)
            self.b.set_grad(dy.sum(axis=0))
        return dy @ self.w.values


class Conv2d(Layer):
    """2-d convolution with zero padding, implemented via column gathering.

    Output spatial size per axis is floor((n + 2*pad - k) / stride) + 1.
    Gather indices and the backward scatter matrix are precomputed per input
    spatial shape, so repeated full-batch epochs stay in BLAS/CSR kernels.
    """

    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ksize: int = 3,
        stride: int = 1,
        pad: int = 0,
        rng: np.random.Generator | None = None,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.stride = stride
        self.pad = pad
        shape = (out_channels, in_channels, ksize, ksize)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (in_channels * ksize * ksize)), size=shape)
        self.w = Tensor(w)
        self.b = Tensor(np.zeros(out_channels))
        self._plan_cache: dict[tuple[int, int], tuple] = {}
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def hyper(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "ksize": self.ksize,
            "stride": self.stride,
            "pad": self.pad,
        }

    def out_size(self, n: int) -> int:
        return (n + 2 * self.pad - self.ksize) // self.stride + 1

    def _plan(self, h: int, w: int):
        key = (h, w)
        if key not in self._plan_cache:
            oh, ow = self.out_size(h), self.out_size(w)
            if oh < 1 or ow < 1:
                raise DimensionMismatchError(f"conv input {h}x{w} too small for kernel")
            hp, wp = h + 2 * self.pad, w + 2 * self.pad
            base_r = self.stride * np.repeat(np.arange(oh), ow)
            base_c = self.stride * np.tile(np.arange(ow), oh)
            off_r = np.repeat(np.arange(self.ksize), self.ksize)
            off_c = np.tile(np.arange(self.ksize), self.ksize)
            rows = base_r[:, None] + off_r[None, :]      # (oh*ow, k*k)
            cols = base_c[:, None] + off_c[None, :]
            flat = rows * wp + cols
            chan = np.arange(self.in_channels) * (hp * wp)
            gather = (chan[None, :, None] + flat[:, None, :]).reshape(
                oh * ow, self.in_channels * self.ksize**2
            )
            n_cols = gather.size
            scatter = _sp.csr_matrix(
                (np.ones(n_cols), (gather.ravel(), np.arange(n_cols))),
                shape=(self.in_channels * hp * wp, n_cols),
            )
            self._plan_cache[key] = (oh, ow, hp, wp, gather, scatter)
        return self._plan_cache[key]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionMismatchError(
                f"conv expects (batch, {self.in_channels}, h, w), got {x.shape}"
            )
        batch, _, h, w = x.shape
        oh, ow, hp, wp, gather, _ = self._plan(h, w)
        if self.pad:
            xp = np.zeros((batch, self.in_channels, hp, wp))
            xp[:, :, self.pad : self.pad + h, self.pad : self.pad + w] = x
        else:
            xp = x
        cols = xp.reshape(batch, -1)[:, gather]          # (batch, ohw, in_ch*k*k)
        cols2 = cols.reshape(batch * oh * ow, -1)
        w2 = self.w.values.reshape(self.out_channels, -1)
        y = cols2 @ w2.T + self.b.values                 # (batch*ohw, out_ch)
        self._cache = (x.shape, cols2, (h, w))
        return np.ascontiguousarray(
            y.reshape(batch, oh * ow, self.out_channels).transpose(0, 2, 1)
        ).reshape(batch, self.out_channels, oh, ow)

    def backward(self, dy, want_param_grads=True):
        if self._cache is None:
            raise TrainingError("backward before forward on conv layer")
        x_shape, cols2, (h, w) = self._cache
        batch = x_shape[0]
        oh, ow, hp, wp, _, scatter = self._plan(h, w)
        dyf = np.ascontiguousarray(
            dy.reshape(batch, self.out_channels, oh * ow).transpose(0, 2, 1)
        ).reshape(batch * oh * ow, self.out_channels)
        w2 = self.w.values.reshape(self.out_channels, -1)
        if want_param_grads:
            self.w.set_grad((dyf.T @ cols2).reshape(self.w.values.shape))
            self.b.set_grad(dyf.sum(axis=0))
        dcols = (dyf @ w2).reshape(batch, -1)            # (batch, ohw*in_ch*k*k)
        dxp = (scatter @ dcols.T).T.reshape(batch, self.in_channels, hp, wp)
        if self.pad:
            return np.ascontiguousarray(
                dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + w]
            )
        return dxp


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha
        self._mask = None

    def hyper(self):
        return {"alpha": self.alpha}

    def forward(self, x):
        self._mask = x >= 0
        return np.where(self._mask, x, self.alpha * x)

    def backward(self, dy, want_param_grads=True):
        if self._mask is None:
            raise TrainingError("backward before forward on activation")
        return np.where(self._mask, dy, self.alpha * dy)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, want_param_grads=True):
        if self._shape is None:
            raise TrainingError("backward before forward on flatten")
        return dy.reshape(self._shape)


class Reshape(Layer):
    """Reshape each sample to a fixed per-sample shape."""

    kind = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(int(s) for s in shape)
        self._in_shape = None

    def hyper(self):
        return {"shape": list(self.shape)}

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy, want_param_grads=True):
        if self._in_shape is None:
            raise TrainingError("backward before forward on reshape")
        return dy.reshape(self._in_shape)


class Resize(Layer):
    """Nearest-neighbor resize of (batch, ch, h, w) to a fixed target size."""

    kind = "resize"

    def __init__(self, out_hw: tuple[int, int]):
        self.out_hw = (int(out_hw[0]), int(out_hw[1]))
        self._plan_cache: dict[tuple[int, int], tuple] = {}
        self._cache = None

    def hyper(self):
        return {"out_hw": list(self.out_hw)}

    def _plan(self, h: int, w: int):
        key = (h, w)
        if key not in self._plan_cache:
            oh, ow = self.out_hw
            sr = (np.arange(oh) * h) // oh
            sc = (np.arange(ow) * w) // ow
            gather = (sr[:, None] * w + sc[None, :]).ravel()
            scatter = _sp.csr_matrix(
                (np.ones(oh * ow), (gather, np.arange(oh * ow))),
                shape=(h * w, oh * ow),
            )
            self._plan_cache[key] = (gather, scatter)
        return self._plan_cache[key]

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionMismatchError(f"resize expects (batch, ch, h, w), got {x.shape}")
        batch, ch, h, w = x.shape
        gather, _ = self._plan(h, w)
        self._cache = x.shape
        oh, ow = self.out_hw
        return x.reshape(batch * ch, h * w)[:, gather].reshape(batch, ch, oh, ow)

    def backward(self, dy, want_param_grads=True):
        if self._cache is None:
            raise TrainingError("backward before forward on resize")
        batch, ch, h, w = self._cache
        _, scatter = self._plan(h, w)
        oh, ow = self.out_hw
        dx = (scatter @ dy.reshape(batch * ch, oh * ow).T).T
        return dx.reshape(batch, ch, h, w)


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2d, LeakyReLU, Flatten, Reshape, Resize)
}


class Network:
    """Ordered layer pipeline with named activation taps.

    ``taps`` maps a name to a layer index; the tap value is that layer's
    output.  A frozen network never receives parameter gradients (its
    ``parameters()`` is empty) but still propagates input gradients.
    """

    def __init__(self, layers: list[Layer], taps: dict[str, int] | None = None, frozen: bool = False):
        self.layers = list(layers)
        self.taps = dict(taps or {})
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"tap {name!r} points at layer {idx}, have {len(self.layers)}")
        self.frozen = frozen
        self.meta: dict = {}
        self._out_shape = None

    def parameters(self) -> list[Tensor]:
        if self.frozen:
            return []
        return [t for layer in self.layers for _, t in layer.params()]

    def all_param_tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for _, t in layer.params()]

    def zero_grad(self) -> None:
        for t in self.all_param_tensors():
            t.grad = None

    def forward(self, x) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        tap_values: dict[str, np.ndarray] = {}
        index_to_names: dict[int, list[str]] = {}
        for name, idx in self.taps.items():
            index_to_names.setdefault(idx, []).append(name)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            for name in index_to_names.get(i, ()):
                tap_values[name] = x
        self._out_shape = x.shape
        return x, tap_values

    def backward(
        self,
        out_grad: np.ndarray | None = None,
        tap_grads: dict[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        if self._out_shape is None:
            raise TrainingError("backward called before forward")
        tap_grads = dict(tap_grads or {})
        unknown = set(tap_grads) - set(self.taps)
        if unknown:
            raise ValueError(f"gradients for unknown taps {sorted(unknown)}")
        if out_grad is None and tap_grads:
            # tap-only loss: layers above the highest tap see no gradient
            start = max(self.taps[name] for name in tap_grads)
            grad = None
        else:
            start = len(self.layers) - 1
            if out_grad is None:
                grad = np.zeros(self._out_shape)
            else:
                grad = np.asarray(out_grad, dtype=np.float64)
                if grad.shape != self._out_shape:
                    raise DimensionMismatchError(
                        f"loss grad shape {grad.shape} != output shape {self._out_shape}"
                    )
        index_to_names: dict[int, list[str]] = {}
        for name, idx in self.taps.items():
            index_to_names.setdefault(idx, []).append(name)
        want = not self.frozen
        for i in range(start, -1, -1):
            for name in index_to_names.get(i, ()):
                if name in tap_grads:
                    injected = tap_grads[name]
                    grad = injected if grad is None else grad + injected
            grad = self.layers[i].backward(grad, want_param_grads=want)
        return grad

    def copy_parameter_values(self) -> list[np.ndarray]:
        return [t.values.copy() for t in self.all_param_tensors()]

    def load_parameter_values(self, values: list[np.ndarray]) -> None:
        tensors = self.all_param_tensors()
        if len(values) != len(tensors):
            raise DimensionMismatchError("parameter count mismatch")
        for t, v in zip(tensors, values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.values.shape:
                raise DimensionMismatchError("parameter shape mismatch")
            t.values = v.copy()


def forward(net: Network, x) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the pipeline; returns the output and every registered tap."""
    return net.forward(x)


def backward(net: Network, loss_grad, tap_grads=None) -> np.ndarray:
    """Reverse-mode pass; populates parameter gradients (unless frozen) and
    returns the gradient with respect to the network input."""
    return net.backward(loss_grad, tap_grads)


@dataclass(eq=False)
class AdamState:
    """Adam moments for an ordered parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
        return state


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None):
    """One bias-corrected Adam update, in place.  ``grads`` defaults to the
    parameters' stored gradients."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise DimensionMismatchError("gradient list does not match parameter list")
    if state.m is None or len(state.m) != len(params):
        raise DimensionMismatchError("Adam state does not match parameter list")
    for i, g in enumerate(grads):
        if g is None:
            raise TrainingError(f"parameter {i} has no gradient")
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient on parameter {i} (max |g| = {np.max(np.abs(g)):.3e})"
            )
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def grad_check(
    net: Network,
    loss_fn,
    max_samples: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn()`` must run a forward/backward pass with the network's current
    parameters, leave gradients populated, and return the scalar loss.  Up to
    ``max_samples`` parameter entries are sampled; frozen networks contribute
    no checkable parameters.  Returns the worst relative deviation.
    """
    params = net.parameters()
    loss_fn()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]
    sizes = [p.values.size for p in params]
    total = int(np.sum(sizes))
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    chosen = np.arange(total) if total <= max_samples else np.sort(
        rng.choice(total, size=max_samples, replace=False)
    )
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in chosen:
        p_idx = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        local = int(flat_idx - bounds[p_idx])
        values = params[p_idx].values.ravel()
        keep = values[local]
        values[local] = keep + step
        f_plus = loss_fn()
        values[local] = keep - step
        f_minus = loss_fn()
        values[local] = keep
        fd = (f_plus - f_minus) / (2 * step)
        an = analytic[p_idx].ravel()[local]
        deviation = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
        worst = max(worst, deviation)
    loss_fn()  # restore caches/gradients for the unperturbed parameters
    return worst


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _unpack_array(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    ndim = struct.unpack_from("<B", buf, offset)[0]
    offset += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    offset += 8 * count
    return arr, offset


def dumps_model(net: Network) -> bytes:
    """Self-describing binary; magic ``NNM1``, json headers, little-endian
    8-byte floats."""
    out = [b"NNM1"]
    header = json.dumps({"taps": net.taps, "frozen": net.frozen, "n_layers": len(net.layers)})
    hb = header.encode()
    out.append(struct.pack("<I", len(hb)) + hb)
    for layer in net.layers:
        kind = layer.kind.encode()
        hyper = json.dumps(layer.hyper()).encode()
        out.append(struct.pack("<I", len(kind)) + kind)
        out.append(struct.pack("<I", len(hyper)) + hyper)
        plist = layer.params()
        out.append(struct.pack("<I", len(plist)))
        for name, tensor in plist:
            nb = name.encode()
            out.append(struct.pack("<I", len(nb)) + nb)
            out.append(_pack_array(tensor.values))
    return b"".join(out)


def loads_model(data: bytes) -> Network:
    buf = memoryview(data)
    if bytes(buf[:4]) != b"NNM1":
        raise ValueError("not a model blob (bad magic)")
    offset = 4
    hlen = struct.unpack_from("<I", buf, offset)[0]
    offset += 4
    header = json.loads(bytes(buf[offset : offset + hlen]).decode())
    offset += hlen
    layers = []
    for _ in range(header["n_layers"]):
        klen = struct.unpack_from("<I", buf, offset)[0]
        offset += 4
        kind = bytes(buf[offset : offset + klen]).decode()
        offset += klen
        jlen = struct.unpack_from("<I", buf, offset)[0]
        offset += 4
        hyper = json.loads(bytes(buf[offset : offset + jlen]).decode())
        offset += jlen
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind == "reshape":
            layer = Reshape(tuple(hyper["shape"]))
        elif kind == "resize":
            layer = Resize(tuple(hyper["out_hw"]))
        else:
            layer = LAYER_KINDS[kind](**hyper)
        n_params = struct.unpack_from("<I", buf, offset)[0]
        offset += 4
        stored = dict(layer.params())
        for _ in range(n_params):
            nlen = struct.unpack_from("<I", buf, offset)[0]
            offset += 4
            name = bytes(buf[offset : offset + nlen]).decode()
            offset += nlen
            arr, offset = _unpack_array(buf, offset)
            if name not in stored:
                raise ValueError(f"layer {kind} has no parameter {name!r}")
            if stored[name].values.shape != arr.shape:
                raise DimensionMismatchError(f"parameter {name} shape mismatch in blob")
            stored[name].values = arr
        layers.append(layer)
    return Network(layers, taps={k: int(v) for k, v in header["taps"].items()}, frozen=header["frozen"])


def save_model(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(dumps_model(net))


def load_model(path: str | Path) -> Network:
    return loads_model(Path(path).read_bytes())
