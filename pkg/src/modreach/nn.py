"""Small dense-array network engine with hand-written backward passes.

Only what the reaching pipeline needs: 2-D convolution (NHWC, no padding),
fully connected, ReLU and sigmoid layers, a quadratic loss and RMSProp.
Arrays are plain numpy; float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

import copy
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


class Dense(Layer):
    kind = "fc"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        bound = np.sqrt(1.0 / n_in)
        rng = rng or np.random.default_rng(0)
        self.W = rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype)
        self.b = rng.uniform(-bound, bound, n_out).astype(dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def forward(self, x):
        self._in_shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.W + self.b

    def backward(self, g, input_grad=True):
        np.matmul(self._x.T, g, out=self.grads[0])
        np.sum(g, axis=0, out=self.grads[1])
        if input_grad:
            return (g @ self.W.T).reshape(self._in_shape)
        return None

    def spec(self):
        return {"kind": "fc", "out": self.n_out}

    def out_shape(self, in_shape):
        return (self.n_out,)


class Conv2D(Layer):
    """Valid (unpadded) strided convolution on NHWC input."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, kernel, stride
        fan_in = kernel * kernel * c_in
        bound = np.sqrt(1.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        # rows ordered (kh, kw, c_in) to match the im2col layout below
        self.W = rng.uniform(-bound, bound, (fan_in, c_out)).astype(dtype)
        self.b = rng.uniform(-bound, bound, c_out).astype(dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.c_in:
            raise ShapeError(f"conv expects (H, W, {self.c_in}) input, got {in_shape}")
        h, w, _ = in_shape
        if h < self.k or w < self.k:
            raise ShapeError(f"input {in_shape} smaller than kernel {self.k}")
        return ((h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1, self.c_out)

    def forward(self, x):
        n, h, w, c = x.shape
        s, k = self.stride, self.k
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        # win: (n, ho, wo, c, k, k) -> (n*ho*wo, k*k*c)
        self._cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
        self._in_shape = x.shape
        self._out_hw = (ho, wo)
        out = self._cols @ self.W
        out += self.b
        return out.reshape(n, ho, wo, self.c_out)

    def backward(self, g, input_grad=True):
        n, h, w, c = self._in_shape
        ho, wo = self._out_hw
        g2 = g.reshape(-1, self.c_out)
        np.matmul(self._cols.T, g2, out=self.grads[0])
        np.sum(g2, axis=0, out=self.grads[1])
        if not input_grad:
            return None
        s, k = self.stride, self.k
        dcols = g2 @ self.W.T
        if k % s == 0 and (h - k) % s == 0 and (w - k) % s == 0:
            # space-to-depth scatter: (k/s)^2 block adds instead of k^2 strided ones
            m = k // s
            d = dcols.reshape(n, ho, wo, m, s, m, s, c)
            dxb = np.zeros((n, ho + m - 1, s, wo + m - 1, s, c), dtype=dcols.dtype)
            for a in range(m):
                for b in range(m):
                    dxb[:, a : a + ho, :, b : b + wo, :, :] += d[:, :, :, a, :, b, :, :].transpose(0, 1, 3, 2, 4, 5)
            return dxb.reshape(n, h, w, c)
        d = dcols.reshape(n, ho, wo, k, k, c)
        dx = np.zeros(self._in_shape, dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += d[:, :, :, i, j, :]
        return dx

    def spec(self):
        return {"kind": "conv", "out": self.c_out, "kernel": self.k, "stride": self.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, x.dtype.type(0))

    def backward(self, g, input_grad=True):
        return g * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        with np.errstate(over="ignore"):
            self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, g, input_grad=True):
        return g * self._y * (1.0 - self._y)


class Network:
    """Sequential stack of layers with cached activations for backward."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], debug: bool = False):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.debug = debug
        self._ready = False
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape

    @property
    def dtype(self):
        for p in self.params():
            return p.dtype
        return np.dtype(np.float32)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def spec(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer.spec() for layer in self.layers]}

    def _check(self, x, where):
        if self.debug and not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values at {where}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        self._check(x, "input")
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            self._check(x, f"layer {i} ({layer.kind})")
        self._ready = True
        self._batch = x.shape[0]
        return x

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that leaves no usable cache (inference only)."""
        out = self.forward(x)
        self._ready = False
        return out

    def backward(self, grad_out: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        """Fill every layer's ``grads`` and return d(loss)/d(input) if asked."""
        if not self._ready:
            raise RuntimeError("backward() called before forward()")
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != (self._batch,) + tuple(self.output_shape):
            raise ShapeError(f"upstream gradient shape {g.shape} does not match output")
        for i in range(len(self.layers) - 1, -1, -1):
            need = input_grad or i > 0
            g = self.layers[i].backward(g, input_grad=need)
            if g is not None:
                self._check(g, f"grad of layer {i}")
        return g

    def copy(self) -> "Network":
        new = copy.deepcopy(self)
        new._ready = False
        for layer in new.layers:
            for attr in ("_x", "_cols", "_mask", "_y"):
                layer.__dict__.pop(attr, None)
        return new

    def astype(self, dtype) -> "Network":
        new = self.copy()
        for layer in new.layers:
            if layer.params:
                layer.params = [p.astype(dtype) for p in layer.params]
                layer.grads = [np.zeros_like(p) for p in layer.params]
                layer.W, layer.b = layer.params
        return new

    def load_params(self, arrays: Sequence[np.ndarray]) -> None:
        mine = self.params()
        if len(arrays) != len(mine):
            raise ShapeError("parameter count mismatch")
        for p, a in zip(mine, arrays):
            if p.shape != np.shape(a):
                raise ShapeError(f"parameter shape mismatch {p.shape} vs {np.shape(a)}")
            p[...] = a


def build_network(spec: dict, rng: np.random.Generator | None = None, dtype=np.float32, debug: bool = False) -> Network:
    """Instantiate a :class:`Network` from its declarative description."""
    rng = rng or np.random.default_rng(0)
    shape = tuple(spec["input_shape"])
    layers: list[Layer] = []
    for ls in spec["layers"]:
        kind = ls["kind"]
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"conv layer needs (H, W, C) input, got {shape}")
            layer: Layer = Conv2D(shape[2], ls["out"], ls["kernel"], ls.get("stride", 1), rng=rng, dtype=dtype)
        elif kind == "fc":
            layer = Dense(int(np.prod(shape)), ls["out"], rng=rng, dtype=dtype)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "sigmoid":
            layer = Sigmoid()
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Network(layers, spec["input_shape"], debug=debug)


def perception_spec(dof: int = 3, image: int = 84) -> dict:
    return {
        "input_shape": [image, image, 1],
        "layers": [
            {"kind": "conv", "out": 16, "kernel": 8, "stride": 4},
            {"kind": "relu"},
            {"kind": "conv", "out": 32, "kernel": 4, "stride": 2},
            {"kind": "relu"},
            {"kind": "conv", "out": 32, "kernel": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "fc", "out": 2 + dof},
            {"kind": "sigmoid"},
        ],
    }


def control_spec(dof: int = 3, hidden: tuple[int, int] = (400, 300)) -> dict:
    return {
        "input_shape": [2 + dof],
        "layers": [
            {"kind": "fc", "out": hidden[0]},
            {"kind": "relu"},
            {"kind": "fc", "out": hidden[1]},
            {"kind": "relu"},
            {"kind": "fc", "out": 3 * dof},
        ],
    }


def quadratic_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean half squared error over the batch and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    m = pred.shape[0] if pred.ndim else 0
    if m == 0:
        raise ValueError("quadratic_loss needs at least one sample")
    diff = pred - target.astype(pred.dtype, copy=False)
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / m), diff / pred.dtype.type(m)


class RMSProp:
    """acc <- rho*acc + (1-rho)*g^2 ;  p <- p - lr*g/sqrt(acc + eps)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, rho: float = 0.9,
                 eps: float = 1e-6, debug: bool = False):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.debug = debug
        self.acc = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameters")
        for p, g, a in zip(self.params, grads, self.acc):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if self.debug and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient passed to RMSProp")
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            p -= lr * g / np.sqrt(a + self.eps)

    def state(self) -> dict[str, Any]:
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}

    def load_state(self, acc: Sequence[np.ndarray]) -> None:
        if len(acc) != len(self.acc):
            raise ShapeError("optimizer state does not match parameters")
        for a, src in zip(self.acc, acc):
            a[...] = src


def linear_lr(step: int, total: int, start: float, end: float) -> float:
    if total <= 0:
        return end
    frac = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac
