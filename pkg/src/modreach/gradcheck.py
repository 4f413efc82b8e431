"""Central finite-difference checks for :mod:`modreach.nn` networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import Network, build_network, control_spec, perception_spec

H = 1e-5
TOL = 1e-4


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(np.max(err)) if err.size else 0.0


def _pick(rng, sizes, n):
    """Choose ``n`` (array index, flat index) pairs spread over all parameter arrays."""
    total = sum(sizes)
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.cumsum([0] + list(sizes))
    arr = np.searchsorted(offsets, flat, side="right") - 1
    return list(zip(arr.tolist(), (flat - offsets[arr]).tolist()))


def fd_check(
    loss_fn: Callable[[], float],
    arrays: list[np.ndarray],
    analytic: list[np.ndarray],
    rng: np.random.Generator,
    n_params: int = 100,
    h: float = H,
) -> float:
    """Worst relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn`` must read the current contents of ``arrays``; entries are
    perturbed in place and restored.
    """
    worst = 0.0
    for ai, fi in _pick(rng, [a.size for a in arrays], n_params):
        flat = arrays[ai].reshape(-1)
        old = flat[fi]
        flat[fi] = old + h
        lp = loss_fn()
        flat[fi] = old - h
        lm = loss_fn()
        flat[fi] = old
        num = (lp - lm) / (2 * h)
        worst = max(worst, rel_error(analytic[ai].reshape(-1)[fi], num))
    return worst


def fd_check_network(net: Network, rng: np.random.Generator, n_params: int = 100, batch: int = 3,
                     h: float = H, check_input: bool = True) -> float:
    """Check parameter and input gradients of ``net`` under a random linear loss.

    The network must hold 64-bit parameters.
    """
    if net.dtype != np.float64:
        raise TypeError("finite-difference checks need a float64 network")
    x = rng.random((batch,) + net.input_shape)
    proj = rng.standard_normal((batch,) + tuple(net.output_shape))

    def loss():
        return float(np.sum(net.forward(x) * proj))

    net.forward(x)
    gx = net.backward(proj)
    grads = [g.copy() for g in net.grads()]
    worst = fd_check(loss, net.params(), grads, rng, n_params, h)
    if check_input:
        worst = max(worst, fd_check(loss, [x], [gx], rng, min(n_params, 30), h))
    return worst


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOL


LAYER_CASES = {
    "fc": ({"kind": "fc", "out": 5}, [7]),
    "relu": ({"kind": "relu"}, [7]),
    "sigmoid": ({"kind": "sigmoid"}, [7]),
    "conv_k3_s1": ({"kind": "conv", "out": 3, "kernel": 3, "stride": 1}, [8, 8, 2]),
    "conv_k4_s2": ({"kind": "conv", "out": 3, "kernel": 4, "stride": 2}, [10, 10, 2]),
    "conv_k8_s4": ({"kind": "conv", "out": 2, "kernel": 8, "stride": 4}, [16, 16, 1]),
    "conv_k3_s2": ({"kind": "conv", "out": 2, "kernel": 3, "stride": 2}, [9, 9, 2]),
}


def run_suite(seed: int = 0, dof: int = 3, n_params: int = 100) -> list[CheckResult]:
    """Every layer kind on its own, then the full perception and control networks."""
    rng = np.random.default_rng(seed)
    out = []
    for name, (layer, shape) in LAYER_CASES.items():
        # pad parameter-free layers with a dense layer so something is trainable
        layers = [layer] if "out" in layer else [{"kind": "fc", "out": 6}, layer]
        net = build_network({"input_shape": shape, "layers": layers}, rng, dtype=np.float64)
        if layer["kind"] == "relu":
            # keep pre-activations away from the kink at zero
            lin = net.layers[0]
            lin.b += np.where(lin.b >= 0, 0.5, -0.5)
        out.append(CheckResult(name, fd_check_network(net, rng, n_params)))
    for name, spec in (("perception", perception_spec(dof)), ("control", control_spec(dof))):
        net = build_network(spec, rng, dtype=np.float64)
        out.append(CheckResult(name, fd_check_network(net, rng, n_params, batch=2)))
    return out
