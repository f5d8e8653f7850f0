"""Parametric wave functions and their derivatives.

All evaluation methods take a flat parameter vector ``theta`` and a *batch*
of points (integer indices for finite spaces, ``(n, D)`` arrays for boxes).
Shapes returned:

=================  ============
``value``          ``(n,)``
``grad_theta``     ``(n, d)``
``grad_log_abs``   ``(n, d)``
``laplacian_x``    ``(n,)``
``hessian_theta``  ``(n, d, d)``
=================  ============
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import BoxSpace, FiniteSpace

EPS = np.finfo(float).eps


class AnsatzError(ValueError):
    pass


class CancellationWarning(RuntimeWarning):
    pass


class Ansatz:
    """Base class; concrete ansaetze override what they can do analytically."""

    kind = "abstract"
    has_hessian = False

    def __init__(self, space, num_params: int):
        if num_params < 1:
            raise AnsatzError("an ansatz needs at least one parameter")
        self.space = space
        self.num_params = int(num_params)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_params,):
            raise AnsatzError(f"expected {self.num_params} parameters, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise AnsatzError("non-finite parameters")
        return theta

    def value(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def grad_theta(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, theta, x):
        return self.value(theta, x), self.grad_theta(theta, x)

    def grad_log_abs(self, theta, x) -> np.ndarray:
        psi, grad = self.value_and_grad(theta, x)
        if np.any(psi == 0):
            raise AnsatzError("log-derivative requested where psi = 0")
        return grad / psi[:, None]

    def laplacian_x(self, theta, x) -> np.ndarray:
        if not isinstance(self.space, BoxSpace):
            raise AnsatzError("spatial Laplacian only exists on continuous spaces")
        return laplacian_fallback(self, theta, x)

    def hessian_theta(self, theta, x) -> np.ndarray:
        raise AnsatzError(f"{self.kind} ansatz does not provide a parameter Hessian")


class TableAnsatz(Ansatz):
    """``psi_theta(x) = theta[x]`` on a finite space."""

    kind = "table"
    has_hessian = True

    def __init__(self, space: FiniteSpace):
        super().__init__(space, space.size)

    def value(self, theta, x):
        theta = self.check_theta(theta)
        return theta[self.space.check_points(x)]

    def grad_theta(self, theta, x):
        self.check_theta(theta)
        x = self.space.check_points(x)
        g = np.zeros((x.size, self.num_params))
        g[np.arange(x.size), x] = 1.0
        return g

    def hessian_theta(self, theta, x):
        self.check_theta(theta)
        x = self.space.check_points(x)
        return np.zeros((x.size, self.num_params, self.num_params))


@dataclass(frozen=True)
class Feature:
    """Spatial feature ``f(x)`` with its gradient and Laplacian in ``x``."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray], np.ndarray]


def gaussian_feature() -> Feature:
    """``-|x|^2 / 2``."""
    return Feature(
        "gaussian",
        lambda x: -0.5 * np.sum(x * x, axis=-1),
        lambda x: -x,
        lambda x: np.full(x.shape[0], -float(x.shape[1])),
    )


def radial_feature() -> Feature:
    """``-|x|``; singular at the origin."""

    def grad(x):
        return -x / np.linalg.norm(x, axis=-1, keepdims=True)

    def lap(x):
        return -(x.shape[1] - 1) / np.linalg.norm(x, axis=-1)

    return Feature("radial", lambda x: -np.linalg.norm(x, axis=-1), grad, lap)


FEATURES = {"gaussian": gaussian_feature, "radial": radial_feature}


class ExpFamilyAnsatz(Ansatz):
    """``psi_theta(x) = exp(sum_k theta_k f_k(x))``; strictly positive."""

    kind = "expfamily"
    has_hessian = True

    def __init__(self, space: BoxSpace, features: Sequence[Feature]):
        super().__init__(space, len(features))
        self.features = tuple(features)

    def _feats(self, x):
        return np.stack([f.value(x) for f in self.features], axis=-1)

    def value(self, theta, x):
        theta = self.check_theta(theta)
        x = self.space.check_points(x)
        return np.exp(self._feats(x) @ theta)

    def grad_theta(self, theta, x):
        theta = self.check_theta(theta)
        x = self.space.check_points(x)
        f = self._feats(x)
        return np.exp(f @ theta)[:, None] * f

    def grad_log_abs(self, theta, x):
        self.check_theta(theta)
        return self._feats(self.space.check_points(x))

    def laplacian_x(self, theta, x):
        theta = self.check_theta(theta)
        x = self.space.check_points(x)
        psi = np.exp(self._feats(x) @ theta)
        grad_u = sum(t * f.grad(x) for t, f in zip(theta, self.features))
        lap_u = sum(t * f.laplacian(x) for t, f in zip(theta, self.features))
        return psi * (lap_u + np.sum(grad_u * grad_u, axis=-1))

    def hessian_theta(self, theta, x):
        theta = self.check_theta(theta)
        x = self.space.check_points(x)
        f = self._feats(x)
        psi = np.exp(f @ theta)
        return psi[:, None, None] * f[:, :, None] * f[:, None, :]


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda a: a * (1.0 - a)),
}


class Mlp:
    """Dense network ``R^in -> R^out`` with a trainable global output scale.

    Parameters are packed as ``W1, b1, ..., W_L, b_L, scale``; the scale
    multiplies the final affine layer so rescaling the output is a single
    coordinate of ``theta``.
    """

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int, activation: str = "tanh"):
        if activation not in _ACTIVATIONS:
            raise AnsatzError(f"unknown activation {activation!r}")
        self.sizes = [int(n_in), *map(int, hidden), int(n_out)]
        self.activation = activation
        self._act, self._dact = _ACTIVATIONS[activation]
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + fan_out * fan_in)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            self._slices.append((w, b, (fan_out, fan_in)))
        self.scale_index = offset
        self.num_params = offset + 1

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        theta = np.empty(self.num_params)
        for w, b, (fan_out, fan_in) in self._slices:
            std = 1.0 / np.sqrt(fan_in)
            theta[w] = std * rng.standard_normal(fan_out * fan_in)
            theta[b] = std * rng.standard_normal(fan_out)
        theta[self.scale_index] = 1.0
        return theta

    def _layers(self, theta):
        return [(theta[w].reshape(shape), theta[b]) for w, b, shape in self._slices]

    def forward(self, theta, x):
        """Return ``(output, cache)`` for inputs of shape ``(n, in)``."""
        layers = self._layers(theta)
        acts = [x]
        a = x
        for w, b in layers[:-1]:
            a = self._act(a @ w.T + b)
            acts.append(a)
        w, b = layers[-1]
        raw = a @ w.T + b
        return theta[self.scale_index] * raw, (layers, acts, raw)

    def per_sample_vjp(self, theta, cache, cotangent) -> np.ndarray:
        """Per-sample gradients ``sum_k c[n,k] d out[n,k] / d theta``, shape ``(n, d)``."""
        layers, acts, raw = cache
        s = theta[self.scale_index]
        n = cotangent.shape[0]
        out = np.empty((n, self.num_params))
        out[:, self.scale_index] = np.sum(cotangent * raw, axis=1)
        delta = s * cotangent
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            wsl, bsl, _ = self._slices[li]
            a_in = acts[li]
            out[:, wsl] = (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)
            out[:, bsl] = delta
            if li > 0:
                delta = (delta @ w) * self._dact(a_in)
        return out

    def input_grad(self, theta, cache, cotangent) -> np.ndarray:
        layers, acts, _ = cache
        delta = theta[self.scale_index] * cotangent
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            delta = delta @ w
            if li > 0:
                delta = delta * self._dact(acts[li])
        return delta


class MlpAnsatz(Ansatz):
    """Scalar MLP used directly as ``psi_theta(x)`` (signed output)."""

    kind = "mlp"

    def __init__(self, space: BoxSpace, hidden: Sequence[int] = (16, 16), activation: str = "tanh"):
        self.net = Mlp(space.dim, hidden, 1, activation)
        super().__init__(space, self.net.num_params)
        self.hidden = tuple(hidden)
        self.activation = activation

    @property
    def scale_index(self) -> int:
        return self.net.scale_index

    def init_params(self, rng) -> np.ndarray:
        return self.net.init_params(rng)

    def value(self, theta, x):
        theta = self.check_theta(theta)
        out, _ = self.net.forward(theta, self.space.check_points(x))
        return out[:, 0]

    def value_and_grad(self, theta, x):
        theta = self.check_theta(theta)
        out, cache = self.net.forward(theta, self.space.check_points(x))
        grad = self.net.per_sample_vjp(theta, cache, np.ones_like(out))
        return out[:, 0], grad

    def grad_theta(self, theta, x):
        return self.value_and_grad(theta, x)[1]


class MatrixMlpAnsatz:
    """Per-electron network producing orbital matrices.

    Each electron coordinate ``x_i`` (1D) is mapped to ``n_orbitals *
    n_dets`` numbers, giving ``y[b, i, j, k]`` = orbital ``j`` of
    determinant ``k`` at electron ``i`` of sample ``b``.  The wave function
    is ``sum_k det(y[b, :, :, k])``.
    """

    kind = "matrix-mlp"

    def __init__(self, n_orbitals: int, n_dets: int = 1, hidden: Sequence[int] = (16, 16),
                 activation: str = "tanh"):
        self.n_orbitals = int(n_orbitals)
        self.n_dets = int(n_dets)
        self.net = Mlp(1, hidden, self.n_orbitals * self.n_dets, activation)
        self.num_params = self.net.num_params

    def init_params(self, rng) -> np.ndarray:
        return self.net.init_params(rng)

    def orbitals(self, theta, x):
        """Return ``(y, cache)`` with ``y`` of shape ``(B, N, N, K)`` for ``x`` of shape ``(B, N)``."""
        x = np.asarray(x, dtype=float)
        b, n = x.shape
        out, cache = self.net.forward(theta, x.reshape(-1, 1))
        return out.reshape(b, n, self.n_orbitals, self.n_dets), cache

    def value(self, theta, x):
        y, _ = self.orbitals(theta, x)
        return np.sum(np.linalg.det(np.moveaxis(y, -1, 1)), axis=1)

    def loss_grad(self, theta, cache, dy) -> np.ndarray:
        """Pull a cotangent ``dL/dy`` of shape ``(B, N, N, K)`` back to ``theta``."""
        ct = dy.reshape(-1, self.n_orbitals * self.n_dets)
        return np.sum(self.net.per_sample_vjp(theta, cache, ct), axis=0)


class ScaledAnsatz(Ansatz):
    """``lambda * psi_theta``: same physical state, rescaled function."""

    def __init__(self, base: Ansatz, factor: float):
        if factor == 0:
            raise AnsatzError("scale factor must be nonzero")
        super().__init__(base.space, base.num_params)
        self.base = base
        self.factor = float(factor)
        self.kind = base.kind
        self.has_hessian = base.has_hessian

    def value(self, theta, x):
        return self.factor * self.base.value(theta, x)

    def grad_theta(self, theta, x):
        return self.factor * self.base.grad_theta(theta, x)

    def grad_log_abs(self, theta, x):
        return self.base.grad_log_abs(theta, x)

    def laplacian_x(self, theta, x):
        return self.factor * self.base.laplacian_x(theta, x)

    def hessian_theta(self, theta, x):
        return self.factor * self.base.hessian_theta(theta, x)


def finite_diff_gradient(ansatz: Ansatz, theta, x, h: Optional[float] = None) -> np.ndarray:
    """Central differences of ``value`` in each parameter, shape ``(n, d)``."""
    theta = ansatz.check_theta(theta)
    if h is not None and h <= 0:
        raise AnsatzError("step must be positive")
    steps = np.full(theta.size, h) if h is not None else EPS ** (1 / 3) * (1 + np.abs(theta))
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = steps[i]
        cols.append((ansatz.value(theta + e, x) - ansatz.value(theta - e, x)) / (2 * steps[i]))
    g = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(g)):
        raise AnsatzError("non-finite value during finite differencing")
    return g


def laplacian_fallback(ansatz: Ansatz, theta, x, h: Optional[float] = None) -> np.ndarray:
    """Second-order central-difference Laplacian in the spatial coordinates."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise AnsatzError("points must have shape (n, D)")
    if h is not None and h <= 0:
        raise AnsatzError("step must be positive")
    if h is None:
        step = EPS ** 0.25 * (1 + np.linalg.norm(x, axis=-1))
    else:
        step = np.full(x.shape[0], float(h))
    psi = ansatz.value(theta, x)
    total = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        shift = np.zeros_like(x)
        shift[:, i] = step
        total += ansatz.value(theta, x + shift) - 2 * psi + ansatz.value(theta, x - shift)
    lap = total / step ** 2
    if np.any(np.abs(lap) * step ** 2 < 1e3 * EPS * np.abs(psi)):
        warnings.warn("finite-difference Laplacian is dominated by rounding error",
                      CancellationWarning, stacklevel=2)
    return lap


def save_parameters(path, kind: str, theta, seed: int) -> None:
    """Text checkpoint: one header line, then one parameter per line.

    Header: ``# vmckit-params kind=<kind> d=<d> seed=<seed>``.
    """
    theta = np.asarray(theta, dtype=float)
    lines = [f"# vmckit-params kind={kind} d={theta.size} seed={seed}"]
    lines += [repr(float(v)) for v in theta]
    Path(path).write_text("\n".join(lines) + "\n")


def load_parameters(path):
    """Return ``(kind, theta, seed)`` from a checkpoint written by :func:`save_parameters`."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# vmckit-params"):
        raise AnsatzError(f"{path}: missing checkpoint header")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    theta = np.array([float(v) for v in lines[1:] if v.strip()])
    if theta.size != int(meta["d"]):
        raise AnsatzError(f"{path}: header says d={meta['d']} but found {theta.size} values")
    return meta["kind"], theta, int(meta["seed"])
