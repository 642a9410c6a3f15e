"""Desk-scale stochastic objectives with exact hand-derived gradients.

All tasks expose the same per-example gradient protocol:

    task.example_gradients(params, indices, rng) -> (k, n_params) rows

For the noisy quadratic the "examples" are fresh noise draws (indices fix
only the count), so the harness samples one gradient matrix per step and
averages subsets of its rows; for the data tasks the rows are
deterministic functions of the indexed examples. The logistic and MLP
tasks also expose ``gnb_gradient``: the mean gradient against labels
sampled from the model's own predictive distribution, which squared gives
the Gauss-Newton-Bartlett curvature proxy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UnsupportedProblemError
from .linalg import SymMatrix, sym_eigen


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class NoisyQuadratic:
    """f(theta) = 0.5 (theta - theta*)^T H (theta - theta*) with per-example
    gradient noise.

    ``noise_scale`` is the per-coordinate noise standard deviation;
    ``gradient_coupling`` adds gamma*|grad_k| to coordinate k's scale so a
    coordinate's own gradient magnitude drives its second moment;
    ``tail_df`` switches the noise to a variance-matched Student-t for
    heavy tails (inf keeps it Gaussian).
    """

    hessian: np.ndarray  # (d,) diagonal entries or (d, d) symmetric PD
    theta_star: np.ndarray
    noise_scale: np.ndarray
    gradient_coupling: float = 0.0
    tail_df: float = np.inf

    def __post_init__(self):
        h = np.asarray(self.hessian, dtype=np.float64)
        ts = np.asarray(self.theta_star, dtype=np.float64)
        ns = np.asarray(self.noise_scale, dtype=np.float64)
        if h.ndim not in (1, 2):
            raise InvalidInputError("hessian must be a diagonal vector or a matrix")
        d = h.shape[0]
        if h.ndim == 2 and h.shape != (d, d):
            raise InvalidInputError(f"hessian must be square, got {h.shape}")
        if ts.shape != (d,) or ns.shape != (d,):
            raise InvalidInputError("theta_star and noise_scale must match hessian dim")
        if np.any(ns < 0):
            raise InvalidInputError("noise scales must be >= 0")
        if not np.isinf(self.tail_df) and self.tail_df <= 2.0:
            raise InvalidInputError("tail_df must exceed 2 for finite noise variance")
        object.__setattr__(self, "hessian", h)
        object.__setattr__(self, "theta_star", ts)
        object.__setattr__(self, "noise_scale", ns)

    @classmethod
    def heteroscedastic(cls, dim: int, sigma0: float, kappa: float,
                        hessian=None, gradient_coupling: float = 0.0,
                        tail_df: float = np.inf) -> "NoisyQuadratic":
        """Coordinate k gets noise scale sigma0 * (1 + kappa * k / dim),
        giving coordinates with very different denominator SNR."""
        if hessian is None:
            hessian = np.ones(dim)
        scales = sigma0 * (1.0 + kappa * np.arange(dim) / dim)
        return cls(hessian=np.asarray(hessian, dtype=np.float64),
                   theta_star=np.zeros(dim), noise_scale=scales,
                   gradient_coupling=gradient_coupling, tail_df=tail_df)

    @property
    def dim(self) -> int:
        return self.theta_star.shape[0]

    @property
    def n_params(self) -> int:
        return self.dim

    def full_gradient(self, params: np.ndarray) -> np.ndarray:
        delta = params - self.theta_star
        if self.hessian.ndim == 1:
            return self.hessian * delta
        return self.hessian @ delta

    def loss(self, params: np.ndarray, indices=None) -> float:
        delta = params - self.theta_star
        return 0.5 * float(delta @ self.full_gradient(params))

    def example_gradients(self, params: np.ndarray, indices, rng) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices))
        count = idx.size
        grad = self.full_gradient(params)
        scales = self.noise_scale + self.gradient_coupling * np.abs(grad)
        if np.isinf(self.tail_df):
            noise = rng.standard_normal((count, self.dim))
        else:
            df = self.tail_df
            # variance-matched heavy tails: t(df) has variance df/(df-2)
            noise = rng.standard_t(df, size=(count, self.dim))
            noise /= np.sqrt(df / (df - 2.0))
        return grad + noise * scales

    def initial_params(self, rng, spread: float = 1.0) -> np.ndarray:
        return self.theta_star + spread * rng.standard_normal(self.dim)


@dataclass(frozen=True)
class LogisticTask:
    """L2-regularized logistic regression on a fixed synthetic design."""

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in {0, 1}
    l2_reg: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InvalidInputError("features must be (n, d) with matching labels")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("features contain non-finite entries")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @classmethod
    def synthetic(cls, n: int, dim: int, seed: int, l2_reg: float = 0.0) -> "LogisticTask":
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, dim))
        theta_true = rng.standard_normal(dim)
        probs = _sigmoid(x @ theta_true)
        y = (rng.random(n) < probs).astype(np.float64)
        return cls(features=x, labels=y, l2_reg=l2_reg)

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_params(self) -> int:
        return self.dim

    def loss(self, params: np.ndarray, indices=None) -> float:
        idx = np.arange(self.n_examples) if indices is None else np.asarray(indices)
        z = self.features[idx] @ params
        nll = np.logaddexp(0.0, z) - self.labels[idx] * z
        return float(nll.mean() + 0.5 * self.l2_reg * params @ params)

    def example_gradients(self, params: np.ndarray, indices, rng=None) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices))
        x = self.features[idx]
        resid = _sigmoid(x @ params) - self.labels[idx]
        return resid[:, None] * x + self.l2_reg * params

    def full_gradient(self, params: np.ndarray) -> np.ndarray:
        return self.example_gradients(params, np.arange(self.n_examples)).mean(axis=0)

    def predictive(self, params: np.ndarray, indices) -> np.ndarray:
        return _sigmoid(self.features[np.asarray(indices)] @ params)

    def gnb_gradient(self, params: np.ndarray, indices, rng) -> np.ndarray:
        """Mean data-loss gradient against Bernoulli labels sampled from the
        model's own predictive probabilities (the regularizer is excluded:
        it carries no label signal)."""
        idx = np.atleast_1d(np.asarray(indices))
        x = self.features[idx]
        probs = _sigmoid(x @ params)
        sampled = (rng.random(idx.size) < probs).astype(np.float64)
        return ((probs - sampled)[:, None] * x).mean(axis=0)

    def initial_params(self, rng, spread: float = 0.1) -> np.ndarray:
        return spread * rng.standard_normal(self.dim)


@dataclass(frozen=True)
class TwoLayerMlpTask:
    """Two-layer tanh MLP classifier with a hand-derived backward pass.

    Parameters travel as one flat vector laid out [W1, b1, W2, b2]; the
    unpacked W1 (d_in, d_hidden) and W2 (d_hidden, n_classes) are the
    matrix-shaped parameters a structured preconditioner wants.
    """

    inputs: np.ndarray  # (n, d_in)
    labels: np.ndarray  # (n,) ints in [0, n_classes)
    d_hidden: int
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InvalidInputError("inputs must be (n, d_in) with matching labels")
        if y.min(initial=0) < 0 or y.max(initial=0) >= self.n_classes:
            raise InvalidInputError("labels out of class range")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @classmethod
    def synthetic(cls, n: int, d_in: int = 16, d_hidden: int = 32,
                  n_classes: int = 4, seed: int = 0) -> "TwoLayerMlpTask":
        """Inputs from a seeded Gaussian; labels from a random teacher
        network so the classes are learnable structure, not noise."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d_in))
        w1 = rng.standard_normal((d_in, d_hidden)) / np.sqrt(d_in)
        w2 = rng.standard_normal((d_hidden, n_classes)) / np.sqrt(d_hidden)
        logits = np.tanh(x @ w1) @ w2
        y = logits.argmax(axis=1)
        return cls(inputs=x, labels=y, d_hidden=d_hidden, n_classes=n_classes)

    @property
    def n_examples(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def shapes(self) -> tuple:
        return ((self.d_in, self.d_hidden), (self.d_hidden,),
                (self.d_hidden, self.n_classes), (self.n_classes,))

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, params: np.ndarray):
        if params.shape != (self.n_params,):
            raise InvalidInputError(
                f"expected {self.n_params} parameters, got shape {params.shape}"
            )
        pieces = []
        offset = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            pieces.append(params[offset:offset + size].reshape(shape))
            offset += size
        return tuple(pieces)

    def pack(self, w1, b1, w2, b2) -> np.ndarray:
        return np.concatenate([w1.ravel(), b1.ravel(), w2.ravel(), b2.ravel()])

    def _forward(self, params: np.ndarray, x: np.ndarray):
        w1, b1, w2, b2 = self.unpack(params)
        a1 = np.tanh(x @ w1 + b1)
        logits = a1 @ w2 + b2
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        return a1, probs

    def loss(self, params: np.ndarray, indices=None) -> float:
        idx = np.arange(self.n_examples) if indices is None else np.asarray(indices)
        _, probs = self._forward(params, self.inputs[idx])
        picked = probs[np.arange(idx.size), self.labels[idx]]
        return float(-np.log(np.maximum(picked, 1e-300)).mean())

    def _example_grads_for_targets(self, params, x, dz2):
        """Per-example flat gradients given per-example logit errors dz2."""
        w1, b1, w2, b2 = self.unpack(params)
        a1 = np.tanh(x @ w1 + b1)
        da1 = dz2 @ w2.T
        dz1 = da1 * (1.0 - a1**2)
        gw1 = np.einsum("ni,nh->nih", x, dz1).reshape(x.shape[0], -1)
        gw2 = np.einsum("nh,nc->nhc", a1, dz2).reshape(x.shape[0], -1)
        return np.concatenate([gw1, dz1, gw2, dz2], axis=1)

    def example_gradients(self, params: np.ndarray, indices, rng=None) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices))
        x = self.inputs[idx]
        _, probs = self._forward(params, x)
        dz2 = probs.copy()
        dz2[np.arange(idx.size), self.labels[idx]] -= 1.0
        return self._example_grads_for_targets(params, x, dz2)

    def full_gradient(self, params: np.ndarray) -> np.ndarray:
        return self.example_gradients(params, np.arange(self.n_examples)).mean(axis=0)

    def gnb_gradient(self, params: np.ndarray, indices, rng) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices))
        x = self.inputs[idx]
        _, probs = self._forward(params, x)
        cdf = probs.cumsum(axis=1)
        draws = rng.random((idx.size, 1))
        sampled = (draws < cdf).argmax(axis=1)
        dz2 = probs.copy()
        dz2[np.arange(idx.size), sampled] -= 1.0
        return self._example_grads_for_targets(params, x, dz2).mean(axis=0)

    def initial_params(self, rng, spread: float = 0.5) -> np.ndarray:
        w1 = spread * rng.standard_normal((self.d_in, self.d_hidden)) / np.sqrt(self.d_in)
        b1 = np.zeros(self.d_hidden)
        w2 = spread * rng.standard_normal((self.d_hidden, self.n_classes)) / np.sqrt(self.d_hidden)
        b2 = np.zeros(self.n_classes)
        return self.pack(w1, b1, w2, b2)


def sample_microbatch_gradient(task, params: np.ndarray, microbatch, rng) -> np.ndarray:
    """Mean per-example gradient over one microbatch."""
    idx = np.atleast_1d(np.asarray(microbatch))
    if idx.size == 0:
        raise InvalidInputError("microbatch is empty")
    return task.example_gradients(params, idx, rng).mean(axis=0)


def loss(task, params: np.ndarray, eval_set=None) -> float:
    return task.loss(params, eval_set)


def analytic_constants(task) -> tuple:
    """(smoothness L, PL constant, optimal value) for the quadratic.

    Only the quadratic has these in closed form: L and mu are the extreme
    Hessian eigenvalues and the optimum value is exactly zero.
    """
    if not isinstance(task, NoisyQuadratic):
        raise UnsupportedProblemError(
            f"analytic constants unknown for {type(task).__name__}"
        )
    h = task.hessian
    if h.ndim == 1:
        return float(h.max()), float(h.min()), 0.0
    eig = sym_eigen(SymMatrix(h))
    return float(eig.eigenvalues[0]), float(eig.eigenvalues[-1]), 0.0
