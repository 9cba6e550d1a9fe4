"""Integrands ``f(x, y, xi)`` built from expressions, with gradients in ``xi``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonDifferentiable
from .expr import Expr, evaluate, grad_xi, max_index, parse, to_string

log = logging.getLogger(__name__)


def _bindings(N: int, d: int, x, y, xi) -> dict:
    b = {}
    for i in range(N):
        if x is not None:
            b[f"x{i + 1}"] = x[..., i]
        if y is not None:
            b[f"y{i + 1}"] = y[..., i]
    for i in range(d):
        b[f"xi{i + 1}"] = xi[..., i]
    return b


@dataclass(frozen=True)
class IntegrandSpec:
    """``f(x, y, xi)`` with growth metadata ``0 <= f <= C (1 + |xi|^p)``."""

    text: str
    d: int
    N: int
    p: float = 2.0
    C: float | None = None
    expr: Expr = field(init=False, repr=False, compare=False)
    grad: tuple[Expr, ...] | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 < self.p < np.inf:
            raise ConfigError(f"growth exponent p must lie in (1, inf), got {self.p}")
        e = parse(self.text)
        for prefix, bound in (("x", self.N), ("y", self.N), ("xi", self.d)):
            if max_index(e, prefix) > bound:
                raise ConfigError(f"integrand uses {prefix}{max_index(e, prefix)} but only {bound} are available")
        object.__setattr__(self, "expr", e)
        try:
            g = grad_xi(e, self.d)
        except NonDifferentiable as exc:
            log.warning("integrand %s: %s; using central differences", self.text, exc)
            g = None
        object.__setattr__(self, "grad", g)

    @property
    def canonical(self) -> str:
        return to_string(self.expr)

    @property
    def depends_on_y(self) -> bool:
        return max_index(self.expr, "y") > 0

    @property
    def depends_on_x(self) -> bool:
        return max_index(self.expr, "x") > 0

    def value(self, x, y, xi) -> np.ndarray:
        """Evaluate with broadcasting; ``x``, ``y`` have trailing size N, ``xi`` trailing size d."""
        xi = np.asarray(xi, float)
        x = None if x is None else np.asarray(x, float)
        y = None if y is None else np.asarray(y, float)
        out = evaluate(self.expr, _bindings(self.N, self.d, x, y, xi))
        return np.broadcast_to(np.asarray(out, float), _shape(x, y, xi)).copy()

    def gradient(self, x, y, xi) -> np.ndarray:
        xi = np.asarray(xi, float)
        x = None if x is None else np.asarray(x, float)
        y = None if y is None else np.asarray(y, float)
        if self.grad is None:
            return self.fd_gradient(x, y, xi)
        shape = _shape(x, y, xi)
        b = _bindings(self.N, self.d, x, y, xi)
        return np.stack([np.broadcast_to(np.asarray(evaluate(g, b), float), shape) for g in self.grad], axis=-1)

    def fd_gradient(self, x, y, xi) -> np.ndarray:
        xi = np.asarray(xi, float)
        h = 1e-6 * (1.0 + np.linalg.norm(xi, axis=-1, keepdims=True))
        cols = []
        for i in range(self.d):
            step = np.zeros(self.d)
            step[i] = 1.0
            fp = self.value(x, y, xi + h * step)
            fm = self.value(x, y, xi - h * step)
            cols.append((fp - fm) / (2 * h[..., 0]))
        return np.stack(cols, axis=-1)

    def check_gradient(self, rng: np.random.Generator, samples: int = 20, scale: float = 2.0) -> float:
        """Worst relative gap between symbolic and finite-difference gradients."""
        x = rng.uniform(0, 1, (samples, self.N))
        y = rng.uniform(-0.5, 0.5, (samples, self.N))
        xi = rng.uniform(-scale, scale, (samples, self.d))
        g = self.gradient(x, y, xi)
        fd = self.fd_gradient(x, y, xi)
        denom = np.maximum(np.linalg.norm(g, axis=-1), 1.0)
        return float(np.max(np.linalg.norm(g - fd, axis=-1) / denom))

    def y_bandwidth(self, samples: int = 64, seed: int = 0) -> int:
        """Highest y-frequency (per axis, in the sup sense) with non-negligible energy."""
        if not self.depends_on_y:
            return 0
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, self.N)
        xi = rng.uniform(-1, 1, self.d)
        best = 0
        for axis in range(self.N):
            y = np.zeros((samples, self.N)) + rng.uniform(-0.5, 0.5, self.N)
            y[:, axis] = -0.5 + np.arange(samples) / samples
            vals = self.value(x, y, xi)
            spec = np.abs(np.fft.fft(vals)) / samples
            freqs = np.abs(np.fft.fftfreq(samples, 1.0 / samples))
            big = spec > 1e-10 * max(spec.max(), 1e-300)
            best = max(best, int(freqs[big].max()))
        return best


def _shape(x, y, xi) -> tuple[int, ...]:
    shapes = [xi.shape[:-1]]
    if x is not None:
        shapes.append(x.shape[:-1])
    if y is not None:
        shapes.append(y.shape[:-1])
    return np.broadcast_shapes(*shapes)
