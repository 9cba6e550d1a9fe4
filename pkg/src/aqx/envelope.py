"""A-quasiconvex envelopes by projected gradient descent, plus a convex-envelope oracle.

At a frozen point ``x`` the envelope is

    Q f(x, xi) = inf { mean_y f(x, xi + w(y)) : w mean-zero, A_y(x) w = 0 },

approximated over band-limited ``w`` on a micro grid.  The constraint set is
the range of the orthogonal projection ``Pi(x)``, so the descent step
``w <- w - tau Pi(x) grad f(xi + w)`` stays feasible exactly.

Many independent problems (points ``x``, means ``xi``, starts) are solved in
one batch: the arithmetic for each problem does not depend on which other
problems share the batch, so results are reproducible regardless of how work
is split.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sp_fft

from .errors import BoxTooSmall, NoDescent
from .integrand import IntegrandSpec
from .operator import OperatorSpec, projector_table
from .seeds import derive_seed
from .spectral import Grid, PeriodicField

log = logging.getLogger(__name__)

CHUNK = 32  # problems per batch; fixed so that splitting never changes results


@dataclass(frozen=True)
class EnvelopeOptions:
    grid: tuple[int, ...] = (64, 64)
    random_starts: int = 8
    sigmas: tuple[float, ...] = (0.5, 1.0, 2.0)
    max_iter: int = 5000
    tol: float = 1e-8
    tau0: float = 1.0
    shrink: float = 0.5
    slope: float = 1e-4
    seed: int = 0
    threads: int = 1

    def as_dict(self) -> dict:
        return {"grid": list(self.grid), "random_starts": self.random_starts, "sigmas": list(self.sigmas),
                "max_iter": self.max_iter, "tol": self.tol, "tau0": self.tau0, "shrink": self.shrink,
                "slope": self.slope, "seed": self.seed}


@dataclass(frozen=True)
class ConstraintClass:
    """Discretized constraint set at a frozen point: ``w_hat(0) = 0`` and ``P w_hat = w_hat``."""

    op: OperatorSpec
    x: tuple[float, ...]
    grid: Grid

    @property
    def multiplier(self) -> np.ndarray:
        P = projector_table(self.op, self.x, self.grid).P.copy()
        P[self.grid.nyquist_mask()] = 0.0
        return P

    def project(self, values: np.ndarray) -> np.ndarray:
        return _project(values[None], self.multiplier[None], self.grid.N)[0]

    def contains(self, w: PeriodicField, tol: float = 1e-10) -> bool:
        proj = self.project(w.values)
        scale = max(np.sqrt(np.mean(w.values**2)), 1e-300)
        return bool(np.sqrt(np.mean((proj - w.values) ** 2)) <= tol * scale and
                    np.abs(w.mean()).max() <= 1e-12 * max(1.0, scale))


@dataclass
class StartOutcome:
    index: int
    sigma: float
    value: float
    iterations: int
    gnorm: float
    status: str


@dataclass
class EnvelopeResult:
    value: float
    minimizer: PeriodicField
    starts: list[StartOutcome]
    iterations: int
    gnorm: float
    x: tuple[float, ...] = ()
    xi: tuple[float, ...] = ()
    grid: tuple[int, ...] = ()
    baseline: float = float("nan")  # cell average at w = 0

    def summary(self) -> dict:
        return {
            "x": list(self.x), "xi": list(self.xi), "value": self.value, "baseline": self.baseline,
            "iterations": self.iterations, "gnorm": self.gnorm, "grid": list(self.grid),
            "starts": [{"index": s.index, "sigma": s.sigma, "value": s.value, "iterations": s.iterations,
                        "gnorm": s.gnorm, "status": s.status} for s in self.starts],
        }


# --- problem description and batched solver ---------------------------------

@dataclass
class Problem:
    """One minimization ``mean_y f(x, ysamp(y), xi + w(y))`` over the constraint class at ``x``."""

    x: np.ndarray
    xi: np.ndarray
    grid: Grid
    P: np.ndarray
    y: np.ndarray | None = None
    starts: list[np.ndarray] = field(default_factory=list)
    sigmas: list[float] = field(default_factory=list)


def _half(P: np.ndarray, N: int) -> np.ndarray:
    """Restrict a multiplier in FFT order to the half spectrum used by real transforms."""
    m = P.shape[N]
    return np.ascontiguousarray(P[(slice(None),) * N + (slice(0, m // 2 + 1),)])


def _project_half(values: np.ndarray, Ph: np.ndarray, N: int) -> np.ndarray:
    """Apply a real, even multiplier ``Ph`` (half spectrum, broadcastable over the batch)."""
    axes = tuple(range(1, N + 1))
    shape = values.shape[1:N + 1]
    spec = sp_fft.rfftn(values, axes=axes)
    # d is small: an unrolled contraction beats batched matmul by a wide margin
    out = Ph[..., :, 0] * spec[..., None, 0]
    for j in range(1, spec.shape[-1]):
        out = out + Ph[..., :, j] * spec[..., None, j]
    spec = out
    return sp_fft.irfftn(spec, s=shape, axes=axes)


def _project(values: np.ndarray, P: np.ndarray, N: int) -> np.ndarray:
    return _project_half(values, _half(P, N), N)


def random_start(grid: Grid, d: int, sigma: float, seed: int, P: np.ndarray) -> np.ndarray:
    """Band-limited random field with coefficients ``sigma/(1+|lam|^2)`` times complex normals, projected."""
    rng = np.random.default_rng(seed)
    lat = grid.lattice()
    weight = sigma / (1.0 + np.sum(lat**2, axis=-1))
    coef = (rng.standard_normal(grid.dims + (d,)) + 1j * rng.standard_normal(grid.dims + (d,))) * weight[..., None]
    vals = np.fft.ifftn(coef, axes=tuple(range(grid.N))).real * grid.size
    return _project(vals[None], P[None], grid.N)[0]


def _cell_average(f: IntegrandSpec, X, Y, XI, W, N) -> np.ndarray:
    vals = f.value(X, Y, XI + W)
    return vals.reshape(vals.shape[0], -1).mean(axis=1)


def _l2(G: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(G.reshape(G.shape[0], -1, G.shape[-1]) ** 2, axis=1).sum(axis=-1))


def solve_batch(f: IntegrandSpec, problems: list[Problem], opts: EnvelopeOptions):
    """Run every start of every problem; returns per-problem lists of (value, W, iterations, gnorm, status)."""
    grid = problems[0].grid
    N = grid.N
    owner, W0, Ps, Xs, Ys, XIs = [], [], [], [], [], []
    for k, pb in enumerate(problems):
        for s in pb.starts:
            owner.append(k)
            W0.append(s)
            Ps.append(k)
    owner = np.asarray(owner)
    W = np.stack(W0)
    P_all = np.stack([pb.P for pb in problems])
    shared = bool(np.all(P_all == P_all[:1]))
    Ph = _half(P_all[:1] if shared else P_all, N)
    pidx = np.asarray(Ps)
    xshape = (1,) * N
    X = np.stack([pb.x for pb in problems])[pidx].reshape((-1,) + xshape + (N,))
    XI = np.stack([pb.xi for pb in problems])[pidx].reshape((-1,) + xshape + (f.d,))
    has_y = problems[0].y is not None
    Yall = np.stack([pb.y for pb in problems]) if has_y else None

    def evaluate(idx, Wb):
        Y = Yall[pidx[idx]] if has_y else None
        return _cell_average(f, X[idx], Y, XI[idx], Wb, N)

    def pgrad(idx, Wb):
        Y = Yall[pidx[idx]] if has_y else None
        G = f.gradient(X[idx], Y, XI[idx] + Wb)
        G = np.broadcast_to(G, Wb.shape)
        return _project_half(G, Ph if shared else Ph[pidx[idx]], N)

    B = W.shape[0]
    everything = np.arange(B)
    F = evaluate(everything, W)
    G = pgrad(everything, W)
    gn = _l2(G)
    thresh = opts.tol * (1.0 + gn)
    iters = np.zeros(B, dtype=int)
    tau_prev = np.full(B, opts.tau0)
    status = np.array(["converged"] * B, dtype=object)
    active = gn > thresh
    if not np.all(np.isfinite(F)):
        raise NoDescent("integrand is not finite at the starting fields")
    for it in range(opts.max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        tau = np.minimum(opts.tau0, 2.0 * tau_prev[idx]) if it else np.full(idx.size, opts.tau0)
        pending = np.arange(idx.size)
        accepted_W = np.empty((idx.size,) + W.shape[1:])
        accepted_F = np.empty(idx.size)
        ok_mask = np.zeros(idx.size, dtype=bool)
        while pending.size:
            sub = idx[pending]
            trial = W[sub] - tau[pending].reshape((-1,) + (1,) * (N + 1)) * G[sub]
            Ft = evaluate(sub, trial)
            good = Ft <= F[sub] - opts.slope * tau[pending] * gn[sub] ** 2
            good &= np.isfinite(Ft)
            accepted_W[pending[good]] = trial[good]
            accepted_F[pending[good]] = Ft[good]
            ok_mask[pending[good]] = True
            pending = pending[~good]
            tau[pending] *= opts.shrink
            dead = tau[pending] < 1e-12
            if np.any(dead):
                # a finite gradient that admits no decrease is roundoff-limited, not a failure
                if it == 0 and not (np.all(np.isfinite(G[idx[pending[dead]]])) and np.all(np.isfinite(Ft))):
                    raise NoDescent("Armijo backtracking failed on the first iteration (tau < 1e-12)")
                stalled = idx[pending[dead]]
                status[stalled] = "stalled"
                active[stalled] = False
                pending = pending[~dead]
        moved = idx[ok_mask]
        if moved.size == 0:
            continue
        W[moved] = accepted_W[ok_mask]
        F[moved] = accepted_F[ok_mask]
        tau_prev[moved] = tau[ok_mask]
        iters[moved] += 1
        G[moved] = pgrad(moved, W[moved])
        gn[moved] = _l2(G[moved])
        active[moved] = gn[moved] > thresh[moved]
    status[active] = "max_iter"
    out = [[] for _ in problems]
    for b in range(B):
        out[owner[b]].append((float(F[b]), W[b], int(iters[b]), float(gn[b]), str(status[b])))
    return out


def _solve_chunk(args):
    f, problems, opts = args
    return solve_batch(f, problems, opts)


def solve_problems(f: IntegrandSpec, problems: list[Problem], opts: EnvelopeOptions):
    """Solve in fixed-size chunks, optionally across worker processes; order is preserved."""
    chunks = [problems[i:i + CHUNK] for i in range(0, len(problems), CHUNK)]
    if opts.threads > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(_solve_chunk, [(f, c, opts) for c in chunks]))
    else:
        results = [solve_batch(f, c, opts) for c in chunks]
    return [r for chunk in results for r in chunk]


def make_problem(op: OperatorSpec, f: IntegrandSpec, x, xi, grid: Grid, opts: EnvelopeOptions,
                 y: np.ndarray | None = None, kind: str = "envelope",
                 extra_starts: list[np.ndarray] | None = None) -> Problem:
    x = np.asarray(x, float).reshape(op.N)
    xi = np.asarray(xi, float).reshape(op.d)
    P = ConstraintClass(op, tuple(map(float, x)), grid).multiplier
    starts = [np.zeros(grid.dims + (op.d,))]
    sigmas = [0.0]
    for k in range(opts.random_starts):
        sigma = opts.sigmas[k % len(opts.sigmas)]
        seed = derive_seed(opts.seed, kind, x, xi, k + 1)
        starts.append(random_start(grid, op.d, sigma, seed, P))
        sigmas.append(sigma)
    for extra in extra_starts or []:
        starts.append(_project(np.asarray(extra, float)[None], P[None], grid.N)[0])
        sigmas.append(float("nan"))
    return Problem(x, xi, grid, P, y, starts, sigmas)


def assemble(problem: Problem, runs) -> EnvelopeResult:
    best = min(range(len(runs)), key=lambda k: (runs[k][0], k))
    value, W, it, gn, _ = runs[best]
    starts = [StartOutcome(k, problem.sigmas[k], r[0], r[2], r[3], r[4]) for k, r in enumerate(runs)]
    return EnvelopeResult(
        value=value,
        minimizer=PeriodicField(problem.grid, W),
        starts=starts,
        iterations=it,
        gnorm=gn,
        x=tuple(map(float, problem.x)),
        xi=tuple(map(float, problem.xi)),
        grid=problem.grid.dims,
    )


def _check_integrand(op: OperatorSpec, f: IntegrandSpec) -> None:
    if f.d != op.d or f.N != op.N:
        raise ValueError(f"integrand dimensions (N={f.N}, d={f.d}) do not match operator (N={op.N}, d={op.d})")


def envelope_batch(op: OperatorSpec, f: IntegrandSpec, xs, xis, opts: EnvelopeOptions,
                   y0=None, extra_starts=None) -> list[EnvelopeResult]:
    """Envelope at every pair ``(xs[k], xis[k])``."""
    _check_integrand(op, f)
    grid = Grid.micro(opts.grid)
    y = None
    if f.depends_on_y:
        if y0 is None:
            raise ValueError("integrand depends on y; pass the frozen y-slot y0 or use a cell problem")
        y = np.broadcast_to(np.asarray(y0, float), grid.dims + (op.N,)).copy()
    problems = [make_problem(op, f, x, xi, grid, opts, y, "envelope",
                             None if extra_starts is None else extra_starts[k])
                for k, (x, xi) in enumerate(zip(xs, xis))]
    runs = solve_problems(f, problems, opts)
    results = [assemble(pb, r) for pb, r in zip(problems, runs)]
    for res, pb in zip(results, problems):
        res.baseline = float(_cell_average(f, pb.x.reshape((1,) + (1,) * grid.N + (op.N,)),
                                           None if y is None else y[None], pb.xi.reshape((1,) * (grid.N + 1) + (op.d,)),
                                           np.zeros((1,) + grid.dims + (op.d,)), grid.N)[0])
    return results


def qa_envelope(op: OperatorSpec, f: IntegrandSpec, x, xi, opts: EnvelopeOptions = EnvelopeOptions(),
                y0=None, extra_starts=None) -> EnvelopeResult:
    return envelope_batch(op, f, [x], [xi], opts, y0, None if extra_starts is None else [extra_starts])[0]


def pointwise_envelope_field(op: OperatorSpec, f: IntegrandSpec, u: PeriodicField,
                             opts: EnvelopeOptions = EnvelopeOptions()) -> tuple[PeriodicField, list[EnvelopeResult]]:
    """``x -> Q f(x, u(x))`` at every macro node, with ``x`` frozen nodewise."""
    xs = u.grid.coords().reshape(-1, u.grid.N)
    xis = u.values.reshape(-1, u.d)
    results = envelope_batch(op, f, xs, xis, opts)
    vals = np.array([r.value for r in results]).reshape(u.grid.dims)
    return PeriodicField(u.grid, vals), results


# --- convex envelope oracle ---------------------------------------------------

@dataclass
class ConvexOracle:
    points: np.ndarray  # primal grid (P, d)
    values: np.ndarray  # f on the primal grid
    duals: np.ndarray  # (S, d)
    conj: np.ndarray  # f*(s)

    def __call__(self, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, float))
        out = np.empty(xi.shape[0])
        for start in range(0, xi.shape[0], 256):
            blk = xi[start:start + 256]
            out[start:start + 256] = np.max(blk @ self.duals.T - self.conj[None, :], axis=1)
        return out


def convex_envelope_oracle(f, d: int, box: float = 3.0, h: float = 0.075, chunk: int = 512) -> ConvexOracle:
    """Biconjugate of ``f`` sampled on the box ``[-box, box]^d`` with spacing ``h``.

    ``f`` maps arrays of shape ``(..., d)`` to ``(...)``.  Dual slopes are a
    uniform grid plus the central-difference gradients of the sampled data at
    interior points, so the biconjugate reproduces ``f`` wherever it is convex.
    Raises ``BoxTooSmall`` when the data do not grow outward at the box faces
    or when a conjugate maximizer lands on the box boundary.
    """
    n = int(round(2 * box / h)) + 1
    axis = -box + h * np.arange(n)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)
    vals = np.asarray(f(mesh), float)
    # outward growth on every face
    min_out = np.inf
    for i in range(d):
        lo = np.take(vals, 0, axis=i) - np.take(vals, 1, axis=i)
        hi = np.take(vals, n - 1, axis=i) - np.take(vals, n - 2, axis=i)
        min_out = min(min_out, lo.min() / h, hi.min() / h)
    if min_out <= 0:
        raise BoxTooSmall(f"integrand does not grow outward on the box faces (min outward slope {min_out:.3g})")
    grads = np.stack(np.gradient(vals, h, axis=tuple(range(d))) if d > 1 else [np.gradient(vals, h)], axis=-1)
    interior = tuple(slice(1, n - 1) for _ in range(d))
    slopes = grads[interior].reshape(-1, d)
    m = 41
    uni_axis = np.linspace(-min_out, min_out, m)
    uniform = np.stack(np.meshgrid(*([uni_axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    duals = np.concatenate([uniform, slopes])
    pts = mesh.reshape(-1, d)
    fv = vals.reshape(-1)
    on_edge = np.any((np.abs(pts) >= box - 1e-12), axis=1)
    conj = np.empty(duals.shape[0])
    keep = np.ones(duals.shape[0], dtype=bool)
    safe = np.max(np.abs(duals), axis=1) < min_out
    for start in range(0, duals.shape[0], chunk):
        s = duals[start:start + chunk]
        scores = s @ pts.T - fv[None, :]
        arg = np.argmax(scores, axis=1)
        conj[start:start + chunk] = scores[np.arange(s.shape[0]), arg]
        hit = on_edge[arg]
        if np.any(hit & safe[start:start + chunk]):
            k = np.nonzero(hit & safe[start:start + chunk])[0][0]
            raise BoxTooSmall(f"conjugate maximizer for slope {s[k]} lies on the box boundary")
        keep[start:start + chunk] &= ~hit
    return ConvexOracle(pts, fv, duals[keep], conj[keep])


def with_grid(opts: EnvelopeOptions, grid) -> EnvelopeOptions:
    return replace(opts, grid=tuple(grid))
