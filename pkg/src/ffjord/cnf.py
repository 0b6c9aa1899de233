"""Continuous normalizing flow: augmented dynamics, densities, sampling, gradients.

Data lives at the end time ``t1`` of the last flow; the base Gaussian lives
at ``t0`` of the first. ``log_density`` integrates each flow backwards while
accumulating ``Δlogp = ∫_{t1}^{t0} -Tr(∂f/∂z) dt``, so that
``log p(x) = log N(z0; 0, I) - Δlogp``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .models import DynamicsNet
from .odesolve import StepController, integrate, integrate_fixed_rk4

TRACE_KINDS = ("exact", "hutchinson", "bottleneck")
NOISE_KINDS = ("gaussian", "rademacher")
LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class TraceEstimatorSpec:
    kind: str = "hutchinson"
    noise: str = "rademacher"
    epsilon: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace estimator {self.kind!r}")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"unknown noise distribution {self.noise!r}")

    def noise_width(self, net: DynamicsNet) -> int:
        if self.kind == "bottleneck":
            if net.bottleneck_width is None:
                raise ValueError("bottleneck trace requested on a net without a split point")
            return net.bottleneck_width
        return net.dim

    def with_noise(self, rng: np.random.Generator, shape: tuple[int, int]) -> "TraceEstimatorSpec":
        if self.kind == "exact":
            return self
        return replace(self, epsilon=sample_noise(rng, shape, self.noise))


def sample_noise(rng: np.random.Generator, shape, noise: str) -> np.ndarray:
    """Zero-mean, identity-covariance noise."""
    if noise == "gaussian":
        return rng.standard_normal(shape)
    if noise == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    raise ValueError(f"unknown noise distribution {noise!r}")


@dataclass
class AugmentedState:
    """``(z, Δlogp)`` pair; supports the arithmetic an explicit RK step needs."""

    z: object
    delta_logp: object

    def __post_init__(self):
        if self.z.shape[0] != self.delta_logp.shape[0]:
            raise ValueError("batch dimensions of z and delta_logp disagree")

    def __add__(self, other: "AugmentedState") -> "AugmentedState":
        return AugmentedState(self.z + other.z, self.delta_logp + other.delta_logp)

    def __mul__(self, c: float) -> "AugmentedState":
        return AugmentedState(self.z * float(c), self.delta_logp * float(c))

    __rmul__ = __mul__

    @property
    def data(self) -> np.ndarray:
        z = getattr(self.z, "data", self.z)
        d = getattr(self.delta_logp, "data", self.delta_logp)
        return np.concatenate([np.ravel(z), np.ravel(d)])

    def pack(self) -> np.ndarray:
        return self.data

    @classmethod
    def unpack(cls, y: np.ndarray, batch: int, dim: int) -> "AugmentedState":
        return cls(y[: batch * dim].reshape(batch, dim), y[batch * dim:])


# --- trace terms ----------------------------------------------------------------


def _dynamics_terms(net: DynamicsNet, z: Tensor, t: float, spec: TraceEstimatorSpec, create_graph: bool):
    """Evaluate ``f(z, t)`` and a trace term for ``∂f/∂z``.

    ``z`` must be a tensor that requires gradients. The trace is a tensor
    when ``create_graph`` is set (so it can be differentiated again) and an
    array otherwise.
    """
    if spec.kind == "bottleneck":
        h, g = net.split_forward(z, t)
        f = g(h)
        eps = spec.epsilon
        if eps is None:
            raise ValueError("bottleneck trace needs a noise vector")
        c = ad.vjp(h, z, eps, create_graph=create_graph)
        d = ad.vjp(f, h, c, create_graph=create_graph)
        return f, (d * eps).sum(axis=1)

    f = net(z, t)
    if spec.kind == "exact":
        B, D = z.shape
        total = None
        for i in range(D):
            e = np.zeros((B, D))
            e[:, i] = 1.0
            v = ad.vjp(f, z, e, create_graph=create_graph)
            col = v[:, i]
            total = col if total is None else total + col
        return f, total
    eps = spec.epsilon
    if eps is None:
        raise ValueError("stochastic trace needs a noise vector")
    v = ad.vjp(f, z, eps, create_graph=create_graph)
    return f, (v * eps).sum(axis=1)


def exact_trace(net: DynamicsNet, z, t: float) -> np.ndarray:
    """Tr(∂f/∂z) per row, from one basis-vector VJP per dimension."""
    zt = ad.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    _, tr = _dynamics_terms(net, zt, t, TraceEstimatorSpec(kind="exact"), False)
    return np.asarray(tr)


def hutchinson_trace(net: DynamicsNet, z, t: float, epsilon: np.ndarray) -> np.ndarray:
    """εᵀ (∂f/∂z) ε per row."""
    zt = ad.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    spec = TraceEstimatorSpec(kind="hutchinson", epsilon=np.asarray(epsilon, dtype=np.float64))
    _, tr = _dynamics_terms(net, zt, t, spec, False)
    return np.asarray(tr)


def bottleneck_trace(net: DynamicsNet, z, t: float, epsilon: np.ndarray) -> np.ndarray:
    """εᵀ (∂h/∂z)(∂g/∂h) ε per row, with ε in the bottleneck width H."""
    H = net.bottleneck_width
    if H is None:
        raise ValueError("network has no bottleneck split point")
    if H >= net.dim:
        warnings.warn(
            f"bottleneck width {H} is not smaller than the data dimension {net.dim}; "
            "no variance reduction is expected",
            stacklevel=2,
        )
    zt = ad.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    spec = TraceEstimatorSpec(kind="bottleneck", epsilon=np.asarray(epsilon, dtype=np.float64))
    _, tr = _dynamics_terms(net, zt, t, spec, False)
    return np.asarray(tr)


def trace_draws(net: DynamicsNet, z: np.ndarray, t: float, kind: str, noise: str,
                n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """``n_draws`` independent estimates of the trace at a single point ``z`` (shape (D,))."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    zs = np.repeat(z, n_draws, axis=0)
    spec = TraceEstimatorSpec(kind=kind, noise=noise)
    if kind == "exact":
        return exact_trace(net, zs, t)
    width = spec.noise_width(net)
    eps = sample_noise(rng, (n_draws, width), noise)
    if kind == "bottleneck":
        return bottleneck_trace(net, zs, t, eps)
    return hutchinson_trace(net, zs, t, eps)


def augmented_dynamics(state: AugmentedState, t: float, net: DynamicsNet,
                       spec: TraceEstimatorSpec) -> AugmentedState:
    """``(f(z, t), -Tr)`` where Tr is exact or a fixed-noise estimate."""
    if spec.kind != "exact" and spec.epsilon is None:
        raise ValueError("stochastic trace needs a noise vector")
    if spec.kind == "exact":
        f, tr = net.forward_with_trace(state.z, t)
        return AugmentedState(f, -tr)
    if spec.kind == "hutchinson":
        f, tr = net.forward_with_trace(state.z, t, spec.epsilon)
        return AugmentedState(f, -tr)
    zt = ad.tensor(np.asarray(state.z, dtype=np.float64), requires_grad=True)
    f, tr = _dynamics_terms(net, zt, t, spec, False)
    return AugmentedState(f.data, -np.asarray(tr))


# --- model ----------------------------------------------------------------------


@dataclass
class CNFModel:
    """Stack of flows mapping base noise at ``t0`` to data at ``t1``."""

    nets: list[DynamicsNet]
    trace: TraceEstimatorSpec = field(default_factory=TraceEstimatorSpec)
    controller: StepController = field(default_factory=StepController)
    times: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if not self.nets:
            raise ValueError("a model needs at least one flow")
        dims = {n.dim for n in self.nets}
        if len(dims) != 1:
            raise ValueError("all flows must share one dimension")
        if self.times is None:
            self.times = [(0.0, 1.0)] * len(self.nets)
        if len(self.times) != len(self.nets):
            raise ValueError("one integration interval per flow is required")
        for t0, t1 in self.times:
            if not t0 < t1:
                raise ValueError("integration intervals need t0 < t1")
        self._params = None

    @property
    def dim(self) -> int:
        return self.nets[0].dim

    @property
    def params(self) -> ParamStore:
        """All flow parameters under ``flow{k}.{name}``; tensors are shared, not copied."""
        if self._params is None:
            store = ParamStore()
            for k, net in enumerate(self.nets):
                for name, t in net.params.items():
                    store.add(f"flow{k}.{name}", t)
            self._params = store
        return self._params


def base_log_density(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * LOG_2PI


@dataclass
class DensityResult:
    logp: np.ndarray
    z0: np.ndarray
    delta_logp: np.ndarray
    nfe: int
    boundaries: list[np.ndarray]
    spec: TraceEstimatorSpec


def _resolve(model: CNFModel, trace, controller):
    spec = model.trace if trace is None else trace
    if isinstance(spec, str):
        spec = TraceEstimatorSpec(kind=spec, noise=model.trace.noise)
    ctrl = model.controller if controller is None else controller
    return spec, ctrl


def density_forward(model: CNFModel, x, *, rng: np.random.Generator | int | None = None,
                    trace: TraceEstimatorSpec | str | None = None,
                    controller: StepController | None = None) -> DensityResult:
    """Solve the augmented system from data back to the base distribution.

    A fresh noise vector is drawn (per example) once per call and held fixed
    for every dynamics evaluation of the solve.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ad.ShapeError(f"expected data of shape (batch, {model.dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ad.NonFiniteError("input data is not finite")
    spec, ctrl = _resolve(model, trace, controller)
    B, D = x.shape
    if spec.kind != "exact" and spec.epsilon is None:
        rng = np.random.default_rng(rng)
        spec = spec.with_noise(rng, (B, spec.noise_width(model.nets[0])))

    z = x
    delta = np.zeros(B)
    nfe = 0
    boundaries = [x]
    for k in reversed(range(len(model.nets))):
        net = model.nets[k]
        t0, t1 = model.times[k]

        def dyn(y, t, net=net):
            s = AugmentedState.unpack(y, B, D)
            return augmented_dynamics(s, t, net, spec).pack()

        res = integrate(dyn, AugmentedState(z, delta).pack(), t1, t0, ctrl)
        out = AugmentedState.unpack(res.y, B, D)
        z, delta = out.z, out.delta_logp
        nfe += res.nfe
        boundaries.append(z)
    logp = base_log_density(z) - delta
    boundaries.reverse()
    return DensityResult(logp=logp, z0=z, delta_logp=delta, nfe=nfe, boundaries=boundaries, spec=spec)


def log_density(model: CNFModel, x, *, rng=None, trace=None, controller=None) -> np.ndarray:
    return density_forward(model, x, rng=rng, trace=trace, controller=controller).logp


def sample(model: CNFModel, n: int, rng_seed: int | np.random.Generator | None = 0,
           controller: StepController | None = None, return_nfe: bool = False):
    """Draw base noise and push it forward through every flow in order."""
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((int(n), model.dim))
    nfe = 0
    if n > 0:
        z, nfe = push_forward(model, z, controller=controller)
    return (z, nfe) if return_nfe else z


def push_forward(model: CNFModel, z0: np.ndarray, controller: StepController | None = None):
    ctrl = model.controller if controller is None else controller
    z = np.asarray(z0, dtype=np.float64)
    B, D = z.shape
    nfe = 0
    for net, (t0, t1) in zip(model.nets, model.times):
        def dyn(y, t, net=net):
            with ad.no_grad():
                return net(y.reshape(B, D), t).data.ravel()

        res = integrate(dyn, z.ravel(), t0, t1, ctrl)
        z = res.y.reshape(B, D)
        nfe += res.nfe
    return z, nfe


# --- gradients --------------------------------------------------------------------


@dataclass
class GradientResult:
    grads: list[np.ndarray]
    loss: float
    nfe_forward: int
    nfe_backward: int

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


def _terminal_adjoint(z0: np.ndarray):
    B = z0.shape[0]
    # L = -mean(log N(z0) - Δlogp)
    a_z = z0 / B
    a_d = np.full(B, 1.0 / B)
    return a_z, a_d


def adjoint_gradients(model: CNFModel, x=None, *, forward: DensityResult | None = None,
                      rng=None, trace=None, controller: StepController | None = None,
                      trace_sign: float = 1.0) -> GradientResult:
    """Gradients of ``-mean log p(x)`` by solving the adjoint system backwards.

    The state ``z(t)`` is rebuilt by integrating each flow from its stored
    terminal point alongside the adjoint ``∂L/∂z`` and the running parameter
    gradient; the log-density adjoint is constant and enters through the
    derivative of the trace term, which needs a second-order VJP.

    ``trace_sign=-1`` deliberately corrupts that term; it exists so gradient
    checks can prove they detect a sign error.
    """
    _, ctrl = _resolve(model, trace, controller)
    if forward is None:
        if x is None:
            raise ValueError("need either data or a completed forward solve")
        forward = density_forward(model, x, rng=rng, trace=trace, controller=controller)
    spec = forward.spec
    z0 = forward.z0
    B, D = z0.shape
    a_z, a_d = _terminal_adjoint(z0)
    loss = float(-np.mean(forward.logp))

    grads: list[np.ndarray | None] = [None] * len(model.nets)
    nfe = 0
    for k, net in enumerate(model.nets):
        t0, t1 = model.times[k]
        params = net.params.values()
        sizes = [p.size for p in params]
        P = sum(sizes)
        n = B * D

        def dyn(y, t, net=net, params=params):
            z = y[:n].reshape(B, D)
            az = y[n:2 * n].reshape(B, D)
            zt = ad.tensor(z, requires_grad=True)
            f, tr = _dynamics_terms(net, zt, t, spec, True)
            S = (f * az).sum() - (tr * (trace_sign * a_d)).sum()
            gs = ad.grad(S, [zt, *params])
            out = np.empty_like(y)
            out[:n] = f.data.ravel()
            out[n:2 * n] = -gs[0].ravel()
            i = 2 * n
            for g in gs[1:]:
                out[i:i + g.size] = -g.ravel()
                i += g.size
            return out

        y0 = np.concatenate([forward.boundaries[k].ravel(), a_z.ravel(), np.zeros(P)])
        res = integrate(dyn, y0, t0, t1, ctrl)
        nfe += res.nfe
        a_z = res.y[n:2 * n].reshape(B, D)
        flat = res.y[2 * n:]
        gl, i = [], 0
        for p in params:
            gl.append(flat[i:i + p.size].reshape(p.shape))
            i += p.size
        grads[k] = gl
    ordered = [g for gl in grads for g in gl]
    return GradientResult(grads=ordered, loss=loss, nfe_forward=forward.nfe, nfe_backward=nfe)


def unrolled_loss(model: CNFModel, x, n_steps: int, spec: TraceEstimatorSpec) -> Tensor:
    """``-mean log p(x)`` computed through fixed-step RK4 entirely on the tape."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    B, D = x.shape
    state = AugmentedState(ad.tensor(x, requires_grad=True), ad.tensor(np.zeros(B)))
    for k in reversed(range(len(model.nets))):
        net = model.nets[k]
        t0, t1 = model.times[k]

        def dyn(s, t, net=net):
            f, tr = _dynamics_terms(net, s.z, t, spec, True)
            return AugmentedState(f, -tr)

        state = integrate_fixed_rk4(dyn, state, t1, t0, n_steps).y
    z0, delta = state.z, state.delta_logp
    logp = (z0 * z0).sum(axis=1) * -0.5 - 0.5 * D * LOG_2PI - delta
    return logp.sum() * (-1.0 / B)


def unrolled_gradients(model: CNFModel, x, n_steps: int = 1000, *, rng=None,
                       trace: TraceEstimatorSpec | str | None = None,
                       epsilon: np.ndarray | None = None) -> GradientResult:
    """Discretize-then-optimize reference: reverse mode through every RK4 stage.

    Memory grows linearly with ``n_steps``.
    """
    spec, _ = _resolve(model, trace, None)
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if epsilon is not None:
        spec = replace(spec, epsilon=np.asarray(epsilon, dtype=np.float64))
    elif spec.kind != "exact" and spec.epsilon is None:
        spec = spec.with_noise(np.random.default_rng(rng), (x.shape[0], spec.noise_width(model.nets[0])))
    loss = unrolled_loss(model, x, n_steps, spec)
    grads = ad.grad(loss, model.params)
    return GradientResult(grads=grads, loss=loss.item(), nfe_forward=4 * n_steps * len(model.nets),
                          nfe_backward=0)


def loss_at(model: CNFModel, x, spec: TraceEstimatorSpec, controller: StepController) -> float:
    """Adaptive-solver loss with a fixed trace spec (noise included); used for finite differences."""
    return float(-np.mean(log_density(model, x, trace=spec, controller=controller)))


def finite_difference_gradients(model: CNFModel, x, spec: TraceEstimatorSpec,
                                controller: StepController, step: float = 1e-5,
                                indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the full loss in every (or selected) flat parameter."""
    params = model.params
    theta = params.flatten()
    idx = range(theta.size) if indices is None else indices
    out = np.zeros(theta.size)
    try:
        for i in idx:
            tp = theta.copy()
            tp[i] += step
            params.assign(tp)
            lp = loss_at(model, x, spec, controller)
            tp[i] -= 2 * step
            params.assign(tp)
            lm = loss_at(model, x, spec, controller)
            out[i] = (lp - lm) / (2 * step)
    finally:
        params.assign(theta)
    return out


# --- density grids ----------------------------------------------------------------


@dataclass
class DensityGrid:
    """Log density at cell midpoints of a regular 2-D grid; ``logp[i, j]`` is at ``(xs[j], ys[i])``."""

    xs: np.ndarray
    ys: np.ndarray
    logp: np.ndarray
    nfe: int
    cell: tuple[float, float]

    @property
    def cell_area(self) -> float:
        return float(self.cell[0] * self.cell[1])

    @property
    def mass(self) -> float:
        """Midpoint Riemann sum of the density over the box."""
        return float(np.exp(self.logp).sum() * self.cell_area)


def density_grid(model: CNFModel, box=(-4.0, 4.0, -4.0, 4.0), resolution: int = 100, *,
                 controller: StepController | None = None, batch_size: int = 10000,
                 trace: TraceEstimatorSpec | str = "exact") -> DensityGrid:
    if model.dim != 2:
        raise ad.ShapeError(f"density grids need a 2-D model, this one has dimension {model.dim}")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    x0, x1, y0, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1):
        raise ValueError("box must satisfy xmin < xmax and ymin < ymax")
    dx = (x1 - x0) / resolution
    dy = (y1 - y0) / resolution
    xs = x0 + dx * (np.arange(resolution) + 0.5)
    ys = y0 + dy * (np.arange(resolution) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logp = np.empty(len(pts))
    nfe = 0
    for i in range(0, len(pts), batch_size):
        res = density_forward(model, pts[i:i + batch_size], rng=0, trace=trace, controller=controller)
        logp[i:i + batch_size] = res.logp
        nfe += res.nfe
    return DensityGrid(xs=xs, ys=ys, logp=logp.reshape(resolution, resolution), nfe=nfe, cell=(dx, dy))
