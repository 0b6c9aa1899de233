"""Time-conditioned MLP dynamics ``f(z, t; θ)``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

ACTIVATIONS: dict[str, Callable] = {
    "tanh": ad.tanh,
    "softplus": ad.softplus,
}

# derivative of each activation given its pre-activation ``a`` and output ``h``
_DERIVATIVES: dict[str, Callable] = {
    "tanh": lambda a, h: 1.0 - h * h,
    "softplus": lambda a, h: 0.5 * np.tanh(0.5 * a) + 0.5,
    "identity": lambda a, h: np.ones_like(a),
}


@dataclass(frozen=True)
class InitSpec:
    """Weight initialisation.

    ``scheme`` is ``"glorot_uniform"`` or ``"normal"``; both are scaled by
    ``gain``. With ``zero_final`` the last layer starts at zero so the
    initial flow is the identity map.
    """

    scheme: str = "glorot_uniform"
    gain: float = 1.0
    zero_final: bool = True


@dataclass(frozen=True)
class NetSpec:
    dim: int
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    split_index: int | None = None
    init: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.split_index is not None:
            if not self.hidden:
                raise ValueError("a bottleneck split needs at least one hidden layer")
            if not 0 <= self.split_index < len(self.hidden):
                raise ValueError(f"split_index {self.split_index} out of range")
            if self.hidden[self.split_index] != min(self.hidden):
                raise ValueError("split_index must sit at the narrowest hidden layer")


class DynamicsNet:
    """MLP whose every layer sees ``[h ; t]``.

    Layer ``i`` holds ``W{i}`` of shape ``(in_i + 1, out_i)`` (the extra row
    multiplies the time column) and bias ``b{i}``.
    """

    def __init__(self, spec: NetSpec, params: ParamStore):
        self.spec = spec
        self.params = params
        self.act = ACTIVATIONS[spec.activation]
        self.act_name = spec.activation
        widths = self.widths
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i in range(len(widths) - 1):
            W = params[f"W{i}"]
            b = params[f"b{i}"]
            if W.shape != (widths[i] + 1, widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} parameters have the wrong shape")
            self.layers.append((W, b))

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def widths(self) -> list[int]:
        return [self.spec.dim, *self.spec.hidden, self.spec.dim]

    @property
    def bottleneck_width(self) -> int | None:
        if self.spec.split_index is None:
            return None
        return self.spec.hidden[self.spec.split_index]

    def _layer(self, i: int, h, t: float):
        W, b = self.layers[i]
        out = ad.time_affine(h, W, b, t)
        if i < len(self.layers) - 1:
            out = self.act(out)
        return out

    def _check(self, z):
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ad.ShapeError(f"expected input of shape (batch, {self.dim}), got {z.shape}")

    def __call__(self, z, t: float) -> Tensor:
        return self.forward(z, t)

    def forward(self, z, t: float) -> Tensor:
        z = ad.constant(z) if not isinstance(z, Tensor) else z
        self._check(z)
        h = z
        for i in range(len(self.layers)):
            h = self._layer(i, h, t)
        return h

    def forward_with_trace(self, z: np.ndarray, t: float,
                           epsilon: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``f(z, t)`` and a trace term by forward-mode propagation, without a tape.

        With ``epsilon=None`` the trace is exact: the full Jacobian is carried
        as ``(batch, D, width)``. Otherwise the single tangent ``J ε`` is
        carried and the result is ``εᵀ J ε``. For evaluation only.
        """
        h = np.asarray(getattr(z, "data", z), dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.dim:
            raise ad.ShapeError(f"expected input of shape (batch, {self.dim}), got {h.shape}")
        B, D = h.shape
        k = D if epsilon is None else 1
        deriv = _DERIVATIVES[self.act_name]
        J = None
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            Wd = W.data
            n = Wd.shape[0] - 1
            a = h @ Wd[:n] + (b.data + t * Wd[n])
            if J is None:
                J = np.broadcast_to(Wd[:n], (B, D, Wd.shape[1])) if epsilon is None else epsilon @ Wd[:n]
            else:
                J = (J.reshape(B * k, n) @ Wd[:n]).reshape(B, k, -1) if epsilon is None else J @ Wd[:n]
            if i < last:
                h = _np_act(self.act_name, a)
                dh = deriv(a, h)
                J = J * (dh[:, None, :] if epsilon is None else dh)
            else:
                h = a
        if epsilon is None:
            return h, np.einsum("bdd->b", J)
        return h, np.einsum("bd,bd->b", J, epsilon)

    def split_forward(self, z, t: float):
        """Return ``(h, g)`` with ``g(h)`` finishing the pass from the bottleneck."""
        if self.spec.split_index is None:
            raise ValueError("network has no bottleneck split point")
        z = ad.constant(z) if not isinstance(z, Tensor) else z
        self._check(z)
        cut = self.spec.split_index + 1
        h = z
        for i in range(cut):
            h = self._layer(i, h, t)

        def g(hidden):
            out = hidden
            for i in range(cut, len(self.layers)):
                out = self._layer(i, out, t)
            return out

        return h, g


def _np_act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "softplus":
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return a


def init_params(spec: NetSpec, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    widths = [spec.dim, *spec.hidden, spec.dim]
    params = ParamStore()
    n = len(widths) - 1
    for i in range(n):
        fan_in, fan_out = widths[i] + 1, widths[i + 1]
        if spec.init.zero_final and i == n - 1:
            W = np.zeros((fan_in, fan_out))
        elif spec.init.scheme == "glorot_uniform":
            lim = spec.init.gain * np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        elif spec.init.scheme == "normal":
            W = rng.normal(0.0, spec.init.gain / np.sqrt(fan_in), size=(fan_in, fan_out))
        else:
            raise ValueError(f"unknown init scheme {spec.init.scheme!r}")
        params.add(f"W{i}", W)
        params.add(f"b{i}", np.zeros(fan_out))
    return params


def init(spec: NetSpec, seed: int = 0) -> DynamicsNet:
    return DynamicsNet(spec, init_params(spec, seed))


def linear_net(A: np.ndarray, bias: np.ndarray | None = None) -> DynamicsNet:
    """Single affine layer ``f(z) = z @ A.T + bias`` with no time dependence."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    spec = NetSpec(dim=d, hidden=(), init=InitSpec(zero_final=False))
    params = ParamStore()
    W = np.zeros((d + 1, d))
    W[:d] = A.T
    params.add("W0", W)
    params.add("b0", np.zeros(d) if bias is None else np.asarray(bias, dtype=np.float64))
    return DynamicsNet(spec, params)


class LinearBottleneckNet(DynamicsNet):
    """Two linear maps with a designated split; used to check the cyclic trace identity."""

    def __init__(self, A: np.ndarray, B: np.ndarray):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        H, D = A.shape
        if B.shape != (D, H):
            raise ValueError("B must have shape (D, H) when A has shape (H, D)")
        spec = NetSpec(dim=D, hidden=(H,), split_index=0, init=InitSpec(zero_final=False))
        params = ParamStore()
        W0 = np.zeros((D + 1, H))
        W0[:D] = A.T
        W1 = np.zeros((H + 1, D))
        W1[:H] = B.T
        params.add("W0", W0)
        params.add("b0", np.zeros(H))
        params.add("W1", W1)
        params.add("b1", np.zeros(D))
        super().__init__(spec, params)
        self.act = lambda x: x
        self.act_name = "identity"


def jacobian_fd(net: DynamicsNet, z: np.ndarray, t: float, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``net`` at each row of ``z``; shape (batch, D, D)."""
    z = np.asarray(z, dtype=np.float64)
    B, D = z.shape
    J = np.zeros((B, D, D))
    with ad.no_grad():
        for j in range(D):
            dz = np.zeros_like(z)
            dz[:, j] = step
            fp = net(z + dz, t).data
            fm = net(z - dz, t).data
            J[:, :, j] = (fp - fm) / (2 * step)
    return J
