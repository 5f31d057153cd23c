"""Learnable Householder flow: reflector chain, forward map, analytic gradients.

The chain is amortized per input: the first reflector is an affine map of
the encoder hidden state, each later reflector an affine map of the
previous one (optionally through tanh). Reflections are rank-1 updates;
the log-det-Jacobian of the composition is the literal constant 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateReflector, DimensionMismatch, TraceMismatch
from .linalg import NORM_FLOOR, householder_apply

REFLECTOR_ACTIVATIONS = ("none", "tanh")


@dataclass
class HouseholderLayer:
    """Affine map producing reflector v_t from v_{t-1}; square in the flow dim."""

    weight: np.ndarray  # (M, M)
    bias: np.ndarray    # (M,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise DimensionMismatch(f"layer weight must be square, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatch(
                f"layer bias shape {self.bias.shape} != ({self.weight.shape[0]},)"
            )


@dataclass
class FlowStack:
    """Reflector chain of length T.

    ``first_weight``/``first_bias`` map the encoder hidden state to v_1;
    ``layers`` (length T-1) chain v_1 -> v_2 -> ... -> v_T. T == 0 is the
    identity flow (plain diagonal-Gaussian posterior) and carries no
    parameters at all.
    """

    dim: int
    first_weight: np.ndarray | None = None  # (M, hidden)
    first_bias: np.ndarray | None = None    # (M,)
    layers: list[HouseholderLayer] = field(default_factory=list)
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in REFLECTOR_ACTIVATIONS:
            raise DimensionMismatch(f"unknown reflector activation {self.activation!r}")
        if (self.first_weight is None) != (self.first_bias is None):
            raise DimensionMismatch("first_weight and first_bias must be set together")
        if self.first_weight is None and self.layers:
            raise DimensionMismatch("layers require a first map to produce v_1")
        if self.first_weight is not None:
            if self.first_weight.shape[0] != self.dim or self.first_bias.shape != (self.dim,):
                raise DimensionMismatch("first map output dim must equal the flow dim")
        for layer in self.layers:
            if layer.weight.shape[0] != self.dim:
                raise DimensionMismatch("all layers must share the flow dim")

    @property
    def length_T(self) -> int:
        return 0 if self.first_weight is None else 1 + len(self.layers)

    @property
    def hidden_dim(self) -> int | None:
        return None if self.first_weight is None else self.first_weight.shape[1]


@dataclass
class FlowTrace:
    """Recorded path z^(0)..z^(T) and reflectors v_1..v_T for the reverse pass.

    Also keeps the conditioning hidden state ``h`` (None for the identity
    flow) so the reverse pass can form first-map gradients.
    """

    z_path: list[np.ndarray]
    v_path: list[np.ndarray]
    h: np.ndarray | None = None


@dataclass
class FlowGrads:
    """Gradients mirroring the FlowStack parameter layout."""

    first_weight: np.ndarray | None
    first_bias: np.ndarray | None
    layers: list[tuple[np.ndarray, np.ndarray]]


def init_flow(dim: int, hidden_dim: int, length_T: int, rng: np.random.Generator,
              activation: str = "none") -> FlowStack:
    """Build a stack of ``length_T`` reflection layers.

    Weights are uniform in ``+/- 1/sqrt(dim)``; biases start at 0.01 to keep
    the emitted reflectors away from the degenerate zero-norm floor.
    """
    if length_T == 0:
        return FlowStack(dim=dim, activation=activation)
    scale = 1.0 / np.sqrt(dim)
    first_w = rng.uniform(-scale, scale, size=(dim, hidden_dim))
    first_b = np.full(dim, 0.01)
    layers = [
        HouseholderLayer(weight=rng.uniform(-scale, scale, size=(dim, dim)),
                         bias=np.full(dim, 0.01))
        for _ in range(length_T - 1)
    ]
    return FlowStack(dim=dim, first_weight=first_w, first_bias=first_b,
                     layers=layers, activation=activation)


def _emit(stack: FlowStack, weight, bias, inp) -> np.ndarray:
    v = weight @ inp + bias
    if stack.activation == "tanh":
        v = np.tanh(v)
    if np.linalg.norm(v) <= NORM_FLOOR:
        raise DegenerateReflector(
            f"emitted reflector norm {np.linalg.norm(v):.3e} <= {NORM_FLOOR:g}"
        )
    return v


def flow_forward(stack: FlowStack, z0, h) -> tuple[np.ndarray, FlowTrace, float]:
    """Run z^(0) -> z^(T) through the reflector chain.

    Returns the flowed vector, the trace needed for the reverse pass, and
    the log-det-Jacobian, which is exactly 0.0 for this flow.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if z0.shape != (stack.dim,):
        raise DimensionMismatch(f"z0 shape {z0.shape} != ({stack.dim},)")
    if stack.length_T > 0 and h.shape != (stack.hidden_dim,):
        raise DimensionMismatch(f"h shape {h.shape} != ({stack.hidden_dim},)")

    z_path = [z0]
    v_path: list[np.ndarray] = []
    if stack.length_T > 0:
        v = _emit(stack, stack.first_weight, stack.first_bias, h)
        v_path.append(v)
        z_path.append(householder_apply(v, z0))
        for layer in stack.layers:
            v = _emit(stack, layer.weight, layer.bias, v)
            v_path.append(v)
            z_path.append(householder_apply(v, z_path[-1]))
    traced_h = h if stack.length_T > 0 else None
    return z_path[-1], FlowTrace(z_path=z_path, v_path=v_path, h=traced_h), 0.0


def _reflection_grad_v(v: np.ndarray, z_in: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    # d/dv of [z - 2 v (v.z)/|v|^2] contracted with the downstream gradient.
    nsq = float(v @ v)
    s = float(v @ z_in)
    gv = float(g_out @ v)
    return (-2.0 / nsq) * (gv * z_in + s * g_out - (2.0 * s * gv / nsq) * v)


def flow_backward(stack: FlowStack, trace: FlowTrace,
                  grad_zT) -> tuple[np.ndarray, FlowGrads, np.ndarray | None]:
    """Exact reverse-mode gradients through the reflector chain.

    Given the gradient of a downstream scalar loss with respect to z^(T),
    returns the gradient with respect to z^(0), gradients for every flow
    parameter, and the gradient with respect to the conditioning hidden
    state (None for the identity flow). The trace must come from a
    matching ``flow_forward`` call.
    """
    grad_zT = np.asarray(grad_zT, dtype=np.float64)
    t_len = stack.length_T
    if len(trace.v_path) != t_len or len(trace.z_path) != t_len + 1:
        raise TraceMismatch(
            f"trace of length {len(trace.v_path)} does not match stack T={t_len}"
        )
    if grad_zT.shape != (stack.dim,):
        raise TraceMismatch(f"grad_zT shape {grad_zT.shape} != ({stack.dim},)")
    for z in trace.z_path:
        if z.shape != (stack.dim,):
            raise TraceMismatch("trace vectors disagree with the flow dim")

    if t_len == 0:
        return grad_zT, FlowGrads(None, None, []), None
    if trace.h is None or trace.h.shape != (stack.hidden_dim,):
        raise TraceMismatch("trace is missing the hidden state that produced v_1")
    h = trace.h

    grads = FlowGrads(
        first_weight=np.zeros_like(stack.first_weight),
        first_bias=np.zeros_like(stack.first_bias),
        layers=[(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in stack.layers],
    )
    g_z = grad_zT
    carry_v = np.zeros(stack.dim)
    grad_h = np.zeros_like(h)
    for t in range(t_len - 1, -1, -1):
        v = trace.v_path[t]
        g_v = _reflection_grad_v(v, trace.z_path[t], g_z) + carry_v
        g_z = householder_apply(v, g_z)  # Jacobian of Hz is H, and H' == H
        if stack.activation == "tanh":
            g_pre = g_v * (1.0 - v * v)  # v == tanh(pre)
        else:
            g_pre = g_v
        if t == 0:
            grads.first_weight += np.outer(g_pre, h)
            grads.first_bias += g_pre
            grad_h = stack.first_weight.T @ g_pre
        else:
            gw, gb = grads.layers[t - 1]
            gw += np.outer(g_pre, trace.v_path[t - 1])
            gb += g_pre
            carry_v = stack.layers[t - 1].weight.T @ g_pre
    return g_z, grads, grad_h
