"""Input-convex feedforward networks with hand-rolled gradients.

Fully connected ReLU networks with skip connections from the input to
every layer. Hidden-to-hidden weights and the output weight row are kept
elementwise non-negative, which makes the scalar output a convex function
of the input vector. Besides the forward pass, the module provides the
input Jacobian (a subgradient, with relu'(0) taken as 0), parameter
gradients for training, and the non-negativity projection applied after
optimizer steps.

Parameters are treated as immutable values: every operation either reads
them or returns a new object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class IcnnArch:
    """Network shape: scalar output, one or more hidden ReLU layers."""

    input_dim: int
    hidden_widths: tuple[int, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if len(widths) < 1:
            raise ValueError("at least one hidden layer is required")
        if any(w < 1 for w in widths):
            raise ValueError(f"zero-width hidden layer in {widths}")

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_widths)


@dataclass(eq=False)
class IcnnParams:
    """Weights of one network.

    W[0] is always None (the first hidden layer has no hidden-to-hidden
    input); W[l] for l >= 1 and w_out must stay elementwise non-negative
    for the output to be convex in the input. D are the input skip
    matrices, unconstrained in sign.
    """

    arch: IcnnArch
    W: list  # W[l]: (width_l, width_{l-1}) or None for l = 0
    D: list  # D[l]: (width_l, input_dim)
    b: list  # b[l]: (width_l,)
    w_out: np.ndarray  # (width_last,), non-negative
    d_out: np.ndarray  # (input_dim,)
    b_out: float

    def copy(self) -> "IcnnParams":
        return IcnnParams(
            arch=self.arch,
            W=[None if w is None else w.copy() for w in self.W],
            D=[d.copy() for d in self.D],
            b=[b.copy() for b in self.b],
            w_out=self.w_out.copy(),
            d_out=self.d_out.copy(),
            b_out=float(self.b_out),
        )

    def constrained_arrays(self):
        """Arrays that must remain elementwise non-negative."""
        out = [w for w in self.W[1:]]
        out.append(self.w_out)
        return out


@dataclass(eq=False)
class IcnnGrads:
    """Loss gradients, shape-congruent with the owning IcnnParams."""

    W: list
    D: list
    b: list
    w_out: np.ndarray
    d_out: np.ndarray
    b_out: float


def icnn_init(arch: IcnnArch, seed: int) -> IcnnParams:
    """Deterministic initialization.

    Hidden-to-hidden and output weights are |uniform| scaled by
    1/sqrt(fan_in), hence non-negative from the start; skip weights are
    symmetric uniform scaled by 1/sqrt(input_dim); biases are zero.
    """
    rng = np.random.default_rng(seed)
    d_in = arch.input_dim
    W, D, b = [], [], []
    prev = None
    for width in arch.hidden_widths:
        if prev is None:
            W.append(None)
        else:
            W.append(np.abs(rng.uniform(-1.0, 1.0, size=(width, prev))) / np.sqrt(prev))
        D.append(rng.uniform(-1.0, 1.0, size=(width, d_in)) / np.sqrt(d_in))
        b.append(np.zeros(width))
        prev = width
    w_out = np.abs(rng.uniform(-1.0, 1.0, size=prev)) / np.sqrt(prev)
    d_out = rng.uniform(-1.0, 1.0, size=d_in) / np.sqrt(d_in)
    return IcnnParams(arch=arch, W=W, D=D, b=b, w_out=w_out, d_out=d_out, b_out=0.0)


def _check_input(p: IcnnParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (p.arch.input_dim,):
        raise ValueError(
            f"input has shape {x.shape}, expected ({p.arch.input_dim},)"
        )
    return x


def icnn_forward(p: IcnnParams, x) -> float:
    """Evaluate f(x). Convex in x for valid (non-negative) weights."""
    x = _check_input(p, x)
    h = np.maximum(p.D[0] @ x + p.b[0], 0.0)
    for l in range(1, p.arch.n_hidden):
        h = np.maximum(p.W[l] @ h + p.D[l] @ x + p.b[l], 0.0)
    return float(p.w_out @ h + p.d_out @ x + p.b_out)


def icnn_forward_batch(p: IcnnParams, X: np.ndarray) -> np.ndarray:
    """Evaluate f on rows of X, shape (B, input_dim) -> (B,)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != p.arch.input_dim:
        raise ValueError(f"batch has shape {X.shape}, expected (B, {p.arch.input_dim})")
    H = np.maximum(X @ p.D[0].T + p.b[0], 0.0)
    for l in range(1, p.arch.n_hidden):
        H = np.maximum(H @ p.W[l].T + X @ p.D[l].T + p.b[l], 0.0)
    return H @ p.w_out + X @ p.d_out + p.b_out


def _forward_trace(p: IcnnParams, X: np.ndarray):
    """Batched forward keeping pre-activations for the backward passes."""
    pre = []
    A = X @ p.D[0].T + p.b[0]
    pre.append(A)
    H = np.maximum(A, 0.0)
    post = [H]
    for l in range(1, p.arch.n_hidden):
        A = H @ p.W[l].T + X @ p.D[l].T + p.b[l]
        pre.append(A)
        H = np.maximum(A, 0.0)
        post.append(H)
    out = H @ p.w_out + X @ p.d_out + p.b_out
    return out, pre, post


def icnn_hidden_activations(p: IcnnParams, x):
    """Forward pass returning (output, list of hidden activation vectors)."""
    x = _check_input(p, x)
    out, _, post = _forward_trace(p, x[None, :])
    return float(out[0]), [h[0] for h in post]


def icnn_input_jacobian(p: IcnnParams, x) -> np.ndarray:
    """Reverse-mode df/dx with relu'(0) := 0.

    For valid weights the result is a subgradient of the convex f, so
    f(y) >= f(x) + J(x) (y - x) for all y.
    """
    x = _check_input(p, x)
    _, pre, _ = _forward_trace(p, x[None, :])
    L = p.arch.n_hidden
    # delta[l]: gradient of the output w.r.t. pre-activation of layer l
    delta = p.w_out * (pre[L - 1][0] > 0.0)
    jac = p.d_out.copy()
    for l in range(L - 1, 0, -1):
        jac += delta @ p.D[l]
        delta = (delta @ p.W[l]) * (pre[l - 1][0] > 0.0)
    jac += delta @ p.D[0]
    return jac


def icnn_backward(p: IcnnParams, x, upstream: float) -> IcnnGrads:
    """Gradients of (upstream * f(x)) w.r.t. every parameter."""
    x = _check_input(p, x)
    return icnn_backward_batch(p, x[None, :], np.array([float(upstream)]))


def icnn_backward_batch(p: IcnnParams, X: np.ndarray, upstream: np.ndarray) -> IcnnGrads:
    """Accumulated gradients of sum_b upstream[b] * f(X[b])."""
    X = np.asarray(X, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _, pre, post = _forward_trace(p, X)
    L = p.arch.n_hidden
    gW = [None] * L
    gD = [None] * L
    gb = [None] * L
    g_wout = post[L - 1].T @ upstream
    g_dout = X.T @ upstream
    g_bout = float(upstream.sum())
    # delta: (B, width_l) gradient w.r.t. pre-activations of layer l
    delta = (upstream[:, None] * p.w_out) * (pre[L - 1] > 0.0)
    for l in range(L - 1, 0, -1):
        gW[l] = delta.T @ post[l - 1]
        gD[l] = delta.T @ X
        gb[l] = delta.sum(axis=0)
        delta = (delta @ p.W[l]) * (pre[l - 1] > 0.0)
    gD[0] = delta.T @ X
    gb[0] = delta.sum(axis=0)
    return IcnnGrads(W=gW, D=gD, b=gb, w_out=g_wout, d_out=g_dout, b_out=g_bout)


def project_nonneg(p: IcnnParams) -> IcnnParams:
    """Clip hidden-to-hidden and output weights at zero; rest untouched."""
    out = p.copy()
    for l in range(1, out.arch.n_hidden):
        np.maximum(out.W[l], 0.0, out=out.W[l])
    np.maximum(out.w_out, 0.0, out=out.w_out)
    return out


def params_to_dict(p: IcnnParams) -> dict:
    """JSON-ready schema: {arch, layers: [{W?, D, b}], out: {W, D, b}}."""
    layers = []
    for l in range(p.arch.n_hidden):
        entry = {"D": p.D[l].tolist(), "b": p.b[l].tolist()}
        if l > 0:
            entry["W"] = p.W[l].tolist()
        layers.append(entry)
    return {
        "arch": {
            "input_dim": p.arch.input_dim,
            "hidden_widths": list(p.arch.hidden_widths),
            "output_dim": 1,
        },
        "layers": layers,
        "out": {"W": p.w_out.tolist(), "D": p.d_out.tolist(), "b": p.b_out},
    }


def params_from_dict(d: dict) -> IcnnParams:
    arch = IcnnArch(
        input_dim=int(d["arch"]["input_dim"]),
        hidden_widths=tuple(int(w) for w in d["arch"]["hidden_widths"]),
    )
    W, D, b = [], [], []
    for l, entry in enumerate(d["layers"]):
        W.append(None if l == 0 else np.asarray(entry["W"], dtype=float))
        D.append(np.asarray(entry["D"], dtype=float))
        b.append(np.asarray(entry["b"], dtype=float))
    p = IcnnParams(
        arch=arch,
        W=W,
        D=D,
        b=b,
        w_out=np.asarray(d["out"]["W"], dtype=float),
        d_out=np.asarray(d["out"]["D"], dtype=float),
        b_out=float(d["out"]["b"]),
    )
    validate_params(p)
    return p


def validate_params(p: IcnnParams) -> None:
    """Check shape consistency and the non-negativity invariants."""
    arch = p.arch
    prev = None
    for l, width in enumerate(arch.hidden_widths):
        if l == 0:
            if p.W[0] is not None:
                raise ValueError("layer 1 must not have a hidden-to-hidden matrix")
        else:
            if p.W[l].shape != (width, prev):
                raise ValueError(f"W[{l}] has shape {p.W[l].shape}, expected {(width, prev)}")
            if np.min(p.W[l]) < 0.0:
                raise ValueError(f"W[{l}] has negative entries")
        if p.D[l].shape != (width, arch.input_dim):
            raise ValueError(f"D[{l}] has shape {p.D[l].shape}")
        if p.b[l].shape != (width,):
            raise ValueError(f"b[{l}] has shape {p.b[l].shape}")
        prev = width
    if p.w_out.shape != (prev,):
        raise ValueError(f"output weights have shape {p.w_out.shape}, expected ({prev},)")
    if np.min(p.w_out) < 0.0:
        raise ValueError("output weights have negative entries")
    if p.d_out.shape != (arch.input_dim,):
        raise ValueError(f"output skip has shape {p.d_out.shape}")


def zero_params(arch: IcnnArch) -> IcnnParams:
    """All-zero network, f(x) = 0 for every x. Useful in tests."""
    W, D, b = [], [], []
    prev = None
    for width in arch.hidden_widths:
        W.append(None if prev is None else np.zeros((width, prev)))
        D.append(np.zeros((width, arch.input_dim)))
        b.append(np.zeros(width))
        prev = width
    return IcnnParams(
        arch=arch, W=W, D=D, b=b,
        w_out=np.zeros(prev), d_out=np.zeros(arch.input_dim), b_out=0.0,
    )
