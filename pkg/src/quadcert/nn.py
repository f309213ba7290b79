"""Feed-forward relu networks, Lipschitz estimates and last-layer rescaling."""
from __future__ import annotations

import math
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import cvxopt
import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "none")
FORMAT_TAG = "mlpv1"


class MalformedModelError(ValueError):
    def __init__(self, message, offset=None):
        where = f" (line {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.offset = offset


class UnsupportedVersionError(MalformedModelError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"layer weight {W.shape} and bias {b.shape} do not match")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True, eq=False)
class Mlp:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].W.shape[1] != layers[k - 1].W.shape[0]:
                raise ValueError(f"layer {k} expects {layers[k].W.shape[1]} inputs, "
                                 f"previous layer gives {layers[k - 1].W.shape[0]}")
        if layers[-1].activation != "none":
            raise ValueError("final layer must be linear")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(l.W.shape[0] for l in self.layers[:-1])

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)

    def params(self) -> list:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter list does not match the architecture")
        return Mlp(tuple(Layer(params[2 * k], params[2 * k + 1], l.activation)
                         for k, l in enumerate(self.layers)))


def init_mlp(sizes: Sequence[int], rng=None, final_scale: float = 1.0) -> Mlp:
    """He-initialised relu network with a linear output layer."""
    rng = np.random.default_rng(rng)
    layers = []
    for k in range(len(sizes) - 1):
        last = k == len(sizes) - 2
        W = rng.standard_normal((sizes[k + 1], sizes[k])) * math.sqrt(2.0 / sizes[k])
        if last:
            W = W * final_scale
        layers.append(Layer(W, np.zeros(sizes[k + 1]), "none" if last else "relu"))
    return Mlp(tuple(layers))


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward(net: Mlp, s) -> np.ndarray:
    x = np.asarray(s, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"network expects {net.input_dim} inputs, got {x.shape[-1]}")
    for l in net.layers:
        x = _act(x @ l.W.T + l.b, l.activation)
    return x


def forward_trace(net: Mlp, s):
    """Forward pass keeping every layer input and pre-activation for backprop."""
    x = np.asarray(s, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"network expects {net.input_dim} inputs, got {x.shape[-1]}")
    trace = []
    for l in net.layers:
        z = x @ l.W.T + l.b
        trace.append((x, z))
        x = _act(z, l.activation)
    return x, trace


def backward(net: Mlp, trace, grad_out):
    """Reverse pass: gradients of ``sum(grad_out * output)`` w.r.t. params and input.

    Inputs are batched along the leading axis; parameter gradients are summed
    over the batch.
    """
    return backward_layers(net.layers, trace, grad_out)


def backward_layers(layers, trace, grad_out):
    """:func:`backward` for a bare layer sequence (e.g. a trunk without its head)."""
    g = np.asarray(grad_out, dtype=float)
    grads = [None] * (2 * len(layers))
    for k in range(len(layers) - 1, -1, -1):
        l = layers[k]
        x, z = trace[k]
        if l.activation == "relu":
            g = g * (z > 0)
        g2 = g.reshape(-1, g.shape[-1])
        grads[2 * k] = g2.T @ x.reshape(-1, x.shape[-1])
        grads[2 * k + 1] = g2.sum(axis=0)
        g = g @ l.W
    return grads, g


def input_jacobian(net: Mlp, s) -> np.ndarray:
    """Jacobian of the output w.r.t. the input at each row of ``s``: ``(N, out, in)``."""
    x = np.atleast_2d(np.asarray(s, dtype=float))
    J = np.broadcast_to(np.eye(net.input_dim), (x.shape[0], net.input_dim, net.input_dim))
    for l in net.layers:
        z = x @ l.W.T + l.b
        J = np.einsum("oi,nij->noj", l.W, J)
        if l.activation == "relu":
            J = J * (z > 0)[:, :, None]
        x = _act(z, l.activation)
    return J


# --- Lipschitz estimates --------------------------------------------------------

@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    method: str
    conservative: bool = False

    def __float__(self):
        return float(self.value)


def lipschitz_inf_product(net: Mlp) -> LipschitzEstimate:
    """Product of the max absolute row sums (infinity-norm Lipschitz bound)."""
    v = 1.0
    for l in net.layers:
        v *= float(np.max(np.sum(np.abs(l.W), axis=1)))
    return LipschitzEstimate(v, "inf_product")


class PowerIterationError(ArithmeticError):
    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def spectral_norm(W, tol: float = 1e-9, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.asarray(W, dtype=float)
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = math.sqrt(nw)
        if abs(new - sigma) <= tol * new:
            # one more step refines the Rayleigh quotient to ~tol^2
            return float(np.linalg.norm(W @ v))
        sigma = new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps", sigma)


def lipschitz_spectral_product(net: Mlp, tol: float = 1e-12) -> LipschitzEstimate:
    v = 1.0
    for l in net.layers:
        try:
            v *= spectral_norm(l.W, tol)
        except PowerIterationError as exc:
            log.warning("%s; using dense SVD", exc)
            v *= float(np.linalg.norm(l.W, 2))
    return LipschitzEstimate(v, "spectral_product")


def _lipsdp_data(Ws):
    """Sparse coefficient columns of the LipSDP matrix in ``(lam, rho)``.

    With ``A = [blkdiag(W_0..W_{l-1}), 0]`` and ``B = [0, I]`` the matrix is
    ``[A; B]^T [[0, T], [T, -2T]] [A; B] + diag(-rho I, 0, ..., W_l^T W_l)``;
    the term for neuron ``k`` is ``a_k e_k^T + e_k a_k^T - 2 e_k e_k^T``.
    """
    n0 = Ws[0].shape[1]
    hidden = [W.shape[0] for W in Ws[:-1]]
    N = sum(hidden)
    d = n0 + N
    rows, cols, vals = [], [], []
    r = c = 0
    for W in Ws[:-1]:
        for kk in range(W.shape[0]):
            k = r + kk
            ek = n0 + k
            for j in np.flatnonzero(W[kk]).tolist():
                v = float(W[kk, j])
                rows += [c + j + ek * d, ek + (c + j) * d]
                cols += [k, k]
                vals += [v, v]
            rows.append(ek + ek * d)
            cols.append(k)
            vals.append(-2.0)
        r += W.shape[0]
        c += W.shape[1]
    for i in range(n0):
        rows.append(i + i * d)
        cols.append(N)
        vals.append(-1.0)
    const = np.zeros((d, d))
    h = hidden[-1]
    const[-h:, -h:] = Ws[-1].T @ Ws[-1]
    return (rows, cols, vals), const, N, d


def lipschitz_sdp(net: Mlp) -> LipschitzEstimate:
    """L2 Lipschitz bound with one multiplier per hidden neuron.

    Hidden activations must be slope-restricted to [0, 1] (relu).  The bound
    is ``sqrt(rho)`` for the smallest ``rho`` making the LipSDP matrix
    negative semidefinite.  Layers are normalised by their spectral norms
    before the solve and the result rescaled; relu is positively homogeneous
    so the bound is unchanged but the problem is well scaled.

    The problem has few variables and one large matrix.  The interior-point
    Newton system is formed from rank-two factors of the constraint terms,
    and the final rho is recomputed exactly from the multipliers.
    """
    layers = net.layers
    for l in layers[:-1]:
        if l.activation != "relu":
            raise ValueError(f"activation {l.activation!r} is not supported by the SDP bound")
    if len(layers) == 1:
        return LipschitzEstimate(float(np.linalg.norm(layers[0].W, 2)), "sdp")
    norms = [float(np.linalg.norm(l.W, 2)) for l in layers]
    if min(norms) == 0.0:
        return LipschitzEstimate(0.0, "sdp")
    Ws = [l.W / s for l, s in zip(layers, norms)]
    (rows, cols, vals), const, N, d = _lipsdp_data(Ws)
    n0 = Ws[0].shape[1]
    A = np.zeros((d, N))
    r = c = 0
    for W in Ws[:-1]:
        A[c:c + W.shape[1], r:r + W.shape[0]] = W.T
        r += W.shape[0]
        c += W.shape[1]
    G = cvxopt.sparse([cvxopt.spmatrix(-1.0, range(N + 1), range(N + 1)),
                       cvxopt.spmatrix(vals, rows, cols, (d * d, N + 1))])
    h = cvxopt.matrix(np.concatenate([np.zeros(N + 1), -const.ravel(order="F")]))
    cost = cvxopt.matrix(0.0, (N + 1, 1))
    cost[N] = 1.0
    dims = {"l": N + 1, "q": [], "s": [d]}
    kkt = _lipsdp_kktsolver(np.hstack([A, np.eye(d)[:, n0:]]), n0)
    rho = None
    # the solver only supplies multipliers; rho is recomputed exactly from them,
    # so a looser tolerance costs tightness, never soundness
    for tol in (1e-8, 1e-7, 1e-6):
        opts = dict(show_progress=False, abstol=tol, reltol=tol, feastol=10 * tol, maxiters=100)
        try:
            sol = cvxopt.solvers.conelp(cost, G, h, dims, kktsolver=kkt, options=opts)
        except (ValueError, ArithmeticError) as exc:
            log.info("SDP Lipschitz solve at tolerance %g raised %s", tol, exc)
            continue
        if sol["status"] == "optimal":
            rho = _exact_rho(np.array(sol["x"][:N]).ravel(), A, const, n0)
            if rho is not None:
                break
    if rho is None:
        log.warning("SDP Lipschitz solve failed; falling back to spectral product")
        est = lipschitz_spectral_product(net)
        return LipschitzEstimate(est.value, "sdp", conservative=True)
    return LipschitzEstimate(math.sqrt(rho) * math.prod(norms), "sdp")


def _exact_rho(lam, A, const, n0):
    """Smallest rho for which fixed multipliers ``lam`` satisfy the LMI.

    Splitting off the input block, the matrix is negative semidefinite iff the
    hidden block X22 is negative definite and ``rho`` bounds the top
    eigenvalue of the Schur complement.  Returns None when X22 is not definite.
    """
    d = const.shape[0]
    lam = np.maximum(lam, 0.0)
    X = const.copy()
    S = A * lam
    X[:, n0:] += S
    X[n0:, :] += S.T
    X[np.arange(n0, d), np.arange(n0, d)] -= 2 * lam
    X22 = X[n0:, n0:]
    try:
        L = np.linalg.cholesky(-X22)
    except np.linalg.LinAlgError:
        return None
    Y = np.linalg.solve(L, X[n0:, :n0])
    sch = X[:n0, :n0] + Y.T @ Y
    return max(float(np.linalg.eigvalsh((sch + sch.T) / 2)[-1]), 0.0)


def _lipsdp_kktsolver(U, n0):
    """Newton-system solver for the LipSDP cone program.

    Every neuron's coefficient matrix is ``U_k C U_k^T`` with
    ``U_k = [a_k, e_k]`` and ``C = [[0, 1], [1, -2]]``, and the rho term is
    ``-E0 E0^T``.  After scaling, the normal matrix needs only the Gram matrix
    of the scaled factors rather than one d x d product per variable.
    """
    d, twoN = U.shape
    N = twoN // 2

    def factor(W):
        rti = np.array(W["rti"][0])
        dl = np.array(W["d"]).ravel()
        V = rti.T @ U
        Va, Ve = V[:, :N], V[:, N:]
        V0 = rti.T[:, :n0]
        Q = V.T @ V
        qaa, qae, qea, qee = Q[:N, :N], Q[:N, N:], Q[N:, :N], Q[N:, N:]
        H = np.empty((N + 1, N + 1))
        # tr(C Q_ij C Q_ji) expanded blockwise
        H[:N, :N] = (qea * qea.T + qee * qaa.T + qaa * qee.T + qae * qae.T
                     - 2 * (qea * qee.T + qee * qea.T + qae * qee.T + qee * qae.T) + 4 * qee * qee.T)
        Y = V0.T @ V
        Ya, Ye = Y[:, :N], Y[:, N:]
        H[:N, N] = 2 * np.einsum("pk,pk->k", Ye, Ye) - 2 * np.einsum("pk,pk->k", Ya, Ye)
        H[N, :N] = H[:N, N]
        S0 = V0.T @ V0
        H[N, N] = np.sum(S0 * S0)
        H[np.diag_indices(N + 1)] += 1.0 / dl ** 2
        fac = linalg.cho_factor(H)

        def solve(x, y, z):
            zl = np.array(z[:N + 1]).ravel()
            Z = np.array(z[N + 1:]).reshape(d, d, order="F")
            Z = np.tril(Z) + np.tril(Z, -1).T
            Zs = rti.T @ Z @ rti
            ZVe = Zs @ Ve
            rhs = np.array(x).ravel() - zl / dl ** 2
            rhs[:N] += 2 * np.einsum("dk,dk->k", Va, ZVe) - 2 * np.einsum("dk,dk->k", Ve, ZVe)
            rhs[N] -= np.trace(V0.T @ Zs @ V0)
            ux = linalg.cho_solve(fac, rhs)
            lam = ux[:N]
            S = (Va * lam) @ Ve.T
            Gx = S + S.T - 2 * (Ve * lam) @ Ve.T - ux[N] * (V0 @ V0.T)
            x[:] = cvxopt.matrix(ux)
            z[:N + 1] = cvxopt.matrix((-ux - zl) / dl)
            z[N + 1:] = cvxopt.matrix((Gx - Zs).ravel(order="F"))
        return solve
    return factor


def lipschitz_sampled_lower(net: Mlp, n_samples: int = 10000, radius: float = 1.0,
                            seed: int = 0) -> LipschitzEstimate:
    """Largest Jacobian spectral norm seen at random points (a lower bound)."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for start in range(0, n_samples, 2000):
        x = rng.uniform(-radius, radius, size=(min(2000, n_samples - start), net.input_dim))
        J = input_jacobian(net, x)
        best = max(best, float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))))
    return LipschitzEstimate(best, "sampled_lower")


ESTIMATORS = {
    "inf_product": lipschitz_inf_product,
    "spectral_product": lipschitz_spectral_product,
    "sdp": lipschitz_sdp,
    "sampled_lower": lipschitz_sampled_lower,
}


def scale_last_layer(net: Mlp, c: float) -> Mlp:
    last = net.layers[-1]
    return Mlp(net.layers[:-1] + (Layer(last.W * c, last.b * c, last.activation),))


def scaling_factor(estimate: float, L_target: float, grid: float = 1e-3) -> float:
    """Largest multiple of ``grid`` not above ``L_target / estimate`` (capped at 1)."""
    if estimate <= L_target:
        return 1.0
    return math.floor(L_target / estimate / grid + 1e-12) * grid


def scale_final_layer(net: Mlp, L_target: float,
                      estimator: Callable[[Mlp], LipschitzEstimate] = lipschitz_sdp,
                      grid: float = 1e-3):
    """Scale the final layer so the estimated Lipschitz constant is below ``L_target``.

    Returns ``(scaled_net, new_estimate, c)``.
    """
    if net.layers[-1].activation != "none":
        raise ValueError("final layer must be linear")
    est = estimator(net)
    if est.value <= 0:
        raise ValueError("cannot scale a network with zero Lipschitz estimate")
    c = scaling_factor(est.value, L_target, grid)
    if c >= 1.0:
        return net, est, 1.0
    while True:
        scaled = scale_last_layer(net, c)
        new = estimator(scaled)
        if new.value < L_target or c <= grid:
            return scaled, new, c
        c = round(c - grid, 12)


# --- model files ----------------------------------------------------------------

def dumps(net: Mlp) -> str:
    lines = [f"{FORMAT_TAG} {len(net.layers)}"]
    for l in net.layers:
        rows, cols = l.W.shape
        lines.append(f"{rows} {cols} {l.activation}")
        lines += [" ".join(repr(float(v)) for v in row) for row in l.W]
        lines.append(" ".join(repr(float(v)) for v in l.b))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Mlp:
    lines = text.split("\n")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines) or (pos == len(lines) - 1 and lines[pos] == ""):
            raise MalformedModelError("unexpected end of model file", pos + 1)
        pos += 1
        return lines[pos - 1]

    def floats(line, count):
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as exc:
            raise MalformedModelError(f"bad number: {exc}", pos) from None
        if len(vals) != count:
            raise MalformedModelError(f"expected {count} values, found {len(vals)}", pos)
        return vals

    head = take().split()
    if len(head) != 2 or not head[0].startswith("mlpv"):
        raise MalformedModelError("missing mlpv header", 1)
    if head[0] != FORMAT_TAG:
        raise UnsupportedVersionError(f"unsupported model format version {head[0]!r}", 1)
    try:
        n_layers = int(head[1])
    except ValueError:
        raise MalformedModelError("bad layer count", 1) from None
    layers = []
    for _ in range(n_layers):
        spec = take().split()
        if len(spec) != 3 or spec[2] not in ACTIVATIONS:
            raise MalformedModelError("bad layer descriptor", pos)
        try:
            rows, cols = int(spec[0]), int(spec[1])
        except ValueError:
            raise MalformedModelError("bad layer shape", pos) from None
        W = np.array([floats(take(), cols) for _ in range(rows)]).reshape(rows, cols)
        b = np.array(floats(take(), rows))
        layers.append(Layer(W, b, spec[2]))
    if any(l.strip() for l in lines[pos:]):
        raise MalformedModelError("trailing data after last layer", pos + 1)
    try:
        return Mlp(tuple(layers))
    except ValueError as exc:
        raise MalformedModelError(str(exc)) from None


def save(net: Mlp, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load(path) -> Mlp:
    with open(path) as fh:
        return loads(fh.read())
