"""Variable-bandwidth Gaussian kernel with bistochastic normalization.

The kernel acts on embedded data points. Bandwidths are tuned
automatically from the log-log slope of the kernel sum, a self-tuning
bandwidth function flattens sampling-density variations, and the
resulting symmetric kernel matrix is normalized into a symmetric Markov
matrix by a two-pass division scheme. Gradients of every kernel quantity
are available in closed form so the dynamical vector field can be pushed
through the kernel exactly.
"""

import math

import numpy as np

from . import parallel
from .errors import InvalidKernelError, TuningFailedError, ValidationError

DENOM_FLOOR = 1e-300


def rbf_kernel(x, y, eps):
    """Radial Gaussian kernel exp(-||x - y||^2 / eps^2) on data points."""
    if eps <= 0:
        raise ValidationError("bandwidth must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (eps * eps))


def vb_kernel(x, y, eps, rho_x, rho_y):
    """Variable-bandwidth Gaussian exp(-||x-y||^2 / (eps^2 rho(x) rho(y)))."""
    if eps <= 0 or rho_x <= 0 or rho_y <= 0:
        raise ValidationError("bandwidth and rho values must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (eps * eps * rho_x * rho_y))


def pairwise_sqdist(A, B=None):
    """Squared Euclidean distance matrix via one GEMM.

    The symmetric case is symmetrized explicitly and clamped at zero to
    remove roundoff artifacts of the norm-expansion formula.
    """
    A = np.asarray(A, dtype=np.float64)
    na = np.einsum("ij,ij->i", A, A)
    if B is None:
        D = na[:, None] + na[None, :] - 2.0 * (A @ A.T)
        D = 0.5 * (D + D.T)
        np.maximum(D, 0.0, out=D)
        np.fill_diagonal(D, 0.0)
        return D
    B = np.asarray(B, dtype=np.float64)
    nb = np.einsum("ij,ij->i", B, B)
    D = na[:, None] + nb[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D


def default_eps_grid():
    """Dyadic bandwidth grid 2^-20 .. 2^10, four candidates per octave."""
    k = np.arange(-80, 41)
    return 2.0 ** (k / 4.0)


class TuningResult:
    def __init__(self, eps_star, m_nu, eps_grid, s_values, slopes):
        self.eps_star = float(eps_star)
        self.m_nu = float(m_nu)
        self.eps_grid = eps_grid
        self.s_values = s_values
        self.slopes = slopes

    def __iter__(self):
        return iter((self.eps_star, self.m_nu))

    def __repr__(self):
        return "TuningResult(eps_star=%g, m_nu=%g)" % (self.eps_star, self.m_nu)


def tune_bandwidth(dataset, eps_grid=None, rho=None, sqdist=None):
    """Pick a kernel bandwidth from the log-log slope of the kernel sum.

    S(eps) is the mean of all pairwise kernel values. Its slope with
    respect to log(eps^2) (centered differences on the log grid) peaks in
    the scaling region; the bandwidth at the peak is returned together
    with the dimension estimate m_nu = 2 * max slope. A rho vector turns
    the scan into a variable-bandwidth one.

    Returns a TuningResult that unpacks as (eps_star, m_nu).
    """
    data = dataset.data if hasattr(dataset, "data") else np.asarray(dataset, dtype=np.float64)
    if eps_grid is None:
        eps_grid = default_eps_grid()
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if eps_grid.size < 32:
        raise ValidationError("bandwidth grid needs at least 32 candidates")
    if np.any(eps_grid <= 0) or np.any(np.diff(eps_grid) <= 0):
        raise ValidationError("bandwidth grid must be positive and increasing")

    D = pairwise_sqdist(data) if sqdist is None else sqdist
    if np.max(D) == 0.0:
        raise TuningFailedError("all data points coincide; cannot tune bandwidth")
    if rho is not None:
        rho = np.asarray(rho, dtype=np.float64)
        D = D / (rho[:, None] * rho[None, :])

    n = D.shape[0]
    inv2 = 1.0 / (eps_grid * eps_grid)

    def partial(sl):
        block = D[sl]
        return np.array([np.exp(-t * block).sum() for t in inv2])

    sums = parallel.chunked_sum(partial, n)
    S = sums / (n * n)

    logS = np.log(S)
    logE2 = 2.0 * np.log(eps_grid)
    slopes = (logS[2:] - logS[:-2]) / (logE2[2:] - logE2[:-2])
    imax = int(np.argmax(slopes))
    m_nu = 2.0 * slopes[imax]
    if m_nu <= 1e-12:
        raise TuningFailedError("kernel sum has no scaling region on this grid")
    return TuningResult(eps_grid[imax + 1], m_nu, eps_grid, S, slopes)


class BandwidthFunction:
    """Self-tuning bandwidth rho(y) = (mean_m k_tilde(y, y_m))^(-1/m_nu).

    Holds the sample values and evaluates the same closed form at
    off-sample data points, including gradients.
    """

    def __init__(self, data, eps_tilde, m_nu, sqdist=None):
        if eps_tilde <= 0 or m_nu <= 0:
            raise ValidationError("eps_tilde and m_nu must be positive")
        self.data = np.asarray(data, dtype=np.float64)
        self.eps_tilde = float(eps_tilde)
        self.m_nu = float(m_nu)
        D = pairwise_sqdist(self.data) if sqdist is None else sqdist
        qt = np.exp(-D / (eps_tilde * eps_tilde)).mean(axis=1)
        self._check(qt)
        self.q_tilde = qt
        self.values = qt ** (-1.0 / m_nu)

    @staticmethod
    def _check(qt):
        if np.min(qt) < DENOM_FLOOR:
            raise InvalidKernelError("bandwidth kernel sum underflowed")

    def _cross_qtilde(self, Y):
        Dc = pairwise_sqdist(np.atleast_2d(Y), self.data)
        Kt = np.exp(-Dc / (self.eps_tilde**2))
        qt = Kt.mean(axis=1)
        self._check(qt)
        return qt, Kt

    def evaluate(self, Y):
        qt, _ = self._cross_qtilde(Y)
        return qt ** (-1.0 / self.m_nu)

    def rho_grad(self, Y):
        """Gradient of rho in data space at the rows of Y, shape (M, dim)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        qt, Kt = self._cross_qtilde(Y)
        n = self.data.shape[0]
        grad_qt = (-2.0 / self.eps_tilde**2) * (
            qt[:, None] * Y - (Kt @ self.data) / n
        )
        return (-1.0 / self.m_nu) * (qt ** (-1.0 / self.m_nu - 1.0))[:, None] * grad_qt


def bistochastic_normalize(K):
    """Normalize a positive symmetric kernel matrix into a symmetric
    Markov matrix.

    Two division passes (by the row means d and by the coupled sums q)
    followed by a Gram product give P with (1/N) P 1 = 1 up to roundoff
    and P symmetric positive semidefinite by construction.

    Returns (P, d, q).
    """
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValidationError("kernel matrix must be square")
    if np.min(K) <= 0.0:
        raise InvalidKernelError("kernel matrix must be entrywise positive")
    if np.max(np.abs(K - K.T)) > 1e-12 * np.max(K):
        raise InvalidKernelError("kernel matrix must be symmetric")

    d = K.mean(axis=1)
    if np.min(d) < DENOM_FLOOR:
        raise InvalidKernelError("kernel row sums underflowed")
    q = (K @ (1.0 / d)) / n
    if np.min(q) < DENOM_FLOOR:
        raise InvalidKernelError("second normalization pass underflowed")

    A = K / (d[:, None] * np.sqrt(q)[None, :])
    P = (A @ A.T) / n
    P = 0.5 * (P + P.T)
    return P, d, q


class KernelModel:
    """Fitted variable-bandwidth kernel over one dataset.

    Carries the tuned bandwidths, the dimension estimate, the bandwidth
    function values rho, and the bistochastic normalization vectors d and
    q, plus cached kernel/Markov matrices and off-sample evaluators.
    """

    def __init__(self, dataset, epsilon, epsilon_tilde, dim_estimate, bandwidth,
                 d_values, q_values, sqdist=None, kernel_mat=None, markov_mat=None):
        self.dataset = dataset
        self.epsilon = float(epsilon)
        self.epsilon_tilde = float(epsilon_tilde)
        self.dim_estimate = float(dim_estimate)
        self.bandwidth = bandwidth
        self.rho_values = bandwidth.values
        self.d_values = d_values
        self.q_values = q_values
        self._sqdist = sqdist
        self._K = kernel_mat
        self._P = markov_mat

    def sqdist(self):
        if self._sqdist is None:
            self._sqdist = pairwise_sqdist(self.dataset.data)
        return self._sqdist

    def kernel_matrix(self):
        if self._K is None:
            D = self.sqdist()
            rho = self.rho_values
            self._K = np.exp(-D / (self.epsilon**2 * rho[:, None] * rho[None, :]))
        return self._K

    def markov_matrix(self):
        if self._P is None:
            self._P, self.d_values, self.q_values = bistochastic_normalize(
                self.kernel_matrix()
            )
        return self._P

    def save(self, path):
        """Persist the fitted scalars and normalization vectors.

        The kernel and Markov matrices are not written; load rebuilds
        them lazily from the dataset, which is cheaper than disk at the
        sizes used here and keeps artifacts small.
        """
        import hashlib
        import json
        import os

        os.makedirs(path, exist_ok=True)
        digest = hashlib.sha256()
        for name, arr in (("d_values", self.d_values), ("q_values", self.q_values)):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            with open(os.path.join(path, name + ".bin"), "wb") as fh:
                fh.write(raw)
            digest.update(raw)
        meta = {
            "epsilon": self.epsilon,
            "epsilon_tilde": self.epsilon_tilde,
            "dim_estimate": self.dim_estimate,
            "n_samples": int(self.dataset.n_samples),
            "checksum": digest.hexdigest(),
        }
        with open(os.path.join(path, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, dataset):
        """Rebuild a fitted model against the dataset it was fitted on.

        The bandwidth function is recomputed from the stored scalars; it
        is a deterministic closed form of the data, so the values match
        the saved fit exactly.
        """
        import json
        import os

        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
        if int(meta["n_samples"]) != dataset.n_samples:
            raise ValidationError(
                "saved kernel model was fitted on %d samples, dataset has %d"
                % (meta["n_samples"], dataset.n_samples)
            )

        def read(name):
            with open(os.path.join(path, name + ".bin"), "rb") as fh:
                return np.frombuffer(fh.read(), dtype="<f8")

        bw = BandwidthFunction(dataset.data, meta["epsilon_tilde"], meta["dim_estimate"])
        return cls(
            dataset=dataset,
            epsilon=meta["epsilon"],
            epsilon_tilde=meta["epsilon_tilde"],
            dim_estimate=meta["dim_estimate"],
            bandwidth=bw,
            d_values=read("d_values"),
            q_values=read("q_values"),
        )

    def cross_kernel(self, X_states):
        """Variable-bandwidth kernel block k(x_i, sample_n) for off-sample
        states (rows of X_states)."""
        X = np.atleast_2d(np.asarray(X_states, dtype=np.float64))
        Y = self.dataset.system.embed(X)
        Dc = pairwise_sqdist(Y, self.dataset.data)
        rx = self.bandwidth.evaluate(Y)
        rho = self.rho_values
        return np.exp(-Dc / (self.epsilon**2 * rx[:, None] * rho[None, :]))

    def cross_markov(self, X_states):
        """Off-sample bistochastic kernel rows p(x_i, sample_n)."""
        kc = self.cross_kernel(X_states)
        dx = kc.mean(axis=1)
        if np.min(dx) < DENOM_FLOOR:
            raise InvalidKernelError("off-sample kernel row sum underflowed")
        n = self.dataset.n_samples
        left = kc / (dx[:, None] * self.q_values[None, :])
        right = self.kernel_matrix() / self.d_values[None, :]
        return (left @ right) / n


def fit_kernel_model(dataset, eps_grid=None):
    """Tune both bandwidths, build rho, and normalize the kernel.

    eps_tilde is tuned on the raw radial kernel first; its dimension
    estimate feeds the bandwidth function; eps is then tuned on the
    variable-bandwidth kernel.
    """
    D = pairwise_sqdist(dataset.data)
    raw = tune_bandwidth(dataset.data, eps_grid=eps_grid, sqdist=D)
    bw = BandwidthFunction(dataset.data, raw.eps_star, raw.m_nu, sqdist=D)
    vb = tune_bandwidth(dataset.data, eps_grid=eps_grid, rho=bw.values, sqdist=D)
    rho = bw.values
    K = np.exp(-D / (vb.eps_star**2 * rho[:, None] * rho[None, :]))
    P, d, q = bistochastic_normalize(K)
    model = KernelModel(
        dataset=dataset,
        epsilon=vb.eps_star,
        epsilon_tilde=raw.eps_star,
        dim_estimate=raw.m_nu,
        bandwidth=bw,
        d_values=d,
        q_values=q,
        sqdist=D,
        kernel_mat=K,
        markov_mat=P,
    )
    model.tuning_raw = raw
    model.tuning_vb = vb
    return model


def kernel_gradient(x, y, model, direction=None):
    """Exact gradient of the fitted kernel in its first slot.

    x and y are states; the chain rule runs through the system embedding,
    the squared distance, and the bandwidth function. With a direction
    vector v (state space) the directional derivative v . grad_x k(x, y)
    is returned instead.
    """
    sys = model.dataset.system
    x = np.asarray(x, dtype=np.float64)
    fx = sys.embed(x)
    fy = sys.embed(np.asarray(y, dtype=np.float64))
    J = sys.embedding_jacobian(x)
    rx = float(model.bandwidth.evaluate(fx[None, :])[0])
    ry = float(model.bandwidth.evaluate(fy[None, :])[0])
    diff = fx - fy
    d2 = float(diff @ diff)
    eps2 = model.epsilon**2
    k = math.exp(-d2 / (eps2 * rx * ry))
    grad_d2 = 2.0 * (J.T @ diff)
    grad_rho = J.T @ model.bandwidth.rho_grad(fx[None, :])[0]
    grad = k * (-grad_d2 / (eps2 * rx * ry) + d2 * grad_rho / (eps2 * rx * rx * ry))
    if direction is not None:
        return float(np.dot(np.asarray(direction, dtype=np.float64), grad))
    return grad


def directional_kernel_matrix(model, U):
    """All-pairs directional derivatives K'[n, l] = u_n . grad_x k(x_n, x_l).

    U holds the embedded velocities (data-space directions) at the
    samples. Assembled blockwise from the cached distance matrix; the
    arithmetic matches kernel_gradient up to roundoff.
    """
    ds = model.dataset
    Y = ds.data
    U = np.asarray(U, dtype=np.float64)
    n = ds.n_samples
    D = model.sqdist()
    K = model.kernel_matrix()
    et2 = model.epsilon_tilde**2
    eps2 = model.epsilon**2
    rho = model.rho_values
    m_nu = model.bandwidth.m_nu

    Kt = np.exp(-D / et2)
    qt = model.bandwidth.q_tilde
    s = np.einsum("ij,ij->i", U, Y)
    M = U @ Y.T
    # u . grad q_tilde at each sample, then through the rho power law
    w = (-2.0 / et2) * (s * qt - np.einsum("ij,ij->i", Kt, M) / n)
    g2 = (-1.0 / m_nu) * qt ** (-1.0 / m_nu - 1.0) * w

    out = np.empty_like(K)
    coef = (g2 / rho)[:, None]
    for sl in parallel.chunk_slices(n):
        G1 = 2.0 * (s[sl][:, None] - M[sl])
        out[sl] = (
            K[sl]
            * (-G1 + D[sl] * coef[sl])
            / (eps2 * rho[sl][:, None] * rho[None, :])
        )
    return out
