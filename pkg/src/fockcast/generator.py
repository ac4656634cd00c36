"""Galerkin matrices for the flow generator, the regularized generalized
eigenvalue problem, and assembly of the approximate Koopman eigensystem.

The generator acts on Markov eigenvectors by pushing the vector field
through the analytic gradient of the bistochastic kernel. Its Galerkin
matrix is antisymmetrized, compactified into the forms A (heat-smoothed)
and B (resolvent Gram), and the resulting pencil is solved by Cholesky
reduction to a Hermitian problem, so eigenvalues are purely imaginary by
construction. Frequencies come from inverting the resolvent-plane map,
eigenfunctions from xi = (z - V) v.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import embedded_velocity
from .errors import (
    BNotSPDError,
    InsufficientSpectrumError,
    UndefinedFrequencyError,
    ValidationError,
)
from .kernel import directional_kernel_matrix
from .semigroup import heat_multipliers


def antisymmetrize(M):
    return 0.5 * (M - M.T)


@dataclass(frozen=True)
class GeneratorMatrices:
    """Galerkin forms of the generator pencil: Vmat (antisymmetric), Amat
    (heat-smoothed, antisymmetric), Bmat (SPD), with their z and tau."""

    Vmat: np.ndarray
    Amat: np.ndarray
    Bmat: np.ndarray
    z: float
    tau: float


def generator_matrix(basis, model, system=None, return_raw=False):
    """Galerkin matrix of the generator in the Markov eigenbasis.

    Raw entries are (1/N) sum_n phi_i(x_n) (V phi_j)(x_n) where V phi_j
    is evaluated through the analytic directional derivative of the
    bistochastic kernel along the dynamical vector field. The returned
    matrix is antisymmetrized unless return_raw is set.
    """
    ds = model.dataset
    if system is None:
        system = ds.system
    n = ds.n_samples
    U = embedded_velocity(system, ds.states)
    Kp = directional_kernel_matrix(model, U)
    K = model.kernel_matrix()
    d = model.d_values
    q = model.q_values

    # directional derivative of the first normalization pass
    u_dot = Kp.mean(axis=1)
    T = Kp / d[:, None] - (u_dot / (d * d))[:, None] * K
    del Kp
    W = ((T / q[None, :]) @ (K / d[None, :])) / n
    del T
    raw = (basis.phi.T @ (W @ basis.phi)) / (n * n) / basis.lambdas[None, :]
    if return_raw:
        return raw
    return antisymmetrize(raw)


def assemble_A(Vmat, basis, tau):
    """Heat-smoothed generator form A = diag(m) V diag(m) with the
    half-time multipliers m_i = exp(-tau eta_i / 2), antisymmetrized."""
    m = heat_multipliers(basis, tau / 2.0)
    return antisymmetrize(m[:, None] * Vmat * m[None, :])


def assemble_B(Vmat, z):
    """Resolvent Gram form B = z^2 I + V^T V, symmetric positive definite."""
    if z <= 0:
        raise ValidationError("regularization z must be positive")
    B = z * z * np.eye(Vmat.shape[0]) + Vmat.T @ Vmat
    return 0.5 * (B + B.T)


@dataclass(frozen=True)
class GevpResult:
    """Retained half-spectrum of the pencil A c = i b B c.

    b_values: positive b, descending. coeffs: matching complex vectors,
    B-normalized. n_discarded: size of the near-zero cluster. residuals:
    relative residual per retained pair.
    """

    b_values: np.ndarray
    coeffs: np.ndarray
    n_discarded: int
    residuals: np.ndarray


def solve_gevp(Amat, Bmat):
    """Solve the pencil A c = i b B c by Cholesky reduction.

    B = L L^T turns the pencil into the real antisymmetric M = L^-1 A
    L^-T; the Hermitian eigenproblem for iM gives real b exactly. The
    reduction and the back-map run in extended precision because cond(B)
    grows like the inverse square of the regularization floor and would
    otherwise eat the residual budget of pairs living in that floor
    subspace. Pairs with |b| at or below 1e-10 times the spectral norm
    of A are treated as kernel modes and only counted. Relative
    residuals are evaluated in the same extended precision, since the
    float64 products A c and B c cancel heavily for near-floor pairs and
    their rounding noise alone would read as 1e-10. Pairs still above
    _REFINE_THRESHOLD after that get a bordered Newton polish against
    the original forms.
    """
    L = _chol_lower_ld(Bmat)
    X = _solve_lower_ld(L, Amat.astype(np.longdouble))
    M = _solve_lower_ld(L, X.T).T
    M = antisymmetrize(M).astype(np.float64)
    mu, U = np.linalg.eigh(1j * M)
    b = -mu  # eigh sorts mu ascending, so b comes out descending
    tol = 1e-10 * np.max(np.abs(mu)) if mu.size else 0.0
    n_discarded = int(np.sum(np.abs(b) <= tol))
    pos = b > tol
    b_pos = b[pos]
    Ut = L.T
    C = (
        _solve_upper_ld(Ut, U[:, pos].real.astype(np.longdouble))
        + 1j * _solve_upper_ld(Ut, U[:, pos].imag.astype(np.longdouble))
    ).astype(np.complex128)

    if b_pos.size:
        A_ld = Amat.astype(np.longdouble)
        B_ld = Bmat.astype(np.longdouble)
        _, _, residuals = _pencil_residual_parts(A_ld, B_ld, b_pos, C)
        for j in np.flatnonzero(residuals > _REFINE_THRESHOLD):
            b_j, c_j, r_j = _refine_pair(
                Amat, Bmat, A_ld, B_ld, float(b_pos[j]), C[:, j]
            )
            if r_j < residuals[j]:
                b_pos[j] = b_j
                C[:, j] = c_j
                residuals[j] = r_j
    else:
        residuals = np.zeros(0)
    return GevpResult(
        b_values=b_pos, coeffs=C, n_discarded=n_discarded, residuals=residuals
    )


_REFINE_THRESHOLD = 5e-11


def _pencil_residual_parts(A_ld, B_ld, b, C):
    """Columnwise R = A C - i b B C, B C, and relative residuals for the
    pencil, evaluated in extended precision through split real and
    imaginary parts. R and B C come back as complex128."""
    Cr = C.real.astype(np.longdouble)
    Ci = C.imag.astype(np.longdouble)
    bl = np.asarray(b, dtype=np.longdouble)
    BCr = B_ld @ Cr
    BCi = B_ld @ Ci
    Rr = A_ld @ Cr + bl[None, :] * BCi
    Ri = A_ld @ Ci - bl[None, :] * BCr
    num = np.sqrt(np.sum(Rr * Rr, axis=0) + np.sum(Ri * Ri, axis=0))
    den = np.sqrt(np.sum(BCr * BCr, axis=0) + np.sum(BCi * BCi, axis=0))
    rel = (num / den).astype(np.float64)
    R = (Rr + 1j * Ri).astype(np.complex128)
    BC = (BCr + 1j * BCi).astype(np.complex128)
    return R, BC, rel


def _refine_pair(Amat, Bmat, A_ld, B_ld, b, c, sweeps=2):
    """Newton-polish one eigenpair of the pencil A c = i b B c.

    Each sweep solves the bordered correction system
    [[A - ibB, -iBc], [(Bc)^H, 0]] [dc; db] = [-r; 0], with r evaluated
    in extended precision, and keeps b real, which is exact for this
    pencil since the reduced problem is Hermitian. Returns the best
    (b, c, residual) seen, with c B-normalized, so a stalled or singular
    bordered solve can never make the pair worse; a pair already at its
    float64 representation floor simply comes back unchanged.
    """
    n = Amat.shape[0]
    best = None
    for k in range(sweeps + 1):
        scale = math.sqrt(float(np.real(np.vdot(c, Bmat @ c))))
        if not np.isfinite(scale) or scale <= 0:
            break
        c = c / scale
        R, BC, rel = _pencil_residual_parts(A_ld, B_ld, np.array([b]), c[:, None])
        resid = float(rel[0])
        if best is None or resid < best[2]:
            best = (b, c.copy(), resid)
        if k == sweeps:
            break
        J = np.empty((n + 1, n + 1), dtype=np.complex128)
        J[:n, :n] = Amat - 1j * b * Bmat
        J[:n, n] = -1j * BC[:, 0]
        J[n, :n] = np.conj(BC[:, 0])
        J[n, n] = 0.0
        rhs = np.zeros(n + 1, dtype=np.complex128)
        rhs[:n] = -R[:, 0]
        try:
            delta = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        c = c + delta[:n]
        b = b + float(np.real(delta[n]))
    if best is None:
        return b, c, math.inf
    return best


def _chol_lower_ld(B):
    """Lower Cholesky factor in extended precision."""
    C = np.asarray(B, dtype=np.longdouble)
    n = C.shape[0]
    L = np.zeros_like(C)
    for j in range(n):
        s = C[j, j] - L[j, :j] @ L[j, :j]
        if s <= 0:
            raise BNotSPDError("B form is not positive definite")
        L[j, j] = np.sqrt(s)
        if j + 1 < n:
            L[j + 1 :, j] = (C[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def _solve_lower_ld(L, B):
    """Forward substitution X = L^-1 B in extended precision."""
    X = np.empty((L.shape[0], B.shape[1]), dtype=np.longdouble)
    for i in range(L.shape[0]):
        X[i] = (B[i] - L[i, :i] @ X[:i]) / L[i, i]
    return X


def _solve_upper_ld(Ut, B):
    """Back substitution X = Ut^-1 B for upper triangular Ut."""
    n = Ut.shape[0]
    X = np.empty((n, B.shape[1]), dtype=np.longdouble)
    for i in range(n - 1, -1, -1):
        X[i] = (B[i] - Ut[i, i + 1 :] @ X[i + 1 :]) / Ut[i, i]
    return X


def frequency_from_beta(b, z):
    """Frequency recovered from a pencil eigenvalue ib.

    omega = (1 + sqrt(max(0, 1 - 4 z^2 b^2))) / (2 b); the clamp at zero
    extends the inverse past the resolvent-range boundary, where
    frequencies saturate instead of extrapolating.
    """
    if z <= 0:
        raise ValidationError("regularization z must be positive")
    if b == 0:
        raise UndefinedFrequencyError(
            "b = 0 carries no frequency; only the constant mode sits at 0"
        )
    disc = 1.0 - 4.0 * z * z * b * b
    s = math.sqrt(disc) if disc > 0 else 0.0
    return (1.0 + s) / (2.0 * b)


@dataclass(frozen=True)
class KoopmanEigensystem:
    """Approximate Koopman eigenpairs, mirror-symmetric column layout.

    Columns run j = -l', .., l' (2l'+1 total) with the constant mode in
    the center: omegas mirror to exact negatives, xi columns to exact
    conjugates, and pair_map sends each column index to its mirror.
    zeta_coeffs hold the eigenvector coefficients in the Markov
    eigenbasis; smoothed evaluation weights them by half-time heat
    multipliers. energies lists the per-pair Dirichlet energies in
    retention order (nondecreasing).
    """

    omegas: np.ndarray
    xi: np.ndarray
    zeta_coeffs: np.ndarray
    energies: np.ndarray
    pair_map: np.ndarray
    z: float
    tau: float

    @property
    def lprime(self):
        return (self.omegas.size - 1) // 2

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.omegas.astype("<f8").tofile(directory / "omegas.bin")
        self.xi.astype("<c16").tofile(directory / "xi.bin")
        self.zeta_coeffs.astype("<c16").tofile(directory / "zeta_coeffs.bin")
        self.energies.astype("<f8").tofile(directory / "energies.bin")
        self.pair_map.astype("<i8").tofile(directory / "pair_map.bin")
        meta = {
            "tau": self.tau,
            "z": self.z,
            "l": int(self.zeta_coeffs.shape[0]),
            "lprime": self.lprime,
            "n_samples": int(self.xi.shape[0]),
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        total = 2 * meta["lprime"] + 1
        n, l = meta["n_samples"], meta["l"]
        return cls(
            omegas=np.fromfile(directory / "omegas.bin", dtype="<f8"),
            xi=np.fromfile(directory / "xi.bin", dtype="<c16").reshape(n, total),
            zeta_coeffs=np.fromfile(
                directory / "zeta_coeffs.bin", dtype="<c16"
            ).reshape(l, total),
            energies=np.fromfile(directory / "energies.bin", dtype="<f8"),
            pair_map=np.fromfile(directory / "pair_map.bin", dtype="<i8"),
            z=meta["z"],
            tau=meta["tau"],
        )


def assemble_eigensystem(gevp, gen, basis, lprime):
    """Build the Koopman eigensystem from the retained pencil pairs.

    Each pair gives xi = (z - V) c in the Markov eigenbasis, normalized
    to unit norm under the sampling measure and phase-fixed so the
    largest-modulus sample entry is real positive (ties to the lowest
    index). Pairs are ranked by Dirichlet energy ascending and the l'
    smoothest are kept; mirror columns are exact conjugates.
    """
    k = gevp.b_values.size
    if k < lprime:
        raise InsufficientSpectrumError(
            "need %d pairs above the zero tolerance, have %d" % (lprime, k)
        )
    z = gen.z
    C = gevp.coeffs
    BC = z * C - gen.Vmat @ C
    XI = basis.phi @ BC
    n = basis.phi.shape[0]

    norms = np.linalg.norm(XI, axis=0) / math.sqrt(n)
    BC = BC / norms[None, :]
    XI = XI / norms[None, :]
    lead = np.argmax(np.abs(XI), axis=0)
    anchor = XI[lead, np.arange(k)]
    phase = anchor / np.abs(anchor)
    BC = BC / phase[None, :]
    XI = XI / phase[None, :]

    energies = np.sum(np.abs(BC) ** 2 / basis.lambdas[:, None], axis=0) - 1.0
    order = np.lexsort((np.arange(k), energies))[:lprime]

    total = 2 * lprime + 1
    omegas = np.zeros(total)
    xi = np.empty((n, total), dtype=np.complex128)
    zc = np.zeros((basis.l, total), dtype=np.complex128)
    xi[:, lprime] = 1.0
    zc[0, lprime] = 1.0
    for r, idx in enumerate(order):
        w = frequency_from_beta(gevp.b_values[idx], z)
        hi = lprime + 1 + r
        lo = lprime - 1 - r
        omegas[hi] = w
        omegas[lo] = -w
        xi[:, hi] = XI[:, idx]
        xi[:, lo] = np.conj(XI[:, idx])
        zc[:, hi] = BC[:, idx]
        zc[:, lo] = np.conj(BC[:, idx])
    pair_map = (total - 1) - np.arange(total)
    return KoopmanEigensystem(
        omegas=omegas,
        xi=xi,
        zeta_coeffs=zc,
        energies=energies[order],
        pair_map=pair_map,
        z=z,
        tau=gen.tau,
    )
