"""Eigenbasis of the bistochastic Markov operator and heat-semigroup
spectral multipliers.

The Markov operator acts on sample vectors as (1/N) P f. Its dense
symmetric eigendecomposition yields an orthonormal basis under the
sampling measure; rescaled inverse eigenvalues eta_j drive the heat
multipliers exp(-tau * eta_j), which realize both the smoothing operator
and the RKHS change of norm as diagonal maps in this basis.
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse.linalg

from .errors import NormalizationFailedError, ValidationError

LAMBDA_FLOOR = 1e-12
DENSE_MAX_N = 10_000


@dataclass(frozen=True)
class SemigroupBasis:
    """Truncated eigenbasis of the Markov operator.

    lambdas: eigenvalues, descending, lambdas[0] == 1.
    etas: rescaled inverse eigenvalues, etas[0] == 0, etas[1] == 1.
    phi: N x l matrix of eigenvectors with unit norm under the sampling
         measure (columns have squared mean 1).
    l: number of retained modes.
    """

    lambdas: np.ndarray
    etas: np.ndarray
    phi: np.ndarray
    l: int

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in (
            ("lambdas", self.lambdas),
            ("etas", self.etas),
            ("phi", self.phi),
        ):
            arr.astype("<f8").tofile(directory / (name + ".bin"))
        meta = {"l": self.l, "n_samples": int(self.phi.shape[0])}
        (directory / "meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        l, n = meta["l"], meta["n_samples"]
        lambdas = np.fromfile(directory / "lambdas.bin", dtype="<f8")
        etas = np.fromfile(directory / "etas.bin", dtype="<f8")
        phi = np.fromfile(directory / "phi.bin", dtype="<f8").reshape(n, l)
        return cls(lambdas=lambdas, etas=etas, phi=phi, l=l)


def eig_markov(P, l, method="auto"):
    """Top-l eigenpairs of the Markov operator (1/N) P.

    Eigenvectors are scaled so each column has unit norm under the
    sampling measure, sign-fixed (first entry above 1e-8 in modulus made
    positive), and the constant mode is snapped to exact ones with
    eigenvalue 1. Modes with eigenvalues at or below 1e-12 are dropped
    with a warning.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValidationError("Markov matrix must be square")
    if not 1 <= l <= n:
        raise ValidationError("truncation l must lie in [1, N]")

    G = P / n
    if method not in ("auto", "dense", "iterative"):
        raise ValidationError("unknown eigensolver method %r" % (method,))
    use_dense = method == "dense" or (method == "auto" and n <= DENSE_MAX_N) or l >= n
    if use_dense:
        vals, vecs = np.linalg.eigh(G)
        vals = vals[::-1][:l]
        vecs = vecs[:, ::-1][:, :l]
    else:
        v0 = np.full(n, 1.0 / np.sqrt(n))
        vals, vecs = scipy.sparse.linalg.eigsh(G, k=l, which="LA", v0=v0)
        order = np.argsort(vals)[::-1]
        vals = vals[order]
        vecs = vecs[:, order]

    if abs(vals[0] - 1.0) > 1e-8:
        raise NormalizationFailedError(
            "top Markov eigenvalue %.3e is not 1" % vals[0]
        )

    keep = vals > LAMBDA_FLOOR
    if not np.all(keep):
        warnings.warn(
            "dropping %d modes with eigenvalues at or below %g"
            % (int(np.sum(~keep)), LAMBDA_FLOOR)
        )
        vals = vals[keep]
        vecs = vecs[:, keep]

    phi = vecs * np.sqrt(n)
    for j in range(phi.shape[1]):
        col = phi[:, j]
        big = np.abs(col) > 1e-8
        if np.any(big) and col[big][0] < 0:
            phi[:, j] = -col
    vals = vals.copy()
    vals[0] = 1.0
    phi[:, 0] = 1.0

    etas = np.zeros_like(vals)
    if vals.size > 1:
        scale = 1.0 / vals[1] - 1.0
        etas[1:] = (1.0 / vals[1:] - 1.0) / scale
    return SemigroupBasis(lambdas=vals, etas=etas, phi=phi, l=int(vals.size))


def heat_multipliers(basis, tau):
    """Spectral multipliers exp(-tau * eta_j) of the heat semigroup."""
    if tau < 0:
        raise ValidationError("heat time tau must be nonnegative")
    return np.exp(-tau * basis.etas)


def nystrom_eval(basis, model, X_states):
    """Eigenvector values at off-sample states, rows of an (M, l) matrix.

    phi_j(x) = (1/(lambda_j N)) sum_n p(x, x_n) phi_j(x_n) with the
    off-sample bistochastic kernel row p(x, .).
    """
    pm = model.cross_markov(X_states)
    n = basis.phi.shape[0]
    return (pm @ basis.phi) / (n * basis.lambdas[None, :])


def rkhs_basis_eval(basis, model, tau, x, j):
    """One smoothed basis value psi_{j,tau}(x) = exp(-tau eta_j / 2) phi_j(x)."""
    x = np.asarray(x, dtype=np.float64)
    val = nystrom_eval(basis, model, x[None, :])[0, j]
    return float(np.exp(-tau * basis.etas[j] / 2.0) * val)


def dirichlet_energy(coefficients, basis):
    """Roughness of a unit-norm function given by phi-basis coefficients.

    Computes sum_j |c_j|^2 / lambda_j - 1, which is zero exactly for the
    constant mode and grows with spectral depth.
    """
    c = np.asarray(coefficients)
    return float(np.sum(np.abs(c) ** 2 / basis.lambdas) - 1.0)


def apply_smoother(basis, tau, coefficients):
    """Multiply phi-basis coefficients by the heat multipliers at time tau."""
    mult = heat_multipliers(basis, tau)
    c = np.asarray(coefficients)
    if c.ndim == 1:
        return mult * c
    return mult[:, None] * c
