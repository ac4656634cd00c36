"""Weighted symmetric tensor predictor on the selected spectral modes.

The pieces, in dependency order: weight families and their
subconvolutivity check, a small exact inner product used as an oracle
anchor, enumeration of multi-indices over 2d+1 mode slots, selection of
the d spectral pairs that carry the observable, kernel smoothing of the
eigenfunctions, the moment tables, and finally the predictor itself
with two algebraically identical evaluation paths.

Conventions. Mode slots are laid out i = -d, .., d with the constant
mode in the center, matching the eigensystem column layout. Slot i > 0
holds the i-th selected pair in selection order and slot -i its
conjugate. All sample averages use the empirical measure (1/N) sum_n.
"""

import math
from dataclasses import dataclass, field
from itertools import chain, combinations_with_replacement, permutations

import numpy as np

from .errors import (
    DenominatorUnderflowError,
    InsufficientSpectrumError,
    ValidationError,
)
from .kernel import pairwise_sqdist
from .semigroup import heat_multipliers, nystrom_eval

# row-block width for the smoothing kernel and the moment products;
# fixed so repeated runs accumulate in the same order
CHUNK_ROWS = 1024
MOMENT_CHUNK = 4096

# amplitudes below this fraction of the observable's rms norm count as
# zero overlap, so ranking falls through to the energy tie-breaker
AMPLITUDE_SNAP = 1e-9

FLOOR_FRACTION = 1e-12
EXPONENT_CELL_LIMIT = 50_000_000


@dataclass(frozen=True)
class WeightFamily:
    """Subexponential weight sequence w(n) = exp(sigma_w * n**p).

    The weights define the symmetric-space norms in which the predictor
    is analyzed. They never enter the computed predictions: numerator
    and denominator rescale identically, so every factor cancels.
    """

    sigma_w: float
    p: float
    kind: str = "subexponential"

    def __post_init__(self):
        if self.kind != "subexponential":
            raise ValidationError(f"unknown weight family kind {self.kind!r}")
        if not (self.sigma_w > 0.0):
            raise ValidationError("weight rate sigma_w must be positive")
        if not (0.0 < self.p < 1.0):
            raise ValidationError("weight exponent p must lie in (0, 1)")

    def __call__(self, n):
        exponent = self.sigma_w * np.asarray(n, dtype=np.float64) ** self.p
        out = np.exp(exponent)
        return float(out) if np.isscalar(n) else out


def check_subconvolutive(weights, n_max, c_bound=None):
    """Max over n <= n_max of the convolution ratio of u = w**-2.

    The ratio (u * u)(n) / u(n) measures how far the weights are from
    submultiplicative behavior under symmetric products; bounded ratios
    keep the weighted algebra closed. Pass c_bound to turn the check
    into a hard gate.
    """
    if n_max < 0:
        raise ValidationError("n_max must be nonnegative")
    if isinstance(weights, WeightFamily):
        w = weights(np.arange(n_max + 1))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] < n_max + 1:
            raise ValidationError("weight array shorter than n_max + 1")
        w = w[: n_max + 1]
    if np.any(w <= 0.0):
        raise ValidationError("weights must be positive")
    u = w**-2.0
    ratio = np.convolve(u, u)[: n_max + 1] / u
    worst = float(ratio.max())
    if c_bound is not None and worst > c_bound:
        raise ValidationError(
            f"subconvolutivity ratio {worst:.6g} exceeds bound {c_bound:.6g}"
        )
    return worst


def fock_inner_product_small(fs, gs, weights):
    """Weighted symmetric inner product of two degree-n tensors, n <= 4.

    Equals w(n)**2 / n! times the permanent of the Gram matrix
    G[i, j] = <fs[i], gs[j]>. Degree 0 takes two scalars. Intended as a
    reference implementation for small degrees, not a fast path.
    """
    if np.isscalar(fs) or np.ndim(fs) == 0:
        if not (np.isscalar(gs) or np.ndim(gs) == 0):
            raise ValidationError("degree-zero inputs must both be scalars")
        return complex(np.conj(fs) * gs) * weights(0) ** 2
    n = len(fs)
    if n != len(gs):
        raise ValidationError("factor lists must have equal length")
    if n > 4:
        raise ValidationError("small inner product only covers degree <= 4")
    gram = np.array([[np.vdot(f, g) for g in gs] for f in fs])
    perm = 0.0 + 0.0j
    for sig in permutations(range(n)):
        term = 1.0 + 0.0j
        for i, j in enumerate(sig):
            term *= gram[i, j]
        perm += term
    return weights(n) ** 2 / math.factorial(n) * perm


@dataclass(frozen=True)
class MultiIndexTable:
    """All multi-indices of total degree m over 2d+1 mode slots.

    positions stores, per index, the m slot numbers in 0..2d it draws
    from (nondecreasing); the exponent tuple is the occupancy count of
    each slot. Rows are ordered by ascending lexicographic exponent
    tuple. multinomials holds m! over the product of slot factorials.
    """

    d: int
    m: int
    positions: np.ndarray
    multinomials: np.ndarray

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def n_slots(self):
        return 2 * self.d + 1

    def exponents(self):
        """Materialize the (count, 2d+1) exponent matrix. Small tables only."""
        cells = self.count * self.n_slots
        if cells > EXPONENT_CELL_LIMIT:
            raise ValidationError(
                f"exponent matrix would hold {cells} cells; "
                "work from positions instead"
            )
        out = np.zeros((self.count, self.n_slots), dtype=np.int64)
        if self.m > 0:
            np.add.at(
                out,
                (np.repeat(np.arange(self.count), self.m), self.positions.ravel()),
                1,
            )
        return out


def enumerate_multi_indices(d, m):
    """Build the degree-m multi-index table over 2d+1 slots."""
    if d < 1 or m < 0:
        raise ValidationError("need d >= 1 and m >= 0")
    if m > 20:
        raise ValidationError("degree m > 20 overflows int64 multinomials")
    slots = 2 * d + 1
    count = math.comb(m + 2 * d, 2 * d)
    if count > np.iinfo(np.int64).max:
        raise ValidationError(
            f"multi-index table with {count} entries overflows int64"
        )
    pos_dtype = np.int16 if slots <= np.iinfo(np.int16).max else np.int32
    if m == 0:
        positions = np.empty((1, 0), dtype=pos_dtype)
        multinomials = np.ones(1, dtype=np.int64)
        return MultiIndexTable(d=d, m=m, positions=positions, multinomials=multinomials)
    flat = np.fromiter(
        chain.from_iterable(combinations_with_replacement(range(slots), m)),
        dtype=pos_dtype,
        count=count * m,
    )
    # combinations come out in descending exponent order; flip for
    # ascending lexicographic layout
    positions = np.ascontiguousarray(flat.reshape(count, m)[::-1])
    denom = np.ones(count, dtype=np.int64)
    run = np.ones(count, dtype=np.int64)
    for k in range(1, m):
        same = positions[:, k] == positions[:, k - 1]
        run = np.where(same, run + 1, 1)
        denom *= run
    multinomials = math.factorial(m) // denom
    return MultiIndexTable(d=d, m=m, positions=positions, multinomials=multinomials)


def select_modes(eigensystem, observable_values, d):
    """Pick the d eigenpairs carrying the observable, plus the constant.

    Pairs are ranked by the modulus of the empirical inner product of
    the eigenfunction with the observable; near-zero amplitudes snap to
    zero so ties resolve by ascending pair energy, then pair index.
    Returns pair numbers with a leading 0 for the constant mode.
    """
    f = np.asarray(observable_values, dtype=np.float64)
    lp = eigensystem.lprime
    n = eigensystem.xi.shape[0]
    if f.shape != (n,):
        raise ValidationError("observable length does not match the samples")
    if d < 1:
        raise ValidationError("need at least one pair")
    if d > lp:
        raise InsufficientSpectrumError(
            f"requested {d} pairs but only {lp} are retained"
        )
    amps = np.abs(np.conj(eigensystem.xi[:, lp + 1 :]).T @ f) / n
    rms = np.sqrt(np.mean(f**2))
    amps = np.where(amps <= AMPLITUDE_SNAP * rms, 0.0, amps)
    order = np.lexsort((np.arange(lp), eigensystem.energies, -amps))
    pairs = order[:d] + 1
    return np.concatenate(([0], pairs)).astype(np.int64)


def smoothed_eigenfunction_products(eigensystem, dataset, epsilon, modes):
    """Plain-Gaussian smoothing of the selected eigenfunctions at samples.

    Column layout i = -d, .., d; the center column smooths the constant
    and stays real, negative columns are exact conjugates.
    """
    if epsilon <= 0.0:
        raise ValidationError("smoothing bandwidth must be positive")
    modes = np.asarray(modes)
    pairs = modes[modes > 0]
    lp = eigensystem.lprime
    n = dataset.n_samples
    if eigensystem.xi.shape[0] != n:
        raise ValidationError("eigensystem and dataset sample counts differ")
    y = dataset.data
    xi_sel = eigensystem.xi[:, lp + pairs]
    d_sel = pairs.shape[0]
    out = np.empty((n, 2 * d_sel + 1), dtype=np.complex128)
    inv = 1.0 / epsilon**2
    for start in range(0, n, CHUNK_ROWS):
        sl = slice(start, min(start + CHUNK_ROWS, n))
        kblk = np.exp(-inv * pairwise_sqdist(y[sl], y))
        out[sl, d_sel] = kblk.mean(axis=1)
        out[sl, d_sel + 1 :] = (kblk @ xi_sel) / n
    for i in range(1, d_sel + 1):
        out[:, d_sel - i] = np.conj(out[:, d_sel + i])
    return out


def compute_moments(f_values, rho_values, table, chunk_size=MOMENT_CHUNK):
    """Empirical moments of the smoothed products against f and against 1.

    Entry j holds (1/N) sum_n f(x_n) prod_i rho_i(x_n)**j_i in the
    table's row order, together with the same average at f = 1. Chunked
    over table rows; each moment is accumulated in one pass, so the
    chunk layout never changes the result beyond roundoff.
    """
    f = np.asarray(f_values, dtype=np.float64)
    rho = np.asarray(rho_values)
    if rho.ndim != 2 or f.shape != (rho.shape[0],):
        raise ValidationError("observable and product arrays do not align")
    if rho.shape[1] != table.n_slots:
        raise ValidationError("product columns do not match the table slots")
    if chunk_size < 1:
        raise ValidationError("chunk_size must be positive")
    n = f.shape[0]
    moments_g = np.empty(table.count, dtype=np.complex128)
    moments_h = np.empty(table.count, dtype=np.complex128)
    for start in range(0, table.count, chunk_size):
        sl = slice(start, min(start + chunk_size, table.count))
        pos = table.positions[sl]
        prod = np.ones((n, pos.shape[0]), dtype=np.complex128)
        for k in range(table.m):
            prod *= rho[:, pos[:, k]]
        moments_g[sl] = (f @ prod) / n
        moments_h[sl] = prod.mean(axis=0)
    return moments_g, moments_h


def gamma_values(eigensystem, basis, model, sigma, modes, states=None):
    """Heat-smoothed eigenfunction values used as rotation amplitudes.

    gamma_i carries the full multiplier at time sigma + tau/2 applied to
    the eigenvector coefficients, evaluated at the samples (states None)
    or at arbitrary states through the off-sample extension. The center
    column is exactly one and negative columns are exact conjugates.
    """
    if sigma < 0.0:
        raise ValidationError("smoothing time sigma must be nonnegative")
    modes = np.asarray(modes)
    pairs = modes[modes > 0]
    lp = eigensystem.lprime
    mult = heat_multipliers(basis, sigma + 0.5 * eigensystem.tau)
    coef = mult[:, None] * eigensystem.zeta_coeffs[:, lp + pairs]
    phi = basis.phi if states is None else nystrom_eval(basis, model, states)
    g_pos = phi @ coef
    d_sel = pairs.shape[0]
    out = np.empty((phi.shape[0], 2 * d_sel + 1), dtype=np.complex128)
    out[:, d_sel] = 1.0
    out[:, d_sel + 1 :] = g_pos
    for i in range(1, d_sel + 1):
        out[:, d_sel - i] = np.conj(out[:, d_sel + i])
    return out


@dataclass(frozen=True)
class FockPredictor:
    """Everything needed to evaluate the symmetric-tensor forecast.

    Slot i > 0 is the i-th entry of mode_indices past the leading 0;
    omegas_sel, gamma_samples, and rho_samples share that layout.
    moments_g and moments_h follow the table's row order. weights is
    bookkeeping only; see WeightFamily.
    """

    mode_indices: np.ndarray
    omegas_sel: np.ndarray
    table: MultiIndexTable
    moments_g: np.ndarray
    moments_h: np.ndarray
    denominator_floor: float
    gamma_samples: np.ndarray
    rho_samples: np.ndarray
    f_samples: np.ndarray
    sigma: float
    epsilon: float
    eigensystem: object = field(repr=False)
    basis: object = field(repr=False)
    model: object = field(repr=False)
    weights: WeightFamily | None = None

    @property
    def d(self):
        return len(self.mode_indices) - 1

    @property
    def m(self):
        return self.table.m

    def gamma_at(self, states=None):
        return gamma_values(
            self.eigensystem, self.basis, self.model, self.sigma,
            self.mode_indices, states=states,
        )


def _rotation_rows(predictor, gamma_rows, t):
    """Per-slot contraction factors conj(gamma_i(x) e^{i omega_i t}).

    Each smoothed product rho_i pairs with the conjugate of the rotated
    torus coordinate; at t = 0 the slot sum then acts as a spectral
    approximation of the identity peaked at the evaluation state, and
    for t > 0 the peak tracks the flow.
    """
    return np.conj(gamma_rows) * np.exp(-1j * predictor.omegas_sel * t)


def _real_sum_factors(predictor, w_rows):
    """Split the conjugate-symmetric sum over slots into real factors.

    sum_i w_i rho_i = rho_0 + 2 sum_{i>0} Re(w_i rho_i), expressed as a
    real matrix product between per-state coefficients and per-sample
    columns.
    """
    d = predictor.d
    u = np.concatenate(
        [
            np.ones((w_rows.shape[0], 1)),
            2.0 * w_rows[:, d + 1 :].real,
            -2.0 * w_rows[:, d + 1 :].imag,
        ],
        axis=1,
    )
    r = np.concatenate(
        [
            predictor.rho_samples[:, d : d + 1].real,
            predictor.rho_samples[:, d + 1 :].real,
            predictor.rho_samples[:, d + 1 :].imag,
        ],
        axis=1,
    )
    return u, r


def _collapsed_ratio(predictor, f, u, r):
    s = u @ r.T
    if predictor.m != 1:
        s = s**predictor.m
    num = (s @ f) / f.shape[0]
    den = s.mean(axis=1)
    if np.min(np.abs(den)) < predictor.denominator_floor:
        raise DenominatorUnderflowError(
            "forecast denominator fell below the stability floor"
        )
    return num / den


def build_fock_predictor(
    eigensystem, basis, model, sigma, epsilon, d, m,
    weights=None, modes=None, moments=None,
):
    """Assemble the predictor from a fitted spectral decomposition.

    modes and moments accept previously computed values (for cache
    replay); when omitted they are derived from the model's dataset.
    The denominator floor is pinned to the largest magnitude the
    denominator attains over the training samples at t = 0.
    """
    dataset = model.dataset
    f = dataset.observable_values
    if modes is None:
        modes = select_modes(eigensystem, f, d)
    else:
        modes = np.asarray(modes, dtype=np.int64)
        if modes.shape != (d + 1,) or modes[0] != 0:
            raise ValidationError("mode list must hold a leading 0 and d pairs")
        if np.any(modes[1:] < 1) or np.any(modes[1:] > eigensystem.lprime):
            raise ValidationError("mode list names pairs outside the spectrum")
    lp = eigensystem.lprime
    pairs = modes[1:]
    rho = smoothed_eigenfunction_products(eigensystem, dataset, epsilon, modes)
    table = enumerate_multi_indices(d, m)
    if moments is None:
        moments_g, moments_h = compute_moments(f, rho, table)
    else:
        moments_g = np.asarray(moments[0], dtype=np.complex128)
        moments_h = np.asarray(moments[1], dtype=np.complex128)
        if moments_g.shape != (table.count,) or moments_h.shape != (table.count,):
            raise ValidationError("moment arrays do not match the table size")
    om_pos = eigensystem.omegas[lp + pairs]
    omegas_sel = np.concatenate((-om_pos[::-1], [0.0], om_pos))
    gamma_samples = gamma_values(eigensystem, basis, model, sigma, modes)
    predictor = FockPredictor(
        mode_indices=modes,
        omegas_sel=omegas_sel,
        table=table,
        moments_g=moments_g,
        moments_h=moments_h,
        denominator_floor=0.0,
        gamma_samples=gamma_samples,
        rho_samples=rho,
        f_samples=np.asarray(f, dtype=np.float64),
        sigma=float(sigma),
        epsilon=float(epsilon),
        eigensystem=eigensystem,
        basis=basis,
        model=model,
        weights=weights,
    )
    u, r = _real_sum_factors(predictor, gamma_samples)
    s = u @ r.T
    if m != 1:
        s = s**m
    floor = FLOOR_FRACTION * float(np.max(np.abs(s.mean(axis=1))))
    object.__setattr__(predictor, "denominator_floor", floor)
    return predictor


def fock_numerator_denominator(predictor, x, t):
    """Complex numerator and denominator of the moment-path forecast."""
    x = np.asarray(x, dtype=np.float64)
    gamma_row = predictor.gamma_at(x[None, :])[0]
    w_full = _rotation_rows(predictor, gamma_row[None, :], t)[0]
    tab = predictor.table
    prods = np.prod(w_full[tab.positions], axis=1)
    weights = tab.multinomials * prods
    num = np.sum(weights * predictor.moments_g)
    den = np.sum(weights * predictor.moments_h)
    return num, den


def predict_fock(predictor, x, t):
    """Forecast at state x and lead time t through the moment table."""
    num, den = fock_numerator_denominator(predictor, x, t)
    if abs(den) < predictor.denominator_floor:
        raise DenominatorUnderflowError(
            "forecast denominator fell below the stability floor"
        )
    return float((num / den).real)


def predict_fock_collapsed(predictor, dataset, x, t):
    """Forecast at state x and lead time t through the collapsed sum.

    Algebraically identical to predict_fock: the multinomial expansion
    of the m-th power of the slot sum reproduces the moment table term
    by term. Kept separate because this path never materializes the
    table and runs as one real matrix product.
    """
    f = np.asarray(dataset.observable_values, dtype=np.float64)
    if f.shape != predictor.f_samples.shape:
        raise ValidationError("dataset does not match the fitted predictor")
    x = np.asarray(x, dtype=np.float64)
    gamma_row = predictor.gamma_at(x[None, :])
    w_rows = _rotation_rows(predictor, gamma_row, t)
    u, r = _real_sum_factors(predictor, w_rows)
    return float(_collapsed_ratio(predictor, f, u, r)[0])


def predict_fock_batch(predictor, times, states=None):
    """Collapsed-path forecasts for many states and lead times at once.

    Rows follow times, columns the evaluation states (the training
    samples when states is None). Returns a real (T, M) array.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    gamma_rows = (
        predictor.gamma_samples if states is None else predictor.gamma_at(states)
    )
    out = np.empty((times.shape[0], gamma_rows.shape[0]))
    for i, t in enumerate(times):
        w_rows = _rotation_rows(predictor, gamma_rows, t)
        u, r = _real_sum_factors(predictor, w_rows)
        out[i] = _collapsed_ratio(predictor, predictor.f_samples, u, r)
    return out
