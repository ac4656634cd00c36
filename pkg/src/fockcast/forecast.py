"""Classical spectral baseline, skill metrics, and report assembly.

The classical forecast rotates each smoothed eigenfunction by its
frequency and recombines them with fixed projection coefficients; it is
the linear reference the symmetric-tensor predictor is measured
against. Truth comes from integrating every evaluation state forward
and re-applying the observable.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import integrate_flow_batch, observable_function
from .errors import ValidationError
from .fock import predict_fock_batch, select_modes
from .semigroup import heat_multipliers, nystrom_eval

CSV_HEADER = "t,rmse_fock,rmse_cl,ac_fock,ac_cl"


def rmse(pred, truth):
    """Normalized root mean square error under the sampling measure."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValidationError("prediction and truth vectors must align")
    denom = np.linalg.norm(truth)
    if denom == 0.0:
        raise ValidationError("truth has zero norm; error is undefined")
    return float(np.linalg.norm(pred - truth) / denom)


def anomaly_correlation(pred, truth):
    """Correlation of mean-removed prediction and truth, real part."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValidationError("prediction and truth vectors must align")
    pa = pred - pred.mean()
    ta = truth - truth.mean()
    np_, nt = np.linalg.norm(pa), np.linalg.norm(ta)
    if np_ == 0.0 or nt == 0.0:
        raise ValidationError("an anomaly vector has zero norm")
    return float(np.real(np.vdot(pa, ta)) / (np_ * nt))


@dataclass(frozen=True)
class ClassicalPredictor:
    """Projection coefficients and smoothed eigenfunctions, slot layout
    i = -d, .., d as in the tensor predictor."""

    coeffs: np.ndarray
    omegas_sel: np.ndarray
    zeta_samples: np.ndarray
    mode_indices: np.ndarray
    tau: float
    eigensystem: object = field(repr=False)
    basis: object = field(repr=False)
    model: object = field(repr=False)

    def zeta_at(self, states=None):
        if states is None:
            return self.zeta_samples
        return _zeta_values(
            self.eigensystem, self.basis, self.model, self.tau,
            self.mode_indices, states,
        )


def _zeta_values(eigensystem, basis, model, tau, modes, states=None):
    # half-time multipliers applied to the eigenvector coefficients,
    # then evaluated through the Markov eigenvectors
    modes = np.asarray(modes)
    pairs = modes[modes > 0]
    lp = eigensystem.lprime
    mult = heat_multipliers(basis, 0.5 * tau)
    coef = mult[:, None] * eigensystem.zeta_coeffs[:, lp + pairs]
    phi = basis.phi if states is None else nystrom_eval(basis, model, states)
    z_pos = phi @ coef
    d_sel = pairs.shape[0]
    out = np.empty((phi.shape[0], 2 * d_sel + 1), dtype=np.complex128)
    out[:, d_sel] = phi[:, 0]
    out[:, d_sel + 1 :] = z_pos
    for i in range(1, d_sel + 1):
        out[:, d_sel - i] = np.conj(out[:, d_sel + i])
    return out


def build_classical_predictor(
    eigensystem, basis, model, tau=None, observable_values=None,
    modes=None, d=None,
):
    """Project the observable on the smoothed eigenfunctions.

    Defaults mirror the tensor predictor: the model's own observable,
    the eigensystem's regularization time, and amplitude-ranked mode
    selection when an explicit list is not given.
    """
    if tau is None:
        tau = eigensystem.tau
    if observable_values is None:
        observable_values = model.dataset.observable_values
    f = np.asarray(observable_values, dtype=np.float64)
    if modes is None:
        if d is None:
            raise ValidationError("give either a mode list or a pair count d")
        modes = select_modes(eigensystem, f, d)
    modes = np.asarray(modes, dtype=np.int64)
    pairs = modes[modes > 0]
    lp = eigensystem.lprime
    zeta = _zeta_values(eigensystem, basis, model, tau, modes)
    coeffs = (np.conj(zeta).T @ f) / f.shape[0]
    om_pos = eigensystem.omegas[lp + pairs]
    omegas_sel = np.concatenate((-om_pos[::-1], [0.0], om_pos))
    return ClassicalPredictor(
        coeffs=coeffs,
        omegas_sel=omegas_sel,
        zeta_samples=zeta,
        mode_indices=modes,
        tau=float(tau),
        eigensystem=eigensystem,
        basis=basis,
        model=model,
    )


def classical_batch_complex(classical, times, states=None):
    """Complex-valued forecast series, one row per lead time.

    The imaginary parts measure how exactly the conjugate pairs cancel;
    callers wanting forecasts take the real part.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    zeta = classical.zeta_at(states)
    out = np.empty((times.shape[0], zeta.shape[0]), dtype=np.complex128)
    for i, t in enumerate(times):
        out[i] = zeta @ (classical.coeffs * np.exp(1j * classical.omegas_sel * t))
    return out


def classical_batch(classical, times, states=None):
    return classical_batch_complex(classical, times, states).real


def predict_classical(
    eigensystem, basis, model, tau, observable_values, modes, x, t
):
    """Classical forecast of the observable at state x and lead time t."""
    cp = build_classical_predictor(
        eigensystem, basis, model, tau=tau,
        observable_values=observable_values, modes=modes,
    )
    x = np.asarray(x, dtype=np.float64)
    return float(classical_batch(cp, t, states=x[None, :])[0, 0])


@dataclass(frozen=True)
class ForecastReport:
    """Per-lead-time skill of both predictors, plus optional raw series."""

    times: np.ndarray
    rmse_fock: np.ndarray
    rmse_classical: np.ndarray
    ac_fock: np.ndarray
    ac_classical: np.ndarray
    pred_fock: np.ndarray | None = None
    pred_classical: np.ndarray | None = None
    truth: np.ndarray | None = None

    def to_csv(self, path):
        lines = [CSV_HEADER]
        for i in range(self.times.shape[0]):
            row = (
                self.times[i],
                self.rmse_fock[i],
                self.rmse_classical[i],
                self.ac_fock[i],
                self.ac_classical[i],
            )
            lines.append(",".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_json(self, path):
        blob = {
            "t": self.times.tolist(),
            "rmse_fock": self.rmse_fock.tolist(),
            "rmse_cl": self.rmse_classical.tolist(),
            "ac_fock": self.ac_fock.tolist(),
            "ac_cl": self.ac_classical.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=2)
            fh.write("\n")

    def save_predictions(self, path):
        if self.pred_fock is None:
            raise ValidationError(
                "report was built without keep_predictions; nothing to dump"
            )
        np.savez(
            path,
            pred_fock=self.pred_fock,
            pred_classical=self.pred_classical,
            truth=self.truth,
        )


def evaluate(predictor, times, h, states=None, keep_predictions=False):
    """Score both predictors against integrated truth on a time grid.

    Truth advances incrementally from one lead time to the next with
    fixed-step integration, evaluating the dataset's observable at each
    stop. Scores cover the training samples unless held-out states are
    given.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if times.ndim != 1 or times.shape[0] < 1:
        raise ValidationError("need a one-dimensional time grid")
    if not np.all(np.isfinite(times)) or times[0] < 0.0:
        raise ValidationError("lead times must be finite and nonnegative")
    if np.any(np.diff(times) < 0.0):
        raise ValidationError("lead times must be nondecreasing")
    dataset = predictor.model.dataset
    system = dataset.system
    obs = observable_function(dataset)
    eval_states = (
        dataset.states if states is None
        else np.asarray(states, dtype=np.float64)
    )
    classical = build_classical_predictor(
        predictor.eigensystem, predictor.basis, predictor.model,
        observable_values=predictor.f_samples, modes=predictor.mode_indices,
    )
    pred_f = predict_fock_batch(predictor, times, states=states)
    pred_c = classical_batch(classical, times, states=states)
    truth = np.empty_like(pred_f)
    current = eval_states
    prev_t = 0.0
    for i, t in enumerate(times):
        current = integrate_flow_batch(system, current, t - prev_t, h)
        prev_t = t
        truth[i] = obs(current)
    n_t = times.shape[0]
    rmse_f = np.empty(n_t)
    rmse_c = np.empty(n_t)
    ac_f = np.empty(n_t)
    ac_c = np.empty(n_t)
    for i in range(n_t):
        rmse_f[i] = rmse(pred_f[i], truth[i])
        rmse_c[i] = rmse(pred_c[i], truth[i])
        ac_f[i] = anomaly_correlation(pred_f[i], truth[i])
        ac_c[i] = anomaly_correlation(pred_c[i], truth[i])
    return ForecastReport(
        times=times,
        rmse_fock=rmse_f,
        rmse_classical=rmse_c,
        ac_fock=ac_f,
        ac_classical=ac_c,
        pred_fock=pred_f if keep_predictions else None,
        pred_classical=pred_c if keep_predictions else None,
        truth=truth if keep_predictions else None,
    )
