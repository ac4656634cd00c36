"""Report-stage figure rendering.

Kept out of the forecast module so prediction code never imports
matplotlib. Figures are written headless with empty metadata, making
repeated renders of the same report byte-identical.
"""

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE_OPTS = {"dpi": 110, "metadata": {"Software": None}}


def plot_skill_curves(report, path):
    """RMSE and AC of both predictors against lead time."""
    fig, (ax_rmse, ax_ac) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    t = report.times
    ax_rmse.plot(t, report.rmse_fock, "o-", label="tensor")
    ax_rmse.plot(t, report.rmse_classical, "s--", label="classical")
    ax_rmse.set_xlabel("lead time")
    ax_rmse.set_ylabel("normalized RMSE")
    ax_rmse.legend()
    ax_ac.plot(t, report.ac_fock, "o-", label="tensor")
    ax_ac.plot(t, report.ac_classical, "s--", label="classical")
    ax_ac.set_xlabel("lead time")
    ax_ac.set_ylabel("anomaly correlation")
    ax_ac.set_ylim(-1.05, 1.05)
    ax_ac.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def plot_torus_fields(report, n_side, path, time_index=0):
    """Truth and both predictions as heat maps on the sampling grid."""
    shape = (n_side, n_side)
    rows = (
        ("truth", report.truth[time_index]),
        ("tensor", report.pred_fock[time_index]),
        ("classical", report.pred_classical[time_index]),
    )
    lo = min(arr.min() for _, arr in rows)
    hi = max(arr.max() for _, arr in rows)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.4))
    for ax, (label, arr) in zip(axes, rows):
        im = ax.imshow(
            arr.reshape(shape).T, origin="lower", vmin=lo, vmax=hi,
            extent=(0, 2 * np.pi, 0, 2 * np.pi),
        )
        ax.set_title("%s, t=%g" % (label, report.times[time_index]))
        ax.set_xlabel("$x^1$")
        ax.set_ylabel("$x^2$")
    fig.colorbar(im, ax=list(axes), fraction=0.03)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def plot_scatter_fit(report, path, time_index=0):
    """Prediction against truth per evaluation state, one marker each."""
    truth = report.truth[time_index]
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    ax.plot(truth, report.pred_fock[time_index], ".", ms=3, label="tensor")
    ax.plot(truth, report.pred_classical[time_index], ".", ms=3,
            label="classical", alpha=0.6)
    lo, hi = truth.min(), truth.max()
    ax.plot([lo, hi], [lo, hi], "k-", lw=0.8)
    ax.set_xlabel("truth")
    ax.set_ylabel("prediction")
    ax.set_title("t=%g" % report.times[time_index])
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def render_report_figures(report, dataset, out_dir, on_samples=True):
    """Write the report figures next to the delimited skill tables.

    The field heat maps need predictions on the full sampling grid, so
    they are skipped for held-out evaluation states and for trajectory
    (non-grid) sampling.
    """
    plot_skill_curves(report, out_dir / "skill.png")
    if report.truth is None:
        return
    n = report.truth.shape[1]
    n_side = int(round(np.sqrt(n)))
    if on_samples and dataset.system.name == "stepanoff" and n_side * n_side == n:
        plot_torus_fields(report, n_side, out_dir / "fields_t0.png")
    else:
        plot_scatter_fit(report, out_dir / "fit_t0.png")
