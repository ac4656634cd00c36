"""Content-addressed pipeline stages and their on-disk artifacts.

Each stage writes into one directory under the run root and leaves a
JSON sidecar recording the content hash of every configuration value
its output depends on, chained through its upstream stage. Reruns with
a matching hash are no-ops; a parameter change invalidates exactly the
stages downstream of where it enters the chain.

Sampling is deterministic: the torus grid has no randomness and the
Lorenz trajectory starts from a fixed initial state, so the config seed
currently only participates in hashing.
"""

import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import STAGES
from .dynamics import (DEFAULT_ALPHA, L63_DEFAULT, TrajectoryDataset,
                       sample_grid_stepanoff, sample_trajectory_l63)
from .errors import MissingUpstreamError, StaleCacheError, ValidationError
from .fock import (FockPredictor, build_fock_predictor, compute_moments,
                   enumerate_multi_indices, select_modes,
                   smoothed_eigenfunction_products)
from .forecast import ForecastReport, evaluate
from .generator import (GeneratorMatrices, KoopmanEigensystem, assemble_A,
                        assemble_B, assemble_eigensystem, generator_matrix,
                        solve_gevp)
from .kernel import (BandwidthFunction, KernelModel, bistochastic_normalize,
                     fit_kernel_model, pairwise_sqdist)
from .semigroup import SemigroupBasis, eig_markov

SIDECAR = "stage.json"
L63_X0 = (1.0, 1.0, 1.0)

_UPSTREAM = {stage: (STAGES[i - 1] if i > 0 else None)
             for i, stage in enumerate(STAGES)}


def _canonical(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def stage_hash(config, stage):
    """Chained content hash of everything the stage output depends on."""
    upstream = _UPSTREAM[stage]
    digest = hashlib.sha256()
    if upstream is not None:
        digest.update(stage_hash(config, upstream).encode())
    digest.update(_canonical(config.stage_params(stage)).encode())
    return digest.hexdigest()


def _versions():
    import scipy

    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "fockcast": __version__,
    }


def _read_sidecar(stage_dir):
    path = Path(stage_dir) / SIDECAR
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def _write_sidecar(stage_dir, stage, config, digest):
    payload = {
        "stage": stage,
        "hash": digest,
        "params": config.stage_params(stage),
        "versions": _versions(),
    }
    (Path(stage_dir) / SIDECAR).write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n"
    )


def _require_upstream(config, base, stage):
    upstream = _UPSTREAM[stage]
    if upstream is None:
        return
    meta = _read_sidecar(base / upstream)
    if meta is None:
        raise MissingUpstreamError(
            "stage '%s' needs '%s' artifacts; run the '%s' stage first"
            % (stage, upstream, upstream)
        )
    if meta.get("hash") != stage_hash(config, upstream):
        raise StaleCacheError(
            "stage '%s' artifacts are stale for this config;"
            " rerun the '%s' stage" % (upstream, upstream)
        )


def run_stage(config, stage, base_dir=None, force=False):
    """Execute one pipeline stage into its artifact directory.

    Returns (cache_hit, stage_dir). Upstream artifacts must already be
    present and fresh; the sample stage has no upstream.
    """
    if stage not in STAGES:
        raise ValidationError(
            "unknown stage %r; stages are %s" % (stage, ", ".join(STAGES))
        )
    base = Path(base_dir if base_dir is not None else config.out_dir)
    stage_dir = base / stage
    _require_upstream(config, base, stage)
    digest = stage_hash(config, stage)
    meta = _read_sidecar(stage_dir)
    if not force and meta is not None and meta.get("hash") == digest:
        return True, stage_dir
    # wipe leftovers from whatever config wrote here before: the directory
    # must hold exactly this hash's artifacts, nothing stale beside them
    if stage_dir.exists():
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)
    _RUNNERS[stage](config, base, stage_dir)
    _write_sidecar(stage_dir, stage, config, digest)
    return False, stage_dir


def run_all(config, base_dir=None, force=False):
    """Run every stage in order; returns the list of (stage, cache_hit)."""
    results = []
    for stage in STAGES:
        hit, _ = run_stage(config, stage, base_dir=base_dir, force=force)
        results.append((stage, hit))
    return results


# ---------------------------------------------------------------------------
# artifact loaders

def load_dataset(base):
    return TrajectoryDataset.load(Path(base) / "sample")


def load_model(base, dataset=None):
    if dataset is None:
        dataset = load_dataset(base)
    return KernelModel.load(Path(base) / "kernel", dataset)


def load_basis(base):
    return SemigroupBasis.load(Path(base) / "basis")


def load_eigensystem(base):
    return KoopmanEigensystem.load(Path(base) / "eigs")


def load_moments(base):
    """Stored mode selection, smoothed products, and moment tables."""
    mdir = Path(base) / "moments"
    meta = json.loads((mdir / "meta.json").read_text())
    n, d = meta["n_samples"], meta["d"]
    modes = np.fromfile(mdir / "modes.bin", dtype="<i8")
    rho = np.fromfile(mdir / "rho.bin", dtype="<c16").reshape(n, 2 * d + 1)
    mg = np.fromfile(mdir / "moments_g.bin", dtype="<c16")
    mh = np.fromfile(mdir / "moments_h.bin", dtype="<c16")
    if mg.shape[0] != meta["count"] or mh.shape[0] != meta["count"]:
        raise ValidationError("moment artifacts do not match their metadata")
    return modes, rho, mg, mh


def load_predictor(config, base):
    """Reassemble the tensor predictor from stage artifacts."""
    dataset = load_dataset(base)
    model = load_model(base, dataset)
    basis = load_basis(base)
    es = load_eigensystem(base)
    modes, rho, mg, mh = load_moments(base)
    pdir = Path(base) / "predict"
    meta = json.loads((pdir / "meta.json").read_text())
    n, d = meta["n_samples"], meta["d"]
    gamma = np.fromfile(pdir / "gamma.bin", dtype="<c16").reshape(n, 2 * d + 1)
    omegas_sel = np.fromfile(pdir / "omegas_sel.bin", dtype="<f8")
    return FockPredictor(
        mode_indices=modes,
        omegas_sel=omegas_sel,
        table=enumerate_multi_indices(config.d, config.m),
        moments_g=mg,
        moments_h=mh,
        denominator_floor=meta["denominator_floor"],
        gamma_samples=gamma,
        rho_samples=rho,
        f_samples=np.asarray(dataset.observable_values, dtype=np.float64),
        sigma=meta["sigma"],
        epsilon=config.epsilon,
        eigensystem=es,
        basis=basis,
        model=model,
        weights=None,
    )


def load_report(base):
    """Skill table and raw predictions from the evaluate stage."""
    edir = Path(base) / "evaluate"
    meta = json.loads((edir / "meta.json").read_text())
    n_t, n_x = meta["n_times"], meta["n_states"]

    def vec(name):
        return np.fromfile(edir / (name + ".bin"), dtype="<f8")

    def mat(name):
        return vec(name).reshape(n_t, n_x)

    return ForecastReport(
        times=vec("times"),
        rmse_fock=vec("rmse_fock"),
        rmse_classical=vec("rmse_cl"),
        ac_fock=vec("ac_fock"),
        ac_classical=vec("ac_cl"),
        pred_fock=mat("pred_fock"),
        pred_classical=mat("pred_cl"),
        truth=mat("truth"),
    )


# ---------------------------------------------------------------------------
# stage runners

def _run_sample(config, base, out):
    if config.system == "stepanoff":
        alpha = config.system_params[0] if config.system_params else DEFAULT_ALPHA
        gamma = float(config.observable.get("gamma", 1.0))
        dataset = sample_grid_stepanoff(config.n_side, alpha=alpha, gamma=gamma)
    else:
        params = config.system_params if config.system_params else L63_DEFAULT
        if len(params) != 3:
            raise ValidationError("l63 takes three system params (beta, rho, sigma)")
        dataset = sample_trajectory_l63(
            L63_X0, config.n_samples, config.delta_t, config.spinup,
            config.sample_step, *params,
        )
    dataset.save(out)


def _run_kernel(config, base, out):
    dataset = load_dataset(base)
    if config.bandwidth == "auto":
        model = fit_kernel_model(dataset)
    else:
        eps_tilde, m_nu, eps = config.bandwidth
        sq = pairwise_sqdist(dataset.data)
        bw = BandwidthFunction(dataset.data, eps_tilde, m_nu, sqdist=sq)
        rho = bw.values
        kmat = np.exp(-sq / (eps * eps * rho[:, None] * rho[None, :]))
        pmat, d_values, q_values = bistochastic_normalize(kmat)
        model = KernelModel(
            dataset, eps, eps_tilde, m_nu, bw, d_values, q_values,
            sqdist=sq, kernel_mat=kmat, markov_mat=pmat,
        )
    model.save(out)


def _run_basis(config, base, out):
    dataset = load_dataset(base)
    model = load_model(base, dataset)
    basis = eig_markov(model.markov_matrix(), config.l)
    basis.save(out)


def _run_eigs(config, base, out):
    dataset = load_dataset(base)
    model = load_model(base, dataset)
    basis = load_basis(base)
    vmat = generator_matrix(basis, model)
    a_mat = assemble_A(vmat, basis, config.tau)
    b_mat = assemble_B(vmat, config.z)
    gevp = solve_gevp(a_mat, b_mat)
    mats = GeneratorMatrices(vmat, a_mat, b_mat, config.z, config.tau)
    es = assemble_eigensystem(gevp, mats, basis, config.lprime)
    es.save(out)


def _run_moments(config, base, out):
    dataset = load_dataset(base)
    es = load_eigensystem(base)
    f = dataset.observable_values
    modes = select_modes(es, f, config.d)
    rho = smoothed_eigenfunction_products(es, dataset, config.epsilon, modes)
    table = enumerate_multi_indices(config.d, config.m)
    mg, mh = compute_moments(f, rho, table)
    digest = hashlib.sha256()
    for name, arr, dt in (
        ("modes", modes, "<i8"),
        ("rho", rho, "<c16"),
        ("moments_g", mg, "<c16"),
        ("moments_h", mh, "<c16"),
    ):
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        (out / (name + ".bin")).write_bytes(raw)
        digest.update(raw)
    meta = {
        "d": config.d,
        "m": config.m,
        "epsilon": config.epsilon,
        "count": int(table.count),
        "n_samples": int(dataset.n_samples),
        "checksum": digest.hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _run_predict(config, base, out):
    dataset = load_dataset(base)
    model = load_model(base, dataset)
    basis = load_basis(base)
    es = load_eigensystem(base)
    modes, rho, mg, mh = load_moments(base)
    predictor = build_fock_predictor(
        es, basis, model, sigma=config.sigma, epsilon=config.epsilon,
        d=config.d, m=config.m, modes=modes, moments=(mg, mh),
    )
    digest = hashlib.sha256()
    for name, arr, dt in (
        ("gamma", predictor.gamma_samples, "<c16"),
        ("omegas_sel", predictor.omegas_sel, "<f8"),
    ):
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        (out / (name + ".bin")).write_bytes(raw)
        digest.update(raw)
    meta = {
        "sigma": config.sigma,
        "d": config.d,
        "denominator_floor": predictor.denominator_floor,
        "n_samples": int(dataset.n_samples),
        "checksum": digest.hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _run_evaluate(config, base, out):
    predictor = load_predictor(config, base)
    states = np.asarray(config.holdout, dtype=np.float64) if config.holdout else None
    report = evaluate(
        predictor, np.asarray(config.times), h=config.truth_step,
        states=states, keep_predictions=True,
    )
    digest = hashlib.sha256()
    for name, arr in (
        ("times", report.times),
        ("rmse_fock", report.rmse_fock),
        ("rmse_cl", report.rmse_classical),
        ("ac_fock", report.ac_fock),
        ("ac_cl", report.ac_classical),
        ("pred_fock", report.pred_fock),
        ("pred_cl", report.pred_classical),
        ("truth", report.truth),
    ):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        (out / (name + ".bin")).write_bytes(raw)
        digest.update(raw)
    meta = {
        "n_times": int(report.times.shape[0]),
        "n_states": int(report.pred_fock.shape[1]),
        "holdout": bool(config.holdout),
        "checksum": digest.hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _run_report(config, base, out):
    from .plots import render_report_figures

    report = load_report(base)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    dataset = load_dataset(base)
    on_samples = not config.holdout
    render_report_figures(report, dataset, out, on_samples=on_samples)


_RUNNERS = {
    "sample": _run_sample,
    "kernel": _run_kernel,
    "basis": _run_basis,
    "eigs": _run_eigs,
    "moments": _run_moments,
    "predict": _run_predict,
    "evaluate": _run_evaluate,
    "report": _run_report,
}
