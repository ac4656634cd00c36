"""Content-addressed pipeline mechanics: cold runs, cache hits, selective
invalidation, upstream guards, sidecar contents, and artifact loaders.
All on a 16x16 config so each cold run stays around a second.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from fockcast.config import STAGES
from fockcast.errors import MissingUpstreamError, StaleCacheError, ValidationError
from fockcast.stages import (
    load_basis,
    load_dataset,
    load_eigensystem,
    load_model,
    load_predictor,
    load_report,
    run_all,
    run_stage,
    stage_hash,
)


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory, small_config_text):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(small_config_text)
    from fockcast.config import load_config

    return load_config(path)


@pytest.fixture(scope="module")
def small_base(small_cfg, tmp_path_factory):
    base = tmp_path_factory.mktemp("small_run")
    run_all(small_cfg, base_dir=base)
    return base


class TestHashing:
    def test_hash_is_hex_and_stable(self, small_cfg):
        h1 = stage_hash(small_cfg, "kernel")
        h2 = stage_hash(small_cfg, "kernel")
        assert h1 == h2
        assert len(h1) == 64
        int(h1, 16)

    def test_upstream_param_changes_chain(self, small_cfg):
        other = dataclasses.replace(small_cfg, n_side=18)
        for stage in STAGES:
            assert stage_hash(small_cfg, stage) != stage_hash(other, stage)

    def test_downstream_param_stays_local(self, small_cfg):
        other = dataclasses.replace(small_cfg, times=(0.0, 1.0))
        same = [s for s in STAGES if stage_hash(small_cfg, s) == stage_hash(other, s)]
        assert same == ["sample", "kernel", "basis", "eigs", "moments", "predict"]

    def test_weights_never_enter_hashes(self, small_cfg):
        other = dataclasses.replace(small_cfg, sigma_w=9.5, p=0.25)
        for stage in STAGES:
            assert stage_hash(small_cfg, stage) == stage_hash(other, stage)


class TestRunning:
    def test_cold_then_cached(self, small_cfg, tmp_path):
        first = run_all(small_cfg, base_dir=tmp_path)
        assert [hit for _, hit in first] == [False] * len(STAGES)
        second = run_all(small_cfg, base_dir=tmp_path)
        assert [hit for _, hit in second] == [True] * len(STAGES)

    def test_epsilon_invalidates_moments_downstream(self, small_cfg, tmp_path):
        run_all(small_cfg, base_dir=tmp_path)
        bumped = dataclasses.replace(small_cfg, epsilon=0.5)
        hits = dict(run_all(bumped, base_dir=tmp_path))
        assert hits == {
            "sample": True,
            "kernel": True,
            "basis": True,
            "eigs": True,
            "moments": False,
            "predict": False,
            "evaluate": False,
            "report": False,
        }

    def test_force_reruns_cached_stage(self, small_cfg, tmp_path):
        run_all(small_cfg, base_dir=tmp_path)
        hit, _ = run_stage(small_cfg, "sample", base_dir=tmp_path, force=True)
        assert hit is False

    def test_unknown_stage_rejected(self, small_cfg, tmp_path):
        with pytest.raises(ValidationError):
            run_stage(small_cfg, "polish", base_dir=tmp_path)

    def test_missing_upstream(self, small_cfg, tmp_path):
        with pytest.raises(MissingUpstreamError):
            run_stage(small_cfg, "kernel", base_dir=tmp_path)

    def test_stale_upstream(self, small_cfg, tmp_path):
        run_all(small_cfg, base_dir=tmp_path)
        moved = dataclasses.replace(small_cfg, bandwidth=(0.7, 2.0, 0.4))
        with pytest.raises(StaleCacheError):
            run_stage(moved, "basis", base_dir=tmp_path)

    def test_sidecar_contents(self, small_cfg, small_base):
        payload = json.loads((Path(small_base) / "eigs" / "stage.json").read_text())
        assert payload["stage"] == "eigs"
        assert payload["hash"] == stage_hash(small_cfg, "eigs")
        assert payload["params"] == small_cfg.stage_params("eigs")
        assert {"python", "numpy", "scipy", "fockcast"} <= set(payload["versions"])


class TestLoaders:
    def test_dataset_roundtrip(self, small_cfg, small_base):
        ds = load_dataset(small_base)
        assert ds.n_samples == small_cfg.n_side**2
        assert ds.system.name == "stepanoff"

    def test_model_matches_config(self, small_cfg, small_base):
        model = load_model(small_base)
        eps_tilde, m_nu, eps = small_cfg.bandwidth
        assert model.epsilon == pytest.approx(eps)
        assert model.epsilon_tilde == pytest.approx(eps_tilde)
        # entries are scaled for the sampling-measure quadrature, so raw
        # rows sum to n and the operator rows to one
        ds = load_dataset(small_base)
        rows = model.markov_matrix().sum(axis=1) / ds.n_samples
        np.testing.assert_allclose(rows, 1.0, atol=1e-10)

    def test_basis_and_eigensystem_shapes(self, small_cfg, small_base):
        basis = load_basis(small_base)
        assert basis.lambdas.shape == (small_cfg.l,)
        es = load_eigensystem(small_base)
        assert es.omegas.shape == (2 * small_cfg.lprime + 1,)
        assert es.xi.shape == (small_cfg.n_side**2, 2 * small_cfg.lprime + 1)

    def test_predictor_roundtrip_predicts(self, small_cfg, small_base):
        pred = load_predictor(small_cfg, small_base)
        from fockcast.fock import predict_fock

        val = predict_fock(pred, np.array([1.0, 2.0]), 0.3)
        assert np.isfinite(val)

    def test_report_matches_csv(self, small_cfg, small_base):
        rep = load_report(small_base)
        lines = (Path(small_base) / "report" / "report.csv").read_text().splitlines()
        assert lines[0] == "t,rmse_fock,rmse_cl,ac_fock,ac_cl"
        assert len(lines) == 1 + rep.times.size
        first = [float(v) for v in lines[1].split(",")]
        assert first[1] == pytest.approx(rep.rmse_fock[0], rel=1e-15)

    def test_report_figures_rendered(self, small_base):
        rdir = Path(small_base) / "report"
        assert (rdir / "skill.png").stat().st_size > 0
        assert (rdir / "fields_t0.png").stat().st_size > 0


class TestHoldout:
    def test_holdout_states_change_evaluation(self, small_cfg, tmp_path):
        run_all(small_cfg, base_dir=tmp_path)
        held = dataclasses.replace(
            small_cfg, holdout=((1.0, 2.0), (3.0, 0.5), (5.5, 4.0))
        )
        hits = dict(run_all(held, base_dir=tmp_path))
        assert hits["predict"] is True
        assert hits["evaluate"] is False
        rep = load_report(tmp_path)
        assert rep.pred_fock.shape == (len(small_cfg.times), 3)
        # off-sample evaluation renders the scatter diagnostic instead of
        # the torus field maps
        rdir = Path(tmp_path) / "report"
        assert (rdir / "fit_t0.png").exists()
        assert not (rdir / "fields_t0.png").exists()
