import json
import math

import numpy as np
import pytest

from jointembed import experiments as ex
from jointembed.exceptions import ConfigError, JointEmbedError, NotPositiveDefiniteError
from jointembed.experiments import (
    CSV_HEADER,
    DataSplit,
    ExperimentConfig,
    ResultRow,
    Scenario,
    classification_prob,
    draw_split,
    emit_csv,
    make_scenario_cov,
    read_csv,
    true_conditional_prob,
    validate_and_fit,
)
from jointembed.numerics import std_normal_cdf

from oracles import conditional_mc

LOW = make_scenario_cov(Scenario.named("low"))
MED = make_scenario_cov(Scenario.named("med"))


class TestScenarios:
    def test_low_is_scaled_identity(self):
        np.testing.assert_array_equal(LOW, np.eye(3) / 25)

    def test_med_off_diagonals(self):
        np.testing.assert_allclose([MED[0, 1], MED[0, 2], MED[1, 2]], [0.012, -0.012, 0.012], rtol=1e-14)
        np.testing.assert_allclose(np.diag(MED), 0.04, rtol=1e-14)

    def test_high_is_indefinite(self):
        s = Scenario.named("high")
        # eigenvalues of the correlation matrix are -0.4, 1.7, 1.7
        with pytest.raises(NotPositiveDefiniteError):
            make_scenario_cov(s)
        cov = make_scenario_cov(s, clip=True)
        assert np.linalg.eigvalsh(cov).min() >= -1e-15
        info = ex.scenario_adjustment(s)
        assert info["clipped"]
        np.testing.assert_allclose(sorted(info["correlation_eigenvalues"]), [-0.4, 1.7, 1.7], atol=1e-12)

    def test_unknown_and_out_of_range(self):
        with pytest.raises(ConfigError):
            Scenario.named("extreme")
        with pytest.raises(ConfigError):
            make_scenario_cov(Scenario("x", (1.5, 0.0, 0.0)))

    def test_metadata_sidecar(self, tmp_path):
        cfg = ExperimentConfig(scenario="high")
        path = tmp_path / "m.json"
        ex.write_metadata(cfg, path)
        meta = json.loads(path.read_text())
        assert meta["scenario_adjustment"]["clipped"] is True
        assert meta["config"]["scenario"] == "high"


class TestOracle:
    @pytest.mark.parametrize("name", ["low", "med", "high"])
    def test_degenerate_event_is_certain(self, name):
        cov = make_scenario_cov(Scenario.named(name), clip=True)
        xs = np.linspace(-1, 1, 7)
        np.testing.assert_array_equal(true_conditional_prob(0.0, 0.0, 0.0, cov, xs), np.ones(7))

    def test_independent_value(self):
        for x in (-0.3, 0.0, 0.7):
            p = true_conditional_prob(1.0, 1.0, -0.5, LOW, x)
            assert p == pytest.approx(0.03855, abs=5e-6)
            assert p == pytest.approx(float(std_normal_cdf(-0.5 / math.sqrt(2 / 25))), rel=1e-14)

    def test_nonpositive_variance(self):
        bad = LOW.copy()
        bad[2, 2] = 0.0
        with pytest.raises(ValueError):
            true_conditional_prob(1.0, 1.0, 0.0, bad, 0.0)

    def test_degenerate_conditional_is_indicator(self):
        # Y1 = X exactly and Y2 independent with b = 0: the event is X <= c
        sigma = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        np.testing.assert_array_equal(true_conditional_prob(1.0, 0.0, 0.2, sigma, [0.1, 0.3]), [1.0, 0.0])

    def test_med_against_monte_carlo(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            x = rng.normal(scale=0.2)
            c = -rng.choice(ex.THRESHOLDS)
            mc = conditional_mc(MED, x, 1.0, 1.0, c, n=10**6, seed=int(rng.integers(1 << 30)))
            assert abs(true_conditional_prob(1.0, 1.0, c, MED, x) - mc) <= 0.003

    def test_classification_prob_reduces_to_one_variable(self):
        # with Z2 independent of (Z1, Z3) the two-variable conditional equals the one-variable one
        cov = make_scenario_cov(Scenario("t", (0.0, 0.5, 0.0)))
        x = np.array([[0.1, 0.3], [-0.2, -0.1], [0.0, 0.4]])
        reordered = cov[np.ix_([2, 1, 0], [2, 1, 0])]  # (Z3, Z2, Z1)
        ref = true_conditional_prob(-1.0, 0.0, 0.0, reordered, x[:, 0])
        np.testing.assert_allclose(classification_prob(cov, x), ref, rtol=1e-13)

    def test_bayes_mae_of_true_probability(self):
        split = draw_split(MED, 2, 2, 200_000, 3, "classify")
        p = classification_prob(MED, split.x_test)
        up = (split.y_test[:, 0] > 0).astype(float)
        mae = np.mean(np.abs(up - p))
        assert mae == pytest.approx(np.mean(2 * p * (1 - p)), abs=3e-3)
        # any other predictor does no better in expectation
        assert mae <= np.mean(np.abs(up - np.clip(p + 0.1, 0, 1)))


class TestFunctionMatrix:
    def test_rows(self):
        y = np.array([[0.0, 1.0], [0.0, 0.55], [1.0, 0.0]])
        np.testing.assert_array_equal(
            ex.test_function_matrix(y), [[1, 1, 1, 1], [1, 0, 0, 1], [0, 0, 0, 1]]
        )

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            ex.test_function_matrix(np.zeros((3, 3)))

    def test_oracle_matrix_last_column(self):
        m = ex.oracle_matrix(MED, np.array([0.1, -0.2]))
        np.testing.assert_array_equal(m[:, 3], 1.0)
        assert np.all(np.diff(m[:, :3], axis=1) <= 0)  # stricter thresholds are less likely


def _small_cfg(**kw):
    base = dict(sigma_grid=(0.1, 0.2), eps_grid=(1e-1, 1e-2), lambda_grid=(1e-4,), n_test=200)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def split():
    return draw_split(LOW, 80, 80, 200, 0)


class TestValidation:
    def test_single_point_grid(self, split):
        cfg = _small_cfg(sigma_grid=(0.2,), eps_grid=(1e-2,))
        sel = validate_and_fit(cfg, split, "constrained")
        assert sel.params == {"sigma_x": 0.2, "sigma_y": 0.2, "eps": 1e-2, "lam": 0.0}
        assert len(sel.losses) == 1

    @pytest.mark.parametrize("variant", ["constrained", "unconstrained", "normalized", "traditional"])
    def test_selected_is_argmin(self, split, variant):
        cfg = _small_cfg(sigma_grid=(0.05, 0.2, 0.5), lambda_grid=(1e-6, 1e-2))
        sel = validate_and_fit(cfg, split, variant)
        assert len(sel.losses) == len(ex._grid(cfg, variant))
        losses = [loss for _, loss in sel.losses]
        assert sel.val_loss == min(losses)
        assert sel.params == sel.losses[losses.index(min(losses))][0]

    def test_ties_go_to_first(self, split):
        cfg = _small_cfg(sigma_grid=(0.2, 0.2), eps_grid=(1e-2,), variants=("traditional",), lambda_grid=(1e-4,))
        sel = validate_and_fit(cfg, split, "traditional")
        assert sel.losses[0][1] == sel.losses[1][1]
        assert sel.losses[0][0] is not sel.losses[1][0]
        assert sel.model is not None and sel.val_loss == sel.losses[0][1]

    def test_reasonable_width_beats_degenerate_one(self, split):
        # sigma = 1e-4 turns the kernel into an identity, predicting zero away from the sample
        cfg = _small_cfg(sigma_grid=(1e-4, 0.2), lambda_grid=(1e-4,))
        assert validate_and_fit(cfg, split, "traditional").params["sigma_x"] == 0.2

    def test_all_points_fail(self, split):
        cfg = _small_cfg(eps_grid=(1e9,))
        with pytest.raises(JointEmbedError, match="every grid point failed"):
            validate_and_fit(cfg, split, "constrained")

    def test_klr_needs_classification(self, split):
        with pytest.raises(ConfigError):
            validate_and_fit(_small_cfg(), split, "klr")


class TestSplits:
    def test_streams_are_separate(self):
        a = draw_split(LOW, 50, 40, 30, 7)
        b = draw_split(LOW, 50, 40, 999, 7)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.y_val, b.y_val)
        assert not np.array_equal(a.x_train[:30], a.x_test)

    def test_roles_swap_for_classification(self):
        p = draw_split(MED, 10, 10, 10, 1, "predict")
        c = draw_split(MED, 10, 10, 10, 1, "classify")
        np.testing.assert_array_equal(p.x_train[:, 0], c.y_train[:, 0])
        np.testing.assert_array_equal(p.y_train, c.x_train)

    def test_selection_ignores_test_data(self):
        cfg = _small_cfg()
        a = draw_split(LOW, 60, 60, 50, 2)
        b = DataSplit(a.x_train, a.y_train, a.x_val, a.y_val, a.x_test * 0 + 3.0, a.y_test * 0, a.cov)
        assert validate_and_fit(cfg, a, "constrained").params == validate_and_fit(cfg, b, "constrained").params


def _key(row):
    return tuple("nan" if isinstance(v, float) and math.isnan(v) else v for v in row.as_record())


class _Half:
    def conditional_expectation(self, targets, x):
        return np.full((len(x), targets.shape[1]), 0.5)


class TestStudies:
    def test_constant_half_classifier(self):
        s = draw_split(MED, 10, 10, 500, 0, "classify")
        oracle, posfrac, normdev = ex._evaluate(s, "constrained", _Half())
        assert oracle == 0.5 and posfrac == 1.0 and normdev == 0.0

    def test_prediction_rows(self, tmp_path):
        cfg = _small_cfg(n_train=(60,), seeds=(0, 1), variants=("constrained", "unconstrained", "traditional"))
        rows = ex.run_prediction_experiment(cfg)
        assert [(r.seed, r.variant) for r in rows] == [
            (s, v) for s in (0, 1) for v in ("constrained", "unconstrained", "traditional")
        ]
        for r in rows:
            assert r.oracle_loss >= 0 and r.val_loss >= 0 and r.fit_seconds > 0
            if r.variant == "constrained":
                assert r.posfrac == 1.0 and r.normdev <= 1e-7
                assert r.m_x > 0 and r.m_y > 0

    def test_deterministic_csv(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            cfg = _small_cfg(n_train=(40,), seeds=(3,), variants=("constrained", "traditional"),
                             record_time=False, output_path=str(p))
            ex.run_prediction_experiment(cfg)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert (tmp_path / "a.csv.meta.json").exists()

    def test_workers_keep_order(self, tmp_path, monkeypatch):
        cfg = _small_cfg(n_train=(30, 40), seeds=(0, 1), variants=("unconstrained",), record_time=False)
        serial = ex.run_prediction_experiment(cfg)
        monkeypatch.setenv("JOINTEMBED_WORKERS", "2")
        parallel = ex.run_prediction_experiment(cfg)
        assert [_key(r) for r in serial] == [_key(r) for r in parallel]
        monkeypatch.setenv("JOINTEMBED_WORKERS", "zero")
        with pytest.raises(ConfigError):
            ex.run_prediction_experiment(cfg)

    def test_classification_rows(self):
        cfg = _small_cfg(scenario="med", n_train=(60,), variants=("constrained", "klr"), record_time=False)
        rows = ex.run_classification_experiment(cfg)
        assert [r.variant for r in rows] == ["constrained", "klr"]
        for r in rows:
            assert 0 <= r.oracle_loss <= 1
        assert rows[0].normdev <= 1e-7

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            ex.run_prediction_experiment(_small_cfg(sigma_grid=()))
        with pytest.raises(ConfigError):
            ex.run_prediction_experiment(_small_cfg(variants=("klr",)))
        with pytest.raises(ConfigError):
            ex.run_classification_experiment(_small_cfg(variants=("normalized",)))
        with pytest.raises(ConfigError):
            _small_cfg(n_test=0).validate()


class TestTiming:
    def test_rows_cap_and_timeout(self):
        cfg = ExperimentConfig(n_train=(300, 600), variants=("constrained", "unconstrained", "traditional"),
                               traditional_max_n=400, timeout=60.0)
        rows = ex.run_timing_experiment(cfg)
        by = {(r.variant, r.n_train): r for r in rows}
        assert math.isnan(by[("traditional", 600)].fit_seconds)
        assert by[("traditional", 300)].fit_seconds > 0
        assert by[("constrained", 600)].m_x > 0
        assert by[("constrained", 600)].peak_rss_mb > 0

    def test_timeout_flags_row(self):
        s = draw_split(LOW, 3000, 1, 1, 0)
        secs, ranks, _ = ex.timed_fit(s, "traditional", {"sigma_x": 0.2, "lam": 1e-6}, timeout=1e-3)
        assert secs == float("inf") and ranks == (0, 0)

    def test_unconstrained_not_slower(self):
        s = draw_split(LOW, 2000, 1, 1, 0)
        params = {"sigma_x": 0.1, "sigma_y": 0.1, "eps": 1e-3, "lam": 0.0}
        t = {v: min(ex.timed_fit(s, v, params, 0)[0] for _ in range(3)) for v in ("unconstrained", "constrained")}
        assert t["unconstrained"] <= t["constrained"]

    def test_traditional_superlinear(self):
        t = {}
        for n in (1000, 2000):
            s = draw_split(LOW, n, 1, 1, 0)
            t[n] = min(ex.timed_fit(s, "traditional", {"sigma_x": 0.2, "lam": 1e-6}, 0)[0] for _ in range(3))
        assert t[2000] / t[1000] >= 4


class TestCsv:
    ROW = ResultRow("low", "constrained", 100, 3, 0.1, 0.2, 0.01, 0.0, 5, 7, 0.1, 1 / 3, 1.0, 0.0, 2.5)

    def test_empty_is_header_only(self, tmp_path):
        p = tmp_path / "e.csv"
        emit_csv([], p)
        assert p.read_bytes() == (",".join(CSV_HEADER) + "\r\n").encode()

    def test_golden_line(self, tmp_path):
        p = tmp_path / "g.csv"
        emit_csv([self.ROW], p)
        line = p.read_bytes().split(b"\r\n")[1]
        assert line == (
            b"low,constrained,100,3,0.10000000000000001,0.20000000000000001,0.01,0,5,7,"
            b"0.10000000000000001,0.33333333333333331,1,0,2.5"
        )

    def test_round_trip(self, tmp_path):
        rows = [self.ROW, ResultRow("med", "traditional", 50, 0, 0.05, float("nan"), float("nan"), 1e-6,
                                    0, 0, 0.2, 0.3, 0.99, 1e-3, float("inf"))]
        p = tmp_path / "r.csv"
        emit_csv(rows, p)
        back = read_csv(p)
        assert [_key(r) for r in rows] == [_key(r) for r in back]

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="nope"):
            emit_csv([], tmp_path / "nope" / "x.csv")


@pytest.mark.slow
def test_more_data_helps_constrained():
    cfg = ExperimentConfig(sigma_grid=(0.1, 0.2, 0.5), eps_grid=(1e-1, 1e-2), n_test=500,
                           variants=("constrained",), record_time=False)
    med = {}
    for n in (100, 2000):
        rows = ex.run_prediction_experiment(ex.with_overrides(cfg, n_train=(n,), seeds=tuple(range(20))))
        med[n] = np.median([r.oracle_loss for r in rows])
    assert med[2000] <= med[100]
