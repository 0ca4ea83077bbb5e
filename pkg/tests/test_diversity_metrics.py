"""
Tests for output-space diversity metrics and prediction files
"""

import numpy as np
import pytest
from scipy.stats import entropy

from backend.diversity_metrics import (PROB_FLOOR, MetricsError, PredictionSet, bias_var_covar,
                                       calibration_metrics, diversity_rows, kl_matrix, kl_pairwise,
                                       mean_stderr, pdr, pdr_matrix, read_labels, read_predictions,
                                       write_predictions)


def random_probs(models=3, samples=20, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(models, samples, classes))
    exp = np.exp(logits - logits.max(axis=2, keepdims=True))
    return exp / exp.sum(axis=2, keepdims=True)


class TestPredictionSet:
    """Test prediction set validation"""

    def test_shape_properties(self):
        """models, samples and classes follow the array shape"""
        p = PredictionSet(random_probs(2, 5, 3))
        assert (p.models, p.samples, p.classes) == (2, 5, 3)

    def test_rows_must_sum_to_one(self):
        """Unnormalised rows are rejected"""
        with pytest.raises(MetricsError):
            PredictionSet(np.full((2, 1, 2), 0.6))

    def test_wrong_rank(self):
        """A (samples, classes) array is not a prediction set"""
        with pytest.raises(MetricsError):
            PredictionSet(np.full((3, 2), 0.5))

    def test_label_range(self):
        """Labels must index a class"""
        with pytest.raises(MetricsError):
            PredictionSet(random_probs(2, 3, 2), labels=[0, 1, 2])


class TestKL:
    """Test pairwise KL divergence"""

    def test_identical_models(self):
        """Identical models have zero divergence"""
        probs = np.repeat(random_probs(1, 10, 5), 3, axis=0)
        assert kl_pairwise(PredictionSet(probs)) == 0.0

    def test_known_value(self):
        """KL([1,0] || [0.5,0.5]) is ln 2 after flooring"""
        probs = np.array([[[1.0, 0.0]], [[0.5, 0.5]]])
        matrix = kl_matrix(PredictionSet(probs))
        assert matrix[0, 1] == pytest.approx(np.log(2), rel=1e-9)
        assert matrix[0, 0] == 0.0 and matrix[1, 1] == 0.0

    def test_disjoint_support_is_finite(self):
        """Zero probabilities are floored instead of producing infinities"""
        probs = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        value = kl_pairwise(PredictionSet(probs))
        assert np.isfinite(value)
        assert value > 20

    def test_non_negative_on_random_pairs(self):
        """1000 seeded pairs, many with near-zero entries, give KL >= 0 matching scipy"""
        rng = np.random.default_rng(1000)
        for index in range(1000):
            classes = int(rng.integers(2, 11))
            p = rng.dirichlet(np.full(classes, 0.1 if index % 2 else 1.0))
            if index % 3 == 0:
                q = p + rng.normal(0.0, 1e-9, size=classes)
                q = np.abs(q) / np.abs(q).sum()
            else:
                q = rng.dirichlet(np.full(classes, 0.1))
            if index % 5 == 0:
                p[rng.integers(classes)] = 0.0
                p /= p.sum()
            matrix = kl_matrix(PredictionSet(np.stack([p, q])[:, None, :]))
            assert np.all(matrix >= 0)
            pf, qf = (np.maximum(d, PROB_FLOOR) for d in (p, q))
            assert matrix[0, 1] == pytest.approx(entropy(pf, qf), rel=1e-9, abs=1e-12)
            assert matrix[1, 0] == pytest.approx(entropy(qf, pf), rel=1e-9, abs=1e-12)

    def test_asymmetric_mean(self):
        """kl_pairwise averages both directions"""
        p = PredictionSet(random_probs(2, 30, 3, seed=4))
        matrix = kl_matrix(p)
        assert kl_pairwise(p) == pytest.approx((matrix[0, 1] + matrix[1, 0]) / 2)

    def test_needs_two_models(self):
        """A single model has no pairs"""
        with pytest.raises(MetricsError):
            kl_pairwise(PredictionSet(random_probs(1)))


class TestPDR:
    """Test prediction disagreement ratio"""

    def test_full_disagreement(self):
        """Models that never agree have ratio 1"""
        probs = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.1, 0.9], [0.7, 0.3]]])
        assert pdr(PredictionSet(probs)) == 1.0

    def test_partial(self):
        """Disagreement on one of two samples gives 0.5"""
        probs = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.6, 0.4], [0.7, 0.3]]])
        assert pdr(PredictionSet(probs)) == 0.5

    def test_ties_go_to_lowest_class(self):
        """An exact tie predicts class 0"""
        probs = np.array([[[0.5, 0.5]], [[0.9, 0.1]]])
        assert pdr(PredictionSet(probs)) == 0.0

    def test_symmetric(self):
        """The pairwise matrix is symmetric with a zero diagonal"""
        matrix = pdr_matrix(PredictionSet(random_probs(4)))
        np.testing.assert_array_equal(matrix, matrix.T)
        assert np.all(np.diag(matrix) == 0)


class TestDecomposition:
    """Test the bias-variance-covariance decomposition"""

    def test_identity_holds(self):
        """bias^2 + var/M + (1 - 1/M) covar equals the ensemble MSE"""
        rng = np.random.default_rng(7)
        targets = rng.normal(size=50)
        predictions = targets + rng.normal(0.3, 1.0, size=(4, 50))
        d = bias_var_covar(predictions, targets)
        assert d.models == 4
        assert d.residual() < 1e-10

    @pytest.mark.parametrize("seed", range(100))
    def test_identity_on_random_instances(self, seed):
        """The residual stays below 1e-10 for M <= 10 models and N <= 500 samples"""
        rng = np.random.default_rng(seed)
        models, samples = int(rng.integers(1, 11)), int(rng.integers(1, 501))
        targets = rng.normal(size=samples)
        offset, spread = rng.normal(), rng.uniform(0.1, 2.0)
        predictions = targets + rng.normal(offset, spread, size=(models, samples))
        d = bias_var_covar(predictions, targets)
        assert d.models == models
        assert d.residual() < 1e-10
        assert d.mse == pytest.approx(np.mean((predictions.mean(axis=0) - targets) ** 2), abs=1e-12)

    def test_brute_force_five_models(self):
        """M=5, N=100: both sides computed with plain loops agree with each other and the library"""
        rng = np.random.default_rng(5)
        targets = rng.uniform(-2, 2, size=100)
        predictions = targets + rng.normal(0.2, 0.7, size=(5, 100))
        mse = sum((sum(predictions[i, n] for i in range(5)) / 5 - targets[n]) ** 2
                  for n in range(100)) / 100
        errors = [[predictions[i, n] - targets[n] for n in range(100)] for i in range(5)]
        means = [sum(e) / 100 for e in errors]
        bias = sum(means) / 5
        var = sum(sum((e - means[i]) ** 2 for e in errors[i]) / 100 for i in range(5)) / 5
        covar = sum(sum((errors[i][n] - means[i]) * (errors[j][n] - means[j]) for n in range(100))
                    / 100 for i in range(5) for j in range(5) if i != j) / 20
        assert abs(bias ** 2 + var / 5 + (1 - 1 / 5) * covar - mse) < 1e-10
        d = bias_var_covar(predictions, targets)
        assert d.mse == pytest.approx(mse, abs=1e-12)
        assert (d.bias_bar, d.var_bar, d.covar_bar) == pytest.approx((bias, var, covar), abs=1e-12)

    def test_single_model(self):
        """A single regressor has no covariance term"""
        d = bias_var_covar(np.array([1.0, 2.0, 4.0]), np.array([1.0, 1.0, 1.0]))
        assert d.covar_bar is None
        assert d.residual() < 1e-12

    def test_perfect_predictions(self):
        """Exact predictions decompose into zeros"""
        y = np.arange(5.0)
        d = bias_var_covar(np.stack([y, y]), y)
        assert (d.bias_bar, d.var_bar, d.covar_bar, d.mse) == (0.0, 0.0, 0.0, 0.0)

    def test_shape_mismatch(self):
        """Targets must match the sample axis"""
        with pytest.raises(MetricsError):
            bias_var_covar(np.zeros((2, 3)), np.zeros(4))


class TestCalibration:
    """Test accuracy, NLL and ECE"""

    def test_confident_and_correct(self):
        """One-hot correct predictions are perfectly calibrated"""
        probs = np.eye(3)
        metrics = calibration_metrics(probs, [0, 1, 2])
        assert metrics["accuracy"] == 1.0
        assert metrics["ece"] == 0.0
        assert metrics["nll"] == pytest.approx(0.0, abs=1e-12)

    def test_overconfident(self):
        """Wrong predictions at full confidence give ECE 1"""
        metrics = calibration_metrics(np.eye(2), [1, 0])
        assert metrics["accuracy"] == 0.0
        assert metrics["ece"] == pytest.approx(1.0)


class TestRows:
    """Test summary rows"""

    def test_mean_stderr(self):
        """Standard error uses the sample standard deviation"""
        mean, stderr = mean_stderr([1.0, 2.0, 3.0])
        assert mean == 2.0
        assert stderr == pytest.approx(1.0 / np.sqrt(3))

    def test_single_value_has_zero_stderr(self):
        """n = 1 gives stderr 0"""
        assert mean_stderr([4.0]) == (4.0, 0.0)

    def test_empty(self):
        """No values, no summary"""
        with pytest.raises(MetricsError):
            mean_stderr([])

    def test_diversity_rows(self):
        """Rows carry d_kl and d_pdr, plus ensemble metrics with labels"""
        p = PredictionSet(random_probs(3, 10, 4), labels=np.arange(10) % 4)
        rows = diversity_rows("snapshot", p)
        metrics = [row.metric for row in rows]
        assert metrics[:2] == ["d_kl", "d_pdr"]
        assert "ensemble_accuracy" in metrics
        assert rows[0].n == 6
        assert rows[1].n == 3
        assert all(row.method == "snapshot" for row in rows)


class TestPredictionFiles:
    """Test EDPR and CSV prediction files"""

    @pytest.mark.parametrize("suffix", [".edpr", ".csv"])
    def test_write_read(self, tmp_path, suffix):
        """Both formats return the written probabilities"""
        probs = random_probs(2, 4, 3)
        path = write_predictions(probs, tmp_path / "nested" / f"p{suffix}")
        np.testing.assert_array_equal(read_predictions(path), probs)

    def test_bad_magic(self, tmp_path):
        """Foreign binary files are rejected"""
        path = tmp_path / "p.edpr"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(MetricsError):
            read_predictions(path)

    def test_missing(self, tmp_path):
        """A missing file raises MetricsError"""
        with pytest.raises(MetricsError):
            read_predictions(tmp_path / "absent.edpr")

    def test_csv_missing_rows(self, tmp_path):
        """Every (model, sample) pair must be present"""
        path = tmp_path / "p.csv"
        path.write_text("model,sample,p0,p1\n0,0,0.5,0.5\n1,1,0.5,0.5\n")
        with pytest.raises(MetricsError):
            read_predictions(path)

    def test_csv_duplicate_row(self, tmp_path):
        """A repeated (model, sample) pair is rejected with its line number"""
        path = tmp_path / "p.csv"
        path.write_text("model,sample,p0,p1\n0,0,0.5,0.5\n0,1,0.5,0.5\n0,0,0.9,0.1\n")
        with pytest.raises(MetricsError, match=r"p\.csv:4: duplicate row for model 0, sample 0"):
            read_predictions(path)

    def test_labels(self, tmp_path):
        """Labels are one integer per line"""
        path = tmp_path / "labels.txt"
        path.write_text("0\n2\n1\n")
        np.testing.assert_array_equal(read_labels(path), [0, 2, 1])
