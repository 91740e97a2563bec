import os

import numpy as np
import pytest

from oracles import qp_reference
from voxseg.features import FeatureConfig, ScalerParams, fit_scaler, apply_scaler
from voxseg.svm import (ConvergenceError, HyperGrid, ModelFormatError, SvmError,
                        TrainingSet, decision, decision_many, default_grid,
                        deserialize_model, fit_platt, fit_with_grid_search,
                        gaussian_kernel, grid_search, kernel_matrix, nu_max,
                        predict_confidence, predict_confidence_many,
                        serialize_model, solve_nu_svm, train_model)

CONFIG_2D = FeatureConfig(features=("position",), env_size=3)
# position gives a 3-entry layout; pad 2D test points with a zero column
def pad(X):
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.zeros((len(X), 1))])


def blobs(rng, n=20, gap=2.0, spread=0.3):
    half = n // 2
    Xp = rng.normal([gap, gap], spread, (half, 2))
    Xn = rng.normal([-gap, -gap], spread, (n - half, 2))
    X = np.vstack([Xp, Xn])
    y = np.array([1] * half + [-1] * (n - half))
    return X, y


class TestNuMax:
    def test_three_seven(self):
        assert nu_max([1, 1, 1, -1, -1, -1, -1, -1, -1, -1]) == pytest.approx(0.6)

    def test_balanced(self):
        assert nu_max([1, -1] * 8) == 1.0

    def test_one_vs_many(self):
        assert nu_max([1] + [-1] * 99) == pytest.approx(0.02)

    def test_single_class_rejected(self):
        with pytest.raises(SvmError):
            nu_max([1, 1, 1])


class TestGaussianKernel:
    def test_self_similarity(self):
        assert gaussian_kernel([1.0, 2.0], [1.0, 2.0], 3.0) == 1.0

    def test_unit_distance(self):
        assert gaussian_kernel([0.0], [1.0], 1.0) == pytest.approx(np.exp(-1.0))

    def test_symmetry(self, rng):
        for _ in range(10):
            x, y = rng.random(4), rng.random(4)
            g = float(rng.random() * 3 + 0.1)
            assert gaussian_kernel(x, y, g) == gaussian_kernel(y, x, g)

    def test_length_mismatch(self):
        with pytest.raises(SvmError):
            gaussian_kernel([1.0], [1.0, 2.0], 1.0)


class TestSolver:
    def test_two_point_symmetry(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        y = np.array([1, -1])
        res = solve_nu_svm(X, y, 1.0, 1.0)
        assert np.all(res.alpha > 0)
        K = kernel_matrix(X, X, 1.0)
        dec = K @ (y * res.alpha) + res.bias
        assert dec[0] == pytest.approx(-dec[1], abs=1e-12)
        assert dec[0] > 0

    def test_separable_margin_error_bound(self, rng):
        X, y = blobs(rng, 20)
        nu = 0.1
        res = solve_nu_svm(X, y, nu, 0.5, eps=1e-6)
        K = kernel_matrix(X, X, 0.5)
        dec = K @ (y * res.alpha) + res.bias
        assert np.all(np.sign(dec) == y)  # 100% training accuracy
        # free SVs satisfy y*dec = rho only up to solver tolerance
        margin_errors = np.mean(y * dec < res.rho - 1e-4)
        assert margin_errors <= nu + 1e-9

    def test_objective_matches_qp_oracle(self, rng):
        for _ in range(10):
            M = int(rng.integers(6, 41))
            X = rng.normal(size=(M, int(rng.integers(2, 6))))
            y = np.ones(M, dtype=np.int64)
            y[rng.permutation(M)[:int(rng.integers(1, M))]] = -1
            if not (np.any(y > 0) and np.any(y < 0)):
                continue
            nu = float(rng.uniform(0.2, 1.0)) * nu_max(y)
            gamma = float(rng.uniform(0.1, 2.0))
            res = solve_nu_svm(X, y, nu, gamma, eps=1e-6)
            _, obj_ref = qp_reference(X, y, nu, gamma)
            assert abs(res.objective - obj_ref) <= 1e-4 * max(abs(obj_ref), 1e-9)

    def test_dual_feasibility(self, rng):
        X, y = blobs(rng, 30)
        C = 1.0 / 30
        for nu in (0.1, 0.5, nu_max(y)):
            res = solve_nu_svm(X, y, nu, 1.0)
            assert np.all(res.alpha >= -1e-12)
            assert np.all(res.alpha <= C + 1e-12)
            assert abs(np.dot(y, res.alpha)) <= 1e-3
            assert res.alpha.sum() >= nu - 1e-3

    def test_infeasible_nu(self, rng):
        X, y = blobs(rng, 10)
        with pytest.raises(SvmError):
            solve_nu_svm(X, y, nu_max(y) + 0.2, 1.0)

    def test_iteration_cap(self, rng):
        X, y = blobs(rng, 40, gap=0.0, spread=1.0)
        with pytest.raises(ConvergenceError):
            solve_nu_svm(X, y, 0.9, 5.0, max_kernel_evals=50)

    def test_shrinking_agrees_with_plain(self, rng):
        X, y = blobs(rng, 60, gap=0.5, spread=1.0)
        a = solve_nu_svm(X, y, 0.6, 1.0, shrinking=True)
        b = solve_nu_svm(X, y, 0.6, 1.0, shrinking=False)
        assert a.objective == pytest.approx(b.objective, rel=1e-3, abs=1e-9)


def make_model(rng, n=24, calibrate=True):
    X, y = blobs(rng, n)
    train = TrainingSet(pad(X), y)
    return train_model(train, CONFIG_2D, 0.3, 0.8, calibrate=calibrate), train


class TestDecision:
    def test_support_vector_sign(self, rng):
        model, train = make_model(rng)
        pos = train.vectors[train.labels > 0][0]
        assert decision(model, pos) > 0

    def test_continuity(self, rng):
        model, train = make_model(rng)
        x = train.vectors[0]
        base = decision(model, x)
        shifted = decision(model, x + 1e-9)
        assert abs(shifted - base) < 1e-6

    def test_holdout_accuracy(self, rng):
        model, _ = make_model(rng, 30)
        Xt, yt = blobs(rng, 100)
        dec = decision_many(model, pad(Xt))
        assert np.mean(np.sign(dec) == yt) >= 0.95

    def test_layout_mismatch(self, rng):
        model, _ = make_model(rng)
        with pytest.raises(SvmError):
            decision(model, np.zeros(7))


class TestPlatt:
    def test_direction(self):
        A, B = fit_platt(np.array([-1.0, -1.0, 1.0, 1.0]),
                         np.array([-1, -1, 1, 1]))
        assert A < 0

    def test_symmetric_midpoint(self):
        A, B = fit_platt(np.array([-2.0, -2.0, 2.0, 2.0]),
                         np.array([-1, -1, 1, 1]))
        p0 = 1.0 / (1.0 + np.exp(B))
        assert p0 == pytest.approx(0.5, abs=1e-6)

    def test_local_minimum(self, rng):
        f = np.concatenate([rng.normal(-1, 0.5, 20), rng.normal(1, 0.5, 20)])
        y = np.array([-1] * 20 + [1] * 20)
        A, B = fit_platt(f, y)
        prior1, prior0 = 20, 20
        hi, lo = (prior1 + 1.0) / (prior1 + 2.0), 1.0 / (prior0 + 2.0)
        t = np.where(y > 0, hi, lo)

        def objective(a, b):
            z = a * f + b
            log1pe = np.where(z >= 0, z + np.log1p(np.exp(-np.abs(z))),
                              np.log1p(np.exp(z)))
            return float(np.sum(log1pe - (1.0 - t) * z))

        base = objective(A, B)
        for da, db in ((1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)):
            assert objective(A + da, B + db) >= base - 1e-12

    def test_confidence_range_and_monotonicity(self, rng):
        model, train = make_model(rng)
        conf = predict_confidence_many(model, train.vectors)
        assert np.all((conf >= 0) & (conf <= 1))
        dec = decision_many(model, train.vectors)
        order = np.argsort(dec)
        assert np.all(np.diff(conf[order]) >= -1e-12)

    def test_matches_formula(self, rng):
        model, train = make_model(rng)
        A, B = model.platt
        x = train.vectors[3]
        f = decision(model, x)
        assert predict_confidence(model, x) == pytest.approx(
            1.0 / (1.0 + np.exp(A * f + B)), abs=1e-12)

    def test_calibration_invariant(self, rng):
        model, train = make_model(rng)
        conf = predict_confidence_many(model, train.vectors)
        assert conf[train.labels > 0].mean() >= conf[train.labels < 0].mean()

    def test_uncalibrated_model_rejected(self, rng):
        model, train = make_model(rng, calibrate=False)
        with pytest.raises(SvmError):
            predict_confidence(model, train.vectors[0])


class TestGridSearch:
    def test_single_point(self, rng):
        X, y = blobs(rng, 20)
        train = TrainingSet(pad(X), y)
        grid = HyperGrid((0.3,), (0.5,), folds=5)
        nu, gamma, report = grid_search(train, CONFIG_2D, grid)
        assert (nu, gamma) == (0.3, 0.5)
        assert len(report.entries) == 1
        assert len(report.entries[0][2]) == 5

    def test_deterministic_across_workers(self, rng):
        X, y = blobs(rng, 24)
        train = TrainingSet(pad(X), y)
        grid = HyperGrid((0.2, 0.2, 0.4), (0.3, 0.3, 1.0), folds=4)
        out1 = grid_search(train, CONFIG_2D, grid, workers=1)
        out4 = grid_search(train, CONFIG_2D, grid, workers=4)
        assert out1[:2] == out4[:2]
        assert [e[:2] for e in out1[2].entries] == [e[:2] for e in out4[2].entries]

    def test_separable_cv_accuracy_at_best(self, rng):
        X, y = blobs(rng, 28)
        train = TrainingSet(pad(X), y)
        grid = default_grid(train, CONFIG_2D)
        nu, gamma, report = grid_search(train, CONFIG_2D, grid)
        best = max(e[3] for e in report.entries)
        extreme = [e[3] for e in report.entries
                   if e[1] in (min(grid.gammas), max(grid.gammas))]
        assert best >= max(extreme) - 1e-12

    def test_fold_nu_clamped(self, rng):
        # nu = nu_max is infeasible on folds with fewer minority samples
        X, y = blobs(rng, 12)
        train = TrainingSet(pad(X), y)
        grid = HyperGrid((nu_max(y),), (0.5,), folds=6)
        nu, gamma, report = grid_search(train, CONFIG_2D, grid)
        assert report.entries[0][3] > 0

    def test_every_point_infeasible(self, rng):
        X, y = blobs(rng, 10)
        train = TrainingSet(pad(X), y)
        with pytest.raises(SvmError):
            grid_search(train, CONFIG_2D, HyperGrid((1.5,), (0.5,), folds=3))


class TestScalingPipeline:
    def test_prescaled_equals_internal_scaler(self, rng):
        X, y = blobs(rng, 20)
        train = TrainingSet(pad(X), y)
        scaler = fit_scaler(train.vectors, CONFIG_2D)
        prescaled = TrainingSet(apply_scaler(scaler, train.vectors), y)
        ident = ScalerParams.identity(train.vectors.shape[1])
        m_raw = train_model(train, CONFIG_2D, 0.4, 0.7)
        m_pre = train_model(prescaled, CONFIG_2D, 0.4, 0.7, scaler=ident)
        sv_raw = np.nonzero(m_raw.alpha > 0)[0]
        assert len(m_raw.alpha) == len(m_pre.alpha)
        assert np.allclose(np.sort(m_raw.alpha), np.sort(m_pre.alpha), atol=1e-12)
        assert np.allclose(m_raw.support_vectors, m_pre.support_vectors, atol=1e-12)
        del sv_raw


class TestSerialization:
    def test_round_trip_decisions_identical(self, rng, tmp_path):
        model, train = make_model(rng)
        path = os.path.join(tmp_path, "m.bin")
        serialize_model(model, train, path)
        loaded, train2 = deserialize_model(path)
        assert np.array_equal(train.vectors, train2.vectors)
        assert np.array_equal(train.labels, train2.labels)
        probes = pad(rng.normal(size=(100, 2)) * 3)
        assert np.array_equal(decision_many(model, probes),
                              decision_many(loaded, probes))
        assert np.array_equal(predict_confidence_many(model, probes),
                              predict_confidence_many(loaded, probes))

    def test_truncated_file_rejected(self, rng, tmp_path):
        model, train = make_model(rng)
        path = os.path.join(tmp_path, "m.bin")
        serialize_model(model, train, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-20])
        with pytest.raises(ModelFormatError):
            deserialize_model(path)

    def test_corrupt_byte_rejected(self, rng, tmp_path):
        model, train = make_model(rng)
        path = os.path.join(tmp_path, "m.bin")
        serialize_model(model, train, path)
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ModelFormatError):
            deserialize_model(path)

    def test_version_mismatch(self, rng, tmp_path):
        model, train = make_model(rng)
        path = os.path.join(tmp_path, "m.bin")
        serialize_model(model, train, path)
        blob = bytearray(open(path, "rb").read())
        blob[8] = 99  # version field behind the magic
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ModelFormatError, match="version"):
            deserialize_model(path)

    def test_retrain_union_equivalence(self, rng, tmp_path):
        X, y = blobs(rng, 20)
        Xn, yn = blobs(rng, 6)
        train = TrainingSet(pad(X), y)
        grid = HyperGrid((0.2, 0.4), (0.5, 1.0), folds=3)
        model, _ = fit_with_grid_search(train, CONFIG_2D, grid=grid, cv_seed=7)
        path = os.path.join(tmp_path, "m.bin")
        serialize_model(model, train, path)

        from voxseg.learner import retrain_from_file
        (m_re, _), merged = retrain_from_file(path, pad(Xn), yn, grid=grid,
                                              cv_seed=7)
        union = TrainingSet(np.vstack([pad(X), pad(Xn)]),
                            np.concatenate([y, yn]))
        m_once, _ = fit_with_grid_search(union, CONFIG_2D, grid=grid, cv_seed=7)
        assert (m_re.nu, m_re.gamma) == (m_once.nu, m_once.gamma)
        probes = pad(rng.normal(size=(20, 2)))
        assert np.array_equal(decision_many(m_re, probes),
                              decision_many(m_once, probes))
