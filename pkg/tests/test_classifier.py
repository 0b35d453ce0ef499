import numpy as np
import pytest

from mslidar.classifier import (
    compute_class_weights, height_threshold_postprocess, import_predictions,
    load_checkpoint, neighborhood_graph, neighborhood_stats, predict,
    save_checkpoint, Prediction,
)
from mslidar.cloud import Label, PointCloud
from mslidar.errors import DataError, NumericError
from mslidar.features import FeatureConfig, FeatureMatrix
from mslidar.mlp import Mlp, TrainConfig, train

from conftest import brute_radius, random_cloud


class TestClassWeights:
    def test_balancedigns_unit_weights(self):
        labels = np.array([0, 1] * 25)
        np.testing.assert_allclose(compute_class_weights(labels), [1.0, 1.0])

    def test_dataset_imbalance_closed_form(self):
        # 82/18 split: w_c = N/(2 N_c) normalized to mean 1 reduces to
        # w_c = 2 (1 - f_c), so exactly (0.36, 1.64)
        labels = np.concatenate((np.zeros(82, np.uint8), np.ones(18, np.uint8)))
        w = compute_class_weights(labels)
        np.testing.assert_allclose(w, [0.36, 1.64], rtol=0, atol=1e-12)
        assert w.mean() == pytest.approx(1.0, abs=1e-12)

    def test_weight_ratio_is_inverse_frequency_ratio(self):
        labels = np.concatenate((np.zeros(99, np.uint8), np.ones(1, np.uint8)))
        w = compute_class_weights(labels)
        assert w[1] / w[0] == pytest.approx(99.0, rel=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="both classes"):
            compute_class_weights(np.zeros(10, np.uint8))


def separable_toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.uint8)
    x = np.column_stack((
        np.where(y == 1, 2.0, -2.0) + rng.normal(0, 0.3, n),
        rng.normal(0, 1.0, n),
    ))
    return x, y


class TestTraining:
    def test_separable_toy_reaches_full_accuracy(self):
        x, y = separable_toy()
        cfg = TrainConfig(epochs=50, learning_rate=0.01, batch_size=32,
                          hidden=(16,), seed=0)
        result = train(x, y, (1.0, 1.0), cfg)
        pred = predict(x.astype(np.float32), result.model)
        assert (pred.labels == y).mean() == 1.0
        assert result.loss_curve[-1] <= result.loss_curve[0]
        assert len(result.loss_curve) == cfg.epochs + 1

    def test_deterministic_given_seed(self):
        x, y = separable_toy()
        cfg = TrainConfig(epochs=5, hidden=(8,), seed=3)
        a = train(x, y, (1.0, 1.0), cfg)
        b = train(x, y, (1.0, 1.0), cfg)
        assert a.loss_curve == b.loss_curve
        for wa, wb in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(wa, wb)

    def test_zero_epochs_returns_initialized_params(self):
        x, y = separable_toy()
        cfg = TrainConfig(epochs=0, hidden=(8,), seed=5)
        result = train(x, y, (1.0, 1.0), cfg)
        fresh = Mlp(2, (8,), 2, seed=5, dtype=cfg.dtype)
        for got, want in zip(result.model.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(got, want)
        assert len(result.loss_curve) == 1

    def test_label_flip_with_swapped_weights_mirrors_exactly(self):
        x, y = separable_toy(n=120, seed=2)
        cfg = TrainConfig(epochs=8, learning_rate=0.01, batch_size=32,
                          hidden=(8,), seed=1)
        base = train(x, y, (0.36, 1.64), cfg)
        flipped = train(x, (1 - y).astype(np.uint8), (1.64, 0.36), cfg)
        pb = base.model.predict_proba(x.astype(np.float32))
        pf = flipped.model.predict_proba(x.astype(np.float32))
        np.testing.assert_array_equal(pf, pb[:, ::-1])
        assert base.loss_curve == flipped.loss_curve

    def test_unit_weights_equal_unweighted_cross_entropy(self):
        x, y = separable_toy(n=40, seed=4)
        model = Mlp(2, (8,), 2, seed=0, dtype=np.float64)
        loss, _ = model.loss_and_grads(x, y, (1.0, 1.0))
        logits, _ = model.forward(x)
        shift = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shift).sum(axis=1)) + logits.max(axis=1)
        plain = float((lse - logits[np.arange(len(y)), y]).mean())
        assert loss == pytest.approx(plain, rel=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_aborts_with_diagnostics(self):
        x, y = separable_toy(n=64, seed=6)
        cfg = TrainConfig(epochs=10, learning_rate=1e20, batch_size=64,
                          hidden=(8, 8), seed=0)
        with pytest.raises(NumericError, match="learning rate"):
            train(x, y, (1.0, 1.0), cfg)

    def test_input_validation(self):
        x, y = separable_toy(n=20)
        with pytest.raises(DataError, match="binary"):
            train(x, y + 3, (1, 1), TrainConfig(epochs=1))
        with pytest.raises(DataError, match="both classes"):
            train(x, np.zeros(20, np.uint8), (1, 1), TrainConfig(epochs=1))
        with pytest.raises(DataError, match="point count"):
            train(x, y[:-1], (1, 1), TrainConfig(epochs=1))

    def test_early_stopping_patience(self):
        # zero learning rate freezes the loss, so the plateau counter
        # fires after exactly `patience` epochs without improvement
        x, y = separable_toy()
        cfg = TrainConfig(epochs=300, learning_rate=0.0, batch_size=32,
                          hidden=(16,), seed=0, patience=5)
        result = train(x, y, (1.0, 1.0), cfg)
        assert result.stopped_epoch == 4
        assert len(result.loss_curve) == 1 + 5


def numeric_grads(model, x, y, cw, eps=1e-6):
    grads = []
    for p in model.parameters():
        g = np.zeros(p.shape, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            lp, _ = model.loss_and_grads(x, y, cw)
            p[idx] = orig - eps
            lm, _ = model.loss_and_grads(x, y, cw)
            p[idx] = orig
            g[idx] = (lp - lm) / (2.0 * eps)
        grads.append(g)
    return grads


class TestGradientCheck:
    @pytest.mark.parametrize("class_weights", [(1.0, 1.0), (0.36, 1.64)])
    def test_analytic_matches_central_differences(self, class_weights):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(10, 4))
        y = rng.integers(0, 2, 10)
        model = Mlp(4, (8,), 2, seed=1, dtype=np.float64)
        # output rows start identical; one step breaks the symmetry so the
        # check covers a generic parameter point
        _, g0 = model.loss_and_grads(x, y, class_weights)
        for p, g in zip(model.parameters(), g0):
            p -= 0.05 * g
        _, analytic = model.loss_and_grads(x, y, class_weights)
        numeric = numeric_grads(model, x, y, class_weights)
        for a, n in zip(analytic, numeric):
            tol = 1e-4 * np.maximum(1e-3, np.maximum(np.abs(a), np.abs(n)))
            assert np.all(np.abs(a - n) <= tol)


class TestPredict:
    def test_duplicate_rows_identical_outputs(self):
        model = Mlp(3, (8,), 2, seed=0)
        x = np.tile(np.array([[0.3, -1.0, 2.0]], np.float32), (5, 1))
        pred = predict(x, model)
        assert np.all(pred.probabilities == pred.probabilities[0])
        assert np.all(pred.labels == pred.labels[0])

    def test_zero_weight_model_ties_to_nontree(self):
        model = Mlp(3, (4,), 2, seed=0)
        for p in model.parameters():
            p[:] = 0
        pred = predict(np.random.default_rng(0).normal(size=(6, 3)).astype(np.float32), model)
        np.testing.assert_array_equal(pred.probabilities, 0.5)
        assert np.all(pred.labels == int(Label.NON_TREE))

    def test_probabilities_sum_to_one(self):
        model = Mlp(4, (8,), 2, seed=2)
        x = np.random.default_rng(1).normal(size=(50, 4)).astype(np.float32)
        pred = predict(x, model)
        np.testing.assert_allclose(pred.probabilities.sum(axis=1), 1.0, atol=1e-6)

    def test_dimension_mismatch_rejected(self):
        model = Mlp(4, (8,), 2, seed=0)
        with pytest.raises(DataError, match="expects 4 features"):
            predict(np.zeros((3, 5), np.float32), model)


class TestNeighborhood:
    def test_graph_matches_brute_radius(self):
        rng = np.random.default_rng(19)
        cloud = random_cloud(rng, n=150, extent=6.0)
        graph = neighborhood_graph(cloud, k=16, radius=2.0)
        assert graph.shape == (150, 16)
        for i in range(0, 150, 7):
            ids, _ = brute_radius(cloud.xyz, cloud.xyz[i], 2.0, k_max=16)
            got = graph[i][graph[i] >= 0]
            np.testing.assert_array_equal(got, ids)

    def test_every_row_contains_self(self):
        rng = np.random.default_rng(20)
        cloud = random_cloud(rng, n=80, extent=8.0)
        graph = neighborhood_graph(cloud)
        assert all((graph[i] == i).any() for i in range(cloud.count))

    def test_stats_against_loop_oracle(self):
        rng = np.random.default_rng(21)
        n = 60
        values = np.column_stack((
            rng.normal(size=n), rng.normal(size=n), rng.uniform(0, 5, n),
            rng.random(n), rng.random(n),
        ))
        fm = FeatureMatrix(
            values=values,
            columns=("x_centered", "y_centered", "h_norm",
                     "refl_green_db", "refl_nir_db"),
            config=FeatureConfig.XYZ_GREEN_NIR, center=(0.0, 0.0), params=None,
        )
        graph = np.full((n, 4), -1, dtype=np.int64)
        for i in range(n):
            members = [(i + j) % n for j in range(rng.integers(1, 5))]
            graph[i, : len(members)] = members
        out = neighborhood_stats(fm, graph)
        assert out.columns == fm.columns + (
            "refl_green_db_nmean", "refl_green_db_nstd",
            "refl_nir_db_nmean", "refl_nir_db_nstd",
            "h_norm_range", "n_count",
        )
        for i in range(n):
            members = graph[i][graph[i] >= 0]
            for off, ci in enumerate((3, 4)):
                vals = values[members, ci]
                assert out.values[i, 5 + 2 * off] == pytest.approx(vals.mean(), abs=1e-12)
                assert out.values[i, 6 + 2 * off] == pytest.approx(vals.std(), abs=1e-9)
            h = values[members, 2]
            assert out.values[i, 9] == pytest.approx(h.max() - h.min(), abs=1e-12)
            assert out.values[i, 10] == len(members)

    def test_stats_point_count_mismatch_rejected(self):
        fm = FeatureMatrix(
            values=np.zeros((5, 3)), columns=("x_centered", "y_centered", "h_norm"),
            config=FeatureConfig.XYZ, center=(0.0, 0.0), params=None,
        )
        with pytest.raises(DataError, match="disagree"):
            neighborhood_stats(fm, np.zeros((4, 2), np.int64))


class TestImportAndPostprocess:
    def make_cloud(self, h):
        h = np.asarray(h, np.float32)
        n = len(h)
        return PointCloud(
            x=np.arange(n, dtype=float), y=np.zeros(n), z=np.zeros(n),
            channel=np.zeros(n, np.uint8), h_norm=h,
        )

    def test_import_all_ones(self, tmp_path):
        cloud = self.make_cloud([1, 2, 3])
        path = tmp_path / "pred.txt"
        path.write_text("1\n1\n1\n")
        pred = import_predictions(path, cloud)
        assert np.all(pred.labels == int(Label.TREE))
        np.testing.assert_array_equal(pred.probabilities[:, 1], 1.0)
        assert pred.source.startswith("imported:")

    def test_import_count_mismatch(self, tmp_path):
        cloud = self.make_cloud([1, 2, 3])
        path = tmp_path / "pred.txt"
        path.write_text("1\n0\n")
        with pytest.raises(DataError, match="2 labels for 3 points"):
            import_predictions(path, cloud)

    def test_import_rejects_non_binary(self, tmp_path):
        cloud = self.make_cloud([1, 2, 3])
        path = tmp_path / "pred.txt"
        path.write_text("1\n0\n2\n")
        with pytest.raises(DataError, match="must be 0 or 1"):
            import_predictions(path, cloud)

    def test_postprocess_demotes_low_trees_only(self):
        cloud = self.make_cloud([0.5, 10.0, 0.5, 3.0])
        pred = Prediction(
            probabilities=np.full((4, 2), 0.5),
            labels=np.array([1, 1, 0, 1], np.uint8), source="internal",
        )
        out = height_threshold_postprocess(pred, cloud, t=2.0)
        assert out.labels.tolist() == [0, 1, 0, 1]
        # probabilities and the untouched labels stay as they were
        np.testing.assert_array_equal(out.probabilities, pred.probabilities)

    def test_postprocess_t0_is_identity(self):
        cloud = self.make_cloud([0.0, 5.0])
        pred = Prediction(
            probabilities=np.full((2, 2), 0.5),
            labels=np.array([1, 1], np.uint8), source="internal",
        )
        out = height_threshold_postprocess(pred, cloud, t=0.0)
        np.testing.assert_array_equal(out.labels, pred.labels)

    def test_postprocess_requires_h_norm(self):
        cloud = PointCloud(
            x=np.zeros(1), y=np.zeros(1), z=np.zeros(1),
            channel=np.zeros(1, np.uint8),
        )
        pred = Prediction(
            probabilities=np.full((1, 2), 0.5),
            labels=np.zeros(1, np.uint8), source="internal",
        )
        with pytest.raises(DataError, match="h_norm"):
            height_threshold_postprocess(pred, cloud)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        x, y = separable_toy(n=50, seed=8)
        result = train(x, y, (0.36, 1.64),
                       TrainConfig(epochs=2, hidden=(8, 4), seed=9))
        path = tmp_path / "model.mstm"
        save_checkpoint(path, result.model, FeatureConfig.XYZ_PNDVI,
                        (0.36, 1.64), seed=9, norm_sidecar="normalization.json")
        model, meta = load_checkpoint(path)
        assert model.sizes == result.model.sizes
        for got, want in zip(model.parameters(), result.model.parameters()):
            np.testing.assert_array_equal(got, want.astype(np.float32))
        assert meta["feature_config"] is FeatureConfig.XYZ_PNDVI
        np.testing.assert_allclose(meta["class_weights"], [0.36, 1.64])
        assert meta["seed"] == 9
        assert meta["norm_sidecar"] == "normalization.json"

    def test_bytes_deterministic(self, tmp_path):
        model = Mlp(4, (8,), 2, seed=0)
        p1, p2 = tmp_path / "a.mstm", tmp_path / "b.mstm"
        save_checkpoint(p1, model, FeatureConfig.XYZ, (1.0, 1.0), seed=0)
        save_checkpoint(p2, model, FeatureConfig.XYZ, (1.0, 1.0), seed=0)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.mstm"
        path.write_bytes(b"AAAA" + b"\x00" * 30)
        with pytest.raises(DataError, match="checkpoint"):
            load_checkpoint(path)
