import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minima.errors import EmptyModelError
from minima.model import LayerEntry, ModelContainer
from minima.sensitivity import (
    Patch,
    ProbeRecord,
    analyze,
    extract_features,
    head_key,
    partition_patches,
    patch_matrix,
    predict,
    probe_patch,
    train_predictor,
)


def make_model(matrices):
    model = ModelContainer()
    for i, (name, m, kind) in enumerate(matrices):
        model.add(name, m, layer_index=i, submodule_kind=kind)
    return model


def meta_patch(kind="other", layer_index=0):
    return Patch(0, "w", layer_index, kind, (0, 4), (0, 4))


def decayed_matrix(rng, m, n, gamma):
    """Random matrix with singular values exp(-gamma * i)."""
    u, _ = np.linalg.qr(rng.standard_normal((m, m)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    k = min(m, n)
    s = np.exp(-gamma * np.arange(k))
    return (u[:, :k] * s) @ v[:, :k].T


class TestPartition:
    def test_four_even_patches(self, rng):
        model = make_model([("w", rng.standard_normal((128, 128)), "ffn")])
        patches = partition_patches(model, (64, 64))
        assert len(patches) == 4
        assert all(p.rows == 64 and p.cols == 64 for p in patches)

    def test_ragged_bottom_edge(self, rng):
        model = make_model([("w", rng.standard_normal((100, 64)), "ffn")])
        patches = partition_patches(model, (64, 64))
        assert len(patches) == 2
        assert (patches[1].rows, patches[1].cols) == (36, 64)

    def test_ids_ordered(self, rng):
        model = make_model(
            [("a", rng.standard_normal((64, 128)), "ffn"), ("b", rng.standard_normal((64, 64)), "ffn")]
        )
        patches = partition_patches(model, (64, 64))
        assert [p.patch_id for p in patches] == [0, 1, 2]
        assert patches[0].layer_name == "a" and patches[2].layer_name == "b"

    def test_empty_model(self):
        with pytest.raises(EmptyModelError):
            partition_patches(ModelContainer(), (64, 64))

    def test_small_patch_rejected(self, rng):
        model = make_model([("w", rng.standard_normal((64, 64)), "ffn")])
        with pytest.raises(ValueError):
            partition_patches(model, (8, 64))

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=17, max_value=150),
        st.integers(min_value=17, max_value=150),
        st.integers(min_value=16, max_value=70),
        st.integers(min_value=16, max_value=70),
    )
    def test_exact_tiling(self, m, n, pr, pc):
        model = make_model([("w", np.zeros((m, n)), "ffn")])
        patches = partition_patches(model, (pr, pc))
        covered = np.zeros((m, n), dtype=int)
        for p in patches:
            covered[p.row_range[0] : p.row_range[1], p.col_range[0] : p.col_range[1]] += 1
        assert np.all(covered == 1)


class TestFeatures:
    def test_identity_patch(self):
        f = extract_features(np.eye(4), meta_patch(), total_layers=1)
        assert f[0] == pytest.approx(4.0)  # stable rank
        assert f[1] == pytest.approx(0.25)  # ceil(0.1*4)=1 of 4 equal energies
        assert f[2] == pytest.approx(0.0)  # log condition
        assert f[3] == pytest.approx(np.log(4))  # spectral entropy
        assert f[4] == pytest.approx(0.25)  # mean abs
        assert f[5] == pytest.approx(1.0)  # max abs
        assert f[6] == pytest.approx(0.75)  # frac small
        assert f[7] == pytest.approx(0.0)  # row norm cv

    def test_rank_one_patch(self):
        f = extract_features(np.array([[1.0, 2.0], [2.0, 4.0]]), meta_patch(), 1)
        assert f[0] == pytest.approx(1.0)
        assert f[1] == pytest.approx(1.0)

    def test_zero_patch_convention(self):
        f = extract_features(np.zeros((4, 4)), meta_patch(), 1)
        assert np.all(np.isfinite(f))
        assert f[0] == 0.0 and f[2] == 0.0

    def test_random_patch_ranges(self, rng):
        f = extract_features(rng.standard_normal((32, 32)), meta_patch("ffn", 3), total_layers=8)
        assert np.all(np.isfinite(f))
        for idx in (1, 6, 8, 9, 10, 11):
            assert 0.0 <= f[idx] <= 1.0
        assert f[8] == pytest.approx(3 / 8)
        assert f[10] == 1.0  # ffn one-hot

    def test_determinism(self, rng):
        w = rng.standard_normal((20, 20))
        a = extract_features(w, meta_patch(), 1)
        b = extract_features(w.copy(), meta_patch(), 1)
        assert a.tobytes() == b.tobytes()


class TestProbes:
    def test_full_ratio_is_lossless(self, rng):
        w = rng.standard_normal((32, 32))
        recs = probe_patch(w, ("tt", "tucker", "tr"), (1.0,), None, seed=3)
        assert len(recs) == 3
        assert all(r.measured_degradation <= 1e-9 for r in recs)

    def test_separable_patch_compresses_exactly(self, rng):
        # separable across the (4, 8, 4, 8) mode reshape, hence TN-rank one
        u = np.kron(rng.standard_normal(4), rng.standard_normal(8))
        v = np.kron(rng.standard_normal(4), rng.standard_normal(8))
        recs = probe_patch(np.outer(u, v), ("tt", "tucker"), (0.25, 0.15), None, seed=3)
        assert len(recs) == 4
        assert all(r.measured_degradation <= 1e-9 for r in recs)

    def test_monotone_in_ratio(self, rng):
        w = rng.standard_normal((64, 64))
        recs = probe_patch(w, ("tt",), (0.5, 0.25), None, seed=5)
        by_ratio = {r.target_ratio: r.measured_degradation for r in recs}
        assert by_ratio[0.25] >= by_ratio[0.5] - 1e-9

    def test_deterministic_given_seed(self, rng):
        w = rng.standard_normal((32, 32))
        a = probe_patch(w, ("tt",), (0.5, 0.25), None, seed=9)
        b = probe_patch(w.copy(), ("tt",), (0.5, 0.25), None, seed=9)
        assert [(r.family, r.target_ratio, r.measured_degradation) for r in a] == [
            (r.family, r.target_ratio, r.measured_degradation) for r in b
        ]


def linear_records(rng, n_patches, coeffs, intercept=0.2, shuffle=False):
    feats = rng.standard_normal((n_patches, 12))
    labels = intercept + feats @ coeffs
    labels = np.clip(labels, 0.0, 1.0)
    if shuffle:
        labels = labels[rng.permutation(n_patches)]
    return [
        (feats[i], ProbeRecord(patch_id=i, family="tt", target_ratio=0.5, measured_degradation=float(labels[i])))
        for i in range(n_patches)
    ]


def deg_head_mse(predictor, records):
    j = predictor.head_keys.index(head_key("tt", 0.5))
    feats = np.stack([f for f, _ in records])
    labels = np.array([r.measured_degradation for _, r in records])
    preds = predictor.forward(feats)[:, j]
    return float(np.mean((preds - labels) ** 2))


class TestPredictorTraining:
    def test_linear_function_recoverable(self):
        rng = np.random.default_rng(7)
        coeffs = np.zeros(12)
        coeffs[[0, 4, 7]] = [0.05, -0.04, 0.03]
        records = linear_records(rng, 192, coeffs)
        train, test = records[:128], records[128:]
        predictor = train_predictor(train, epochs=2000, lr=0.05, seed=1)
        assert deg_head_mse(predictor, test) <= 1e-3

    def test_constant_labels_fit_exactly(self):
        rng = np.random.default_rng(8)
        records = linear_records(rng, 64, np.zeros(12), intercept=0.3)
        predictor = train_predictor(records, epochs=2000, lr=0.05, seed=1)
        assert predictor.training_log["degenerate_targets"]
        assert deg_head_mse(predictor, records) <= 1e-5

    def test_shuffled_labels_fit_worse(self):
        rng = np.random.default_rng(9)
        coeffs = np.zeros(12)
        coeffs[[1, 5]] = [0.06, -0.05]
        clean = linear_records(rng, 192, coeffs)
        rng2 = np.random.default_rng(9)
        shuffled = linear_records(rng2, 192, coeffs, shuffle=True)
        test = clean[128:]
        p_clean = train_predictor(clean[:128], epochs=1500, lr=0.05, seed=2)
        p_shuf = train_predictor(shuffled[:128], epochs=1500, lr=0.05, seed=2)
        assert deg_head_mse(p_shuf, test) >= deg_head_mse(p_clean, test)

    def test_training_never_worsens_fit(self):
        rng = np.random.default_rng(10)
        records = linear_records(rng, 64, rng.normal(scale=0.05, size=12))
        predictor = train_predictor(records, epochs=100, lr=5.0, seed=3)  # hostile step size
        assert predictor.training_log["final_mse"] <= predictor.training_log["initial_mse"]

    def test_too_few_records_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            train_predictor(linear_records(rng, 8, np.zeros(12)))

    def test_score_head_bounded(self):
        rng = np.random.default_rng(12)
        records = linear_records(rng, 64, np.zeros(12), intercept=0.4)
        predictor = train_predictor(records, epochs=200, lr=0.05, seed=4)
        wild = rng.standard_normal((1000, 12)) * 50
        for feats in wild:
            rec = predict(predictor, feats)
            assert 0.0 <= rec.score <= 1.0

    def test_determinism(self):
        rng = np.random.default_rng(13)
        records = linear_records(rng, 64, np.zeros(12), intercept=0.25)
        a = train_predictor(records, epochs=300, lr=0.05, seed=5)
        b = train_predictor(records, epochs=300, lr=0.05, seed=5)
        assert a.w1.tobytes() == b.w1.tobytes()
        assert a.w2.tobytes() == b.w2.tobytes()


@pytest.fixture(scope="module")
def analysis():
    rng = np.random.default_rng(42)
    model = ModelContainer()
    for i in range(4):
        gamma = 0.4 if i % 2 == 0 else 0.004  # compressible vs fragile
        model.add(f"layer{i}", decayed_matrix(rng, 128, 128, gamma), i, "ffn")
    calib = {
        name: np.random.default_rng(100 + i).standard_normal((128, 64))
        for i, name in enumerate(model.names())
    }
    return analyze(
        model,
        calib,
        patch_size=(64, 64),
        families=("tt",),
        ratio_grid=(0.5, 0.35, 0.25, 0.15),
        degradation_cap=0.05,
        probe_stride=1,
        seed=0,
    )


class TestAnalyzeEndToEnd:

    def test_probe_coverage(self, analysis):
        assert len(analysis.probes) >= 32
        assert len(analysis.records) == len(analysis.patches) == 16

    def test_recommendations_agree_with_probes(self, analysis):
        measured = {}
        for probe in analysis.probes:
            measured.setdefault(probe.patch_id, {})[probe.target_ratio] = probe.measured_degradation
        hits = total = 0
        for rec in analysis.records:
            if rec.patch_id not in measured:
                continue
            curve = measured[rec.patch_id]
            admissible = [r for r, d in curve.items() if d <= 0.05]
            truth = min(admissible) if admissible else None
            total += 1
            if rec.recommendations["tt"].target_ratio == truth:
                hits += 1
        assert total >= 8
        assert hits / total >= 0.8

    def test_fragile_patches_keep_dense(self, analysis):
        fragile_ids = {p.patch_id for p in analysis.patches if p.layer_name in ("layer1", "layer3")}
        dense_recs = [
            rec for rec in analysis.records
            if rec.patch_id in fragile_ids and rec.recommendations["tt"].target_ratio is None
        ]
        assert len(dense_recs) >= 6  # 8 fragile patches, predictor may miss a couple

    def test_scores_separate_fragile_from_compressible(self, analysis):
        fragile = [r.score for r in analysis.records if r.patch_id in
                   {p.patch_id for p in analysis.patches if p.layer_name in ("layer1", "layer3")}]
        robust = [r.score for r in analysis.records if r.patch_id in
                  {p.patch_id for p in analysis.patches if p.layer_name in ("layer0", "layer2")}]
        assert np.mean(fragile) > np.mean(robust)
