import numpy as np
import pytest

from prunekit import probe as pr
from prunekit.features import FeatureMatrix

from conftest import tiny_plain


def fmat(X, **targets):
    return FeatureMatrix(X, "relu", list(range(X.shape[1])), targets)


class TestTaskSpec:
    def test_binned_edges(self):
        t = pr.TaskSpec.binned("age", 0, 100, 10)
        assert t.n_bins == 10 and t.edges[0] == 0 and t.edges[-1] == 100

    @pytest.mark.parametrize("kw", [
        dict(kind="nope"),
        dict(kind="multiclass-binned", edges=(0, 1, 1)),
        dict(kind="multiclass-binned"),
        dict(kind="binary", edges=(0, 1, 2)),
        dict(kind="classification"),
        dict(kind="binary", columns=("a", "b")),
    ])
    def test_inconsistent_fields(self, kw):
        with pytest.raises(ValueError):
            pr.TaskSpec("t", **kw)

    def test_dict_round_trip(self):
        t = pr.TaskSpec("acc", "multilabel", ("glasses", "hat"))
        assert pr.TaskSpec.from_dict(t.to_dict()) == t


class TestBinning:
    def test_closed_right(self):
        assert pr.bin_values([10.0, 10.0 + 1e-9], [0, 10, 20, 30]).tolist() == [0, 1]

    def test_clamping(self):
        assert pr.bin_values([-5, 100], [0, 10, 20, 30]).tolist() == [0, 2]


class TestThreshold:
    def test_separable(self):
        assert pr.best_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(0.5)

    def test_score_at_tau_is_positive(self, rng):
        X = rng.normal(size=(40, 2))
        m = pr.fit_probe(fmat(X, t=(X[:, 0] > 0).astype(float)), pr.TaskSpec("t", "binary"))
        m.weights = np.zeros_like(m.weights)
        m.intercept = m.tau.copy()
        s, lab = pr.predict(m, np.zeros((1, 2)))
        assert s[0] == m.tau[0] and lab[0] == 1


class TestFit:
    def test_exact_linear(self, rng):
        X = rng.normal(size=(200, 5))
        age = X @ np.array([10.0, -5, 3, 2, 1]) + 50
        task = pr.TaskSpec.binned("age", 0, 100, 10)
        m = pr.fit_probe(fmat(X, age=age), task, seed=1)
        assert m.diagnostics["rmse_train"] < 1e-6
        split = pr.Split.make(200, seed=1)
        held = fmat(X, age=age).rows(split.test)
        assert np.array_equal(pr.predict(m, held)[1], pr.true_labels(task, held))

    def test_noise_is_chance(self):
        accs = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            X, y = r.normal(size=(400, 8)), r.integers(0, 2, 400).astype(float)
            accs.append(pr.fit_probe(fmat(X, t=y), pr.TaskSpec("t", "binary"), seed=seed).diagnostics["acc_test"])
        assert all(0.4 <= a <= 0.6 for a in accs)

    def test_rank_deficient_uses_jitter(self, rng):
        X = rng.normal(size=(50, 3))
        X = np.column_stack([X, X[:, 0]])
        y = X[:, 0] + X[:, 1]
        W, b = pr.least_squares(X, y[:, None])
        assert np.all(np.isfinite(W))
        np.testing.assert_allclose(W[0, 0], W[3, 0], atol=1e-8)  # symmetric split between twins
        np.testing.assert_allclose(X @ W[:, 0] + b, y, atol=1e-4)

    def test_constant_target(self, rng):
        with pytest.raises(pr.ConstantTargetError):
            pr.fit_probe(fmat(rng.normal(size=(20, 2)), t=np.ones(20)), pr.TaskSpec("t", "binary"))

    def test_empty_split(self, rng):
        fm = fmat(rng.normal(size=(20, 2)), t=rng.integers(0, 2, 20).astype(float))
        with pytest.raises(pr.EmptySplitError):
            pr.fit_probe(fm, pr.TaskSpec("t", "binary"), pr.Split(np.arange(20), np.array([], int), np.array([], int)))

    def test_dimension_mismatch(self, rng):
        fm = fmat(rng.normal(size=(40, 3)), t=rng.integers(0, 2, 40).astype(float))
        m = pr.fit_probe(fm, pr.TaskSpec("t", "binary"))
        with pytest.raises(pr.DimensionMismatchError):
            pr.predict(m, np.zeros((2, 4)))

    def test_no_test_leakage(self, rng):
        X = rng.normal(size=(120, 4))
        y = (X[:, 0] + 0.5 * rng.normal(size=120) > 0).astype(float)
        split = pr.Split.make(120, seed=5)
        task = pr.TaskSpec("t", "binary")
        full = pr.fit_probe(fmat(X, t=y), task, split)
        keep = np.concatenate([split.train, split.val])
        nt = len(split.train)
        reduced = pr.fit_probe(fmat(X, t=y).rows(keep), task,
                               pr.Split(np.arange(nt), np.arange(nt, len(keep)), np.array([], int)))
        assert np.array_equal(full.weights, reduced.weights)
        assert np.array_equal(full.intercept, reduced.intercept) and np.array_equal(full.tau, reduced.tau)

    def test_rescaling_invariance(self, rng):
        X = rng.normal(size=(150, 4))
        y = (X @ [1.0, -1, 0.5, 0] + 0.3 * rng.normal(size=150) > 0).astype(float)
        task = pr.TaskSpec("t", "binary")
        a = pr.fit_probe(fmat(X, t=y), task, seed=2)
        Xs = X * np.array([4.0, 0.25, 1.0, 1e3])
        b = pr.fit_probe(fmat(Xs, t=y), task, seed=2)
        assert np.array_equal(pr.predict(a, X)[1], pr.predict(b, Xs)[1])

    def test_deterministic(self, rng):
        fm = fmat(rng.normal(size=(60, 3)), t=rng.integers(0, 2, 60).astype(float))
        a, b = (pr.fit_probe(fm, pr.TaskSpec("t", "binary"), seed=4) for _ in range(2))
        assert a.diagnostics == b.diagnostics and np.array_equal(a.weights, b.weights)

    def test_classification_one_vs_rest(self, rng):
        centers = rng.normal(scale=4, size=(3, 5))
        y = rng.integers(0, 3, 300)
        X = centers[y] + rng.normal(size=(300, 5))
        m = pr.fit_probe(fmat(X, emo=y.astype(float)), pr.TaskSpec("emo", "classification", n_classes=3))
        assert m.weights.shape == (5, 3)
        assert m.diagnostics["acc_test"] > 0.9

    def test_multilabel_mean_accuracy(self, rng):
        X = rng.normal(size=(300, 4))
        a = (X[:, 0] > 0).astype(float)
        b = rng.integers(0, 2, 300).astype(float)
        task = pr.TaskSpec("acc", "multilabel", ("a", "b"))
        m = pr.fit_probe(fmat(X, a=a, b=b), task, seed=0)
        fm = fmat(X, a=a, b=b).rows(pr.Split.make(300, seed=0).test)
        single = [pr.fit_probe(fmat(X, **{c: v}), pr.TaskSpec(c, "binary"), seed=0).diagnostics["acc_test"]
                  for c, v in (("a", a), ("b", b))]
        assert m.diagnostics["acc_test"] == pytest.approx(np.mean(single))
        assert pr.predict(m, fm)[1].shape == (len(fm.X), 2)

    def test_save_load(self, rng, tmp_path):
        fm = fmat(rng.normal(size=(60, 3)), t=rng.integers(0, 2, 60).astype(float))
        m = pr.fit_probe(fm, pr.TaskSpec("t", "binary"))
        m.save(tmp_path / "p")
        back = pr.ProbeModel.load(tmp_path / "p")
        assert back.task == m.task and back.diagnostics == m.diagnostics
        assert np.array_equal(back.weights, m.weights) and np.array_equal(back.tau, m.tau)


class TestTransferMatrix:
    def test_cells_match_independent_runs(self, rng):
        tasks = [pr.TaskSpec("a", "binary"), pr.TaskSpec("b", "binary"), pr.TaskSpec.binned("c", 0, 1, 4)]
        feats = {}
        for net in ("n1", "n2"):
            for t in tasks:
                X = rng.normal(size=(80, 3))
                y = X[:, 0] > 0 if t.kind == "binary" else 1 / (1 + np.exp(-X[:, 1]))
                feats[(net, t.name)] = fmat(X, **{t.name: y.astype(float)})
        tm = pr.transfer_matrix(feats, ["n1", "n2"], tasks, {"n1": "a", "n2": "b"}, seed=3)
        assert tm.accuracy.shape == (2, 3)
        for i, net in enumerate(("n1", "n2")):
            for j, t in enumerate(tasks):
                assert tm.accuracy[i, j] == pr.fit_probe(feats[(net, t.name)], t, seed=3).diagnostics["acc_test"]
        assert tm.reduction[0, 0] == 0 and tm.reduction[1, 1] == 0
        assert np.isnan(tm.reduction[:, 2]).all()

    def test_missing_cell_is_absent(self, rng):
        X = rng.normal(size=(40, 2))
        feats = {("n1", "a"): fmat(X, a=(X[:, 0] > 0).astype(float))}
        tm = pr.transfer_matrix(feats, ["n1", "n2"], [pr.TaskSpec("a", "binary")], {"n1": "a"})
        assert tm.absent.tolist() == [[False], [True]]
        assert np.isnan(tm.accuracy[1, 0])
        rows = list(tm.to_rows())
        assert rows[1]["accuracy"] is None

    def test_outputs(self, rng, tmp_path):
        X = rng.normal(size=(40, 2))
        feats = {("n1", "a"): fmat(X, a=(X[:, 0] > 0).astype(float))}
        tm = pr.transfer_matrix(feats, ["n1"], [pr.TaskSpec("a", "binary")], {"n1": "a"})
        tm.write_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().startswith("primary,task,accuracy,reduction_pct")
        assert '"reduction_pct": 0.0' in tm.to_json()


class TestTiming:
    def test_single_sample_flagged(self, rng):
        net = tiny_plain(rng)
        r = pr.probe_timing(net, "c2", rng.normal(size=(1, 2, 7, 7)), [1], max_epochs=2)
        assert not r.reliable and r.ratio > 0

    def test_head_network_freezes_nothing_extra(self, rng):
        net = tiny_plain(rng)
        h = pr.head_network(net, "c1", 2)
        assert h.ids == ["c1", "r1", "probe_gap", "probe_fc"]
        assert np.array_equal(h.params["c1.weight"], net.params["c1.weight"])
