import numpy as np

from prunekit import lassopath as lp
from prunekit import plotting
from prunekit.probe import TransferMatrix

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.read_bytes()[:8] == PNG


class TestPlots:
    def test_history(self, tmp_path):
        rows = [{"epoch": e, "split": s, "loss": 1.0 / (e + 1), "metric": e / 3}
                for e in range(3) for s in ("train", "val")]
        plotting.history(rows, tmp_path / "h.png", "t")
        assert is_png(tmp_path / "h.png")

    def test_filter_correlations(self, tmp_path):
        plotting.filter_correlations(np.linspace(-1, 1, 20), tmp_path / "c.png", "yaw", "conv3")
        assert is_png(tmp_path / "c.png")

    def test_transfer_heatmap_with_absent_and_nan(self, tmp_path):
        acc = np.array([[0.9, np.nan], [0.6, 0.7]])
        red = np.array([[0.0, np.nan], [np.nan, 10.0]])
        absent = np.array([[False, True], [False, False]])
        tm = TransferMatrix(["a", "b"], ["x", "y"], acc, red, absent, np.zeros((2, 2)))
        plotting.transfer_heatmap(tm, tmp_path / "m.png")
        assert is_png(tmp_path / "m.png")

    def test_curve_and_layers(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(120, 6))
        curve = lp.curve_from_features(X[:90], X[:90, 0], X[90:], X[90:, 0], "conv1", count=20)
        plotting.characteristic_curve(curve, tmp_path / "k.png")
        table = [{"layer": f"conv{i}", "rmse_train": 1.0 / i, "rmse_heldout": 1.2 / i} for i in (1, 2, 3)]
        plotting.layer_probes(table, tmp_path / "l.png", "yaw")
        plotting.inference_times([{"before": 2e-3, "after": 1e-3, "label": "yaw"}], tmp_path / "t.png")
        assert all(is_png(tmp_path / n) for n in ("k.png", "l.png", "t.png"))
