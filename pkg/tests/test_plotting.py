import numpy as np

from cmlf import plotting

LABELS = ("joint", "wo_cm", "w_cm")


def _png_ok(path):
    return path.exists() and path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_every_figure_renders(tmp_path):
    rng = np.random.default_rng(0)
    curves = {v: rng.uniform(0, 1, (20, 6)) for v in LABELS}
    stds = {v: rng.uniform(0, 0.1, (20, 6)) for v in LABELS}
    out = [
        plotting.classification_bars({v: {"y_V": [0.5, 0.1], "y_T": [0.4, 0.1], "both": [0.6, 0.1]} for v in LABELS},
                                     tmp_path / "cls.png", chance=1 / 12),
        plotting.nmse_bars({v: c.mean(0) for v, c in curves.items()}, {v: s.mean(0) for v, s in stds.items()},
                           tmp_path / "bars.png", title="t"),
        plotting.nmse_curves(curves, stds, tmp_path / "curves.png", shade=0.1),
        plotting.nmse_curves(curves, {}, tmp_path / "curves_ext.png", properties=plotting.EXTRINSIC_NAMES),
        plotting.surprise_bars({"w_cm": 0.2, "wo_cm": 0.3}, {"w_cm": 0.5, "wo_cm": 0.4}, tmp_path / "sur.png",
                               {"w_cm": "*"}),
        plotting.activation_bars({"w_cm": [0.3, 0.4], "w_cm_early": [0.5, 0.6]}, tmp_path / "act.png"),
        plotting.perturbation_grid({v: {"0.0,0.0": [0.1] * 6, "0.0,0.35": [0.3] * 6} for v in LABELS},
                                   tmp_path / "grid.png"),
        plotting.training_curves([{"epoch": e, "split": s, "total": 100.0 / (e + 1)}
                                  for e in range(5) for s in ("train", "val")], tmp_path / "loss.png"),
    ]
    for p in out:
        assert _png_ok(p), p


def test_creates_parent_dirs(tmp_path):
    p = plotting.activation_bars({"w_cm": [0.3], "w_cm_early": [0.5]}, tmp_path / "a" / "b" / "act.png")
    assert _png_ok(p)
