import json

import numpy as np
import pytest

from cmlf.dataset import (
    DatasetConfig,
    assign_splits,
    export_dataset,
    generate_dataset,
    load_dataset,
    property_matrix,
)
from cmlf.errors import ConfigError, DatasetLoadError
from cmlf.simulator import PerturbationSpec, perturb


@pytest.fixture(scope="module")
def desk():
    return generate_dataset(DatasetConfig.desk(seed=0))


def test_desk_counts(desk):
    aligned = [t for t in desk.trajectories if not t.object.surprise_flag]
    assert len(aligned) == 96
    assert len(desk.split("surprise")) == 6 * 4 * 2
    assert len(desk.objects) == 12
    sizes = {k: len(v) for k, v in desk.splits.items()}
    assert sizes["val"] == sizes["test"] == 12 and sizes["train"] == 72


def test_full_profile_count_is_arithmetic():
    cfg = DatasetConfig()
    assert 75 * len(cfg.interaction_configs()) * cfg.repeats == 3600


def test_splits_disjoint_and_stratified(desk):
    s = {k: set(v) for k, v in desk.splits.items()}
    assert not (s["train"] & s["val"]) and not (s["train"] & s["test"]) and not (s["val"] & s["test"])
    assert s["train"] | s["val"] | s["test"] | s["surprise"] == {t.traj_id for t in desk.trajectories}
    for name in ("train", "val", "test"):
        assert {t.object.object_index for t in desk.split(name)} == {o.object_index for o in desk.objects}


def test_assign_splits_fractions():
    class _O:
        def __init__(self, i):
            self.object_index, self.surprise_flag = i, False

    class _T:
        def __init__(self, i, o):
            self.traj_id, self.object = i, _O(o)

    trajs = [_T(i, i // 48) for i in range(48 * 75)]
    sp = assign_splits(trajs, 0.1, 0.1, seed=0)
    n = len(trajs)
    assert abs(len(sp["val"]) / n - 0.1) < 0.01 and abs(len(sp["test"]) / n - 0.1) < 0.01


def test_generation_deterministic():
    a = generate_dataset(DatasetConfig.desk(seed=1, include_surprise=False))
    b = generate_dataset(DatasetConfig.desk(seed=1, include_surprise=False))
    assert a.splits == b.splits
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.obs_tactile, y.obs_tactile) and x.seed == y.seed


def test_config_not_mutated():
    cfg = DatasetConfig.desk(seed=0, include_surprise=False)
    generate_dataset(cfg)
    assert cfg.catalog.include_surprise is True


def test_export_load_roundtrip(desk, tmp_path):
    export_dataset(desk, tmp_path)
    back = load_dataset(tmp_path)
    assert back.splits == desk.splits
    assert back.config.to_dict() == desk.config.to_dict()
    for x, y in zip(desk.trajectories, back.trajectories):
        assert x.object == y.object and x.traj_id == y.traj_id
        for k in ("actions", "phases", "obs_visual", "obs_tactile", "pose_gt", "visual_present"):
            a, b = getattr(x, k), getattr(y, k)
            assert a.dtype == b.dtype and np.array_equal(a, b)


def test_perturb_commutes_with_export(desk, tmp_path):
    export_dataset(desk, tmp_path)
    back = load_dataset(tmp_path)
    spec = PerturbationSpec(0.2, 0.15)
    p1 = perturb(desk.trajectories[5], spec, seed=11)
    p2 = perturb(back.trajectories[5], spec, seed=11)
    assert np.array_equal(p1.obs_visual, p2.obs_visual)


def test_load_errors_name_the_field(desk, tmp_path):
    export_dataset(desk, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    del manifest["splits"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetLoadError, match="splits"):
        load_dataset(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["splits"] = desk.splits
    del manifest["trajectories"][0]["seed"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetLoadError, match="seed"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetLoadError):
        load_dataset(tmp_path)
    with pytest.raises(DatasetLoadError):
        load_dataset(tmp_path / "nowhere")


def test_config_validation():
    with pytest.raises(ConfigError):
        generate_dataset(DatasetConfig(H=3))
    with pytest.raises(ConfigError):
        generate_dataset(DatasetConfig(val_fraction=0.6, test_fraction=0.5))


def test_property_matrix(desk):
    P = property_matrix(desk.split("test"))
    assert P.shape == (12, 6)
    assert np.all(P[:, 3] > 0) and np.all((P[:, 5] > 0) & (P[:, 5] < 2))
