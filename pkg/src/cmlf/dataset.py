"""Dataset generation, splitting and the on-disk format.

Layout of a dataset directory::

    manifest.json               format version, config, catalog, trajectory index, splits
    trajectories/traj_00000.npz one uncompressed .npz per trajectory

Each ``.npz`` holds ``actions (H,3)``, ``phases (H,)``, ``obs_visual``,
``obs_tactile``, ``pose_gt (H,6)``, ``visual_present (H,)`` and
``tactile_present (H,)``. The ``.npy`` members carry their own dtype/shape
header, so ``H`` and the observation dims are recoverable from any file alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetLoadError
from .simulator import (
    Catalog,
    CatalogConfig,
    ObjectSpec,
    ObservationConfig,
    Trajectory,
    build_catalog,
    interaction_grid,
    make_action_sequence,
    select_subset,
    simulate_trajectory,
)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test", "surprise")

# Latin square over grip and speed levels: each level appears once.
DESK_CONFIGS = [(0, 1), (1, 3), (2, 0), (3, 2)]


@dataclass
class DatasetConfig:
    n_objects: int | None = None  # None keeps the whole aligned catalog
    configs: list | None = None  # (grip, speed) pairs; None means all 16
    repeats: int = 3
    H: int = 90
    seed: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    include_surprise: bool = True
    catalog: CatalogConfig = field(default_factory=CatalogConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)

    def validate(self):
        if self.repeats < 1 or self.H < 5:
            raise ConfigError(f"repeats must be >= 1 and H >= 5, got {self.repeats}, {self.H}")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1
                and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("split fractions must be in [0, 1) and sum below 1")
        self.catalog.validate()
        self.observation.validate()

    def interaction_configs(self) -> list:
        return [tuple(c) for c in (self.configs if self.configs is not None else interaction_grid())]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        d = dict(d)
        cat = CatalogConfig(**d.pop("catalog", {}))
        obs = ObservationConfig(**d.pop("observation", {}))
        if d.get("configs") is not None:
            d["configs"] = [tuple(c) for c in d["configs"]]
        return cls(catalog=cat, observation=obs, **d)

    @classmethod
    def desk(cls, seed: int = 0, **overrides) -> DatasetConfig:
        """12 aligned objects, 4 interaction configs, 2 repeats (96 trajectories),
        16x16 visual frames flattened to vectors."""
        base = dict(n_objects=12, configs=list(DESK_CONFIGS), repeats=2, H=90, seed=seed,
                    observation=ObservationConfig(visual_mode="vector", visual_res=16))
        base.update(overrides)
        return cls(**base)


@dataclass
class Dataset:
    config: DatasetConfig
    catalog: Catalog
    trajectories: list
    splits: dict  # split name -> list of traj ids

    def __post_init__(self):
        self._by_id = {t.traj_id: t for t in self.trajectories}

    def split(self, name: str) -> list:
        return [self._by_id[i] for i in self.splits.get(name, [])]

    def by_id(self, traj_id: int) -> Trajectory:
        return self._by_id[traj_id]

    @property
    def objects(self) -> list:
        """Objects that actually appear in the aligned part of the dataset."""
        seen = sorted({t.object.object_index for t in self.trajectories if not t.object.surprise_flag})
        lookup = {o.object_index: o for o in self.catalog.all}
        return [lookup[i] for i in seen]

    def __len__(self):
        return len(self.trajectories)


def child_seed(seed: int, object_index: int, config_index: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, object_index, config_index, repeat]).generate_state(1)[0])


def assign_splits(trajectories: list, val_fraction: float, test_fraction: float, seed: int) -> dict:
    """Per-object stratified split; surprise trajectories get their own split.

    Each object contributes ``round(fraction * n)`` trajectories (at least one when
    it has three or more) to validation and to test, so every object seen in
    training can also be probed at evaluation time.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 555]))
    splits = {name: [] for name in SPLITS}
    groups: dict[int, list] = {}
    for t in trajectories:
        if t.object.surprise_flag:
            splits["surprise"].append(t.traj_id)
        else:
            groups.setdefault(t.object.object_index, []).append(t.traj_id)
    for _, ids in sorted(groups.items()):
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)

        def count(frac):
            k = int(np.floor(frac * n + 0.5))
            return max(k, 1) if (n >= 3 and frac > 0) else k

        n_val, n_test = count(val_fraction), count(test_fraction)
        splits["val"] += ids[:n_val]
        splits["test"] += ids[n_val:n_val + n_test]
        splits["train"] += ids[n_val + n_test:]
    return {k: sorted(v) for k, v in splits.items()}


def generate_dataset(config: DatasetConfig) -> Dataset:
    config.validate()
    cat_config = dataclasses.replace(config.catalog, include_surprise=config.include_surprise)
    catalog = build_catalog(cat_config, seed=config.seed)
    objects = catalog.aligned
    if config.n_objects is not None:
        objects = select_subset(objects, config.n_objects, config.seed)
    objects = list(objects) + (list(catalog.surprise) if config.include_surprise else [])
    trajectories = []
    configs = config.interaction_configs()
    for obj in objects:
        for ci, (grip, speed) in enumerate(configs):
            actions = make_action_sequence(grip, speed, config.H)
            for r in range(config.repeats):
                s = child_seed(config.seed, obj.object_index, ci, r)
                tr = simulate_trajectory(obj, actions, s, config.observation)
                tr.traj_id = len(trajectories)
                tr.config_index, tr.repeat = ci, r
                tr.grip_level, tr.speed_level = grip, speed
                trajectories.append(tr)
    splits = assign_splits(trajectories, config.val_fraction, config.test_fraction, config.seed)
    return Dataset(config, catalog, trajectories, splits)


# --------------------------------------------------------------------------- I/O

_ARRAYS = ("actions", "phases", "obs_visual", "obs_tactile", "pose_gt", "visual_present", "tactile_present")
_TRAJ_FIELDS = ("id", "file", "object_index", "config_index", "repeat", "grip_level", "speed_level", "seed")


def export_dataset(dataset: Dataset, path) -> dict:
    """Write ``dataset`` under ``path`` and return the manifest."""
    path = Path(path)
    (path / "trajectories").mkdir(parents=True, exist_ok=True)
    index = []
    for tr in dataset.trajectories:
        fname = f"trajectories/traj_{tr.traj_id:05d}.npz"
        with open(path / fname, "wb") as fh:
            np.savez(fh, **{k: getattr(tr, k) for k in _ARRAYS})
        index.append({
            "id": tr.traj_id, "file": fname, "object_index": tr.object.object_index,
            "config_index": tr.config_index, "repeat": tr.repeat, "grip_level": tr.grip_level,
            "speed_level": tr.speed_level, "seed": tr.seed,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataset.config.to_dict(),
        "catalog": {
            "aligned": [o.to_dict() for o in dataset.catalog.aligned],
            "surprise": [o.to_dict() for o in dataset.catalog.surprise],
        },
        "trajectories": index,
        "splits": dataset.splits,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, path / "manifest.json")
    return manifest


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise DatasetLoadError(f"manifest is missing field '{key}' in {where}")
    return d[key]


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DatasetLoadError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"corrupt manifest {mpath}: {exc}") from exc
    version = _require(manifest, "format_version", "manifest")
    if version != FORMAT_VERSION:
        raise DatasetLoadError(f"unsupported dataset format_version {version}")
    config = DatasetConfig.from_dict(_require(manifest, "config", "manifest"))
    cat = _require(manifest, "catalog", "manifest")
    catalog = Catalog(
        [ObjectSpec(**o) for o in _require(cat, "aligned", "catalog")],
        [ObjectSpec(**o) for o in _require(cat, "surprise", "catalog")],
    )
    lookup = {o.object_index: o for o in catalog.all}
    trajectories = []
    for entry in _require(manifest, "trajectories", "manifest"):
        for key in _TRAJ_FIELDS:
            _require(entry, key, f"trajectory entry {entry.get('id', '?')}")
        fpath = path / entry["file"]
        try:
            with np.load(fpath) as z:
                arrays = {k: z[k] for k in _ARRAYS}
        except (OSError, KeyError, ValueError) as exc:
            raise DatasetLoadError(f"cannot read trajectory file {fpath}: {exc}") from exc
        tr = Trajectory(object=lookup[entry["object_index"]], seed=entry["seed"], **arrays)
        tr.traj_id = entry["id"]
        tr.config_index, tr.repeat = entry["config_index"], entry["repeat"]
        tr.grip_level, tr.speed_level = entry["grip_level"], entry["speed_level"]
        trajectories.append(tr)
    splits = _require(manifest, "splits", "manifest")
    for name in ("train", "val", "test"):
        _require(splits, name, "splits")
    return Dataset(config, catalog, trajectories, {k: list(v) for k, v in splits.items()})


def property_matrix(trajectories: list) -> np.ndarray:
    """``(N, 6)`` ground truth: shape, height, texture, stiffness, mass, friction."""
    return np.stack([t.object.properties.as_array() for t in trajectories])
