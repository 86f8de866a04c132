"""Latent probes: KRR alignment, NMSE-over-time, logistic classification and the
perturbation sweep, plus the :class:`EvalReport` container."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import pdist
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GroupKFold, KFold, StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .core import EXTRINSIC_NAMES, INTRINSIC_NAMES, property_variance
from .dataset import property_matrix
from .errors import ContractViolation, InsufficientDataError, StratificationError
from .model import CMLF, Variant, stack_beliefs
from .simulator import PerturbationSpec, perturb

PROPERTY_NAMES = EXTRINSIC_NAMES + INTRINSIC_NAMES
POSE_NAMES = ("x", "y", "z", "rx", "ry", "rz")
RIDGE_GRID = (1e-3, 1e-2, 1e-1)
FINAL_WINDOW = 0.1
SIGMA_GRID = (0.0, 0.2, 0.4)
C_GRID = (0.0, 0.15, 0.35)
MIN_FIT_SAMPLES = 10


# --------------------------------------------------------------------------- KRR


def median_heuristic_gamma(X) -> float:
    """RBF ``gamma = 1 / (2 * median_pairwise_distance^2)``."""
    X = np.asarray(X, dtype=float)
    d = pdist(X)
    d = d[d > 0]
    med = np.median(d) if len(d) else 1.0
    return 1.0 / (2.0 * med * med)


@dataclass
class KRRRegressor:
    """RBF kernel ridge regressor on standardized targets."""

    gamma: float
    alpha: float
    model: KernelRidge
    y_mean: np.ndarray
    y_scale: np.ndarray
    in_dim: int

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        shape = X.shape
        if shape[-1] != self.in_dim:
            raise ContractViolation(f"regressor expects inputs of dim {self.in_dim}, got {shape[-1]}")
        out = self.model.predict(X.reshape(-1, shape[-1]))
        return (out * self.y_scale + self.y_mean).reshape(shape[:-1] + (-1,))


def fit_krr(X, Y, groups=None, alphas=RIDGE_GRID, seed: int = 0) -> KRRRegressor:
    """Fit RBF-KRR with median-heuristic bandwidth and ridge picked by 3-fold CV.

    ``groups`` (e.g. trajectory ids) keeps correlated samples in the same fold.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) < MIN_FIT_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_FIT_SAMPLES} samples to fit, got {len(X)}")
    gamma = median_heuristic_gamma(X)
    y_mean = Y.mean(0)
    y_scale = Y.std(0)
    y_scale[y_scale == 0] = 1.0
    Ys = (Y - y_mean) / y_scale
    if groups is not None and len(np.unique(groups)) >= 3:
        splits = list(GroupKFold(n_splits=3).split(X, Ys, groups))
    else:
        splits = list(KFold(n_splits=3, shuffle=True, random_state=seed).split(X))
    best_alpha, best_err = alphas[0], np.inf
    for a in alphas:
        err = 0.0
        for tr, te in splits:
            m = KernelRidge(alpha=a, kernel="rbf", gamma=gamma).fit(X[tr], Ys[tr])
            err += np.mean((m.predict(X[te]) - Ys[te]) ** 2)
        if err < best_err:
            best_alpha, best_err = a, err
    model = KernelRidge(alpha=best_alpha, kernel="rbf", gamma=gamma).fit(X, Ys)
    return KRRRegressor(gamma, best_alpha, model, y_mean, y_scale, X.shape[1])


@dataclass
class AlignmentModel:
    f_V_y: KRRRegressor  # y^V -> extrinsic (shape, height, texture)
    f_T_y: KRRRegressor  # y^T -> intrinsic (stiffness, mass, friction)
    f_V_z: KRRRegressor  # z^V -> pose (translation, axis-angle)
    fitted: bool = True

    def predict_properties(self, y_V, y_T) -> np.ndarray:
        """``(..., 6)`` in :data:`PROPERTY_NAMES` order."""
        return np.concatenate([self.f_V_y.predict(y_V), self.f_T_y.predict(y_T)], axis=-1)


# --------------------------------------------------------------------------- rollouts


@dataclass
class Rollout:
    """Filtered latent means for a set of trajectories, ``(N, H, d)`` each."""

    traj_ids: list
    y_V: np.ndarray
    y_T: np.ndarray
    z_V: np.ndarray
    z_T: np.ndarray
    y_V_logvar: np.ndarray
    y_T_logvar: np.ndarray


def eval_cm_active(model: CMLF) -> bool:
    """After training the cross-modal gate of a w_cm model is open."""
    return model.variant == Variant.W_CM


def rollout_latents(model: CMLF, trajectories, cm_active: bool | None = None, batch_size: int = 64) -> Rollout:
    """Deterministic (mean-propagating) rollouts of ``trajectories``."""
    if not trajectories:
        raise ContractViolation("no trajectories to roll out")
    if cm_active is None:
        cm_active = eval_cm_active(model)
    model.eval()
    parts = {k: [] for k in ("y_V", "y_T", "z_V", "z_T")}
    lvs = {"y_V": [], "y_T": []}
    with torch.no_grad():
        for start in range(0, len(trajectories), batch_size):
            batch = model.make_batch(trajectories[start:start + batch_size])
            states = model.filter_rollout(batch, cm_active=cm_active)
            for k in parts:
                mean, lv = stack_beliefs(states, k)
                parts[k].append(mean.astype(np.float64))
                if k in lvs:
                    lvs[k].append(lv.astype(np.float64))
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return Rollout([t.traj_id for t in trajectories], cat["y_V"], cat["y_T"], cat["z_V"], cat["z_T"],
                   np.concatenate(lvs["y_V"]), np.concatenate(lvs["y_T"]))


def final_window(H: int, fraction: float = FINAL_WINDOW) -> slice:
    k = max(1, int(round(fraction * H)))
    return slice(H - k, H)


def fit_alignment(model: CMLF, val_split, seed: int = 0, pose_stride: int = 3) -> AlignmentModel:
    """Fit the three KRR probes on validation rollouts.

    Property regressors use the final 10% of time steps; the pose regressor uses
    every ``pose_stride``-th step over the full duration.
    """
    ro = rollout_latents(model, list(val_split))
    return fit_alignment_from_latents(ro, property_matrix(val_split), np.stack([t.pose_gt for t in val_split]),
                                      seed=seed, pose_stride=pose_stride)


def fit_alignment_from_latents(ro: Rollout, props, poses, seed: int = 0, pose_stride: int = 3) -> AlignmentModel:
    N, H = ro.y_V.shape[:2]
    props = np.asarray(props, dtype=float)
    win = final_window(H)
    k = win.stop - win.start
    groups = np.repeat(np.arange(N), k)
    yV = ro.y_V[:, win].reshape(N * k, -1)
    yT = ro.y_T[:, win].reshape(N * k, -1)
    target = np.repeat(props, k, axis=0)
    f_V_y = fit_krr(yV, target[:, :3], groups, seed=seed)
    f_T_y = fit_krr(yT, target[:, 3:], groups, seed=seed)
    steps = np.arange(0, H, pose_stride)
    zV = ro.z_V[:, steps].reshape(N * len(steps), -1)
    pose = np.asarray(poses, dtype=float)[:, steps].reshape(N * len(steps), -1)
    f_V_z = fit_krr(zV, pose, np.repeat(np.arange(N), len(steps)), seed=seed)
    return AlignmentModel(f_V_y, f_T_y, f_V_z)


# --------------------------------------------------------------------------- NMSE


@dataclass
class NMSEResult:
    traj_ids: list
    sq_err: np.ndarray  # (N, H, 6) squared error over normalizer
    pose_sq_err: np.ndarray  # (N, H, 6)

    @property
    def curve(self) -> np.ndarray:
        """``(H, 6)`` mean NMSE over trajectories."""
        return self.sq_err.mean(0)

    @property
    def curve_std(self) -> np.ndarray:
        return self.sq_err.std(0)

    @property
    def time_avg(self) -> np.ndarray:
        """``(6,)`` time-averaged NMSE."""
        return self.curve.mean(0)

    def per_trajectory(self) -> np.ndarray:
        """``(N, 6)`` time-averaged NMSE per trajectory (pairing unit for tests)."""
        return self.sq_err.mean(1)

    def window(self, start: float, stop: float) -> np.ndarray:
        """``(6,)`` mean NMSE over the fractional time window ``[start, stop)``."""
        H = self.sq_err.shape[1]
        a, b = int(round(start * H)), max(int(round(stop * H)), int(round(start * H)) + 1)
        return self.curve[a:b].mean(0)


def nmse_from_latents(ro: Rollout, alignment: AlignmentModel, props, normalizer, poses=None,
                      pose_normalizer=None) -> NMSEResult:
    props = np.asarray(props, dtype=float)
    pred = alignment.predict_properties(ro.y_V, ro.y_T)
    norm = np.asarray(normalizer, dtype=float)
    if np.any(norm <= 0):
        raise ContractViolation(f"normalizer must be positive, got {norm}")
    per = (pred - props[:, None, :]) ** 2 / norm
    if poses is not None:
        pose_pred = alignment.f_V_z.predict(ro.z_V)
        pn = pose_normalizer if pose_normalizer is not None else np.asarray(poses).reshape(-1, 6).var(0) + 1e-12
        pose_err = (pose_pred - np.asarray(poses, dtype=float)) ** 2 / pn
    else:
        pose_err = np.zeros_like(per)
    return NMSEResult(list(ro.traj_ids), per, pose_err)


def property_nmse_curves(model: CMLF, alignment: AlignmentModel, trajectories, normalizer,
                         cm_active: bool | None = None) -> NMSEResult:
    """NMSE over time of property predictions read out from filtered latent means."""
    trajectories = list(trajectories)
    ro = rollout_latents(model, trajectories, cm_active)
    return nmse_from_latents(ro, alignment, property_matrix(trajectories), normalizer,
                             poses=np.stack([t.pose_gt for t in trajectories]))


def convergence_index(curve, factor: float = 1.2, final_fraction: float = FINAL_WINDOW) -> int:
    """First time index from which ``curve`` stays within ``factor`` x its final value.

    The final value is the mean over the last ``final_fraction`` of the curve.
    """
    curve = np.asarray(curve, dtype=float)
    final = curve[final_window(len(curve), final_fraction)].mean()
    above = np.nonzero(curve > factor * final)[0]
    return 0 if len(above) == 0 else int(above[-1] + 1)


# --------------------------------------------------------------------------- classification


def latent_features(ro: Rollout, feature_set: str, step: int = -1) -> np.ndarray:
    if feature_set == "y_V":
        return ro.y_V[:, step]
    if feature_set == "y_T":
        return ro.y_T[:, step]
    if feature_set == "both":
        return np.concatenate([ro.y_V[:, step], ro.y_T[:, step]], axis=-1)
    raise ContractViolation(f"unknown feature set {feature_set!r}")


def classify_features(X, labels, ids=None, seed: int = 0, n_splits: int = 5) -> tuple[float, float]:
    """5-fold stratified logistic-regression accuracy, ``(mean, std)`` over folds.

    Samples are put in canonical ``ids`` order first so the folds depend only on
    the seed and the labels, not on the order the caller passed them in.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if ids is not None:
        order = np.argsort(np.asarray(ids), kind="stable")
        X, labels = X[order], labels[order]
    _, counts = np.unique(labels, return_counts=True)
    if counts.min() < n_splits:
        raise StratificationError(f"every class needs >= {n_splits} samples, smallest has {counts.min()}")
    folds = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    accs = []
    for tr, te in folds.split(X, labels):
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        clf.fit(X[tr], labels[tr])
        accs.append(float(np.mean(clf.predict(X[te]) == labels[te])))
    return float(np.mean(accs)), float(np.std(accs))


def classify_latents(model: CMLF, trajectories, feature_set: str, seed: int = 0) -> tuple[float, float]:
    trajectories = list(trajectories)
    ro = rollout_latents(model, trajectories)
    labels = [t.object.object_index for t in trajectories]
    return classify_features(latent_features(ro, feature_set), labels, ro.traj_ids, seed)


# --------------------------------------------------------------------------- perturbation


def perturbation_seed(traj, sigma: float, c: float) -> int:
    return int(np.random.SeedSequence([int(traj.seed), int(round(sigma * 1000)), int(round(c * 1000))])
               .generate_state(1)[0])


def perturbation_sweep(model: CMLF, alignment: AlignmentModel, trajectories, normalizer,
                       sigmas=SIGMA_GRID, cs=C_GRID, mode: str = "zero_fill") -> dict:
    """Time-averaged NMSE per property for every ``(sigma, c)`` cell.

    Perturbations are applied to copies at evaluation time; the inputs are not
    modified. Returns ``{(sigma, c): NMSEResult}``.
    """
    trajectories = list(trajectories)
    out = {}
    for s in sigmas:
        for c in cs:
            spec = PerturbationSpec(sigma=s, c=c, mode=mode)
            pert = [perturb(t, spec, perturbation_seed(t, s, c)) for t in trajectories]
            out[(float(s), float(c))] = property_nmse_curves(model, alignment, pert, normalizer)
    return out


def relative_degradation(sweep: dict, cell, reference=(0.0, 0.0)) -> float:
    """Mean over properties of ``(NMSE(cell) - NMSE(ref)) / NMSE(ref)``."""
    ref = sweep[reference].time_avg
    return float(np.mean((sweep[cell].time_avg - ref) / ref))


# --------------------------------------------------------------------------- report


@dataclass
class EvalReport:
    variant: str
    seed: int
    property_names: tuple = PROPERTY_NAMES
    nmse_curve: list = field(default_factory=list)  # (H, 6)
    nmse_curve_std: list = field(default_factory=list)
    nmse_time_avg: list = field(default_factory=list)  # (6,)
    surprise_curve: list = field(default_factory=list)
    surprise_curve_std: list = field(default_factory=list)
    classification: dict = field(default_factory=dict)  # feature set -> [mean, std]
    perturbation: dict = field(default_factory=dict)  # "sigma,c" -> (6,) time-avg NMSE
    tests: list = field(default_factory=list)
    alignment: dict = field(default_factory=dict)
    test_ids: list = field(default_factory=list)
    test_per_traj: list = field(default_factory=list)  # (N, 6) time-averaged NMSE, pairing unit
    test_convergence: list = field(default_factory=list)  # (6,) convergence index per property
    surprise_ids: list = field(default_factory=list)
    surprise_per_traj: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["property_names"] = tuple(d.get("property_names", PROPERTY_NAMES))
        return cls(**d)

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def write_csv(self, path):
        """Long-format table: one row per (metric, property, time-or-cell)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "metric", "key", "property", "value"])
            for name, curve in (("nmse_curve", self.nmse_curve), ("surprise_curve", self.surprise_curve)):
                for t, row in enumerate(curve):
                    for p, v in zip(self.property_names, row):
                        w.writerow([self.variant, self.seed, name, t, p, repr(float(v))])
            for cell, vals in self.perturbation.items():
                for p, v in zip(self.property_names, vals):
                    w.writerow([self.variant, self.seed, "perturbation", cell, p, repr(float(v))])
            for fs, (m, s) in self.classification.items():
                w.writerow([self.variant, self.seed, "classification_mean", fs, "", repr(m)])
                w.writerow([self.variant, self.seed, "classification_std", fs, "", repr(s)])


def evaluate_model(model: CMLF, dataset, seed: int = 0, sweep: bool = True, classify: bool = True,
                   sigmas=SIGMA_GRID, cs=C_GRID, perturb_mode: str = "zero_fill") -> EvalReport:
    """Full single-model evaluation: alignment, NMSE curves, classification, sweep."""
    check_compatible(model, dataset)
    aligned = [t for t in dataset.trajectories if not t.object.surprise_flag]
    normalizer = aligned_normalizer(dataset)
    alignment = fit_alignment(model, dataset.split("val"), seed=seed)
    test = dataset.split("test")
    res = property_nmse_curves(model, alignment, test, normalizer)
    report = EvalReport(variant=model.variant.value, seed=seed,
                        nmse_curve=res.curve.tolist(), nmse_curve_std=res.curve_std.tolist(),
                        nmse_time_avg=res.time_avg.tolist(),
                        alignment={"f_V_y": [alignment.f_V_y.gamma, alignment.f_V_y.alpha],
                                   "f_T_y": [alignment.f_T_y.gamma, alignment.f_T_y.alpha],
                                   "f_V_z": [alignment.f_V_z.gamma, alignment.f_V_z.alpha]},
                        test_ids=list(res.traj_ids), test_per_traj=res.per_trajectory().tolist(),
                        test_convergence=[convergence_index(res.curve[:, j]) for j in range(res.curve.shape[1])])
    surprise = dataset.split("surprise")
    if surprise:
        sres = property_nmse_curves(model, alignment, surprise, normalizer)
        report.surprise_curve = sres.curve.tolist()
        report.surprise_curve_std = sres.curve_std.tolist()
        report.surprise_ids = list(sres.traj_ids)
        report.surprise_per_traj = sres.per_trajectory().tolist()
    if classify:
        for fs in ("y_V", "y_T", "both"):
            report.classification[fs] = list(classify_latents(model, aligned, fs, seed=seed))
    if sweep:
        for (s, c), r in perturbation_sweep(model, alignment, test, normalizer, sigmas, cs, perturb_mode).items():
            report.perturbation[f"{s},{c}"] = r.time_avg.tolist()
    return report


def check_compatible(model: CMLF, dataset):
    """Raise :class:`ContractViolation` when the checkpoint cannot read ``dataset``."""
    obs = dataset.config.observation
    mc = model.config
    if tuple(mc.visual_shape) != tuple(obs.visual_shape) or tuple(mc.tactile_shape) != tuple(obs.tactile_shape):
        raise ContractViolation(
            f"dimension mismatch: checkpoint expects visual {tuple(mc.visual_shape)} / tactile "
            f"{tuple(mc.tactile_shape)}, dataset provides {tuple(obs.visual_shape)} / {tuple(obs.tactile_shape)}")


def aligned_normalizer(dataset) -> np.ndarray:
    """Per-property ground-truth variance over the aligned trajectories.

    Used for both the aligned and the surprise set so their NMSE share a scale.
    """
    aligned = [t for t in dataset.trajectories if not t.object.surprise_flag]
    return property_variance(property_matrix(aligned))
