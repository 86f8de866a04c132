"""Diagonal-Gaussian algebra, KL divergence, reparameterized sampling and NMSE.

Every belief in the filter is a factorized Gaussian stored as ``(mean, log_var)``
tensors whose last axis is the latent dimension; leading axes are batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation, DegeneratePropertyError

VAR_FLOOR = 1e-6
LOGVAR_MIN = math.log(VAR_FLOOR)
LOGVAR_MAX = 20.0
LOGVAR_FLAT = 20.0


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=dtype)


@dataclass
class DiagonalGaussian:
    """Factorized Gaussian ``N(mean, diag(exp(log_var)))``.

    Construction clamps ``log_var`` into ``[log(VAR_FLOOR), LOGVAR_MAX]`` so the
    variance never drops below the floor. Use :meth:`checked` to additionally
    reject non-finite entries.
    """

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.log_var = _as_tensor(self.log_var, like=self.mean)
        if self.mean.shape != self.log_var.shape:
            raise ContractViolation(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )
        if self.mean.ndim == 0 or self.mean.shape[-1] < 1:
            raise ContractViolation("DiagonalGaussian needs a latent dimension d >= 1")
        self.log_var = self.log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)

    @classmethod
    def checked(cls, mean, log_var) -> DiagonalGaussian:
        g = cls(mean, log_var)
        g.check_finite()
        return g

    @classmethod
    def standard(cls, shape, dtype=torch.float32) -> DiagonalGaussian:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    @classmethod
    def flat(cls, shape, dtype=torch.float32) -> DiagonalGaussian:
        """Effectively uninformative belief; the identity element of :func:`fuse`."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return cls(torch.zeros(shape, dtype=dtype), torch.full(shape, LOGVAR_FLAT, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> torch.Tensor:
        return self.log_var.exp()

    @property
    def precision(self) -> torch.Tensor:
        return torch.exp(-self.log_var)

    def check_finite(self):
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all()):
            raise ContractViolation("DiagonalGaussian has non-finite entries")

    def detach(self) -> DiagonalGaussian:
        return DiagonalGaussian(self.mean.detach(), self.log_var.detach())

    def __getitem__(self, idx) -> DiagonalGaussian:
        return DiagonalGaussian(self.mean[idx], self.log_var[idx])

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.detach().cpu().numpy(), self.log_var.detach().cpu().numpy()


def _check_pair(a: DiagonalGaussian, b: DiagonalGaussian, op: str):
    if a.dim != b.dim:
        raise ContractViolation(f"{op}: dimension mismatch {a.dim} vs {b.dim}")


def fuse(a: DiagonalGaussian, b: DiagonalGaussian, check: bool = True) -> DiagonalGaussian:
    """Precision-weighted product of two diagonal Gaussians (renormalized).

    Per dimension the output precision is the sum of the input precisions and the
    mean is the precision-weighted average. The expression is symmetric in its
    arguments, so ``fuse(a, b)`` and ``fuse(b, a)`` agree bit for bit.
    """
    _check_pair(a, b, "fuse")
    if check:
        a.check_finite()
        b.check_finite()
    prec_a, prec_b = a.precision, b.precision
    prec = prec_a + prec_b
    mean = (prec_a * a.mean + prec_b * b.mean) / prec
    return DiagonalGaussian(mean, -torch.log(prec))


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """Closed-form ``KL(q || p)`` summed over the last axis."""
    _check_pair(q, p, "kl_divergence")
    diff = q.mean - p.mean
    kl = 0.5 * (p.log_var - q.log_var + (q.log_var.exp() + diff * diff) * torch.exp(-p.log_var) - 1.0)
    return kl.sum(-1)


def reparam_sample(g: DiagonalGaussian, noise) -> torch.Tensor:
    noise = _as_tensor(noise, like=g.mean)
    if noise.shape[-1] != g.dim:
        raise ContractViolation(f"reparam_sample: noise dim {noise.shape[-1]} != {g.dim}")
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def nmse(predictions, ground_truth, normalizer) -> np.ndarray:
    """Normalized mean squared error per time step.

    Parameters
    ----------
    predictions : array ``(N, H)`` or ``(N, H, P)``
        Per-trajectory predictions at every time step.
    ground_truth : array of the same shape, or ``(N, P)`` / ``(N,)`` for
        time-invariant targets (broadcast over ``H``).
    normalizer : scalar or ``(P,)``
        Per-property variance of the ground truth over the evaluation dataset.

    Returns
    -------
    ``(H,)`` or ``(H, P)``: mean over trajectories of the squared error divided
    by the normalizer.
    """
    pred = np.asarray(predictions, dtype=float)
    gt = np.asarray(ground_truth, dtype=float)
    norm = np.asarray(normalizer, dtype=float)
    if gt.ndim == pred.ndim - 1:
        gt = gt[:, None, ...]
    try:
        sq = (pred - gt) ** 2
    except ValueError as exc:
        raise ContractViolation(f"nmse: shapes {pred.shape} and {gt.shape} do not match") from exc
    if sq.shape != pred.shape:
        raise ContractViolation(f"nmse: shapes {pred.shape} and {gt.shape} do not match")
    if np.any(~np.isfinite(norm)) or np.any(norm <= 0):
        raise DegeneratePropertyError(f"nmse normalizer must be > 0, got {norm}")
    return sq.mean(axis=0) / norm


def property_variance(values) -> np.ndarray:
    """Population variance per property; the NMSE normalizer for a dataset."""
    v = np.asarray(values, dtype=float).var(axis=0)
    if np.any(v <= 0):
        raise DegeneratePropertyError(f"property with zero variance: {v}")
    return v


EXTRINSIC_NAMES = ("shape", "height", "visual_texture")
INTRINSIC_NAMES = ("stiffness", "mass", "friction")


@dataclass(frozen=True)
class PropertyVector:
    """Ground-truth regression targets for one object.

    ``extrinsic`` = (shape_code 0-4, height [m], visual_texture_code 0-4);
    ``intrinsic`` = (stiffness [kPa], mass [kg], friction coefficient).
    Codes are kept as reals so they can be regressed directly.
    """

    extrinsic: tuple
    intrinsic: tuple

    def __post_init__(self):
        shape, height, texture = self.extrinsic
        stiffness, mass, friction = self.intrinsic
        if int(shape) != shape or not 0 <= shape <= 4:
            raise ContractViolation(f"shape_code must be an integer in 0..4, got {shape}")
        if int(texture) != texture or not 0 <= texture <= 4:
            raise ContractViolation(f"visual_texture_code must be an integer in 0..4, got {texture}")
        if not (height > 0 and stiffness > 0 and mass > 0 and 0 < friction < 2):
            raise ContractViolation(f"physical property out of range: {self}")

    def as_array(self) -> np.ndarray:
        return np.array(tuple(self.extrinsic) + tuple(self.intrinsic), dtype=float)
