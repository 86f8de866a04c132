"""Cross-modal latent filter: networks, the per-step filter and rollouts.

Four variants share one code path:

``baseline``  single shared latent with a measurement-conditioned LSTM (VRNN style)
``joint``     one directly observable ``z`` and one indirectly observable ``y``
              shared by both modalities
``wo_cm``     separate visual/tactile ``(z, y)`` streams, no cross-modal links
``w_cm``      as ``wo_cm`` plus learned priors ``y^V -> y^T`` and ``y^T -> y^V``
              fused into the filtered ``y`` beliefs once the gate is open

The visual and tactile streams run side by side: per-stream networks keep
separate weights but are evaluated as one batched matmul over a leading
*stream* axis (``G = 2``; ``G = 1`` for the joint and baseline models). Beliefs
inside the filter are therefore ``(G, B, d)``; :class:`FilterState` exposes the
per-modality ``(B, d)`` views.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import LOGVAR_FLAT, DiagonalGaussian, fuse
from .errors import CheckpointError, ContractViolation

CHECKPOINT_VERSION = 1

# d [m], v_z [m/s], v_beta [rad/s] -> roughly unit scale
ACTION_OFFSET = (0.08, 0.0, 0.0)
ACTION_SCALE = (0.02, 0.025, 0.25)

MODALITIES = ("V", "T")


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    JOINT = "joint"
    WO_CM = "wo_cm"
    W_CM = "w_cm"


class Direction(str, enum.Enum):
    V2T = "V2T"
    T2V = "T2V"


@dataclass
class ModelConfig:
    variant: str = "w_cm"
    n_z: int = 32
    n_y: int = 16
    hidden: int = 64
    lstm_hidden: int = 64
    conv_channels: int = 8
    visual_shape: tuple = (256,)
    tactile_shape: tuple = (64,)
    action_dim: int = 3
    prior_objects: list = field(default_factory=list)  # object indices with a prior table row
    cm_stop_grad: bool = True  # cross-modal prior sees a detached copy of y

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        self.visual_shape = tuple(self.visual_shape)
        self.tactile_shape = tuple(self.tactile_shape)
        self.prior_objects = [int(i) for i in self.prior_objects]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- building blocks


def _mlp(n_in, n_out, hidden, depth=2):
    layers, d = [], n_in
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), nn.ELU()]
        d = hidden
    layers.append(nn.Linear(d, n_out))
    return nn.Sequential(*layers)


def _gaussian(raw: torch.Tensor) -> DiagonalGaussian:
    mean, log_var = raw.chunk(2, dim=-1)
    return DiagonalGaussian(mean, log_var)


class GroupLinear(nn.Module):
    """``G`` independent linear maps applied to a ``(G, B, n_in)`` stack.

    Initialized like :class:`torch.nn.Linear`. ``group=g`` applies map ``g``
    alone to a ``(B, n_in)`` input.
    """

    def __init__(self, G, n_in, n_out):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(torch.empty(G, n_in, n_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(G, 1, n_out).uniform_(-bound, bound))

    def forward(self, x, group=None):
        if group is None:
            return torch.baddbmm(self.bias, x, self.weight)
        return torch.addmm(self.bias[group, 0], x, self.weight[group])


class GroupMLP(nn.Module):
    def __init__(self, G, n_in, n_out, hidden, depth=2):
        super().__init__()
        dims = [n_in] + [hidden] * depth + [n_out]
        self.layers = nn.ModuleList(GroupLinear(G, a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x, group=None):
        for i, layer in enumerate(self.layers):
            x = layer(x, group)
            if i < len(self.layers) - 1:
                x = nn.functional.elu(x)
        return x


class GroupLSTMCell(nn.Module):
    """``G`` independent LSTM cells (gate order i, f, g, o as in torch)."""

    def __init__(self, G, n_in, hidden):
        super().__init__()
        self.hidden = hidden
        self.ih = GroupLinear(G, n_in, 4 * hidden)
        self.hh = GroupLinear(G, hidden, 4 * hidden)

    def forward(self, x, carry, group=None):
        h, c = carry
        gates = self.ih(x, group) + self.hh(h, group)
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ObsEncoder(nn.Module):
    """Observation -> features. MLP for vectors, a small conv stack for grids."""

    def __init__(self, obs_shape, hidden, channels):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        if len(self.obs_shape) == 1:
            self.body = nn.Sequential(nn.Linear(self.obs_shape[0], hidden), nn.ELU(),
                                      nn.Linear(hidden, hidden), nn.ELU())
        else:
            h, w = self.obs_shape
            c = channels
            self.body = nn.Sequential(
                nn.Unflatten(1, (1, h)),
                nn.Conv2d(1, c, 4, stride=2, padding=1), nn.ELU(),
                nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.ELU(),
                nn.Flatten(),
                nn.Linear(2 * c * (h // 4) * (w // 4), hidden), nn.ELU(),
            )

    def forward(self, obs):
        if tuple(obs.shape[1:]) != self.obs_shape:
            raise ContractViolation(f"observation shape {tuple(obs.shape[1:])} != configured {self.obs_shape}")
        return self.body(obs)


class GaussianEncoder(nn.Module):
    def __init__(self, obs_shape, n_out, hidden, channels):
        super().__init__()
        self.features = ObsEncoder(obs_shape, hidden, channels)
        self.head = nn.Linear(hidden, 2 * n_out)

    def forward(self, obs) -> DiagonalGaussian:
        return _gaussian(self.head(self.features(obs)))


class Decoder(nn.Module):
    def __init__(self, n_in, obs_shape, hidden, channels):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        if len(self.obs_shape) == 1:
            self.body = _mlp(n_in, self.obs_shape[0], hidden)
        else:
            h, w = self.obs_shape
            c = channels
            self.body = nn.Sequential(
                nn.Linear(n_in, hidden), nn.ELU(),
                nn.Linear(hidden, 2 * c * (h // 4) * (w // 4)), nn.ELU(),
                nn.Unflatten(1, (2 * c, h // 4, w // 4)),
                nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1), nn.ELU(),
                nn.ConvTranspose2d(c, 1, 4, stride=2, padding=1),
                nn.Flatten(1, 2),
            )

    def forward(self, z):
        return self.body(z)


class HierarchicalPrior(nn.Module):
    """Learnable per-object Gaussian over y with an action-dependent mean shift.

    Rows are indexed by ``row`` (see :meth:`CMLF.prior_rows`); ``row < 0`` marks an
    object without a table entry and yields ``N(0, I)``.
    """

    def __init__(self, n_rows, n_y, n_a):
        super().__init__()
        self.mean = nn.Parameter(torch.randn(max(n_rows, 1), n_y))
        self.log_var = nn.Parameter(torch.zeros(max(n_rows, 1), n_y))
        self.action = nn.Linear(n_a, n_y, bias=False)
        nn.init.zeros_(self.action.weight)

    def forward(self, rows, a) -> DiagonalGaussian:
        known = (rows >= 0).unsqueeze(-1)
        idx = rows.clamp(min=0)
        zero = torch.zeros((), dtype=a.dtype)
        mean = torch.where(known, self.mean[idx] + self.action(a), zero)
        log_var = torch.where(known, self.log_var[idx], zero)
        return DiagonalGaussian(mean, log_var)


# --------------------------------------------------------------------------- state


@dataclass
class FilterState:
    """Filter beliefs at one step, stacked over streams: ``(G, B, d)``.

    ``G = 2`` (visual, tactile) for ``wo_cm``/``w_cm``; ``G = 1`` for the joint
    and baseline models, whose single stream serves both modalities. The
    per-modality attributes (``z_V``, ``y_T``, ``cm_prior_V``, ...) are views.
    ``cm_prior`` is ``None`` while the cross-modal priors are off, which reads
    as the flat belief.
    """

    z: DiagonalGaussian
    y: DiagonalGaussian
    z_trans: DiagonalGaussian = None
    y_pred: DiagonalGaussian = None
    z_meas: DiagonalGaussian = None
    cm_prior: DiagonalGaussian = None
    carry: tuple = None
    z_sample: torch.Tensor = None
    action: torch.Tensor = None

    @property
    def streams(self) -> int:
        return self.z.mean.shape[0]

    def _index(self, modality: str) -> int:
        return MODALITIES.index(modality) if self.streams == 2 else 0

    def __getattr__(self, name):
        # z_V, z_trans_T, y_pred_V, cm_prior_T, recurrent_carry_V, z_sample_T ...
        if len(name) > 2 and name[-2] == "_" and name[-1] in MODALITIES:
            base, i = name[:-2], self._index(name[-1])
            if base == "recurrent_carry":
                h, c = self.carry
                return h[i], c[i]
            if base == "z_sample":
                return self.z_sample[i]
            if base == "cm_prior":
                if self.cm_prior is None:
                    ref = self.y_pred.mean[i]
                    return DiagonalGaussian(torch.zeros_like(ref), torch.full_like(ref, LOGVAR_FLAT))
                return self.cm_prior[i]
            if base in ("z", "y", "z_trans", "y_pred", "z_meas"):
                return object.__getattribute__(self, base)[i]
        raise AttributeError(name)


@dataclass
class StepFlags:
    obs_V_present: torch.Tensor | bool = True
    obs_T_present: torch.Tensor | bool = True
    cm_active: bool = False


@dataclass
class Batch:
    obs_V: torch.Tensor  # (B, H, *visual_shape)
    obs_T: torch.Tensor  # (B, H, *tactile_shape)
    actions: torch.Tensor  # (B, H, 3), raw units
    present_V: torch.Tensor  # (B, H) bool
    present_T: torch.Tensor
    rows: torch.Tensor  # (B,) hierarchical-prior rows
    traj_ids: list

    @property
    def B(self):
        return self.obs_V.shape[0]

    @property
    def H(self):
        return self.obs_V.shape[1]


def _select(mask, a: DiagonalGaussian, b: DiagonalGaussian) -> DiagonalGaussian:
    """Per-sample choice between two beliefs: ``a`` where ``mask`` else ``b``."""
    m = mask.unsqueeze(-1)
    return DiagonalGaussian(torch.where(m, a.mean, b.mean), torch.where(m, a.log_var, b.log_var))


def _as_mask(p, B: int) -> torch.Tensor:
    if isinstance(p, bool):
        return torch.full((B,), p, dtype=torch.bool)
    return p


# --------------------------------------------------------------------------- model


class CMLF(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.variant = Variant(c.variant)
        self._rows = {L: i for i, L in enumerate(c.prior_objects)}
        self.register_buffer("action_offset", torch.tensor(ACTION_OFFSET))
        self.register_buffer("action_scale", torch.tensor(ACTION_SCALE))
        n_rows = len(c.prior_objects)
        v = self.variant
        # Modules shared by wo_cm and w_cm are created in the same order so both
        # variants draw identical initial weights from the same seed; the
        # cross-modal priors come last.
        if v == Variant.BASELINE:
            self.feat_V = ObsEncoder(c.visual_shape, c.hidden, c.conv_channels)
            self.feat_T = ObsEncoder(c.tactile_shape, c.hidden, c.conv_channels)
            self.rnn = GroupLSTMCell(1, 2 * c.hidden + c.n_z + c.action_dim, c.lstm_hidden)
            self.prior_net = GroupMLP(1, c.lstm_hidden, 2 * c.n_z, c.hidden, depth=1)
            self.post_net = GroupMLP(1, c.lstm_hidden + 2 * c.hidden, 2 * c.n_z, c.hidden, depth=1)
            self.dec_V = Decoder(c.n_z, c.visual_shape, c.hidden, c.conv_channels)
            self.dec_T = Decoder(c.n_z, c.tactile_shape, c.hidden, c.conv_channels)
            return
        if v == Variant.JOINT:
            n_obs = int(np.prod(c.visual_shape)) + int(np.prod(c.tactile_shape))
            self.enc_J = GaussianEncoder((n_obs,), c.n_z, c.hidden, c.conv_channels)
            G, n_y_in = 1, c.n_y
        else:
            self.enc_V = GaussianEncoder(c.visual_shape, c.n_z, c.hidden, c.conv_channels)
            self.enc_T = GaussianEncoder(c.tactile_shape, c.n_z, c.hidden, c.conv_channels)
            G, n_y_in = 2, 2 * c.n_y
        self.dec_V = Decoder(c.n_z, c.visual_shape, c.hidden, c.conv_channels)
        self.dec_T = Decoder(c.n_z, c.tactile_shape, c.hidden, c.conv_channels)
        # q_phi: LSTM over (z_{t-1}, y_{t-1} mean and log-variance, a_{t-1})
        self.ypred_cell = GroupLSTMCell(G, c.n_z + 2 * c.n_y + c.action_dim, c.lstm_hidden)
        self.ypred_head = GroupLinear(G, c.lstm_hidden, 2 * c.n_y)
        # q_theta: residual transition on (z_{t-1} sample, own y, other y, a_t)
        self.trans = GroupMLP(G, c.n_z + n_y_in + c.action_dim, 2 * c.n_z, c.hidden)
        self.hier_V = HierarchicalPrior(n_rows, c.n_y, c.action_dim)
        if v != Variant.JOINT:
            self.hier_T = HierarchicalPrior(n_rows, c.n_y, c.action_dim)
        if v == Variant.W_CM:
            # group 0: CM-V2T (prior over y^T from y^V); group 1: CM-T2V
            self.cm = GroupMLP(2, c.n_y, 2 * c.n_y, c.hidden)

    # ------------------------------------------------------------------ helpers

    @property
    def dtype(self):
        return self.action_offset.dtype

    @property
    def n_streams(self) -> int:
        """Distinct latent streams: 1 baseline, 2 joint (z, y), 4 otherwise."""
        return {Variant.BASELINE: 1, Variant.JOINT: 2}.get(self.variant, 4)

    @property
    def G(self) -> int:
        return 2 if self.variant in (Variant.WO_CM, Variant.W_CM) else 1

    @property
    def y_dim(self) -> int:
        return self.config.n_z if self.variant == Variant.BASELINE else self.config.n_y

    def prior_rows(self, object_indices) -> torch.Tensor:
        return torch.tensor([self._rows.get(int(i), -1) for i in object_indices], dtype=torch.long)

    def scale_action(self, a):
        return (a - self.action_offset) / self.action_scale

    def make_batch(self, trajectories) -> Batch:
        dt = self.dtype
        return Batch(
            obs_V=torch.as_tensor(np.stack([t.obs_visual for t in trajectories]), dtype=dt),
            obs_T=torch.as_tensor(np.stack([t.obs_tactile for t in trajectories]), dtype=dt),
            actions=torch.as_tensor(np.stack([t.actions for t in trajectories]), dtype=dt),
            present_V=torch.as_tensor(np.stack([t.visual_present for t in trajectories])),
            present_T=torch.as_tensor(np.stack([t.tactile_present for t in trajectories])),
            rows=self.prior_rows([t.object.object_index for t in trajectories]),
            traj_ids=[t.traj_id for t in trajectories],
        )

    def initial_state(self, B: int) -> FilterState:
        """``q^filt(z_0) = q^filt(y_0) = N(0, I)`` with zero recurrent carry."""
        dt, c, G = self.dtype, self.config, self.G
        z0 = DiagonalGaussian.standard((G, B, c.n_z), dtype=dt)
        y0 = DiagonalGaussian.standard((G, B, self.y_dim), dtype=dt)
        zeros = torch.zeros(G, B, c.lstm_hidden, dtype=dt)
        return FilterState(z=z0, y=y0, carry=(zeros, zeros), z_sample=z0.mean,
                           action=torch.zeros(B, c.action_dim, dtype=dt))

    def _cm_input(self, y_mean):
        return y_mean.detach() if self.config.cm_stop_grad else y_mean

    def _group(self, modality: str) -> int:
        return 0 if self.G == 1 else MODALITIES.index(modality)

    # ------------------------------------------------------------------ components

    def encode_measurement(self, obs, modality: str) -> DiagonalGaussian:
        if self.variant not in (Variant.WO_CM, Variant.W_CM):
            raise ContractViolation(f"variant {self.variant.value} has no per-modality measurement encoder")
        return (self.enc_V if modality == "V" else self.enc_T)(obs)

    def transition_z(self, z_prev, y_V, y_T, action, modality: str, cross: bool = True) -> DiagonalGaussian:
        """Transition prior over ``z`` of ``modality``; inputs are ``(B, d)``.

        ``action`` is in raw units. With ``cross=False`` (and always for
        ``wo_cm``) the other modality's y input is masked to zero. The joint
        model has a single y and ignores ``y_T``.
        """
        if self.variant == Variant.BASELINE:
            raise ContractViolation("the baseline has no structured transition")
        a = self.scale_action(action)
        if self.variant == Variant.JOINT:
            y_in = y_V
        else:
            own, other = (y_V, y_T) if modality == "V" else (y_T, y_V)
            if not cross or self.variant == Variant.WO_CM:
                other = torch.zeros_like(other)
            y_in = torch.cat([own, other], dim=-1)
        out = self.trans(torch.cat([z_prev, y_in, a], dim=-1), group=self._group(modality))
        delta, log_var = out.chunk(2, dim=-1)
        return DiagonalGaussian(z_prev + delta, log_var)

    def predict_y(self, z_prev, y_prev: DiagonalGaussian, action_prev, carry, modality: str = "V"):
        """LSTM prediction of y for one modality; inputs and carry are ``(B, d)``."""
        if self.variant == Variant.BASELINE:
            raise ContractViolation("the baseline has no y predictor")
        g = self._group(modality)
        inp = torch.cat([z_prev, y_prev.mean, y_prev.log_var, self.scale_action(action_prev)], dim=-1)
        h, c = self.ypred_cell(inp, carry, group=g)
        return _gaussian(self.ypred_head(h, group=g)), (h, c)

    def init_carry(self, B: int):
        z = torch.zeros(B, self.config.lstm_hidden, dtype=self.dtype)
        return (z, z.clone())

    def cross_modal_prior(self, y_other_prefusion_mean, direction, active: bool = True) -> DiagonalGaussian:
        """Prior over the target modality's y from the other modality's predicted y mean.

        Gradient is stopped at the input. Returns the flat belief (the fusion
        identity) when the variant has no cross-modal links or the gate is closed.
        """
        direction = Direction(direction)
        if self.variant != Variant.W_CM or not active:
            lead = tuple(y_other_prefusion_mean.shape[:-1])
            return DiagonalGaussian.flat(lead + (self.config.n_y,), dtype=y_other_prefusion_mean.dtype)
        g = 0 if direction == Direction.V2T else 1
        return _gaussian(self.cm(self._cm_input(y_other_prefusion_mean), group=g))

    def decode(self, z_sample, modality: str):
        return (self.dec_V if modality == "V" else self.dec_T)(z_sample)

    def hierarchical_prior(self, rows, action, modality: str) -> DiagonalGaussian:
        if self.variant == Variant.BASELINE:
            raise ContractViolation("the baseline has no hierarchical prior")
        a = self.scale_action(action)
        if self.variant == Variant.JOINT or modality == "V":
            return self.hier_V(rows, a)
        return self.hier_T(rows, a)

    # ------------------------------------------------------------------ filtering

    def measure(self, obs_V, obs_T, present_V=True, present_T=True):
        """State-independent measurement quantities, stacked over streams.

        Encoders do not depend on the filter state, so a rollout evaluates them
        for all time steps at once. Leading dims of ``obs_*`` are kept behind a
        new leading stream axis. The joint and baseline encoders see zeros for
        absent frames.
        """
        lead = tuple(obs_V.shape[:obs_V.dim() - len(self.config.visual_shape)])
        n = int(np.prod(lead)) if lead else 1
        vis = obs_V.reshape((n,) + self.config.visual_shape)
        tac = obs_T.reshape((n,) + self.config.tactile_shape)
        pv = present_V if isinstance(present_V, bool) else present_V.reshape(n)
        pt = present_T if isinstance(present_T, bool) else present_T.reshape(n)

        def masked(x, p):
            return x if isinstance(p, bool) else x * p.unsqueeze(-1).to(x.dtype)

        if self.variant == Variant.BASELINE:
            f = torch.cat([masked(self.feat_V(vis), pv), masked(self.feat_T(tac), pt)], dim=-1)
            return f.reshape((1,) + lead + f.shape[1:])
        if self.variant == Variant.JOINT:
            flat = torch.cat([masked(vis.reshape(n, -1), pv), masked(tac.reshape(n, -1), pt)], dim=-1)
            g = self.enc_J(flat)
            return DiagonalGaussian(g.mean.reshape((1,) + lead + (-1,)), g.log_var.reshape((1,) + lead + (-1,)))
        gv, gt = self.enc_V(vis), self.enc_T(tac)
        return DiagonalGaussian(torch.stack([gv.mean, gt.mean]).reshape((2,) + lead + (-1,)),
                                torch.stack([gv.log_var, gt.log_var]).reshape((2,) + lead + (-1,)))

    def filter_step(self, prev: FilterState, obs_V, obs_T, action, flags: StepFlags,
                    noise: torch.Tensor | None = None, meas=None) -> FilterState:
        """One filtering step on a batch.

        ``noise`` is an optional ``(G, B, n_z)`` standard-normal tensor for the z
        samples; ``None`` propagates means instead. ``meas`` may carry this step's
        precomputed :meth:`measure` output, in which case ``obs_*`` are unused.
        """
        if meas is None:
            meas = self.measure(obs_V, obs_T, flags.obs_V_present, flags.obs_T_present)
        B = action.shape[0]
        pv, pt = _as_mask(flags.obs_V_present, B), _as_mask(flags.obs_T_present, B)
        if self.variant == Variant.BASELINE:
            return self._baseline_step(prev, meas, action, pv | pt, noise)
        G = self.G
        present = (pv | pt).unsqueeze(0) if G == 1 else torch.stack([pv, pt])
        cm_on = self.variant == Variant.W_CM and flags.cm_active

        # (1) predicted y from the previous filtered beliefs
        a_prev = self.scale_action(prev.action).expand(G, -1, -1)
        inp = torch.cat([prev.z.mean, prev.y.mean, prev.y.log_var, a_prev], dim=-1)
        carry = self.ypred_cell(inp, prev.carry)
        y_pred = _gaussian(self.ypred_head(carry[0]))
        # (2)-(3) cross-modal priors from the other modality's pre-fusion mean,
        # fused into the filtered y
        if cm_on:
            cm_out = _gaussian(self.cm(self._cm_input(y_pred.mean)))  # [prior on y^T, prior on y^V]
            cm_prior = DiagonalGaussian(cm_out.mean.flip(0), cm_out.log_var.flip(0))
            y = fuse(y_pred, cm_prior, check=False)
        else:
            cm_prior, y = None, y_pred
        # (4) transition on the filtered y means
        a = self.scale_action(action).expand(G, -1, -1)
        if G == 1:
            y_in = y.mean
        else:
            other = y.mean.flip(0) if cm_on else torch.zeros_like(y.mean)
            y_in = torch.cat([y.mean, other], dim=-1)
        delta, log_var = self.trans(torch.cat([prev.z_sample, y_in, a], dim=-1)).chunk(2, dim=-1)
        z_trans = DiagonalGaussian(prev.z_sample + delta, log_var)
        # (5) measurement update where a frame is present
        z = _select(present, fuse(z_trans, meas, check=False), z_trans)
        sample = z.mean if noise is None else z.mean + torch.exp(0.5 * z.log_var) * noise
        return FilterState(z=z, y=y, z_trans=z_trans, y_pred=y_pred, z_meas=meas, cm_prior=cm_prior,
                           carry=carry, z_sample=sample, action=action)

    def _baseline_step(self, prev, feats, action, present, noise):
        h, c = prev.carry
        prior = _gaussian(self.prior_net(h))
        post = _gaussian(self.post_net(torch.cat([h, feats], dim=-1)))
        z = _select(present.unsqueeze(0), post, prior)
        sample = z.mean if noise is None else z.mean + torch.exp(0.5 * z.log_var) * noise
        a = self.scale_action(action).unsqueeze(0)
        carry = self.rnn(torch.cat([feats, sample, a], dim=-1), (h, c))
        return FilterState(z=z, y=z, z_trans=prior, y_pred=z, z_meas=post, cm_prior=None,
                           carry=carry, z_sample=sample, action=action)

    def filter_rollout(self, batch: Batch, cm_active: bool = False, generator: torch.Generator | None = None,
                       steps: int | None = None) -> list[FilterState]:
        """Filter a whole batch of sequences from the ``N(0, I)`` initial state.

        With ``generator`` the z beliefs are sampled (training); without it the
        rollout propagates means and is fully deterministic.
        """
        H = batch.H if steps is None else min(steps, batch.H)
        meas = self.measure(batch.obs_V[:, :H], batch.obs_T[:, :H], batch.present_V[:, :H], batch.present_T[:, :H])
        state = self.initial_state(batch.B)
        states = []
        for t in range(H):
            noise = None
            if generator is not None:
                noise = torch.randn(self.G, batch.B, self.config.n_z, generator=generator, dtype=self.dtype)
            flags = StepFlags(batch.present_V[:, t], batch.present_T[:, t], cm_active)
            state = self.filter_step(state, None, None, batch.actions[:, t], flags, noise, meas=meas[:, :, t])
            states.append(state)
        return states


def filter_rollout(model: CMLF, trajectory, cm_active: bool = False, generator=None) -> list[FilterState]:
    """Roll out a single trajectory (or a list of them) and return all states."""
    trajs = trajectory if isinstance(trajectory, (list, tuple)) else [trajectory]
    with torch.no_grad() if generator is None else torch.enable_grad():
        return model.filter_rollout(model.make_batch(trajs), cm_active=cm_active, generator=generator)


def stack_beliefs(states: list[FilterState], name: str) -> tuple[np.ndarray, np.ndarray]:
    """``(B, H, d)`` means and log-variances of one per-modality belief (e.g. ``"y_T"``)."""
    gs = [getattr(s, name) for s in states]
    means = torch.stack([g.mean for g in gs], dim=1)
    log_vars = torch.stack([g.log_var for g in gs], dim=1)
    return means.detach().cpu().numpy(), log_vars.detach().cpu().numpy()


def stack_over_time(states: list[FilterState], name: str, start: int = 0) -> DiagonalGaussian:
    """Stream-stacked belief over time: ``(G, B, H - start, d)``."""
    gs = [getattr(s, name) for s in states[start:]]
    return DiagonalGaussian(torch.stack([g.mean for g in gs], dim=2), torch.stack([g.log_var for g in gs], dim=2))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: CMLF, epoch: int, seed: int, train_config: dict | None = None,
                    dataset_config: dict | None = None, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "model_config": model.config.to_dict(),
        "train_config": train_config or {},
        "dataset_config": dataset_config or {},
        "epoch": int(epoch),
        "seed": int(seed),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[CMLF, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of pickle/zip errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    model = CMLF(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
