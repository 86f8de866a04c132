import math

import numpy as np
import pytest
import torch

from cmlf.errors import ConfigError, ContractViolation, TrainingDivergence
from cmlf.model import CMLF, ModelConfig, load_checkpoint
from cmlf.training import (
    LOG_FIELDS,
    LossBreakdown,
    TrainConfig,
    anneal_weight,
    cm_activation_epoch,
    cm_gate,
    elbo_loss,
    train,
)

from conftest import VARIANTS

TINY = dict(n_z=4, n_y=4, hidden=8, lstm_hidden=8)


def tiny_config(variant, **kw):
    base = dict(learning_rate=1e-3, epochs=4, batch_size=16, **TINY)
    return TrainConfig(variant=variant, **{**base, **kw})


def test_anneal_schedule():
    cfg = TrainConfig(epochs=200, anneal_fraction=0.3)
    assert anneal_weight(0, cfg) == 0.0
    assert anneal_weight(30, cfg) == pytest.approx(0.5)
    assert anneal_weight(60, cfg) == 1.0 and anneal_weight(199, cfg) == 1.0
    w = [anneal_weight(e, cfg) for e in range(200)]
    assert all(a <= b for a, b in zip(w, w[1:]))


def test_cm_gate_schedule():
    late = TrainConfig(variant="w_cm", epochs=200, cm_activation_fraction=0.25)
    early = TrainConfig(variant="w_cm", epochs=200, cm_activation_fraction=0.10)
    assert cm_activation_epoch(late) == 50 and cm_activation_epoch(early) == 20
    assert not cm_gate(49, late) and cm_gate(50, late)
    assert cm_gate(20, early) and not cm_gate(19, early)
    for v in ("wo_cm", "joint", "baseline"):
        assert not any(cm_gate(e, TrainConfig(variant=v, epochs=200)) for e in range(200))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(cm_activation_fraction=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")


def _tiny_model(dataset, variant, dtype=torch.float32, seed=0, **kw):
    obs = dataset.config.observation
    torch.manual_seed(seed)
    cfg = ModelConfig(variant=variant, visual_shape=obs.visual_shape, tactile_shape=obs.tactile_shape,
                      prior_objects=[o.object_index for o in dataset.objects], **TINY, **kw)
    return CMLF(cfg).to(dtype)


@pytest.mark.parametrize("variant", VARIANTS)
def test_beta_zero_is_reconstruction_only(tiny_dataset, variant):
    m = _tiny_model(tiny_dataset, variant)
    b = m.make_batch(tiny_dataset.trajectories[:4])
    loss = elbo_loss(m, b, beta=0.0, cm_active=True, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(loss.total, -(loss.recon_V + loss.recon_T))
    kls = [loss.kl_zV, loss.kl_zT, loss.kl_yV, loss.kl_yT]
    assert all(float(k.detach()) >= -1e-5 for k in kls)
    if variant == "baseline":
        assert float(loss.kl_zT) == float(loss.kl_yV) == float(loss.kl_yT) == 0.0
    if variant == "joint":
        assert float(loss.kl_zT) == float(loss.kl_yT) == 0.0


def test_loss_breakdown_names_divergent_term():
    nan = torch.tensor(float("nan"))
    one = torch.tensor(1.0)
    lb = LossBreakdown(one, one, one, nan, one, one, one)
    with pytest.raises(TrainingDivergence) as err:
        lb.check_finite(epoch=3)
    assert err.value.term == "kl_zT" and err.value.epoch == 3


# with the stop-gradient on the cross-modal input autograd is not the total
# derivative, so the gated-on w_cm check switches it off
@pytest.mark.parametrize("variant,cm_on", [
    ("baseline", False), ("joint", False), ("wo_cm", True), ("w_cm", False), ("w_cm", True),
])
def test_gradient_matches_finite_differences(tiny_dataset, variant, cm_on):
    """float64 central differences on a handful of parameters, H=3."""
    m = _tiny_model(tiny_dataset, variant, dtype=torch.float64, cm_stop_grad=False)
    m.train()
    trajs = [t.replace(**{k: getattr(t, k)[:3] for k in ("actions", "phases", "obs_visual", "obs_tactile",
                                                         "pose_gt", "visual_present", "tactile_present")})
             for t in tiny_dataset.trajectories[:2]]
    batch = m.make_batch(trajs)

    def loss():
        return elbo_loss(m, batch, beta=0.7, cm_active=cm_on, generator=torch.Generator().manual_seed(5)).total

    m.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    checked = 0
    for name, p in m.named_parameters():
        if p.grad is None:
            continue
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            eps, orig = 1e-6, flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = p.grad.view(-1)[i].item()
            assert abs(fd - an) <= 1e-5 * max(1.0, abs(fd)), f"{name}[{i}]: fd {fd} vs autograd {an}"
            checked += 1
    assert checked >= 10


def test_train_writes_log_and_checkpoints(tiny_dataset, tmp_path):
    cfg = tiny_config("w_cm", epochs=4, anneal_fraction=0.5, cm_activation_fraction=0.5)
    res = train(cfg, tiny_dataset, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_FIELDS)
    assert len(lines) == 1 + 2 * cfg.epochs
    assert res.series("cm_active").tolist() == [0, 0, 1, 1]
    assert res.series("beta").tolist() == [0.0, 0.5, 1.0, 1.0]
    assert res.best_epoch in (2, 3)
    best, payload = load_checkpoint(tmp_path / "best.pt")
    assert payload["epoch"] == res.best_epoch and payload["train_config"]["variant"] == "w_cm"
    _, final = load_checkpoint(tmp_path / "final.pt")
    assert final["epoch"] == 3


def test_training_deterministic(tiny_dataset):
    a = train(tiny_config("wo_cm", epochs=2), tiny_dataset)
    b = train(tiny_config("wo_cm", epochs=2), tiny_dataset)
    assert a.log == b.log
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    c = train(tiny_config("wo_cm", epochs=2, seed=1), tiny_dataset)
    assert c.log != a.log


def test_training_reduces_loss(tiny_dataset):
    res = train(tiny_config("joint", epochs=12, learning_rate=3e-3, anneal_fraction=0.1), tiny_dataset)
    recon = -(res.series("recon_V") + res.series("recon_T"))
    assert recon[-1] < recon[0]
    assert all(math.isfinite(r["total"]) for r in res.log)


def test_divergence_raises(tiny_dataset, monkeypatch):
    import cmlf.training as tr

    real = tr.elbo_loss

    def poisoned(*args, **kw):
        out = real(*args, **kw)
        out.kl_yV = out.kl_yV * float("inf")
        return out

    monkeypatch.setattr(tr, "elbo_loss", poisoned)
    with pytest.raises(TrainingDivergence, match="kl_yV"):
        train(tiny_config("w_cm", epochs=1), tiny_dataset)


def test_overlapping_splits_rejected(tiny_dataset):
    import copy

    bad = copy.copy(tiny_dataset)
    bad.splits = {**tiny_dataset.splits, "val": tiny_dataset.splits["train"][:2]}
    with pytest.raises(ContractViolation):
        train(tiny_config("wo_cm", epochs=1), bad)
