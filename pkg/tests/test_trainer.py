import copy
import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from csdt import trainer as tr
from csdt.losses import dice_loss
from csdt.network import MSSANet, NetworkConfig, load_checkpoint
from csdt.trainer import Trainer, TrainConfig, TrainData, ema_update, param_hash

from conftest import TINY_NET


@pytest.fixture(scope="module")
def static_teacher(tiny_data):
    cfg = TrainConfig(batch_labeled=2, pretrain_iterations=3, network=TINY_NET)
    return tr.pretrain_static_teacher(tiny_data, cfg)


def _pair(seed_t=0, seed_s=1):
    torch.manual_seed(seed_t)
    t = MSSANet(TINY_NET).double()
    torch.manual_seed(seed_s)
    s = MSSANet(TINY_NET).double()
    # give BN running stats distinct values too
    s.train()(torch.rand(2, 1, 16, 16, dtype=torch.float64))
    return t, s


@pytest.mark.parametrize("k", [1, 10, 100])
def test_ema_closed_form(k):
    teacher, student = _pair()
    alpha = 0.99
    p0 = {n: v.clone() for n, v in teacher.state_dict().items()}
    for _ in range(k):
        ema_update(teacher, student, alpha)
    for name, v in teacher.state_dict().items():
        s = student.state_dict()[name]
        if not v.is_floating_point():
            assert torch.equal(v, s)
            continue
        expected = alpha**k * (p0[name] - s).abs()
        assert torch.allclose((v - s).abs(), expected, rtol=0, atol=1e-9), name


def test_ema_extremes():
    teacher, student = _pair()
    before = copy.deepcopy(teacher.state_dict())
    ema_update(teacher, student, 1.0)
    assert all(torch.equal(before[n], v) for n, v in teacher.state_dict().items() if v.is_floating_point())
    ema_update(teacher, student, 0.0)
    assert all(torch.equal(student.state_dict()[n], v) for n, v in teacher.state_dict().items())


def test_ema_structure_mismatch():
    a = MSSANet(NetworkConfig(4, 2))
    b = MSSANet(NetworkConfig(4, 3))
    with pytest.raises(ValueError):
        ema_update(a, b, 0.99)


def test_ema_decay_validated():
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=0.5)


def test_static_teacher_frozen_and_dt_is_shadow_ema(tiny_data, tiny_cfg, static_teacher):
    trn = Trainer(tiny_cfg, tiny_data, static_teacher)
    st_hash = param_hash(trn.st)
    assert not any(p.requires_grad for p in trn.st.parameters())
    shadow = copy.deepcopy(trn.dt)
    for _ in range(5):
        trn.step()
        ema_update(shadow, trn.student, tiny_cfg.ema_decay)
        for (n, a), b in zip(trn.dt.state_dict().items(), shadow.state_dict().values()):
            assert torch.equal(a, b), n
    assert param_hash(trn.st) == st_hash
    assert not any(p.requires_grad for p in trn.dt.parameters())


def test_loss_decomposition_and_ramp(tiny_data, tiny_cfg, static_teacher):
    trn = Trainer(tiny_cfg, tiny_data, static_teacher)
    for t in range(1, 4):
        r = trn.step()
        assert r.t == t
        assert r.lambda_c == pytest.approx(math.exp(-5 * (1 - t / tiny_cfg.max_iterations) ** 2), abs=1e-12)
        assert r.L_t == pytest.approx(r.L_s + r.lambda_c * r.L_c + 0.3 * r.L_u, abs=1e-6)
        assert r.L_u > 0 and r.L_c > 0


def test_zero_decay_makes_dt_follow_student(tiny_data, tiny_cfg, static_teacher):
    trn = Trainer(tiny_cfg, tiny_data, static_teacher)
    trn.cfg.ema_decay = 0.0  # bypasses validation on purpose
    trn.step()
    for a, b in zip(trn.dt.state_dict().values(), trn.student.state_dict().values()):
        assert torch.equal(a, b)


@pytest.mark.parametrize(
    "mode,lu,lc",
    [("dual", True, True), ("st", True, False), ("dt", False, True), ("none", False, False)],
)
def test_teacher_modes_switch_losses(tiny_data, tiny_cfg, static_teacher, mode, lu, lc):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "teacher_mode": mode})
    r = Trainer(cfg, tiny_data, static_teacher).step()
    assert (r.L_u > 0) == lu
    assert (r.L_c > 0) == lc


def test_apply_ablations():
    base = TrainConfig()
    assert base.apply_ablations(["st"]).teacher_mode == "dt"
    assert base.apply_ablations(["dt"]).teacher_mode == "st"
    assert base.apply_ablations(["st", "dt"]).teacher_mode == "none"
    c = base.apply_ablations(["lc"])
    assert c.teacher_mode == "dual" and not c.lc_active and c.lu_active
    assert base.teacher_mode == "dual"
    with pytest.raises(ValueError):
        base.apply_ablations(["mdpc"])


def test_st_mode_requires_static_teacher(tiny_data, tiny_cfg):
    with pytest.raises(ValueError):
        Trainer(tiny_cfg, tiny_data, None)
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "teacher_mode": "dt"})
    assert Trainer(cfg, tiny_data, None).step().L_c > 0


@pytest.mark.parametrize("strategy", ["intersection", "union", "switch:0", "switch:5"])
def test_pl_strategies(tiny_data, tiny_cfg, static_teacher, strategy):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "pl_strategy": strategy})
    trn = Trainer(cfg, tiny_data, static_teacher)
    y_st = torch.zeros(1, 1, 8, 8)
    y_dt = torch.zeros(1, 1, 8, 8)
    y_st[..., :4, :] = 0.9
    y_dt[..., 2:6, :] = 0.9
    labels, records = trn.pseudo_labels(y_st, y_dt, torch.tensor([0]), epoch=1)
    assert records == []
    expected = {
        "intersection": ((y_st > 0.5) & (y_dt > 0.5)).float(),
        "union": ((y_st > 0.5) | (y_dt > 0.5)).float(),
        "switch:0": y_dt,
        "switch:5": y_st,
    }[strategy]
    assert torch.equal(labels, expected)


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        TrainConfig(pl_strategy="vote")


def test_sampler_walks_every_unlabeled_image_per_epoch():
    cfg = TrainConfig(batch_labeled=2, batch_unlabeled=4)
    s = tr.BatchSampler(3, 10, cfg, torch.Generator().manual_seed(0))
    seen = {}
    for _ in range(6):
        idx, epoch = s.unlabeled()
        seen.setdefault(epoch, []).extend(idx.tolist())
    assert sorted(seen[0]) == list(range(10))
    assert sorted(seen[1]) == list(range(10))


def _run(tmp_path, name, data, cfg, st, **kw):
    res = tr.train(data, cfg, tmp_path / name, st, **kw)
    return res, (tmp_path / name / "logs" / "metrics.jsonl").read_bytes()


def test_training_is_deterministic_and_resumable(tmp_path, tiny_data, tiny_cfg, static_teacher, monkeypatch):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "log_decisions": True})
    res, log_a = _run(tmp_path, "a", tiny_data, cfg, static_teacher)
    _, log_b = _run(tmp_path, "b", tiny_data, cfg, static_teacher)
    assert log_a == log_b
    assert len(log_a.splitlines()) == cfg.max_iterations

    # crash after the t=3 checkpoint, then resume
    real_step = Trainer.step

    def crashing(self):
        if self.t == 4:
            raise KeyboardInterrupt
        return real_step(self)

    monkeypatch.setattr(Trainer, "step", crashing)
    with pytest.raises(KeyboardInterrupt):
        tr.train(tiny_data, cfg, tmp_path / "c", static_teacher)
    monkeypatch.setattr(Trainer, "step", real_step)
    _, log_c = _run(tmp_path, "c", tiny_data, cfg, static_teacher, resume=True)
    assert log_c == log_a
    dec = [json.loads(ln) for ln in (tmp_path / "c" / "logs" / "decisions.jsonl").read_text().splitlines()]
    assert len(dec) == cfg.max_iterations * cfg.batch_unlabeled
    assert {"iter", "image_id", "N_ST", "N_DT", "T_c", "L_ST", "L_DT", "source"} <= dec[0].keys()

    for key in ("dt", "s", "st", "dt_best"):
        assert key in res.checkpoints
    model, meta = load_checkpoint(res.checkpoints["dt"])
    assert meta["role"] == "DT" and meta["t"] == cfg.max_iterations


def test_batched_inference_matches_single(tiny_data, static_teacher):
    x = tiny_data.val_x.numpy()
    batched = tr.infer(static_teacher, x, batch_size=4)
    single = np.concatenate([tr.infer(static_teacher, x[i : i + 1]) for i in range(len(x))])
    assert batched.shape == (4, 64, 64)
    assert np.abs(batched - single).max() < 1e-6


def test_infer_rejects_bad_shapes(static_teacher):
    with pytest.raises(ValueError):
        tr.infer(static_teacher, np.zeros((1, 63, 64), np.float32))
    with pytest.raises(ValueError):
        tr.infer(static_teacher, np.zeros((1, 2, 64, 64), np.float32))


def test_overfits_single_sample(tiny_data):
    one = TrainData(tiny_data.labeled_x[:1], tiny_data.labeled_y[:1], tiny_data.unlabeled_x[:0])
    cfg = TrainConfig(
        batch_labeled=1, pretrain_iterations=150, learning_rate=1e-2, weak_blur=(1e-3, 1e-3),
        network=NetworkConfig(base_channels=8, depths=2),
    )
    model = tr.pretrain_static_teacher(one, cfg)
    model.train()  # batch statistics, as during fitting
    with torch.no_grad():
        loss = float(dice_loss(model(one.labeled_x), one.labeled_y))
    assert loss < 0.1


def test_label_rate_resplit(tmp_path):
    from csdt.synthgen import DatasetConfig, build_dataset

    man = build_dataset(
        DatasetConfig(out=str(tmp_path / "d"), train_count=16, val_count=2, test_per_light=1, labeling_rate="1/2",
                      image_size=(64, 64))
    )
    data = TrainData.from_manifest(man, "1/4")
    assert len(data.labeled_x) == 4 and len(data.unlabeled_x) == 12
    with pytest.raises(ValueError):
        TrainData.from_manifest(man, "1")


def test_pretrain_learning_rate_override(tiny_data, tiny_cfg):
    def weights(**kw):
        m = tr.pretrain_static_teacher(tiny_data, dataclasses.replace(tiny_cfg, **kw))
        return torch.cat([p.flatten() for p in m.parameters()])

    base = weights(learning_rate=1e-3)
    assert torch.equal(base, weights(learning_rate=1e-2, pretrain_learning_rate=1e-3))
    assert not torch.equal(base, weights(learning_rate=1e-3, pretrain_learning_rate=1e-2))
    with pytest.raises(ValueError):
        TrainConfig(pretrain_learning_rate=0.0)


def test_batch_statistics_leaves_buffers(tiny_data):
    net = tr.build_model(TINY_NET, 0).eval()
    before = param_hash(net)
    x = tiny_data.unlabeled_x[:4]
    with torch.no_grad():
        y_eval = net(x)
        with tr.batch_statistics(net):
            y_batch = net(x)
        assert param_hash(net) == before and not net.training
        net.train()
        y_train = net(x)
    assert param_hash(net) != before  # a plain train-mode pass does move the buffers
    assert not torch.allclose(y_eval, y_batch)
    assert torch.allclose(y_batch, y_train)


def test_teacher_bn_running_mode(tiny_data, tiny_cfg):
    a = Trainer(dataclasses.replace(tiny_cfg, teacher_bn="running"), tiny_data, tr.build_model(TINY_NET, 5))
    b = Trainer(tiny_cfg, tiny_data, tr.build_model(TINY_NET, 5))
    st_hash = param_hash(b.st)
    ra, rb = a.step(), b.step()
    assert param_hash(b.st) == st_hash
    assert ra.L_c != rb.L_c
    with pytest.raises(ValueError):
        TrainConfig(teacher_bn="eval")
