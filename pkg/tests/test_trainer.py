import math
from dataclasses import replace

import numpy as np
import pytest

from meterlab import checks, dialgen, mrlm, trainer
from meterlab import tensor as tt

TINY32 = mrlm.with_flags(checks.TINY, dtype="float32")


@pytest.fixture(scope="module")
def tiny_data():
    cfg = dialgen.paper_profile(30, master_seed=1, image_size=TINY32.img_size)
    man = dialgen.generate_dataset(cfg)
    return trainer.load_split(cfg, man, "train"), trainer.load_split(cfg, man, "test")


def short(**kw):
    base = dict(stage1_iters=6, stage2_iters=3, batch_size=4, log_every=2)
    base.update(kw)
    return trainer.TrainConfig(**base)


# ---------------------------------------------------------------- optimiser

def test_adamw_first_step_oracle():
    # after one step m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    b = np.array([0.2, -0.4])
    g_w = np.array([[0.1, -0.3], [2.0, 0.0]])
    g_b = np.array([-1.0, 0.5])
    lr, wd, eps = 0.01, 0.1, 1e-8
    want_w = w * (1 - lr * wd) - lr * g_w / (np.abs(g_w) + eps)
    want_b = b - lr * g_b / (np.abs(g_b) + eps)  # no decay on biases
    params = {"layer.w": w.copy(), "layer.w_b": b.copy()}
    opt = trainer.AdamWState(weight_decay=wd, eps=eps)
    assert trainer.adamw_step(params, {"layer.w": g_w, "layer.w_b": g_b}, opt, lr)
    assert np.allclose(params["layer.w"], want_w, rtol=0, atol=1e-15)
    assert np.allclose(params["layer.w_b"], want_b, rtol=0, atol=1e-15)
    assert opt.step == 1


def test_adamw_two_steps_against_loop():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(2)]
    lr, b1, b2, eps, wd = 1e-3, 0.9, 0.999, 1e-8, 0.01
    p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    params = {"w": p0.copy()}
    opt = trainer.AdamWState()
    for g in grads:
        trainer.adamw_step(params, {"w": g}, opt, lr)
    assert np.allclose(params["w"], p, rtol=1e-12, atol=0)


def test_decay_only_on_matrices():
    assert trainer.decays("enc.block0.qkv", np.zeros((2, 2)))
    assert not trainer.decays("enc.block0.qkv_b", np.zeros((2, 2)))
    assert not trainer.decays("enc.tap0.g", np.zeros(4))
    assert not trainer.decays("dec.ln_q.b", np.zeros(4))


def test_nonfinite_gradient_skips_update():
    params = {"w": np.ones((2, 2))}
    opt = trainer.AdamWState()
    ok = trainer.adamw_step(params, {"w": np.array([[np.nan, 0], [0, 0]])}, opt, 0.1)
    assert not ok and opt.step == 0 and opt.skipped == 1
    assert np.array_equal(params["w"], np.ones((2, 2)))


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        trainer.adamw_step({"w": np.ones((2, 2))}, {"w": np.ones(2)}, trainer.AdamWState(), 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert trainer.clip_global_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    trainer.clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


# ---------------------------------------------------------------- config

def test_schedule():
    cfg = trainer.TrainConfig(stage1_iters=3, stage2_iters=2)
    assert [cfg.lr_at(s) for s in range(1, 6)] == [cfg.lr_initial] * 3 + [cfg.lr_final] * 2


@pytest.mark.parametrize("kw", [dict(lr_initial=1e-6, lr_final=1e-4), dict(stage1_iters=0),
                                dict(batch_size=0), dict(stage2_iters=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        trainer.TrainConfig(**kw)


def test_full_length_schedule_values():
    p = trainer.PAPER_TRAIN
    assert (p.batch_size, p.lr_initial, p.lr_final, p.stage1_iters, p.stage2_iters) == (8, 1e-4, 1e-6, 200_000, 50_000)


def test_config_dict_roundtrip():
    cfg = short(seed=4, use_moe=False)
    assert trainer.TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- training

def test_logged_lr_follows_schedule(tiny_data, tmp_path):
    tr, _ = tiny_data
    cfg = short(log_every=1)
    _, hist = trainer.train(mrlm.init_state(TINY32, 0), tr, cfg, checkpoint_dir=tmp_path)
    assert [h["step"] for h in hist] == list(range(1, 10))
    assert all(h["lr"] == cfg.lr_at(h["step"]) for h in hist)
    assert (tmp_path / "stage1.ckpt").exists() and (tmp_path / "stage2.ckpt").exists()


def test_training_reduces_loss(tiny_data):
    tr, _ = tiny_data
    cfg = short(stage1_iters=40, stage2_iters=1, log_every=10, lr_initial=1e-3, lr_final=1e-5)
    _, hist = trainer.train(mrlm.init_state(TINY32, 0), tr, cfg)
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_training_is_deterministic(tiny_data, tmp_path):
    tr, _ = tiny_data
    runs = []
    for name in ("a", "b"):
        st, hist = trainer.train(mrlm.init_state(TINY32, 5), tr, short(seed=5), checkpoint_dir=tmp_path / name)
        runs.append(hist)
    assert runs[0] == runs[1]
    assert (tmp_path / "a" / "stage2.ckpt").read_bytes() == (tmp_path / "b" / "stage2.ckpt").read_bytes()


def test_data_order_depends_on_seed_and_epoch():
    a = trainer._order(50, 0, 0)
    assert np.array_equal(a, trainer._order(50, 0, 0))
    assert not np.array_equal(a, trainer._order(50, 0, 1))
    assert not np.array_equal(a, trainer._order(50, 1, 0))


def test_disabled_branches_stay_frozen(tiny_data):
    tr, _ = tiny_data
    state = mrlm.init_state(TINY32, 0)
    before = {k: p.data.copy() for k, p in state.params.items()}
    trainer.train(state, tr, short(use_kfm=False, use_moe=False))
    for k in ("kfm.wq", "moe.gate", "moe.fc1", "moe.mlp1"):
        assert np.array_equal(state.params[k].data, before[k])
    assert not np.array_equal(state.params["enc.patch"].data, before["enc.patch"])


def test_divergence_aborts(tiny_data, monkeypatch):
    tr, _ = tiny_data

    def nan_loss(logits, targets, mask=None):
        return tt.make_op(np.array(np.nan, dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))

    monkeypatch.setattr(tt, "cross_entropy", nan_loss)
    with pytest.raises(trainer.TrainingDiverged):
        trainer.train(mrlm.init_state(TINY32, 0), tr, short(stage1_iters=20))


def test_empty_training_set(tiny_data):
    tr, _ = tiny_data
    empty = trainer.ReadingData(tr.images[:0], [], tr.specs)
    with pytest.raises(ValueError):
        trainer.train(mrlm.init_state(TINY32, 0), empty, short())


def test_history_csv(tmp_path):
    trainer.write_history([{"step": 1, "lr": 0.1, "loss": 2.0, "acc_eps": None, "acc_theta": None}], tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["step,lr,loss,acc_eps,acc_theta", "1,0.1,2.0,,"]


# ---------------------------------------------------------------- evaluation

def test_checkpoint_roundtrip_gives_identical_metrics(tiny_data, tmp_path):
    tr, te = tiny_data
    state, _ = trainer.train(mrlm.init_state(TINY32, 0), tr, short())
    state.save(tmp_path / "m.ckpt")
    a, raw_a = trainer.evaluate(state, te, "archetype")
    b, raw_b = trainer.evaluate(mrlm.ModelState.load(tmp_path / "m.ckpt"), te, "archetype")
    assert raw_a == raw_b
    assert a.to_csv() == b.to_csv()


def test_ablation_suite_table(tiny_data):
    tr, te = tiny_data
    res = trainer.run_ablation_suite(tr, te, TINY32, short(stage1_iters=2, stage2_iters=1))
    assert [r.variant for r in res] == list(trainer.VARIANTS)
    table = trainer.ablation_table(res).splitlines()
    assert table[0] == "| Variant | Acc_eps (%) | Acc_theta (%) | Ref | Rel |"
    assert len(table) == 2 + 4
    assert len(trainer.ablation_csv(res).splitlines()) == 5


def test_predictions_to_pairs(tiny_data):
    _, te = tiny_data
    pairs = trainer.predictions_to_pairs([r.reading for r in te.records], te)
    assert all(p.y == p.y_star for p in pairs)
    assert pairs[0].range_span == te.specs[te.records[0].archetype_id].span


def test_expert_utilization_is_a_distribution(tiny_data):
    tr, _ = tiny_data
    state = mrlm.init_state(TINY32, 0, zero_init=False)
    bank = mrlm.build_template_bank(state, list(tr.specs.values()))
    use = trainer.expert_utilization(state, tr.images[:5], bank)
    assert use.shape == (TINY32.n_experts,)
    assert use.sum() == pytest.approx(1.0, abs=1e-6)
