import json

import numpy as np
import pytest
import torch

from dualrr.streamsim import StreamEnv
from dualrr.trainloop import (
    LOSS_FIELDS,
    TrainConfig,
    compute_losses,
    effective_weights,
    format_config,
    init_state,
    load_state,
    parse_config_text,
    preference_pairs,
    run,
    sample_rl_inputs,
    save_state,
    state_arrays,
    train_step,
)

SMALL = TrainConfig(
    seed=3, total_steps=20, batch_size=8, group_size=4, d_model=16, d_ffn=16, n_cand=6, l_out=4,
    n_enc_layers=1, n_teacher_layers=1, eval_every=0, eval_size=8, serve_samples=4,
)


def batch_for(cfg, step=0):
    return StreamEnv(cfg.env_config()).next_batch(step, cfg.batch_size)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(group_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_rl=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(tau_sample=0.0)


def test_config_text_round_trip_and_errors():
    cfg = SMALL.replace(no_kd=True, lambda_rl=0.25)
    assert parse_config_text(format_config(cfg)) == cfg
    parsed = parse_config_text("# comment\nseed = 9   # trailing\n\ngrpo_mode = yes\n")
    assert parsed.seed == 9 and parsed.grpo_mode and parsed.mode == "grpo"
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("learning_rate = 1")
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("no_kd = maybe")
    with pytest.raises(ValueError):
        parse_config_text("seed 3")


def test_mode_switch():
    assert SMALL.mode == "ldro"
    assert SMALL.replace(grpo_mode=True).mode == "grpo"
    assert SMALL.replace(no_batch_decouple=True).mode == "grpo"


def test_warmup_disables_rl_only():
    cfg = SMALL.replace(total_steps=100)
    assert cfg.warmup_steps == 10
    assert effective_weights(cfg, 9)["lam_rl"] == 0.0
    assert effective_weights(cfg, 10)["lam_rl"] == cfg.lambda_rl
    assert effective_weights(cfg.replace(no_kd=True), 50)["lam_kd"] == 0.0


def test_total_is_weighted_sum_of_terms():
    cfg = SMALL
    st = init_state(cfg)
    b = batch_for(cfg)
    with torch.no_grad():
        cube = st.model.student(st.model.encoder(b.ctx, b.feats))
    rl = sample_rl_inputs(st, b, cube)
    w = dict(lam_bpr=0.7, lam_kd=1.3, lam_rl=0.4, beta_kl=0.02, beta_ent=0.05)
    total, t, _ = compute_losses(st.model, b, cfg, rl, w)
    expect = t["mle"] + 0.7 * t["bpr"] + 1.3 * t["kd"] + 0.4 * (t["ldro"] + 0.02 * t["kl_penalty"] - 0.05 * t["entropy_bonus"])
    assert abs(float((total - expect).detach())) < 1e-12


def test_group_composition_keeps_exposed_slate():
    st = init_state(SMALL)
    b = batch_for(SMALL)
    with torch.no_grad():
        cube = st.model.student(st.model.encoder(b.ctx, b.feats))
    rl = sample_rl_inputs(st, b, cube)
    assert rl.group.shape == (8, 4, 4)
    assert torch.equal(rl.group[:, 0], b.exposed)
    for row in rl.group.reshape(-1, 4):
        assert len(set(row.tolist())) == 4


def test_preference_pairs_respect_margin():
    b = batch_for(SMALL)
    rows, win, lose = preference_pairs(b, 0.5)
    s = 1.0 * b.clicks + 2.0 * b.long_views + 0.1 * b.exposure
    pos = {(r, int(i)): t for r in range(len(b)) for t, i in enumerate(b.exposed[r])}
    for r, w, l in zip(rows.tolist(), win.tolist(), lose.tolist()):
        assert s[r, pos[(r, w)]] - s[r, pos[(r, l)]] > 0.5


def test_no_kd_without_rl_only_changes_teacher():
    cfg = SMALL.replace(no_kd=True, lambda_rl=0.0)
    st = init_state(cfg)
    before = snapshot(st.model)
    for step in range(3):
        train_step(st, batch_for(cfg, step))
    after = snapshot(st.model)
    for k in before:
        moved = not torch.equal(before[k], after[k])
        if k.startswith("student."):
            assert not moved, k
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("teacher."))


def test_rl_advantages_carry_no_gradient():
    st = init_state(SMALL.replace(total_steps=0))
    b = batch_for(SMALL)
    cube = st.model.student(st.model.encoder(b.ctx, b.feats))
    rl = sample_rl_inputs(st, b, cube)
    assert not rl.advantages.requires_grad and not rl.rewards.requires_grad


def test_reward_net_untouched_by_policy_loss():
    st = init_state(SMALL)
    b = batch_for(SMALL)
    with torch.no_grad():
        cube = st.model.student(st.model.encoder(b.ctx, b.feats))
    rl = sample_rl_inputs(st, b, cube)
    total, _, _ = compute_losses(st.model, b, SMALL, rl, effective_weights(SMALL, 10))
    total.backward()
    assert all(p.grad is None for p in st.reward_net.parameters())


def test_metrics_fields():
    st = init_state(SMALL)
    breakdown, m = train_step(st, batch_for(SMALL))
    for k in LOSS_FIELDS:
        assert k in m and np.isfinite(m[k])
    assert m["step"] == 0 and st.step == 1
    assert breakdown.total == m["total"]


def test_training_is_deterministic():
    outs = []
    for _ in range(2):
        st = init_state(SMALL)
        env = StreamEnv(SMALL.env_config())
        for s in range(12):
            train_step(st, env.next_batch(s, SMALL.batch_size))
        outs.append(state_arrays(st))
    assert outs[0].keys() == outs[1].keys()
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_state_round_trip(tmp_path):
    st = init_state(SMALL)
    train_step(st, batch_for(SMALL))
    save_state(st, tmp_path / "s.bin")
    back = load_state(tmp_path / "s.bin")
    assert back.step == st.step and back.cfg == st.cfg
    a, b = state_arrays(st), state_arrays(back)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    run(SMALL.replace(total_steps=0), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_0000000.bin", "final.bin", "metrics.jsonl"]
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_resume_is_bit_exact(tmp_path):
    cfg = SMALL.replace(total_steps=10, checkpoint_every=5)
    run(cfg, tmp_path / "full")
    run(cfg, tmp_path / "resumed", resume_from=tmp_path / "full" / "ckpt_0000005.bin")
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    resumed = (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()
    assert full[5:] == resumed
    a = state_arrays(load_state(tmp_path / "full" / "final.bin"))
    b = state_arrays(load_state(tmp_path / "resumed" / "final.bin"))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_run_metrics_jsonl(tmp_path):
    run(SMALL.replace(total_steps=4, eval_every=2), tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == [0, 1, 2, 3]
    assert "eval/ptar" in lines[1] and "eval/ptar" not in lines[0]
