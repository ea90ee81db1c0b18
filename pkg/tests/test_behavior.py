import math

import numpy as np
import pytest
import torch

from conftest import finite_difference, micro_batch, micro_behavior_config, micro_wm_config
from drivewm.behavior import (
    Actor,
    Critic,
    ReturnNormalizer,
    actor_loss,
    critic_loss,
    imagine,
    lambda_returns,
)
from drivewm.errors import ValidationError
from drivewm.twohot import TwohotCodec
from drivewm.world_model import WorldModel, cat_states


@pytest.fixture
def setup():
    torch.manual_seed(5)
    wm_cfg = micro_wm_config()
    b_cfg = micro_behavior_config()
    wm = WorldModel(wm_cfg).double()
    actor = Actor(wm_cfg.state_dim, wm_cfg.n_actions, b_cfg).double()
    critic = Critic(wm_cfg.state_dim, b_cfg).double()
    batch = micro_batch(wm_cfg, t_len=3, batch=2)
    states, _ = wm.observe_sequence(batch, mode="mean")
    start = cat_states([s.detach() for s in states])
    return wm, actor, critic, b_cfg, start


# -- twohot --------------------------------------------------------------------


def test_twohot_roundtrip_uniform():
    codec = TwohotCodec(-20.0, 20.0, 255)
    x = torch.rand(1000, dtype=torch.double) * 39.9 - 19.95
    decoded = codec.decode(codec.encode(x))
    assert torch.allclose(decoded, x, atol=1e-6)


def test_twohot_exact_bucket_single_weight():
    codec = TwohotCodec(-20.0, 20.0, 255)
    for k in (0, 1, 93, 253, 254):
        x = codec.buckets[k].clone()
        w = codec.encode(x)
        assert float(w[k]) == 1.0
        assert float(w.sum()) == 1.0
        assert int((w != 0).sum()) == 1


def test_twohot_integer_buckets_example():
    # buckets at integers 0..9, x = 3.4 -> weights 0.6 at 3, 0.4 at 4
    codec = TwohotCodec(0.0, 9.0, 10)
    w = codec.encode(torch.tensor(3.4, dtype=torch.double))
    assert float(w[3]) == pytest.approx(0.6, abs=1e-12)
    assert float(w[4]) == pytest.approx(0.4, abs=1e-12)
    assert int((w != 0).sum()) == 2


def test_twohot_clips_out_of_range():
    codec = TwohotCodec(-1.0, 1.0, 5)
    w = codec.encode(torch.tensor([-5.0, 5.0], dtype=torch.double))
    assert float(w[0, 0]) == 1.0
    assert float(w[1, -1]) == 1.0


def test_twohot_weights_at_most_two_nonzero():
    codec = TwohotCodec(-20.0, 20.0, 41)
    x = torch.rand(500, dtype=torch.double) * 40 - 20
    w = codec.encode(x)
    assert int((w != 0).sum(-1).max()) <= 2
    assert torch.allclose(w.sum(-1), torch.ones(500, dtype=torch.double))


# -- lambda returns ---------------------------------------------------------------


def _nstep_oracle(rewards, continues, values, lam, gamma):
    """Mixture-of-n-step-returns expansion computed with explicit loops."""
    h = len(rewards)
    out = np.empty(h)
    for t in range(h):
        max_n = h - t
        def nstep(n):
            g, disc = 0.0, 1.0
            for k in range(n):
                g += disc * rewards[t + k]
                disc *= gamma * continues[t + k]
            return g + disc * values[t + n - 1]
        total = 0.0
        for n in range(1, max_n):
            total += (1 - lam) * lam ** (n - 1) * nstep(n)
        total += lam ** (max_n - 1) * nstep(max_n)
        out[t] = total
    return out


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.95, 1.0])
def test_lambda_return_matches_oracle(lam):
    rng = np.random.default_rng(17)
    for _ in range(50):
        h = 15
        r = rng.normal(size=h)
        c = rng.uniform(0.0, 1.0, size=h)
        v = rng.normal(size=h)
        ours = lambda_returns(
            torch.tensor(r), torch.tensor(c), torch.tensor(v), lam=lam, gamma=0.997
        ).numpy()
        oracle = _nstep_oracle(r, c, v, lam, 0.997)
        np.testing.assert_allclose(ours, oracle, atol=1e-6)


def test_lambda_zero_is_one_step_td():
    r = torch.tensor([1.0, 2.0, 3.0])
    c = torch.tensor([1.0, 0.5, 1.0])
    v = torch.tensor([10.0, 20.0, 30.0])
    out = lambda_returns(r, c, v, lam=0.0, gamma=0.9)
    expected = r + 0.9 * c * v
    assert torch.allclose(out, expected)


def test_lambda_one_is_discounted_sum_plus_bootstrap():
    gamma = 0.9
    r = torch.tensor([1.0, 1.0, 1.0])
    c = torch.ones(3)
    v = torch.tensor([5.0, 5.0, 5.0])
    out = lambda_returns(r, c, v, lam=1.0, gamma=gamma)
    expected0 = 1 + gamma * (1 + gamma * (1 + gamma * 5.0))
    assert out[0].item() == pytest.approx(expected0, rel=1e-6)


def test_lambda_returns_shape_mismatch():
    with pytest.raises(ValidationError):
        lambda_returns(torch.zeros(3), torch.zeros(2), torch.zeros(3))


# -- actor / critic ---------------------------------------------------------------


def test_actor_probabilities_and_entropy(setup):
    wm, actor, critic, b_cfg, start = setup
    logits = actor(start.ego_feat(), start.vdi_feat(), start.vdi_mask)
    probs = torch.softmax(logits, -1)
    assert torch.allclose(probs.sum(-1), torch.ones(start.batch, dtype=torch.double))
    _, _, entropy = actor.act(start.ego_feat(), start.vdi_feat(), start.vdi_mask, "greedy")
    assert torch.all(entropy >= 0) and torch.all(entropy <= math.log(4) + 1e-9)


def test_uniform_logits_entropy_ln4(setup):
    wm, actor, critic, b_cfg, start = setup
    logits = torch.zeros(3, 4, dtype=torch.double)
    log_probs = torch.log_softmax(logits, -1)
    entropy = -(log_probs.exp() * log_probs).sum(-1)
    assert torch.allclose(entropy, torch.full((3,), math.log(4), dtype=torch.double))


def test_greedy_deterministic_and_monotone_invariant(setup):
    wm, actor, critic, b_cfg, start = setup
    a1, _, _ = actor.act(start.ego_feat(), start.vdi_feat(), start.vdi_mask, "greedy")
    a2, _, _ = actor.act(start.ego_feat(), start.vdi_feat(), start.vdi_mask, "greedy")
    assert torch.equal(a1, a2)
    logits = actor(start.ego_feat(), start.vdi_feat(), start.vdi_mask)
    # any strictly monotone transform keeps the argmax
    assert torch.equal((3.0 * logits + 7.0).argmax(-1), logits.argmax(-1))
    assert torch.equal(torch.tanh(logits / 50.0).argmax(-1), logits.argmax(-1))


def test_value_within_bucket_hull(setup):
    wm, actor, critic, b_cfg, start = setup
    value = critic.value(start.ego_feat(), start.vdi_feat(), start.vdi_mask)
    assert torch.all(value >= b_cfg.value_low) and torch.all(value <= b_cfg.value_high)


def test_equal_logits_decode_to_zero():
    codec = TwohotCodec(-20.0, 20.0, 255)
    value = codec.expected_value(torch.zeros(255, dtype=torch.double))
    assert float(value) == pytest.approx(0.0, abs=1e-9)


def test_logit_spike_decodes_to_bucket():
    codec = TwohotCodec(-20.0, 20.0, 41)
    logits = torch.full((41,), -60.0, dtype=torch.double)
    logits[7] = 60.0
    assert float(codec.expected_value(logits)) == pytest.approx(float(codec.buckets[7]), abs=1e-9)


# -- imagination -------------------------------------------------------------------


def test_imagine_contract(setup):
    wm, actor, critic, b_cfg, start = setup
    h = b_cfg.horizon
    rollout = imagine(wm, actor, critic, start, h)
    assert rollout.ego_feat.shape[0] == h + 1
    assert rollout.actions.shape == (h, start.batch)
    assert rollout.rewards.shape == (h, start.batch)
    assert rollout.values.shape == (h, start.batch)
    assert torch.equal(rollout.vdi_mask, start.vdi_mask)  # membership frozen
    assert not rollout.ego_feat.requires_grad


def test_imagine_deterministic_under_seed(setup):
    wm, actor, critic, b_cfg, start = setup
    torch.manual_seed(123)
    r1 = imagine(wm, actor, critic, start, 4)
    torch.manual_seed(123)
    r2 = imagine(wm, actor, critic, start, 4)
    assert torch.equal(r1.actions, r2.actions)
    assert torch.equal(r1.ego_feat, r2.ego_feat)


def test_actor_loss_zero_case(setup):
    wm, actor, critic, b_cfg, start = setup
    rollout = imagine(wm, actor, critic, start, 3, latent_mode="mean", action_mode="greedy")
    h, b = rollout.actions.shape
    logits = actor(
        rollout.ego_feat[:h].reshape(h * b, -1),
        rollout.vdi_feat[:h].reshape(h * b, *rollout.vdi_feat.shape[2:]),
        rollout.vdi_mask.repeat(h, 1),
    )
    log_probs = torch.log_softmax(logits, -1)
    taken = log_probs.gather(-1, rollout.actions.reshape(-1, 1)).view(h, b)
    entropy = -(log_probs.exp() * log_probs).sum(-1).view(h, b)
    zeros = torch.zeros(h, b, dtype=torch.double)
    loss = actor_loss(taken, entropy, zeros, scale=1.0, entropy_eta=0.0)
    assert float(loss) == 0.0
    actor.zero_grad()
    loss.backward()
    for p in actor.parameters():
        assert p.grad is None or torch.all(p.grad == 0)


def test_actor_loss_scale_linearity(setup):
    wm, actor, critic, b_cfg, start = setup
    h, b = 3, start.batch
    torch.manual_seed(0)
    logp = -torch.rand(h, b, dtype=torch.double)
    entropy = torch.rand(h, b, dtype=torch.double)
    returns = torch.randn(h, b, dtype=torch.double)
    l2 = actor_loss(logp, entropy, returns, scale=2.0, entropy_eta=0.0)
    l4 = actor_loss(logp, entropy, returns, scale=4.0, entropy_eta=0.0)
    assert float(l4) == pytest.approx(float(l2) / 2.0, rel=1e-12)
    # below the max(1, S) threshold the divisor stays 1
    l_small = actor_loss(logp, entropy, returns, scale=0.25, entropy_eta=0.0)
    l_one = actor_loss(logp, entropy, returns, scale=1.0, entropy_eta=0.0)
    assert float(l_small) == pytest.approx(float(l_one), rel=1e-12)


def test_actor_gradcheck(setup):
    wm, actor, critic, b_cfg, start = setup
    torch.manual_seed(2)
    rollout = imagine(wm, actor, critic, start, b_cfg.horizon)
    returns = lambda_returns(rollout.rewards, rollout.continues, rollout.values,
                             b_cfg.lam, b_cfg.discount)
    h, b = rollout.actions.shape

    def loss_fn():
        logits = actor(
            rollout.ego_feat[:h].reshape(h * b, -1),
            rollout.vdi_feat[:h].reshape(h * b, *rollout.vdi_feat.shape[2:]),
            rollout.vdi_mask.repeat(h, 1),
        )
        log_probs = torch.log_softmax(logits, -1)
        taken = log_probs.gather(-1, rollout.actions.reshape(-1, 1)).view(h, b)
        entropy = -(log_probs.exp() * log_probs).sum(-1).view(h, b)
        return actor_loss(taken, entropy, returns, 1.7, 1e-3)

    assert finite_difference(actor, loss_fn, n_probes=30, seed=3) < 1e-3


def test_critic_loss_floor_and_gibbs(setup):
    wm, actor, critic, b_cfg, start = setup
    codec = critic.codec
    returns = torch.tensor([[1.234], [-3.3]], dtype=torch.double)
    target = codec.encode(returns)
    # logits that reproduce the target exactly: log(target) with -inf -> large negative
    logits = torch.log(target.clamp_min(1e-30))
    loss = critic_loss(logits, returns, codec)
    entropy = -(target * torch.log(target.clamp_min(1e-30))).sum(-1).sum()
    assert float(loss) == pytest.approx(float(entropy) / 1.0, rel=1e-6)
    # any other prediction does worse (Gibbs): compare against uniform
    uniform = torch.zeros_like(logits)
    assert float(critic_loss(uniform, returns, codec)) >= float(loss)


def test_critic_loss_hand_two_buckets():
    codec = TwohotCodec(0.0, 1.0, 2)
    returns = torch.tensor([[0.25]], dtype=torch.double)
    logits = torch.tensor([[[0.2, -0.4]]], dtype=torch.double)
    target = np.array([0.75, 0.25])
    logp = torch.log_softmax(logits, -1)[0, 0].numpy()
    expected = -(target * logp).sum()
    assert float(critic_loss(logits, returns, codec)) == pytest.approx(expected, rel=1e-12)


def test_critic_gradcheck(setup):
    wm, actor, critic, b_cfg, start = setup
    torch.manual_seed(4)
    rollout = imagine(wm, actor, critic, start, b_cfg.horizon)
    returns = lambda_returns(rollout.rewards, rollout.continues, rollout.values,
                             b_cfg.lam, b_cfg.discount)
    h, b = rollout.actions.shape

    def loss_fn():
        logits = critic(
            rollout.ego_feat[:h].reshape(h * b, -1),
            rollout.vdi_feat[:h].reshape(h * b, *rollout.vdi_feat.shape[2:]),
            rollout.vdi_mask.repeat(h, 1),
        ).view(h, b, -1)
        return critic_loss(logits, returns, critic.codec)

    assert finite_difference(critic, loss_fn, n_probes=30, seed=4) < 1e-3


# -- gradient isolation ---------------------------------------------------------


def test_actor_critic_gradients_never_reach_world_model(setup):
    wm, actor, critic, b_cfg, start = setup
    torch.manual_seed(9)
    rollout = imagine(wm, actor, critic, start, b_cfg.horizon)
    returns = lambda_returns(rollout.rewards, rollout.continues, rollout.values,
                             b_cfg.lam, b_cfg.discount)
    h, b = rollout.actions.shape
    flat_e = rollout.ego_feat[:h].reshape(h * b, -1)
    flat_v = rollout.vdi_feat[:h].reshape(h * b, *rollout.vdi_feat.shape[2:])
    mask = rollout.vdi_mask.repeat(h, 1)

    wm.zero_grad()
    logits = actor(flat_e, flat_v, mask)
    log_probs = torch.log_softmax(logits, -1)
    taken = log_probs.gather(-1, rollout.actions.reshape(-1, 1)).view(h, b)
    entropy = -(log_probs.exp() * log_probs).sum(-1).view(h, b)
    actor_loss(taken, entropy, returns, 1.0, 1e-3).backward()
    critic_loss(critic(flat_e, flat_v, mask).view(h, b, -1), returns, critic.codec).backward()
    for name, p in wm.named_parameters():
        assert p.grad is None or torch.all(p.grad == 0), name


# -- return normalizer -------------------------------------------------------------


def test_normalizer_constant_returns():
    norm = ReturnNormalizer()
    norm.update(torch.full((100,), 3.3))
    assert norm.scale == pytest.approx(0.0, abs=1e-6)
    assert norm.divisor == 1.0


def test_normalizer_uniform_range():
    norm = ReturnNormalizer(decay=0.0)  # no smoothing: direct percentile range
    g = torch.Generator().manual_seed(0)
    returns = torch.rand(20000, generator=g) * 10.0
    norm.update(returns)
    assert norm.scale == pytest.approx(9.0, abs=0.15)
    assert norm.divisor == pytest.approx(norm.scale, abs=1e-9)


def test_normalizer_never_negative():
    norm = ReturnNormalizer()
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        norm.update(torch.randn(50, generator=g))
        assert norm.scale >= 0.0


def test_normalizer_ema_converges():
    norm = ReturnNormalizer(decay=0.9)
    g = torch.Generator().manual_seed(1)
    for _ in range(200):
        norm.update(torch.rand(5000, generator=g) * 10.0)
    assert norm.scale == pytest.approx(9.0, abs=0.3)


def test_normalizer_empty_batch_rejected():
    with pytest.raises(ValidationError):
        ReturnNormalizer().update(torch.zeros(0))
