import math

import numpy as np
import pytest
import torch

from drivewm.tracks import FRAME_MS, Scenario, TrackPoint, VehicleTrack

torch.set_num_threads(1)


def make_track(track_id, poses, t0_ms=0, length=4.6, width=1.9):
    """Track from a list of (x, y, yaw) poses at consecutive frames."""
    points = [TrackPoint(t0_ms + k * FRAME_MS, x, y, yaw) for k, (x, y, yaw) in enumerate(poses)]
    return VehicleTrack(str(track_id), points, length, width)


def straight_track(track_id, n_frames, v=5.0, x0=0.0, y=0.0, yaw=0.0, t0_ms=0, **kw):
    poses = [
        (x0 + k * v * 0.1 * math.cos(yaw), y + k * v * 0.1 * math.sin(yaw), yaw)
        for k in range(n_frames)
    ]
    return make_track(track_id, poses, t0_ms, **kw)


@pytest.fixture
def straight_scenario():
    """Ego drives 20 m at 5 m/s with one slow leader far ahead."""
    ego = straight_track("ego", 41, v=5.0)
    leader = straight_track("lead", 41, v=5.0, x0=30.0)
    return Scenario("straight", ego, [leader])


@pytest.fixture
def empty_scenario():
    """Ego alone on a straight 30 m route."""
    return Scenario("solo", straight_track("ego", 61, v=5.0), [])


def micro_wm_config(**overrides):
    from drivewm.world_model import WorldModelConfig

    kw = dict(
        h_dim=8, z_categories=2, z_classes=3, embed_dim=8, units=8, mlp_layers=1,
        attn_dim=4, attn_heads=2, n_vdi=1, n_vpi=1, horizon=3,
        reward_buckets=5, free_nats=0.0,
    )
    kw.update(overrides)
    return WorldModelConfig(**kw)


def micro_behavior_config(**overrides):
    from drivewm.behavior import BehaviorConfig

    kw = dict(units=8, mlp_layers=1, attn_dim=4, attn_heads=2, horizon=4, critic_buckets=7)
    kw.update(overrides)
    return BehaviorConfig(**kw)


def micro_batch(cfg, t_len=3, batch=2, seed=1, dtype=torch.double):
    """Random but well-formed sequence batch for the micro world model."""
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=dtype)

    nd, np_ = cfg.n_vdi, cfg.n_vpi
    h = cfg.horizon
    batch_dict = {
        "ego": rand(t_len, batch, 19, 5),
        "vdi": rand(t_len, batch, nd, 19, 5),
        "vpi": rand(t_len, batch, np_, 19, 5),
        "vdi_mask": torch.ones(t_len, batch, nd, dtype=torch.bool),
        "vpi_mask": torch.ones(t_len, batch, np_, dtype=torch.bool),
        "vdi_ids": torch.arange(nd).expand(t_len, batch, nd).clone(),
        "vpi_ids": (100 + torch.arange(np_)).expand(t_len, batch, np_).clone(),
        "action": torch.randint(0, cfg.n_actions, (t_len, batch), generator=g),
        "reward": rand(t_len, batch) * 2.0,
        "cont": torch.ones(t_len, batch, dtype=dtype),
        "is_first": torch.zeros(t_len, batch, dtype=torch.bool),
        "y_ego": rand(t_len, batch, h, 2),
        "y_ego_mask": torch.ones(t_len, batch, h, dtype=torch.bool),
        "y_vdi": rand(t_len, batch, nd, h, 2),
        "y_vdi_mask": torch.ones(t_len, batch, nd, h, dtype=torch.bool),
    }
    batch_dict["is_first"][0] = True
    return batch_dict


def finite_difference(module, loss_fn, n_probes, seed=0, eps_scale=1e-5):
    """Worst relative gradient error over randomly probed parameters."""
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    params = [(n, p) for n, p in module.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        _, p = params[rng.integers(len(params))]
        idx = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[idx])
        eps = eps_scale * max(1.0, abs(float(p.detach().view(-1)[idx])))
        with torch.no_grad():
            p.view(-1)[idx] += eps
        plus = float(loss_fn().detach())
        with torch.no_grad():
            p.view(-1)[idx] -= 2 * eps
        minus = float(loss_fn().detach())
        with torch.no_grad():
            p.view(-1)[idx] += eps
        fd = (plus - minus) / (2 * eps)
        # The 1e-6 floor keeps FD roundoff on near-zero gradients from
        # dominating the ratio at double precision.
        worst = max(worst, abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6))
    return worst
