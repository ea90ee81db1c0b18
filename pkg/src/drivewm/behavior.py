"""Actor-critic trained entirely inside the world model's imagination.

Rollouts start from posterior states, follow the prior transition under
the current policy, and never propagate gradients back into the world
model: imagination runs without grad and the actor/critic re-evaluate
their heads on detached state features. Value targets are lambda-returns
over predicted rewards and continuation probabilities; the critic
regresses them as twohot distributions and the actor follows Reinforce
with return scaling and an entropy bonus.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import TrainingError, ValidationError
from .twohot import TwohotCodec
from .world_model import LatentState, MaskedAttention, WorldModel, mlp


@dataclass
class BehaviorConfig:
    horizon: int = 15                 # imagination length H
    discount: float = 0.997
    lam: float = 0.95
    entropy_eta: float = 1e-3
    use_baseline: bool = False        # subtract the critic value in Reinforce
    units: int = 128
    mlp_layers: int = 2
    attn_dim: int = 64
    attn_heads: int = 4
    critic_buckets: int = 255
    value_low: float = -20.0
    value_high: float = 20.0
    value_transform: str = "identity"  # "symlog" concentrates buckets near 0
    scale_decay: float = 0.99
    scale_low_pct: float = 5.0
    scale_high_pct: float = 95.0
    target_critic: bool = False       # EMA critic copy for bootstrap values
    target_tau: float = 0.02


class ReturnNormalizer:
    """Exponential moving percentile range of lambda-returns.

    The actor divides returns by max(1, S); a fresh normalizer starts at
    the first observed range.
    """

    def __init__(self, decay: float = 0.99, low_pct: float = 5.0, high_pct: float = 95.0):
        self.decay = decay
        self.low_pct = low_pct
        self.high_pct = high_pct
        self.scale: float | None = None

    def update(self, returns: Tensor) -> float:
        flat = returns.detach().flatten().float()
        if flat.numel() == 0:
            raise ValidationError("cannot update return scale from an empty batch")
        span = torch.quantile(flat, self.high_pct / 100.0) - torch.quantile(flat, self.low_pct / 100.0)
        span = float(span)
        self.scale = span if self.scale is None else self.decay * self.scale + (1 - self.decay) * span
        return self.scale

    @property
    def divisor(self) -> float:
        return max(1.0, self.scale or 0.0)


class _FusedHead(nn.Module):
    """Ego-query cross-attention over ego+VDI features followed by an MLP."""

    def __init__(self, state_dim: int, out_dim: int, cfg: BehaviorConfig):
        super().__init__()
        self.attn = MaskedAttention(state_dim, state_dim, cfg.attn_dim, cfg.attn_heads)
        self.net = mlp(state_dim + cfg.attn_dim, cfg.units, out_dim, cfg.mlp_layers)

    def forward(self, ego_feat: Tensor, vdi_feat: Tensor, vdi_mask: Tensor) -> Tensor:
        b = ego_feat.shape[0]
        keys = torch.cat([ego_feat[:, None, :], vdi_feat], dim=1)
        key_mask = torch.cat(
            [torch.ones(b, 1, dtype=torch.bool, device=ego_feat.device), vdi_mask], dim=1
        )
        fused = self.attn(ego_feat[:, None, :], keys, key_mask)[:, 0]
        return self.net(torch.cat([ego_feat, fused], dim=-1))


class Actor(nn.Module):
    """Categorical policy over the discrete target speeds."""

    def __init__(self, state_dim: int, n_actions: int, cfg: BehaviorConfig):
        super().__init__()
        self.behavior_config = cfg
        self.head = _FusedHead(state_dim, n_actions, cfg)

    def forward(self, ego_feat, vdi_feat, vdi_mask) -> Tensor:
        return self.head(ego_feat, vdi_feat, vdi_mask)

    def act(self, ego_feat, vdi_feat, vdi_mask, mode: str = "sample"):
        """Returns (action, log_prob, entropy); greedy mode takes the argmax."""
        logits = self.forward(ego_feat, vdi_feat, vdi_mask)
        log_probs = F.log_softmax(logits, dim=-1)
        entropy = -(log_probs.exp() * log_probs).sum(-1)
        if mode == "greedy":
            action = logits.argmax(dim=-1)
        elif mode == "sample":
            action = torch.multinomial(log_probs.exp(), 1)[..., 0]
        else:
            raise ValidationError(f"unknown action mode '{mode}'")
        return action, log_probs.gather(-1, action[..., None])[..., 0], entropy


class Critic(nn.Module):
    """Distributional state-value head over twohot buckets."""

    def __init__(self, state_dim: int, cfg: BehaviorConfig):
        super().__init__()
        self.behavior_config = cfg
        self.head = _FusedHead(state_dim, cfg.critic_buckets, cfg)
        self.codec = TwohotCodec(cfg.value_low, cfg.value_high, cfg.critic_buckets, cfg.value_transform)

    def forward(self, ego_feat, vdi_feat, vdi_mask) -> Tensor:
        return self.head(ego_feat, vdi_feat, vdi_mask)

    def value(self, ego_feat, vdi_feat, vdi_mask) -> Tensor:
        return self.codec.expected_value(self.forward(ego_feat, vdi_feat, vdi_mask))


@dataclass
class ImaginedRollout:
    """H-step prior rollout: H+1 states with the actions and heads along it.

    Features are detached from the world-model graph; masks/membership are
    frozen to the start state throughout.
    """

    ego_feat: Tensor      # (H+1, B, S)
    vdi_feat: Tensor      # (H+1, B, Nd, S)
    vdi_mask: Tensor      # (B, Nd)
    actions: Tensor       # (H, B)
    rewards: Tensor       # (H, B)   expected reward at states 0..H-1
    continues: Tensor     # (H, B)   continue probability at states 0..H-1
    values: Tensor        # (H, B)   critic value at states 1..H (bootstrap last)
    state_values: Tensor  # (H, B)   critic value at states 0..H-1 (baseline)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@torch.no_grad()
def imagine(
    wm: WorldModel,
    actor: Actor,
    critic: Critic,
    start: LatentState,
    horizon: int,
    latent_mode: str = "sample",
    action_mode: str = "sample",
) -> ImaginedRollout:
    """Roll the prior forward under the actor from a posterior start state."""
    state = start.detach()
    ego_feats = [state.ego_feat()]
    vdi_feats = [state.vdi_feat()]
    actions, rewards, continues = [], [], []
    for _ in range(horizon):
        action, _, _ = actor.act(ego_feats[-1], vdi_feats[-1], state.vdi_mask, action_mode)
        reward_logits, continue_logit = wm.reward_continue(state)
        rewards.append(wm.expected_reward(reward_logits))
        continues.append(wm.continue_probability(continue_logit))
        actions.append(action)
        state = wm.img_step(state, action, latent_mode)
        ego_feats.append(state.ego_feat())
        vdi_feats.append(state.vdi_feat())
    ego_feat = torch.stack(ego_feats)
    vdi_feat = torch.stack(vdi_feats)
    h = horizon
    flat_values = critic.value(
        ego_feat.reshape((h + 1) * start.batch, -1),
        vdi_feat.reshape((h + 1) * start.batch, *vdi_feat.shape[-2:]),
        start.vdi_mask.repeat(h + 1, 1),
    ).view(h + 1, start.batch)
    return ImaginedRollout(
        ego_feat=ego_feat,
        vdi_feat=vdi_feat,
        vdi_mask=start.vdi_mask,
        actions=torch.stack(actions),
        rewards=torch.stack(rewards),
        continues=torch.stack(continues),
        values=flat_values[1:],
        state_values=flat_values[:-1],
    )


def lambda_returns(rewards: Tensor, continues: Tensor, values: Tensor,
                   lam: float = 0.95, gamma: float = 0.997) -> Tensor:
    """Backward lambda-return recursion.

    ``rewards``/``continues`` hold predictions at states 0..H-1 and
    ``values[t]`` is the critic value of state t+1, so the last entry is
    the bootstrap. Returns the H targets for states 0..H-1.
    """
    h = rewards.shape[0]
    if continues.shape[0] != h or values.shape[0] != h:
        raise ValidationError("lambda_returns needs equal-length H sequences")
    out = torch.empty_like(rewards)
    out[h - 1] = rewards[h - 1] + gamma * continues[h - 1] * values[h - 1]
    for t in range(h - 2, -1, -1):
        blended = (1.0 - lam) * values[t] + lam * out[t + 1]
        out[t] = rewards[t] + gamma * continues[t] * blended
    return out


def actor_loss(
    log_probs: Tensor,
    entropy: Tensor,
    returns: Tensor,
    scale: float,
    entropy_eta: float,
    baseline: Tensor | None = None,
) -> Tensor:
    """Reinforce with detached, scaled returns plus an entropy bonus.

    Time is summed, the batch averaged. ``baseline`` (critic values at the
    same states) is subtracted from the returns when provided.
    """
    target = returns.detach()
    if baseline is not None:
        target = target - baseline.detach()
    reinforce = (log_probs * target / max(1.0, scale)).sum(0).mean()
    loss = -reinforce - entropy_eta * entropy.sum(0).mean()
    if not torch.isfinite(loss):
        raise TrainingError("non-finite actor loss")
    return loss


def critic_loss(logits: Tensor, returns: Tensor, codec: TwohotCodec) -> Tensor:
    """Cross-entropy between the critic distribution and twohot return targets."""
    target = codec.encode(returns.detach())
    loss = -(target * F.log_softmax(logits, dim=-1)).sum(-1).sum(0).mean()
    if not torch.isfinite(loss):
        raise TrainingError("non-finite critic loss")
    return loss
