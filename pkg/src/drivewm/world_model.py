"""Branched recurrent world model with per-vehicle latent states.

Every vehicle in the scene owns its own latent branch: a deterministic
GRU state plus a categorical stochastic state. The ego, the direct
influencers (VDI) and the potential influencers (VPI) run through
separate encoder/GRU/prior/posterior parameter sets on top of one shared
trajectory encoder; slots within the VDI/VPI branches share weights.
Interaction between vehicles enters through self-attention over the
deterministic states, and ego-centric heads (reward, continuation) fuse
the ego and VDI states with cross-attention.

Representation learning is driven by decoding each vehicle's future
trajectory from its latent state ("predict" mode); the ablation variant
("reconstruct" mode) decodes the observed history of every branch
instead, VPI included.
"""

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import TrainingError, ValidationError
from .observation import EMPTY_ID, FEATURES, HIST_VECTORS
from .twohot import TwohotCodec


@dataclass
class WorldModelConfig:
    h_dim: int = 128
    z_categories: int = 16
    z_classes: int = 16
    embed_dim: int = 128
    units: int = 128
    mlp_layers: int = 2
    attn_dim: int = 64
    attn_heads: int = 4
    n_vdi: int = 5
    n_vpi: int = 5
    n_actions: int = 4
    horizon: int = 20                 # future steps decoded per vehicle
    decoder_mode: str = "predict"     # "predict" | "reconstruct"
    coord_scale: float = 1.0          # internal position normalization at the
                                      # model boundary; interfaces stay metric
    kl_scale: float = 0.5
    free_nats: float = 1.0            # 0 disables the clamp
    kl_balance: float | None = None   # None: plain KL(q||p); else mix of
                                      # prior-training / posterior-regularizing halves
    reward_buckets: int = 41
    reward_low: float = -20.0
    reward_high: float = 20.0
    reward_transform: str = "identity"  # "symlog" concentrates buckets near 0

    @property
    def z_dim(self) -> int:
        return self.z_categories * self.z_classes

    @property
    def state_dim(self) -> int:
        """Per-branch feature: deterministic + stochastic + interaction parts."""
        return self.h_dim + self.z_dim + self.attn_dim

    def validate(self) -> None:
        for name in ("h_dim", "z_categories", "z_classes", "embed_dim", "units",
                     "mlp_layers", "attn_dim", "attn_heads", "n_vdi", "n_vpi",
                     "n_actions", "horizon", "reward_buckets"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        if self.decoder_mode not in ("predict", "reconstruct"):
            raise ValidationError(f"unknown decoder_mode '{self.decoder_mode}'")
        if self.reward_transform not in ("identity", "symlog"):
            raise ValidationError(f"unknown reward_transform '{self.reward_transform}'")
        if self.attn_dim % self.attn_heads:
            raise ValidationError("attn_dim must be divisible by attn_heads")
        if self.kl_scale < 0 or self.free_nats < 0:
            raise ValidationError("kl_scale and free_nats must be non-negative")


def mlp(in_dim: int, units: int, out_dim: int, layers: int) -> nn.Sequential:
    seq: list[nn.Module] = []
    dim = in_dim
    for _ in range(layers):
        seq += [nn.Linear(dim, units), nn.LayerNorm(units), nn.SiLU()]
        dim = units
    seq.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*seq)


def sample_latent(logits: Tensor, mode: str = "sample") -> Tensor:
    """Draw a one-hot sample per category with straight-through gradients.

    ``mode="mean"`` returns the class probabilities instead (differentiable
    everywhere, used for gradient checking), ``mode="mode"`` the argmax
    one-hot (deterministic evaluation).
    """
    probs = torch.softmax(logits, dim=-1)
    if mode == "mean":
        return probs
    if mode == "mode":
        index = probs.argmax(dim=-1, keepdim=True)
    elif mode == "sample":
        flat = probs.reshape(-1, probs.shape[-1])
        index = torch.multinomial(flat, 1).reshape(*probs.shape[:-1], 1)
    else:
        raise ValidationError(f"unknown sample mode '{mode}'")
    hard = torch.zeros_like(probs).scatter_(-1, index, 1.0)
    # (probs - detach) is exactly zero in the forward pass, keeping the
    # sample a literal one-hot while the gradient flows through probs.
    return hard + (probs - probs.detach())


def categorical_kl(post_logits: Tensor, prior_logits: Tensor) -> Tensor:
    """KL(post || prior) summed over categories; shape (..., C, K) -> (...)."""
    post_log = F.log_softmax(post_logits, dim=-1)
    prior_log = F.log_softmax(prior_logits, dim=-1)
    kl = (post_log.exp() * (post_log - prior_log)).sum(dim=-1)
    return kl.sum(dim=-1)


class MaskedAttention(nn.Module):
    """Scaled dot-product multi-head attention with a boolean key mask."""

    def __init__(self, q_dim: int, kv_dim: int, out_dim: int, heads: int):
        super().__init__()
        assert out_dim % heads == 0
        self.heads = heads
        self.head_dim = out_dim // heads
        self.proj_q = nn.Linear(q_dim, out_dim)
        self.proj_k = nn.Linear(kv_dim, out_dim)
        self.proj_v = nn.Linear(kv_dim, out_dim)
        self.proj_out = nn.Linear(out_dim, out_dim)

    def forward(self, query: Tensor, keys: Tensor, key_mask: Tensor) -> Tensor:
        """query (B, Tq, Dq), keys (B, Tk, Dk), key_mask (B, Tk) -> (B, Tq, out)."""
        b, tq, _ = query.shape
        tk = keys.shape[1]

        def split(x, t):
            return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.proj_q(query), tq)
        k = split(self.proj_k(keys), tk)
        v = split(self.proj_v(keys), tk)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        mixed = torch.softmax(scores, dim=-1) @ v
        mixed = mixed.transpose(1, 2).reshape(b, tq, self.heads * self.head_dim)
        return self.proj_out(mixed)


class BranchCore(nn.Module):
    """Recurrent core of one branch: (h, z, a) -> next deterministic state."""

    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.pre = nn.Sequential(
            nn.Linear(cfg.z_dim + cfg.n_actions, cfg.units), nn.LayerNorm(cfg.units), nn.SiLU()
        )
        self.cell = nn.GRUCell(cfg.units, cfg.h_dim)

    def forward(self, h: Tensor, z_flat: Tensor, action_onehot: Tensor) -> Tensor:
        return self.cell(self.pre(torch.cat([z_flat, action_onehot], dim=-1)), h)


@dataclass
class LatentState:
    """Per-vehicle latents for one timestep of a batch.

    Slot tensors are zero wherever the matching mask is False; slot ids
    track vehicle identity so latents can follow vehicles between steps.
    """

    ego_h: Tensor          # (B, h)
    ego_z: Tensor          # (B, C, K)
    ego_att: Tensor        # (B, A)
    vdi_h: Tensor          # (B, Nd, h)
    vdi_z: Tensor          # (B, Nd, C, K)
    vdi_att: Tensor        # (B, Nd, A)
    vdi_mask: Tensor       # (B, Nd) bool
    vdi_ids: Tensor        # (B, Nd) long
    vpi_h: Tensor          # (B, Np, h)
    vpi_z: Tensor          # (B, Np, C, K)
    vpi_att: Tensor        # (B, Np, A)
    vpi_mask: Tensor       # (B, Np) bool
    vpi_ids: Tensor        # (B, Np) long

    @property
    def batch(self) -> int:
        return self.ego_h.shape[0]

    def ego_feat(self) -> Tensor:
        return torch.cat([self.ego_h, self.ego_z.flatten(-2), self.ego_att], dim=-1)

    def vdi_feat(self) -> Tensor:
        return torch.cat([self.vdi_h, self.vdi_z.flatten(-2), self.vdi_att], dim=-1)

    def vpi_feat(self) -> Tensor:
        return torch.cat([self.vpi_h, self.vpi_z.flatten(-2), self.vpi_att], dim=-1)

    def detach(self) -> "LatentState":
        kw = {name: getattr(self, name).detach() for name in self.__dataclass_fields__}
        return LatentState(**kw)

    def index_select(self, rows: Tensor) -> "LatentState":
        kw = {name: getattr(self, name)[rows] for name in self.__dataclass_fields__}
        return LatentState(**kw)

    def masked_where(self, keep: Tensor) -> "LatentState":
        """Zero every row where ``keep`` (B,) is False; reset ids and masks."""
        keep_f = keep.to(self.ego_h.dtype)
        kw = {}
        for name in self.__dataclass_fields__:
            t = getattr(self, name)
            shape = (-1,) + (1,) * (t.dim() - 1)
            if t.dtype == torch.bool:
                kw[name] = t & keep.view(shape)
            elif t.dtype == torch.long:
                kw[name] = torch.where(keep.view(shape), t, torch.full_like(t, EMPTY_ID))
            else:
                kw[name] = t * keep_f.view(shape)
        return LatentState(**kw)


def cat_states(states: list[LatentState]) -> LatentState:
    """Concatenate along the batch dimension."""
    kw = {
        name: torch.cat([getattr(s, name) for s in states], dim=0)
        for name in LatentState.__dataclass_fields__
    }
    return LatentState(**kw)


class WorldModel(nn.Module):
    def __init__(self, config: WorldModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cfg = config
        obs_dim = HIST_VECTORS * FEATURES

        self.traj_encoder = mlp(obs_dim, cfg.units, cfg.units, cfg.mlp_layers)
        self.enc_ego = mlp(cfg.units, cfg.units, cfg.embed_dim, 1)
        self.enc_vdi = mlp(cfg.units, cfg.units, cfg.embed_dim, 1)
        self.enc_vpi = mlp(cfg.units, cfg.units, cfg.embed_dim, 1)

        self.core_ego = BranchCore(cfg)
        self.core_vdi = BranchCore(cfg)
        self.core_vpi = BranchCore(cfg)
        self.self_attn = MaskedAttention(cfg.h_dim, cfg.h_dim, cfg.attn_dim, cfg.attn_heads)

        stoch_in = cfg.h_dim + cfg.attn_dim
        self.prior_ego = mlp(stoch_in, cfg.units, cfg.z_dim, cfg.mlp_layers)
        self.prior_vdi = mlp(stoch_in, cfg.units, cfg.z_dim, cfg.mlp_layers)
        self.prior_vpi = mlp(stoch_in, cfg.units, cfg.z_dim, cfg.mlp_layers)
        self.post_ego = mlp(stoch_in + cfg.embed_dim, cfg.units, cfg.z_dim, cfg.mlp_layers)
        self.post_vdi = mlp(stoch_in + cfg.embed_dim, cfg.units, cfg.z_dim, cfg.mlp_layers)
        self.post_vpi = mlp(stoch_in + cfg.embed_dim, cfg.units, cfg.z_dim, cfg.mlp_layers)

        if cfg.decoder_mode == "predict":
            self.dec_ego = mlp(cfg.state_dim, cfg.units, cfg.horizon * 2, cfg.mlp_layers)
            self.dec_vdi = mlp(cfg.state_dim, cfg.units, cfg.horizon * 2, cfg.mlp_layers)
        else:
            self.dec_ego = mlp(cfg.state_dim, cfg.units, obs_dim, cfg.mlp_layers)
            self.dec_vdi = mlp(cfg.state_dim, cfg.units, obs_dim, cfg.mlp_layers)
            self.dec_vpi = mlp(cfg.state_dim, cfg.units, obs_dim, cfg.mlp_layers)

        self.cross_attn = MaskedAttention(cfg.state_dim, cfg.state_dim, cfg.attn_dim, cfg.attn_heads)
        self.reward_head = mlp(cfg.state_dim + cfg.attn_dim, cfg.units, cfg.reward_buckets, cfg.mlp_layers)
        self.continue_head = mlp(cfg.state_dim + cfg.attn_dim, cfg.units, 1, cfg.mlp_layers)

        self.reward_codec = TwohotCodec(
            cfg.reward_low, cfg.reward_high, cfg.reward_buckets, cfg.reward_transform
        )
        # observation features are (x_prev, y_prev, x_cur, y_cur, yaw)
        feature_scale = torch.tensor([cfg.coord_scale] * 4 + [1.0])
        self.register_buffer("feature_scale", feature_scale, persistent=False)

    # -- basics ----------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.traj_encoder[0].weight.dtype

    @property
    def device(self) -> torch.device:
        return self.traj_encoder[0].weight.device

    def initial_state(self, batch: int) -> LatentState:
        cfg = self.config
        dev, dt = self.device, self.dtype

        def zeros(*shape):
            return torch.zeros(batch, *shape, device=dev, dtype=dt)

        return LatentState(
            ego_h=zeros(cfg.h_dim),
            ego_z=zeros(cfg.z_categories, cfg.z_classes),
            ego_att=zeros(cfg.attn_dim),
            vdi_h=zeros(cfg.n_vdi, cfg.h_dim),
            vdi_z=zeros(cfg.n_vdi, cfg.z_categories, cfg.z_classes),
            vdi_att=zeros(cfg.n_vdi, cfg.attn_dim),
            vdi_mask=torch.zeros(batch, cfg.n_vdi, dtype=torch.bool, device=dev),
            vdi_ids=torch.full((batch, cfg.n_vdi), EMPTY_ID, dtype=torch.long, device=dev),
            vpi_h=zeros(cfg.n_vpi, cfg.h_dim),
            vpi_z=zeros(cfg.n_vpi, cfg.z_categories, cfg.z_classes),
            vpi_att=zeros(cfg.n_vpi, cfg.attn_dim),
            vpi_mask=torch.zeros(batch, cfg.n_vpi, dtype=torch.bool, device=dev),
            vpi_ids=torch.full((batch, cfg.n_vpi), EMPTY_ID, dtype=torch.long, device=dev),
        )

    # -- observation side --------------------------------------------------

    def encode(self, obs: dict) -> tuple[Tensor, Tensor, Tensor]:
        """Branch embeddings from a dict of observation tensors.

        Expects ``ego`` (B, 19, 5), ``vdi``/``vpi`` (B, N, 19, 5) with their
        boolean masks. Masked slots embed to zero.
        """
        cfg = self.config
        ego, vdi, vpi = obs["ego"], obs["vdi"], obs["vpi"]
        if ego.shape[-2:] != (HIST_VECTORS, FEATURES):
            raise ValidationError(f"ego history has shape {tuple(ego.shape)}")
        if vdi.shape[-3] != cfg.n_vdi or vpi.shape[-3] != cfg.n_vpi:
            raise ValidationError("slot counts do not match the model config")
        b = ego.shape[0]
        dt = self.dtype
        scale = self.feature_scale.to(dt)
        ego = ego.to(dt) * scale
        vdi = vdi.to(dt) * scale
        vpi = vpi.to(dt) * scale
        e_ego = self.enc_ego(self.traj_encoder(ego.reshape(b, -1)))
        shared_vdi = self.traj_encoder(vdi.reshape(b * cfg.n_vdi, -1))
        e_vdi = self.enc_vdi(shared_vdi).view(b, cfg.n_vdi, -1)
        shared_vpi = self.traj_encoder(vpi.reshape(b * cfg.n_vpi, -1))
        e_vpi = self.enc_vpi(shared_vpi).view(b, cfg.n_vpi, -1)
        e_vdi = e_vdi * obs["vdi_mask"].to(dt).unsqueeze(-1)
        e_vpi = e_vpi * obs["vpi_mask"].to(dt).unsqueeze(-1)
        return e_ego, e_vdi, e_vpi

    def align_membership(self, prev: LatentState, vdi_ids: Tensor, vdi_mask: Tensor,
                         vpi_ids: Tensor, vpi_mask: Tensor) -> LatentState:
        """Re-seat slot latents for the current membership.

        A vehicle keeps its (h, z) wherever it reappears, including across a
        VDI/VPI category switch; vehicles seen for the first time start from
        zeros. Interaction features are recomputed each step, so they reset.
        """
        for row in torch.cat([vdi_ids, vpi_ids], dim=1):
            live = row[row != EMPTY_ID]
            if live.numel() != torch.unique(live).numel():
                raise ValidationError("duplicate vehicle ids in slot assignment")

        old_ids = torch.cat([prev.vdi_ids, prev.vpi_ids], dim=1)          # (B, No)
        old_valid = torch.cat([prev.vdi_mask, prev.vpi_mask], dim=1)
        old_h = torch.cat([prev.vdi_h, prev.vpi_h], dim=1)
        old_z = torch.cat([prev.vdi_z, prev.vpi_z], dim=1)

        def gather(new_ids, new_mask):
            match = (new_ids[:, :, None] == old_ids[:, None, :]) & old_valid[:, None, :]
            match &= (new_ids != EMPTY_ID)[:, :, None]
            found = match.any(dim=-1)
            index = match.to(torch.uint8).argmax(dim=-1)                  # (B, Nn)
            keep = (found & new_mask).to(old_h.dtype)
            h = torch.gather(old_h, 1, index[..., None].expand(-1, -1, old_h.shape[-1]))
            z = torch.gather(
                old_z, 1, index[..., None, None].expand(-1, -1, *old_z.shape[-2:])
            )
            return h * keep[..., None], z * keep[..., None, None]

        vdi_h, vdi_z = gather(vdi_ids, vdi_mask)
        vpi_h, vpi_z = gather(vpi_ids, vpi_mask)
        return replace(
            prev,
            vdi_h=vdi_h, vdi_z=vdi_z, vdi_att=torch.zeros_like(prev.vdi_att),
            vdi_mask=vdi_mask, vdi_ids=vdi_ids,
            vpi_h=vpi_h, vpi_z=vpi_z, vpi_att=torch.zeros_like(prev.vpi_att),
            vpi_mask=vpi_mask, vpi_ids=vpi_ids,
        )

    # -- recurrence --------------------------------------------------------

    def _core(self, prev: LatentState, action_onehot: Tensor):
        """Branch GRU steps plus self-attention; returns h/att per branch and priors."""
        cfg = self.config
        b = prev.batch

        ego_h = self.core_ego(prev.ego_h, prev.ego_z.flatten(-2), action_onehot)
        a_vdi = action_onehot[:, None, :].expand(-1, cfg.n_vdi, -1).reshape(b * cfg.n_vdi, -1)
        vdi_h = self.core_vdi(
            prev.vdi_h.reshape(b * cfg.n_vdi, -1), prev.vdi_z.flatten(-2).reshape(b * cfg.n_vdi, -1), a_vdi
        ).view(b, cfg.n_vdi, -1)
        a_vpi = action_onehot[:, None, :].expand(-1, cfg.n_vpi, -1).reshape(b * cfg.n_vpi, -1)
        vpi_h = self.core_vpi(
            prev.vpi_h.reshape(b * cfg.n_vpi, -1), prev.vpi_z.flatten(-2).reshape(b * cfg.n_vpi, -1), a_vpi
        ).view(b, cfg.n_vpi, -1)

        vdi_mask, vpi_mask = prev.vdi_mask, prev.vpi_mask
        mdt = vdi_h.dtype
        vdi_h = vdi_h * vdi_mask.to(mdt)[..., None]
        vpi_h = vpi_h * vpi_mask.to(mdt)[..., None]

        tokens = torch.cat([ego_h[:, None, :], vdi_h, vpi_h], dim=1)
        key_mask = torch.cat(
            [torch.ones(b, 1, dtype=torch.bool, device=ego_h.device), vdi_mask, vpi_mask], dim=1
        )
        att = self.self_attn(tokens, tokens, key_mask)
        ego_att = att[:, 0]
        vdi_att = att[:, 1 : 1 + cfg.n_vdi] * vdi_mask.to(mdt)[..., None]
        vpi_att = att[:, 1 + cfg.n_vdi :] * vpi_mask.to(mdt)[..., None]

        prior = {
            "ego": self.prior_ego(torch.cat([ego_h, ego_att], dim=-1)).view(b, cfg.z_categories, cfg.z_classes),
            "vdi": self.prior_vdi(torch.cat([vdi_h, vdi_att], dim=-1)).view(b, cfg.n_vdi, cfg.z_categories, cfg.z_classes),
            "vpi": self.prior_vpi(torch.cat([vpi_h, vpi_att], dim=-1)).view(b, cfg.n_vpi, cfg.z_categories, cfg.z_classes),
        }
        return ego_h, vdi_h, vpi_h, ego_att, vdi_att, vpi_att, prior

    def _action_onehot(self, action: Tensor, is_first: Tensor | None = None) -> Tensor:
        onehot = F.one_hot(action.long(), self.config.n_actions).to(self.dtype)
        if is_first is not None:
            onehot = onehot * (~is_first).to(self.dtype)[..., None]
        return onehot

    def obs_step(
        self,
        prev: LatentState,
        prev_action: Tensor,
        obs: dict,
        is_first: Tensor | None = None,
        mode: str = "sample",
    ) -> tuple[LatentState, dict]:
        """Posterior update: recur, attend, and filter with the new embeddings."""
        cfg = self.config
        if obs["vdi_ids"].shape[-1] != cfg.n_vdi or obs["vpi_ids"].shape[-1] != cfg.n_vpi:
            raise ValidationError(
                f"observation has {obs['vdi_ids'].shape[-1]}/{obs['vpi_ids'].shape[-1]} "
                f"slots, model expects {cfg.n_vdi}/{cfg.n_vpi}"
            )
        if is_first is not None and is_first.any():
            prev = prev.masked_where(~is_first)
        vdi_mask = obs["vdi_mask"].bool()
        vpi_mask = obs["vpi_mask"].bool()
        prev = self.align_membership(prev, obs["vdi_ids"].long(), vdi_mask, obs["vpi_ids"].long(), vpi_mask)

        onehot = self._action_onehot(prev_action, is_first)
        ego_h, vdi_h, vpi_h, ego_att, vdi_att, vpi_att, prior = self._core(prev, onehot)
        e_ego, e_vdi, e_vpi = self.encode(obs)

        b = prev.batch
        post = {
            "ego": self.post_ego(torch.cat([ego_h, ego_att, e_ego], dim=-1)).view(b, cfg.z_categories, cfg.z_classes),
            "vdi": self.post_vdi(torch.cat([vdi_h, vdi_att, e_vdi], dim=-1)).view(b, cfg.n_vdi, cfg.z_categories, cfg.z_classes),
            "vpi": self.post_vpi(torch.cat([vpi_h, vpi_att, e_vpi], dim=-1)).view(b, cfg.n_vpi, cfg.z_categories, cfg.z_classes),
        }
        mdt = ego_h.dtype
        state = LatentState(
            ego_h=ego_h,
            ego_z=sample_latent(post["ego"], mode),
            ego_att=ego_att,
            vdi_h=vdi_h,
            vdi_z=sample_latent(post["vdi"], mode) * vdi_mask.to(mdt)[..., None, None],
            vdi_att=vdi_att,
            vdi_mask=vdi_mask,
            vdi_ids=obs["vdi_ids"].long(),
            vpi_h=vpi_h,
            vpi_z=sample_latent(post["vpi"], mode) * vpi_mask.to(mdt)[..., None, None],
            vpi_att=vpi_att,
            vpi_mask=vpi_mask,
            vpi_ids=obs["vpi_ids"].long(),
        )
        return state, {"prior": prior, "post": post}

    def img_step(self, state: LatentState, action: Tensor, mode: str = "sample") -> LatentState:
        """Prior transition used in imagination; membership stays frozen."""
        onehot = self._action_onehot(action)
        ego_h, vdi_h, vpi_h, ego_att, vdi_att, vpi_att, prior = self._core(state, onehot)
        mdt = ego_h.dtype
        return replace(
            state,
            ego_h=ego_h,
            ego_z=sample_latent(prior["ego"], mode),
            ego_att=ego_att,
            vdi_h=vdi_h,
            vdi_z=sample_latent(prior["vdi"], mode) * state.vdi_mask.to(mdt)[..., None, None],
            vdi_att=vdi_att,
            vpi_h=vpi_h,
            vpi_z=sample_latent(prior["vpi"], mode) * state.vpi_mask.to(mdt)[..., None, None],
            vpi_att=vpi_att,
        )

    # -- heads ---------------------------------------------------------------

    def decode(self, state: LatentState) -> dict:
        """Trajectory predictions (predict mode) or history reconstructions.

        Outputs are in world units (meters); the decoders operate in the
        model's normalized coordinate space internally.
        """
        cfg = self.config
        b = state.batch
        if cfg.decoder_mode == "predict":
            return {
                "ego": self.dec_ego(state.ego_feat()).view(b, cfg.horizon, 2) / cfg.coord_scale,
                "vdi": self.dec_vdi(state.vdi_feat()).view(b, cfg.n_vdi, cfg.horizon, 2) / cfg.coord_scale,
            }
        unscale = 1.0 / self.feature_scale.to(self.dtype)
        return {
            "ego": self.dec_ego(state.ego_feat()).view(b, HIST_VECTORS, FEATURES) * unscale,
            "vdi": self.dec_vdi(state.vdi_feat()).view(b, cfg.n_vdi, HIST_VECTORS, FEATURES) * unscale,
            "vpi": self.dec_vpi(state.vpi_feat()).view(b, cfg.n_vpi, HIST_VECTORS, FEATURES) * unscale,
        }

    def fuse_ego_vdi(self, state: LatentState) -> Tensor:
        """Ego-query cross-attention over the ego and unmasked VDI states."""
        ego = state.ego_feat()
        b = ego.shape[0]
        keys = torch.cat([ego[:, None, :], state.vdi_feat()], dim=1)
        key_mask = torch.cat(
            [torch.ones(b, 1, dtype=torch.bool, device=ego.device), state.vdi_mask], dim=1
        )
        return self.cross_attn(ego[:, None, :], keys, key_mask)[:, 0]

    def reward_continue(self, state: LatentState) -> tuple[Tensor, Tensor]:
        """Bucket logits for the reward and a continuation logit."""
        fused = torch.cat([state.ego_feat(), self.fuse_ego_vdi(state)], dim=-1)
        return self.reward_head(fused), self.continue_head(fused)[..., 0]

    def expected_reward(self, reward_logits: Tensor) -> Tensor:
        return self.reward_codec.expected_value(reward_logits)

    def continue_probability(self, continue_logit: Tensor) -> Tensor:
        return torch.sigmoid(continue_logit)

    # -- training --------------------------------------------------------------

    def observe_sequence(self, batch: dict, mode: str = "sample"):
        """Posterior rollout over a time-major batch.

        Returns the per-step states and stacked raw outputs (logits and
        decodes) that the loss and the imagination starts are built from.
        """
        t_len, b = batch["action"].shape
        state = self.initial_state(b)
        zero_action = torch.zeros(b, dtype=torch.long, device=self.device)
        states: list[LatentState] = []
        stats: dict[str, list] = {k: [] for k in (
            "prior_ego", "prior_vdi", "prior_vpi", "post_ego", "post_vdi", "post_vpi",
            "dec_ego", "dec_vdi", "dec_vpi", "reward_logits", "continue_logit",
        )}
        for t in range(t_len):
            obs_t = {
                "ego": batch["ego"][t], "vdi": batch["vdi"][t], "vpi": batch["vpi"][t],
                "vdi_mask": batch["vdi_mask"][t], "vpi_mask": batch["vpi_mask"][t],
                "vdi_ids": batch["vdi_ids"][t], "vpi_ids": batch["vpi_ids"][t],
            }
            prev_action = batch["action"][t - 1] if t > 0 else zero_action
            state, step_stats = self.obs_step(state, prev_action, obs_t, batch["is_first"][t], mode)
            decoded = self.decode(state)
            reward_logits, continue_logit = self.reward_continue(state)
            states.append(state)
            for branch in ("ego", "vdi", "vpi"):
                stats[f"prior_{branch}"].append(step_stats["prior"][branch])
                stats[f"post_{branch}"].append(step_stats["post"][branch])
                if branch in decoded:
                    stats[f"dec_{branch}"].append(decoded[branch])
            stats["reward_logits"].append(reward_logits)
            stats["continue_logit"].append(continue_logit)
        stacked = {k: torch.stack(v) for k, v in stats.items() if v}
        return states, stacked

    def loss(self, batch: dict, stats: dict) -> tuple[Tensor, dict]:
        """Sequence loss: prediction + reward + continuation + per-branch KL.

        Each component is summed over time (and slots/coordinates where
        applicable) and averaged over the batch; raises on non-finite
        components, naming the offender.
        """
        cfg = self.config
        dt = self.dtype

        cs = cfg.coord_scale
        if cfg.decoder_mode == "predict":
            # squared error in the model's normalized coordinate space
            ego_mask = batch["y_ego_mask"].to(dt)
            err_ego = ((stats["dec_ego"] - batch["y_ego"].to(dt)) * cs).pow(2).sum(-1) * ego_mask
            pred_ego = err_ego.sum(dim=(0, 2)).mean()
            vdi_mask = batch["y_vdi_mask"].to(dt)
            err_vdi = ((stats["dec_vdi"] - batch["y_vdi"].to(dt)) * cs).pow(2).sum(-1) * vdi_mask
            pred_vdi = err_vdi.sum(dim=(0, 2, 3)).mean()
            pred_vpi = torch.zeros((), dtype=dt, device=self.device)
        else:
            scale = self.feature_scale.to(dt)
            err_ego = ((stats["dec_ego"] - batch["ego"].to(dt)) * scale).pow(2).sum(dim=(-1, -2))
            pred_ego = err_ego.sum(0).mean()
            m_vdi = batch["vdi_mask"].to(dt)
            err_vdi = ((stats["dec_vdi"] - batch["vdi"].to(dt)) * scale).pow(2).sum(dim=(-1, -2)) * m_vdi
            pred_vdi = err_vdi.sum(dim=(0, 2)).mean()
            m_vpi = batch["vpi_mask"].to(dt)
            err_vpi = ((stats["dec_vpi"] - batch["vpi"].to(dt)) * scale).pow(2).sum(dim=(-1, -2)) * m_vpi
            pred_vpi = err_vpi.sum(dim=(0, 2)).mean()

        reward_target = self.reward_codec.encode(batch["reward"].to(dt))
        reward_ce = -(reward_target * F.log_softmax(stats["reward_logits"], dim=-1)).sum(-1)
        reward_loss = reward_ce.sum(0).mean()

        cont_target = batch["cont"].to(dt)
        cont_ce = F.binary_cross_entropy_with_logits(
            stats["continue_logit"], cont_target, reduction="none"
        )
        continue_loss = cont_ce.sum(0).mean()

        free = cfg.free_nats

        def branch_kl(post, prior, mask=None):
            if cfg.kl_balance is None:
                kl = categorical_kl(post, prior)
                if free > 0:
                    kl = kl.clamp(min=free)
            else:
                # Both halves share the forward value; the split only routes
                # gradients (mostly into the prior), as in KL balancing.
                alpha = cfg.kl_balance
                dyn = categorical_kl(post.detach(), prior)
                rep = categorical_kl(post, prior.detach())
                if free > 0:
                    dyn = dyn.clamp(min=free)
                    rep = rep.clamp(min=free)
                kl = alpha * dyn + (1.0 - alpha) * rep
            if mask is not None:
                kl = kl * mask.to(dt)
                return kl.sum(dim=(0, 2)).mean()
            return kl.sum(0).mean()

        kl_ego = branch_kl(stats["post_ego"], stats["prior_ego"])
        kl_vdi = branch_kl(stats["post_vdi"], stats["prior_vdi"], batch["vdi_mask"])
        kl_vpi = branch_kl(stats["post_vpi"], stats["prior_vpi"], batch["vpi_mask"])

        components = {
            "pred_ego": pred_ego,
            "pred_vdi": pred_vdi,
            "pred_vpi": pred_vpi,
            "reward": reward_loss,
            "continue": continue_loss,
            "kl_ego": kl_ego,
            "kl_vdi": kl_vdi,
            "kl_vpi": kl_vpi,
        }
        for name, value in components.items():
            if not torch.isfinite(value):
                raise TrainingError(f"non-finite world-model loss component '{name}'")
        total = (
            pred_ego + pred_vdi + pred_vpi + reward_loss + continue_loss
            + cfg.kl_scale * (kl_ego + kl_vdi + kl_vpi)
        )
        # components are diagnostics; only the total carries the graph
        return total, {name: value.detach() for name, value in components.items()}
