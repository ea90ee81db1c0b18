"""Versioned checkpoint archive: configs plus named parameter tensors."""

import dataclasses
from pathlib import Path

import torch

from .behavior import Actor, BehaviorConfig, Critic
from .errors import CheckpointVersionError
from .world_model import WorldModel, WorldModelConfig

FORMAT_VERSION = 1


def _config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _config_from_dict(cls, doc: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise CheckpointVersionError(f"{cls.__name__} has no fields {sorted(unknown)}")
    return cls(**doc)


def save_checkpoint(
    path,
    wm: WorldModel,
    actor: Actor,
    critic: Critic,
    step: int = 0,
    return_scale: float | None = None,
    extra: dict | None = None,
) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "world_model_config": _config_to_dict(wm.config),
        "behavior_config": _config_to_dict(actor.behavior_config),
        "world_model": wm.state_dict(),
        "actor": actor.state_dict(),
        "critic": critic.state_dict(),
        "step": int(step),
        "return_scale": return_scale,
    }
    if extra:
        doc["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(doc, path)


def load_checkpoint(path) -> dict:
    """Load the archive and rebuild the three models; raises on version skew."""
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointVersionError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format {doc.get('format_version')!r}, "
            f"this code reads {FORMAT_VERSION}"
        )
    wm_config = _config_from_dict(WorldModelConfig, doc["world_model_config"])
    b_doc = dict(doc["behavior_config"])
    behavior_config = _config_from_dict(BehaviorConfig, b_doc)
    wm = WorldModel(wm_config)
    actor = Actor(wm_config.state_dim, wm_config.n_actions, behavior_config)
    critic = Critic(wm_config.state_dim, behavior_config)
    try:
        wm.load_state_dict(doc["world_model"])
        actor.load_state_dict(doc["actor"])
        critic.load_state_dict(doc["critic"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointVersionError(f"checkpoint/config mismatch: {exc}") from exc
    wm.eval()
    actor.eval()
    critic.eval()
    return {
        "world_model": wm,
        "actor": actor,
        "critic": critic,
        "world_model_config": wm_config,
        "behavior_config": behavior_config,
        "step": doc.get("step", 0),
        "return_scale": doc.get("return_scale"),
        "extra": doc.get("extra", {}),
    }
