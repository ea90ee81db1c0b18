"""Training loop: interleaved environment interaction, world-model updates,
and imagination-based behavior updates, with periodic greedy evaluation.

The schedule runs a fixed number of environment interactions. The first
``warmup`` of them use a uniform random policy; afterwards every
``d_train``-th iteration first samples a sequence batch, updates the
world model, and updates the actor and critic on imagined rollouts
started from the fresh posterior states. Episodes finalize into the
replay store whenever the simulator reports done.
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .behavior import (
    Actor,
    BehaviorConfig,
    Critic,
    ImaginedRollout,
    ReturnNormalizer,
    actor_loss,
    critic_loss,
    imagine,
    lambda_returns,
)
from .checkpoint import save_checkpoint
from .control import ControlConfig
from .env import DrivingEnv, N_ACTIONS, FrameSnapshot
from .errors import TrainingError, ValidationError
from .metrics import EpisodeOutcome, MetricsReport, ade, density_level
from .observation import (
    Observation,
    build_observation,
    constant_velocity_prediction,
    extract_future_targets,
    select_neighbors,
)
from .replay import EpisodeBuffer, ReplayStore
from .tracks import Scenario
from .world_model import LatentState, WorldModel, WorldModelConfig, cat_states


@dataclass
class TrainConfig:
    steps: int = 30_000               # total environment interactions (ITER)
    d_train: int = 5                  # training frequency
    warmup: int = 1_000               # random-policy interactions
    batch_size: int = 16
    seq_len: int = 32
    wm_lr: float = 3e-4
    ac_lr: float = 1e-4
    grad_clip: float = 100.0
    replay_capacity: int = 100_000
    eval_every: int = 5_000           # 0 disables periodic evaluation
    eval_episodes: int = 5            # repeats per scenario at evaluation
    seed: int = 0
    scenario_order: str = "random"    # "random" | "fixed"
    start_offset_ms: int = 0
    log_every: int = 250
    imag_starts: int | None = None    # subsample imagination starts (None = all)
    stop_at_success: float | None = None
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    control: ControlConfig = field(default_factory=ControlConfig)

    def validate(self) -> None:
        if self.d_train < 1:
            raise ValidationError("d_train must be >= 1")
        if self.warmup < self.seq_len:
            raise ValidationError("warmup must cover at least one training sequence")
        if self.scenario_order not in ("random", "fixed"):
            raise ValidationError(f"unknown scenario order '{self.scenario_order}'")
        self.model.validate()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def train_config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    nested = {
        "model": WorldModelConfig,
        "behavior": BehaviorConfig,
        "control": ControlConfig,
    }
    kwargs = {}
    for key, value in doc.items():
        if key in nested:
            sub = nested[key]
            known = {f.name for f in dataclasses.fields(sub)}
            bad = set(value) - known
            if bad:
                raise ValidationError(f"unknown {key} config keys: {sorted(bad)}")
            kwargs[key] = sub(**value)
        else:
            known = {f.name for f in dataclasses.fields(TrainConfig)}
            if key not in known:
                raise ValidationError(f"unknown config key '{key}'")
            kwargs[key] = value
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    doc = json.loads(Path(path).read_text())
    return train_config_from_dict(doc)


def observation_to_tensors(obs: Observation, device, dtype) -> dict:
    """Batch-of-one tensors for a single observation."""
    def t(a, dt=None):
        return torch.as_tensor(a, device=device).to(dt) if dt else torch.as_tensor(a, device=device)

    return {
        "ego": t(obs.ego_hist, dtype)[None],
        "vdi": t(obs.vdi_hist, dtype)[None],
        "vdi_mask": t(obs.vdi_mask)[None],
        "vdi_ids": t(obs.vdi_ids)[None],
        "vpi": t(obs.vpi_hist, dtype)[None],
        "vpi_mask": t(obs.vpi_mask)[None],
        "vpi_ids": t(obs.vpi_ids)[None],
    }


def batch_to_tensors(batch: dict, device, dtype) -> dict:
    out = {}
    for key, value in batch.items():
        tensor = torch.as_tensor(value, device=device)
        if tensor.is_floating_point():
            tensor = tensor.to(dtype)
        out[key] = tensor
    return out


class PolicyDriver:
    """Keeps the running latent state of the agent across one episode."""

    def __init__(self, wm: WorldModel, actor: Actor, latent_mode: str = "sample"):
        self.wm = wm
        self.actor = actor
        self.latent_mode = latent_mode
        self.begin_episode()

    def begin_episode(self) -> None:
        self.state: LatentState | None = None
        self._prev_action = 0
        self._first = True

    @torch.no_grad()
    def observe(self, obs: Observation) -> LatentState:
        wm = self.wm
        if self.state is None:
            self.state = wm.initial_state(1)
        tensors = observation_to_tensors(obs, wm.device, wm.dtype)
        prev = torch.tensor([self._prev_action], dtype=torch.long, device=wm.device)
        is_first = torch.tensor([self._first], device=wm.device)
        self.state, _ = wm.obs_step(self.state, prev, tensors, is_first, self.latent_mode)
        self._first = False
        return self.state

    @torch.no_grad()
    def act(self, mode: str = "sample") -> int:
        if self.state is None or self._first:
            raise ValidationError("act() before observe()")
        action, _, _ = self.actor.act(
            self.state.ego_feat(), self.state.vdi_feat(), self.state.vdi_mask, mode
        )
        value = int(action.item())
        self._prev_action = value
        return value

    def note_action(self, action: int) -> None:
        """Record an externally chosen action (e.g. random warmup) as the previous one."""
        self._prev_action = int(action)


def observe_frame(env: DrivingEnv, frame: FrameSnapshot, n_vdi: int = 5, n_vpi: int = 5) -> Observation:
    """Build the slotted observation for the frame the env just reported."""
    assignment = select_neighbors(frame.ego, frame.vehicles, n_vdi, n_vpi)
    return build_observation(env.history, assignment, frame.ego)


@dataclass
class TrainResult:
    out_dir: str
    steps: int = 0
    updates: int = 0
    episodes: int = 0
    checkpoint_path: str = ""
    eval_history: list = field(default_factory=list)  # (step, MetricsReport)
    final_report: MetricsReport | None = None
    wall_time_s: float = 0.0

    def best_success_rate(self) -> float:
        rates = [report.success_rate for _, report in self.eval_history]
        return max(rates) if rates else 0.0


class Trainer:
    def __init__(self, config: TrainConfig, scenarios: list[Scenario], out_dir):
        config.validate()
        if not scenarios:
            raise ValidationError("no scenarios supplied")
        self.cfg = config
        self.scenarios = scenarios
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.wm = WorldModel(config.model)
        self.actor = Actor(config.model.state_dim, config.model.n_actions, config.behavior)
        self.critic = Critic(config.model.state_dim, config.behavior)
        self.critic_target = None
        if config.behavior.target_critic:
            self.critic_target = Critic(config.model.state_dim, config.behavior)
            self.critic_target.load_state_dict(self.critic.state_dict())
        self.opt_wm = torch.optim.Adam(self.wm.parameters(), lr=config.wm_lr)
        self.opt_actor = torch.optim.Adam(self.actor.parameters(), lr=config.ac_lr)
        self.opt_critic = torch.optim.Adam(self.critic.parameters(), lr=config.ac_lr)
        self.normalizer = ReturnNormalizer(
            config.behavior.scale_decay, config.behavior.scale_low_pct, config.behavior.scale_high_pct
        )
        self.store = ReplayStore(config.replay_capacity, seed=config.seed + 1)
        self.env = DrivingEnv(config.control, eval_mode=False)
        self.driver = PolicyDriver(self.wm, self.actor)
        self._scenario_cursor = 0

    # -- scenario scheduling ------------------------------------------------

    def _next_scenario(self) -> Scenario:
        if self.cfg.scenario_order == "fixed":
            scenario = self.scenarios[self._scenario_cursor % len(self.scenarios)]
            self._scenario_cursor += 1
            return scenario
        return self.scenarios[int(self.rng.integers(len(self.scenarios)))]

    # -- one optimization event ----------------------------------------------

    def _update(self) -> dict:
        cfg = self.cfg
        batch_np = self.store.sample_sequences(cfg.batch_size, cfg.seq_len)
        batch = batch_to_tensors(batch_np, self.wm.device, self.wm.dtype)

        states, stats = self.wm.observe_sequence(batch, mode="sample")
        wm_total, comps = self.wm.loss(batch, stats)
        self.opt_wm.zero_grad()
        wm_total.backward()
        torch.nn.utils.clip_grad_norm_(self.wm.parameters(), cfg.grad_clip)
        self.opt_wm.step()

        start = cat_states([s.detach() for s in states])
        if cfg.imag_starts is not None and cfg.imag_starts < start.batch:
            pick = torch.randperm(start.batch, device=self.wm.device)[: cfg.imag_starts]
            start = start.index_select(pick)
        bootstrap_critic = self.critic_target or self.critic
        rollout = imagine(
            self.wm, self.actor, bootstrap_critic, start, cfg.behavior.horizon
        )
        returns = lambda_returns(
            rollout.rewards, rollout.continues, rollout.values,
            cfg.behavior.lam, cfg.behavior.discount,
        )
        scale = self.normalizer.update(returns)

        h, b = rollout.actions.shape
        flat = lambda x: x[:h].reshape(h * b, *x.shape[2:])
        mask_rep = rollout.vdi_mask.repeat(h, 1)

        logits = self.actor(flat(rollout.ego_feat), flat(rollout.vdi_feat), mask_rep)
        log_probs = torch.log_softmax(logits, dim=-1)
        taken = log_probs.gather(-1, rollout.actions.reshape(-1, 1))[:, 0].view(h, b)
        entropy = -(log_probs.exp() * log_probs).sum(-1).view(h, b)
        baseline = rollout.state_values if cfg.behavior.use_baseline else None
        a_loss = actor_loss(taken, entropy, returns, scale, cfg.behavior.entropy_eta, baseline)
        self.opt_actor.zero_grad()
        a_loss.backward()
        torch.nn.utils.clip_grad_norm_(self.actor.parameters(), cfg.grad_clip)
        self.opt_actor.step()

        critic_logits = self.critic(flat(rollout.ego_feat), flat(rollout.vdi_feat), mask_rep)
        c_loss = critic_loss(critic_logits.view(h, b, -1), returns, self.critic.codec)
        self.opt_critic.zero_grad()
        c_loss.backward()
        torch.nn.utils.clip_grad_norm_(self.critic.parameters(), cfg.grad_clip)
        self.opt_critic.step()

        if self.critic_target is not None:
            tau = cfg.behavior.target_tau
            with torch.no_grad():
                for p, tp in zip(self.critic.parameters(), self.critic_target.parameters()):
                    tp.lerp_(p, tau)

        # Batch prediction quality, logged alongside the losses.
        batch_ade = None
        if "dec_ego" in stats and self.cfg.model.decoder_mode == "predict":
            batch_ade = ade(
                stats["dec_ego"].detach().cpu().numpy(),
                batch_np["y_ego"],
                batch_np["y_ego_mask"],
            )
        out = {name: float(value) for name, value in comps.items()}
        out.update(
            wm_loss=float(wm_total.detach()),
            actor_loss=float(a_loss.detach()),
            critic_loss=float(c_loss.detach()),
            return_scale=float(scale),
            ego_ade=batch_ade,
        )
        return out

    # -- the outer loop --------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.cfg
        t_start = time.time()
        result = TrainResult(out_dir=str(self.out_dir))
        log_path = self.out_dir / "metrics.jsonl"
        log_file = open(log_path, "w")

        scenario = self._next_scenario()
        step_result = self.env.reset(scenario, cfg.start_offset_ms)
        self.driver.begin_episode()
        buffer = EpisodeBuffer()
        episode_return = 0.0
        last_update: dict = {}

        def log(record: dict) -> None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

        try:
            for it in range(1, cfg.steps + 1):
                if it > cfg.warmup and it % cfg.d_train == 0 and self.store.can_sample(cfg.seq_len):
                    last_update = self._update()
                    result.updates += 1
                    if cfg.log_every and it % cfg.log_every < cfg.d_train:
                        log({"step": it, "kind": "update", **last_update})

                obs = observe_frame(
                    self.env, step_result.observation_raw, cfg.model.n_vdi, cfg.model.n_vpi
                )
                self.driver.observe(obs)
                if it <= cfg.warmup:
                    action = int(self.rng.integers(N_ACTIONS))
                    self.driver.note_action(action)
                else:
                    action = self.driver.act("sample")
                pre_frame = step_result.observation_raw
                step_result = self.env.step(action)
                buffer.append_step(obs, action, step_result.reward, step_result.done, pre_frame)
                episode_return += step_result.reward

                if step_result.done:
                    episode = buffer.finalize_episode(
                        step_result.observation_raw, cfg.model.horizon
                    )
                    self.store.add_episode(episode)
                    result.episodes += 1
                    log({
                        "step": it, "kind": "episode",
                        "scenario": scenario.scenario_id,
                        "return": round(episode_return, 4),
                        "length": len(episode),
                        "collided": self.env.collided,
                        "completion": round(self.env.completion_ratio(), 4),
                    })
                    scenario = self._next_scenario()
                    step_result = self.env.reset(scenario, cfg.start_offset_ms)
                    self.driver.begin_episode()
                    episode_return = 0.0

                if cfg.eval_every and it % cfg.eval_every == 0:
                    report, _ = evaluate(
                        self.wm, self.actor, self.scenarios, cfg.eval_episodes,
                        control=cfg.control,
                    )
                    result.eval_history.append((it, report))
                    log({"step": it, "kind": "eval", "success_rate": report.success_rate,
                         "collision_rate": report.collision_rate,
                         "avg_completion": report.avg_completion})
                    ckpt = self.out_dir / f"ckpt_{it:08d}.pt"
                    self._save(ckpt, it)
                    result.checkpoint_path = str(ckpt)
                    if cfg.stop_at_success is not None and report.success_rate >= cfg.stop_at_success:
                        result.steps = it
                        break
                result.steps = it
        except TrainingError:
            self._save(self.out_dir / "ckpt_emergency.pt", result.steps)
            log_file.close()
            raise
        final = self.out_dir / "ckpt_final.pt"
        self._save(final, result.steps)
        if not result.checkpoint_path:
            result.checkpoint_path = str(final)
        if cfg.eval_every and (not result.eval_history or result.eval_history[-1][0] != result.steps):
            report, _ = evaluate(
                self.wm, self.actor, self.scenarios, cfg.eval_episodes, control=cfg.control
            )
            result.eval_history.append((result.steps, report))
        result.final_report = result.eval_history[-1][1] if result.eval_history else None
        result.wall_time_s = time.time() - t_start
        log_file.close()
        return result

    def _save(self, path, step: int) -> None:
        save_checkpoint(
            path, self.wm, self.actor, self.critic, step=step,
            return_scale=self.normalizer.scale,
            extra={"train_config": config_to_dict(self.cfg)},
        )


def train_loop(config: TrainConfig, scenarios: list[Scenario], out_dir) -> TrainResult:
    """Run the full schedule and return the artifacts summary."""
    return Trainer(config, scenarios, out_dir).run()


@torch.no_grad()
def evaluate(
    wm: WorldModel,
    actor: Actor,
    scenarios: list[Scenario],
    episodes_per_scenario: int,
    control: ControlConfig | None = None,
    collect_predictions: bool = True,
    start_offset_ms: int = 0,
) -> tuple[MetricsReport, list[EpisodeOutcome]]:
    """Greedy-policy evaluation with eval-mode termination and ADE collection."""
    env = DrivingEnv(control, eval_mode=True)
    driver = PolicyDriver(wm, actor, latent_mode="mode")
    predict_mode = wm.config.decoder_mode == "predict"
    horizon = wm.config.horizon
    outcomes = []
    for scenario in scenarios:
        level = density_level(scenario)
        for _ in range(episodes_per_scenario):
            step_result = env.reset(scenario, start_offset_ms)
            driver.begin_episode()
            episode_return = 0.0
            frames = [step_result.observation_raw]
            predictions = []  # (t, pred_ego, pred_vdi, vdi_ids, cv_pred)
            t = 0
            while not step_result.done:
                frame = step_result.observation_raw
                obs = observe_frame(env, frame, wm.config.n_vdi, wm.config.n_vpi)
                state = driver.observe(obs)
                if collect_predictions and predict_mode:
                    decoded = wm.decode(state)
                    cv = constant_velocity_prediction(
                        env.history.trailing_ego(), frame.ego, horizon
                    )
                    predictions.append((
                        t,
                        decoded["ego"][0].cpu().numpy(),
                        decoded["vdi"][0].cpu().numpy(),
                        obs.vdi_ids.copy(),
                        cv,
                    ))
                action = driver.act("greedy")
                step_result = env.step(action)
                episode_return += step_result.reward
                frames.append(step_result.observation_raw)
                t += 1
            ego_trace = [f.ego for f in frames]
            veh_trace = [f.vehicles for f in frames]
            ego_err, vdi_err, cv_err = [], [], []
            for (pt, pred_ego, pred_vdi, vdi_ids, cv) in predictions:
                target = extract_future_targets(ego_trace, veh_trace, pt, horizon, vdi_ids)
                sample = ade(pred_ego, target.ego_future, target.ego_mask)
                if sample is not None:
                    ego_err.append(sample)
                sample = ade(pred_vdi, target.vdi_future, target.vdi_mask)
                if sample is not None:
                    vdi_err.append(sample)
                sample = ade(cv, target.ego_future, target.ego_mask)
                if sample is not None:
                    cv_err.append(sample)
            outcomes.append(EpisodeOutcome(
                scenario_id=scenario.scenario_id,
                collided=env.collided,
                completion_ratio=env.completion_ratio(),
                episode_return=episode_return,
                steps=env.steps,
                density_level=level,
                ego_ade=float(np.mean(ego_err)) if ego_err else None,
                vdi_ade=float(np.mean(vdi_err)) if vdi_err else None,
                cv_ego_ade=float(np.mean(cv_err)) if cv_err else None,
            ))
    return MetricsReport.from_outcomes(outcomes), outcomes
