"""Actor/learner orchestration with a shared prioritized replay buffer."""

from __future__ import annotations

import json
import logging
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, nets
from .caps_sac import Learner, steering_penalty_reward
from .config import ExperimentConfig
from .env import RacingEnv
from .replay import Batch, GlobalBuffer, LocalBuffer, NStepAccumulator, flush, push_local
from .track import default_track, load_track_file

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def load_experiment_track(cfg: ExperimentConfig):
    return default_track() if cfg.track is None else load_track_file(cfg.track)


def frame_pipeline(cfg: ExperimentConfig, rng: np.random.Generator | None, training: bool):
    """Per-frame observation transform: translator seam, then training-time randomisation."""
    translator = augment.get_translator(cfg.translator) if cfg.translator else None
    dr = training and bool(cfg.perturbation.sim2real_enabled)
    if translator is None and not dr:
        return None

    def transform(frame):
        if translator is not None:
            frame = translator(frame)
        if dr:
            frame = augment.sim2real_pipeline(cfg.perturbation, frame, rng)
        return frame

    return transform


class JsonlWriter:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "w")
        self.lock = threading.Lock()

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self.lock:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        self.fh.close()


class Actor:
    """One environment plus a policy snapshot, feeding a local buffer."""

    def __init__(self, actor_id: int, cfg: ExperimentConfig, track, seed: np.random.SeedSequence,
                 policy: nets.ParamSet, global_buf: GlobalBuffer, episode_log: JsonlWriter | None):
        self.actor_id = actor_id
        self.cfg = cfg
        env_seed, act_seed, dr_seed = seed.spawn(3)
        self.env_rng = np.random.default_rng(env_seed)
        self.act_rng = np.random.default_rng(act_seed)
        dr_rng = np.random.default_rng(dr_seed)
        self.env = RacingEnv(track, cfg.speed_config(), cfg.vehicle, cfg.camera, cfg.reward,
                             cfg.reset_jitter, cfg.heading_jitter, frame_pipeline(cfg, dr_rng, True))
        self.policy = policy
        self.global_buf = global_buf
        self.local = LocalBuffer(cfg.replay.local_capacity, actor_id)
        self.nstep = NStepAccumulator(cfg.sac.gamma, cfg.sac.n_step)
        self.episode_log = episode_log
        self.episode_index = 0
        self.episode_return = 0.0
        self.collected = 0
        self.obs = self.env.reset(self.env_rng)

    def step(self) -> dict | None:
        action = nets.act(self.policy, self.obs, self.act_rng)[0].astype(np.float64)
        next_obs, r, result = self.env.step(action)
        if self.cfg.steering_penalty:
            r += steering_penalty_reward(action, self.cfg.steering_penalty, self.cfg.vehicle.steering_limit)
        self.episode_return += r
        for t in self.nstep.push(self.obs, action, r, next_obs, result.done):
            self.collected += 1
            push_local(self.local, t, self.global_buf, self.cfg.replay.flush_threshold)
        self.obs = next_obs
        if not result.done:
            return None
        if len(self.local):
            flush(self.local, self.global_buf)
        steps = self.env.steps
        record = {
            "actor_id": self.actor_id,
            "episode_index": self.episode_index,
            "steps": steps,
            "return": self.episode_return,
            "done_reason": result.done_reason,
            "lap_time_s": steps * self.cfg.vehicle.dt if result.done_reason == "lap_complete" else None,
        }
        if self.episode_log is not None:
            self.episode_log.write(record)
        self.episode_index += 1
        self.episode_return = 0.0
        self.obs = self.env.reset(self.env_rng)
        return record


@dataclass
class TrainingResult:
    run_dir: Path
    env_steps: int = 0
    updates: int = 0
    episodes: int = 0
    checkpoints: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"run_dir": str(self.run_dir), "env_steps": self.env_steps, "updates": self.updates,
                "episodes": self.episodes, "checkpoints": [str(c) for c in self.checkpoints]}


class Trainer:
    def __init__(self, cfg: ExperimentConfig, run_dir):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        (self.run_dir / "config.json").write_text(cfg.model_dump_json(indent=2))
        self.track = load_experiment_track(cfg)
        root = np.random.SeedSequence(cfg.seed)
        net_seed, learner_seed, sample_seed, actors_seed = root.spawn(4)
        self.nets = nets.build_networks(cfg.obs_shape, 2, cfg.arch, int(net_seed.generate_state(1)[0]),
                                        cfg.sac.alpha_init)
        self.learner = Learner(self.nets, cfg.sac, cfg.caps_config(),
                               seed=int(learner_seed.generate_state(1)[0]))
        self.sample_rng = np.random.default_rng(sample_seed)
        self.buffer = GlobalBuffer(cfg.replay.global_capacity, cfg.replay.priority_alpha)
        self.episode_log = JsonlWriter(self.run_dir / "episode_log.jsonl")
        self.training_log = JsonlWriter(self.run_dir / "training_log.jsonl")
        self.deterministic = cfg.mode == "sync"
        self.snapshot = self.nets.policy.copy()
        self.actors = [Actor(i, cfg, self.track, s, self.snapshot, self.buffer, self.episode_log)
                       for i, s in enumerate(actors_seed.spawn(cfg.workers))]
        self.result = TrainingResult(self.run_dir)
        self.env_steps = 0
        self._t0 = time.perf_counter()

    # learner side

    def ready(self) -> bool:
        need = max(self.cfg.replay.warmup, self.cfg.sac.batch_size)
        return len(self.buffer) >= need

    def update_budget_left(self) -> bool:
        return self.cfg.budget.updates is None or self.learner.updates < self.cfg.budget.updates

    def learner_step(self) -> None:
        rc = self.cfg.replay
        items, weights, idx = self.buffer.sample(self.cfg.sac.batch_size, self.sample_rng, rc.mode, rc.priority_beta)
        report, td = self.learner.update(Batch.from_transitions(items),
                                         weights if rc.mode == "prioritized" else None)
        if rc.mode == "prioritized":
            self.buffer.update_priorities(idx, td)
        record = {"step": self.learner.updates, "env_steps": self.env_steps, **report.as_dict()}
        if not self.deterministic:
            record["wall_clock"] = time.perf_counter() - self._t0
        self.training_log.write(record)
        if self.learner.updates % self.cfg.budget.publish_every == 0:
            self.publish()
        if self.learner.updates % self.cfg.budget.checkpoint_every == 0:
            self.checkpoint()

    def publish(self) -> None:
        snap = self.nets.policy.copy()
        self.snapshot = snap
        if self.deterministic:
            for a in self.actors:
                a.policy = snap

    def checkpoint(self) -> Path:
        self.nets.log_alpha = float(self.learner.log_alpha[0])
        path = self.run_dir / "checkpoints" / f"ckpt_{self.learner.updates:08d}.bin"
        nets.save_networks(self.nets, path)
        if path not in self.result.checkpoints:
            self.result.checkpoints.append(path)
        return path

    # loops

    def run(self) -> TrainingResult:
        try:
            self.checkpoint()
            if self.cfg.budget.env_steps > 0 and self.update_budget_left():
                if self.deterministic:
                    self._run_sync()
                else:
                    self._run_threaded()
            if self.learner.updates > 0:
                self.checkpoint()
        finally:
            self.episode_log.close()
            self.training_log.close()
        self.result.env_steps = self.env_steps
        self.result.updates = self.learner.updates
        self.result.episodes = sum(a.episode_index for a in self.actors)
        (self.run_dir / "summary.json").write_text(json.dumps(self.result.as_dict(), indent=2))
        return self.result

    def _run_sync(self) -> None:
        budget = self.cfg.budget
        while self.env_steps < budget.env_steps and self.update_budget_left():
            actor = self.actors[self.env_steps % len(self.actors)]
            actor.step()
            self.env_steps += 1
            if self.env_steps % budget.steps_per_update == 0 and self.ready():
                self.learner_step()

    def _run_threaded(self) -> None:
        budget = self.cfg.budget
        stop = threading.Event()
        lock = threading.Lock()
        errors: list[str] = []

        def actor_loop(actor: Actor):
            try:
                while not stop.is_set():
                    with lock:
                        if self.env_steps >= budget.env_steps:
                            return
                        self.env_steps += 1
                    if actor.policy is not self.snapshot:
                        actor.policy = self.snapshot
                    actor.step()
            except BaseException:  # noqa: BLE001 - reported to the main thread
                errors.append(f"actor {actor.actor_id}:\n{traceback.format_exc()}")
                stop.set()

        threads = [threading.Thread(target=actor_loop, args=(a,), name=f"actor-{a.actor_id}", daemon=True)
                   for a in self.actors]
        for t in threads:
            t.start()
        try:
            while not stop.is_set() and any(t.is_alive() for t in threads):
                if not self.update_budget_left():
                    break
                if self.ready():
                    self.learner_step()
                else:
                    time.sleep(0.002)
        except BaseException:
            errors.append(f"learner:\n{traceback.format_exc()}")
        finally:
            stop.set()
            for t in threads:
                t.join()
        if errors:
            raise TrainingAborted("training aborted; partial logs preserved\n" + "\n".join(errors))


def run_training(cfg: ExperimentConfig, run_dir) -> TrainingResult:
    return Trainer(cfg, run_dir).run()
