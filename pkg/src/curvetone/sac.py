"""Soft Actor-Critic training loop for the tone-curve policy.

The environment is an episode of T curve adjustments on one image. The
full-resolution frame only exists as the original 8-bit levels plus a
composite LUT (exact float values come from a single gather), and the small
56x56 state frames live on the 8-bit lattice, so replay storage is six
uint8 planes per episode shared by its transitions.

One gradient step runs per environment step after warmup; warmup episodes
act uniformly at random and perform no updates at all.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .imaging import (
    FloatImage,
    QuantizedImage,
    ImageState,
    center_crop,
    dequantize_levels,
    downsample,
    load_image,
    quantize,
    to_float,
)
from .neural import Adam, PolicyNetwork, QNetwork, Tensor, no_grad
from .neural import autodiff as ad
from .neural._fused import ema_update
from .neural.archive import load_archive, apply_tensors, network_tensors, save_archive
from .neural.networks import sample_action, squashed_gaussian
from .reward import ProviderError, RewardScale, reward_from_losses
from .tone_curve import (
    ACTION_HIGH,
    ACTION_LOW,
    ActionVector,
    apply_curve,
    apply_to_lut,
    curve_table_for_action,
    identity_lut,
    map_image,
    map_image_float,
)


class ConfigError(ValueError):
    """Invalid training configuration; the message lists every problem found."""


class EpisodeAborted(Exception):
    """The reward provider failed mid-episode; the episode is discarded."""


@dataclass
class SacConfig:
    learning_rate: float = 3e-4
    discount: float = 0.99
    batch_size: int = 256
    tau: float = 5e-4
    target_update_interval: int = 1
    episode_steps: int = 5
    total_iterations: int = 20_000          # desk scale; paper runs 7.5e5
    warmup_steps: int = 1_000               # desk scale; paper uses 1e4
    buffer_capacity: int = 50_000           # desk scale; paper uses 1e6
    action_limit: float = 2.0
    entropy_target: float = -4.0            # -dim(action)
    reward_scale: float = 200.0
    curve_segments: int = 64
    crop_size: int = 224
    state_size: int = 56
    twin_q: bool = True
    checkpoint_interval: int = 5_000

    @classmethod
    def paper_scale(cls, **overrides) -> "SacConfig":
        base = cls(total_iterations=750_000, warmup_steps=10_000, buffer_capacity=1_000_000)
        return replace(base, **overrides)

    def validate(self) -> None:
        problems = []
        positive = ("learning_rate", "batch_size", "target_update_interval", "episode_steps",
                    "total_iterations", "buffer_capacity", "action_limit", "reward_scale",
                    "curve_segments", "crop_size", "state_size", "checkpoint_interval")
        for name in positive:
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("discount", "tau"):
            if not 0.0 < getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.warmup_steps < 0:
            problems.append(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SacConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"invalid config: unknown fields {sorted(unknown)}")
        config = cls(**data)
        config.validate()
        return config


class TemperatureParam:
    """Trainable entropy temperature, positive by exponential parameterization."""

    def __init__(self, initial: float = 1.0, dtype=np.float32):
        self.log_alpha = Tensor(np.asarray(math.log(initial), dtype=dtype), requires_grad=True)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))


@dataclass(eq=False)
class Transition:
    """One step of an episode; frames are the episode's shared uint8 plane stack."""

    frames: np.ndarray  # (T+1, C, s, s) uint8
    t: int
    action: np.ndarray  # (4,) float32
    reward: float
    terminal: bool

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"transition reward must be finite, got {self.reward}")

    def _plane(self, index: int) -> np.ndarray:
        return dequantize_levels(self.frames[index], 8, np.float32)

    @property
    def state(self) -> ImageState:
        x = self._plane(self.t)
        v = x - self._plane(self.t - 1) if self.t > 0 else np.zeros_like(x)
        return ImageState(FloatImage(x), FloatImage(v))

    @property
    def next_state(self) -> ImageState:
        x = self._plane(self.t + 1)
        return ImageState(FloatImage(x), FloatImage(x - self._plane(self.t)))


class ReplayBuffer:
    """Fixed-capacity ring of transitions with seeded uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: list = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._write] = transition
            self._write = (self._write + 1) % self.capacity

    def sample(self, batch_size: int, rng) -> list:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        indices = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in indices]

    def sample_batch(self, batch_size: int, rng) -> dict:
        """Materialize a sampled batch as stacked float32 arrays."""
        picked = self.sample(batch_size, rng)
        prev = np.stack([tr.frames[tr.t - 1] if tr.t > 0 else tr.frames[tr.t] for tr in picked])
        cur = np.stack([tr.frames[tr.t] for tr in picked])
        nxt = np.stack([tr.frames[tr.t + 1] for tr in picked])
        x_prev = dequantize_levels(prev, 8, np.float32)
        x = dequantize_levels(cur, 8, np.float32)
        x_next = dequantize_levels(nxt, 8, np.float32)
        return {
            "states": np.concatenate([x, x - x_prev], axis=1),
            "actions": np.stack([tr.action for tr in picked]).astype(np.float32),
            "rewards": np.array([tr.reward for tr in picked], dtype=np.float32),
            "next_states": np.concatenate([x_next, x_next - x], axis=1),
            "terminal": np.array([tr.terminal for tr in picked], dtype=np.float32),
        }


def augment(image: FloatImage, rng) -> FloatImage:
    """One random tone adjustment with parameters from N(0,1), clamped to the action range."""
    params = np.clip(rng.standard_normal(4), ACTION_LOW, ACTION_HIGH)
    table = curve_table_for_action(ActionVector.from_array(params))
    return apply_curve(image, table)


def _state_array(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.concatenate([x, v], axis=0)[None]


def run_episode(image: QuantizedImage, classes, policy, reward_provider, config: SacConfig,
                rng, uniform_actions: bool = False) -> list:
    """Roll one episode: augment, crop, then T curve adjustments with rewards.

    The crop-resolution frame is materialized from the original levels through
    the composite LUT (exact float values) for the reward; the 56x56 state
    frames are mapped the same way and kept on the 8-bit lattice.
    """
    steps = config.episode_steps
    side = config.state_size
    scale = RewardScale(config.reward_scale)

    base = quantize(center_crop(augment(to_float(image), rng), config.crop_size, config.crop_size), 8)
    small0 = quantize(downsample(to_float(base), side, side), 8)

    frames = np.empty((steps + 1, small0.channels, side, side), dtype=np.uint8)
    frames[0] = small0.data
    lut = identity_lut(8, np.float32)

    def provider_loss(composite_lut):
        try:
            return reward_provider.loss(map_image_float(base, composite_lut), classes)
        except ProviderError as exc:
            raise EpisodeAborted(f"reward provider failed: {exc}") from exc

    loss_prev = provider_loss(lut)
    x = dequantize_levels(frames[0], 8, np.float32)
    v = np.zeros_like(x)

    transitions = []
    for t in range(steps):
        if uniform_actions:
            action = rng.uniform(ACTION_LOW, ACTION_HIGH, size=4)
        else:
            with no_grad():
                mu, log_sigma = policy(Tensor(_state_array(x, v)))
            action, _ = sample_action(mu.data[0], log_sigma.data[0], rng)
        lut = apply_to_lut(lut, curve_table_for_action(ActionVector.from_array(action), config.curve_segments))
        loss_next = provider_loss(lut)
        frames[t + 1] = map_image(small0, lut).data
        transitions.append(Transition(
            frames=frames, t=t, action=np.asarray(action, dtype=np.float32),
            reward=reward_from_losses(loss_prev, loss_next, scale), terminal=(t + 1 == steps),
        ))
        loss_prev = loss_next
        x_next = dequantize_levels(frames[t + 1], 8, np.float32)
        v = x_next - x
        x = x_next
    return transitions


# ---------------------------------------------------------------------------
# Networks and updates


@dataclass(eq=False)
class SacNetworks:
    policy: PolicyNetwork
    q_heads: list
    q_targets: list

    @classmethod
    def create(cls, rng, config: SacConfig, dtype=np.float32) -> "SacNetworks":
        policy = PolicyNetwork(rng, dtype)
        n_heads = 2 if config.twin_q else 1
        heads = [QNetwork(rng, dtype) for _ in range(n_heads)]
        targets = [QNetwork(rng, dtype) for _ in range(n_heads)]
        for head, target in zip(heads, targets):
            for (_, src), (_, dst) in zip(head.named_parameters(), target.named_parameters()):
                dst.data = src.data.copy()
        return cls(policy=policy, q_heads=heads, q_targets=targets)


def q_target_values(batch: dict, nets: SacNetworks, alpha: float, config: SacConfig,
                    eps_next: np.ndarray) -> np.ndarray:
    """Bootstrap targets y = r + gamma(1-terminal)(min_target_Q(s',a') - alpha*logpi); no gradients."""
    with no_grad():
        s_next = Tensor(batch["next_states"]).share_conv_input()
        mu, log_sigma = nets.policy(s_next)
        a_next, logp_next = squashed_gaussian(mu, log_sigma, eps_next)
        q_next = None
        for target in nets.q_targets:
            value = target(s_next, a_next).data
            q_next = value if q_next is None else np.minimum(q_next, value)
        v_next = q_next - np.float32(alpha) * logp_next.data
    return batch["rewards"] + np.float32(config.discount) * (1.0 - batch["terminal"]) * v_next


def q_loss_tensor(qnet, states: Tensor, actions: np.ndarray, targets: np.ndarray):
    """Soft Bellman residual 0.5*(Q(s,a) - y)^2 for one head; returns (loss, state features)."""
    features = qnet.state_features(states)
    q_values = qnet.from_features(features, Tensor(actions))
    residual = ad.sub(q_values, targets)
    return ad.mean(ad.mul(ad.mul(residual, residual), 0.5)), features


def update_q(batch: dict, nets: SacNetworks, temperature: TemperatureParam, config: SacConfig,
             optimizers: dict, rng) -> tuple[float, list]:
    """One gradient step on every Q head; returns (mean head loss, cached state features)."""
    if batch["states"].shape[0] == 0:
        raise ValueError("empty batch")
    eps_next = rng.standard_normal(batch["actions"].shape).astype(batch["actions"].dtype)
    targets = q_target_values(batch, nets, temperature.alpha, config, eps_next)
    states = Tensor(batch["states"]).share_conv_input()
    feature_cache = []
    total = 0.0
    for index, qnet in enumerate(nets.q_heads):
        opt = optimizers[f"q{index + 1}"]
        opt.zero_grad()
        loss, features = q_loss_tensor(qnet, states, batch["actions"], targets)
        loss.backward()
        opt.step()
        feature_cache.append(features.data)
        total += loss.item()
    return total / len(nets.q_heads), feature_cache


def policy_loss_tensor(batch: dict, nets: SacNetworks, alpha: float, eps: np.ndarray,
                       feature_cache=None):
    """Reparameterized policy objective alpha*logpi(a|s) - min_Q(s,a); returns (loss, logp)."""
    states = Tensor(batch["states"]).share_conv_input()
    mu, log_sigma = nets.policy(states)
    action, logp = squashed_gaussian(mu, log_sigma, eps)
    q_min = None
    for index, qnet in enumerate(nets.q_heads):
        if feature_cache is not None:
            value = qnet.from_features(Tensor(feature_cache[index]), action)
        else:
            value = qnet(states, action)
        q_min = value if q_min is None else ad.minimum(q_min, value)
    loss = ad.mean(ad.sub(ad.mul(logp, alpha), q_min))
    return loss, logp


def update_policy(batch: dict, nets: SacNetworks, temperature: TemperatureParam, config: SacConfig,
                  optimizers: dict, rng, feature_cache=None) -> tuple[float, np.ndarray]:
    """One gradient step on the policy; Q weights receive no update from this loss."""
    if batch["states"].shape[0] == 0:
        raise ValueError("empty batch")
    eps = rng.standard_normal(batch["actions"].shape).astype(batch["actions"].dtype)
    opt = optimizers["policy"]
    opt.zero_grad()
    loss, logp = policy_loss_tensor(batch, nets, temperature.alpha, eps, feature_cache)
    loss.backward()
    opt.step()
    return loss.item(), logp.data.copy()


def update_temperature(log_probs: np.ndarray, temperature: TemperatureParam, target_entropy: float,
                       optimizer: Adam) -> float:
    """One gradient step on log alpha toward the entropy target."""
    optimizer.zero_grad()
    drive = -(np.asarray(log_probs, dtype=temperature.log_alpha.data.dtype) + target_entropy)
    loss = ad.mean(ad.mul(temperature.log_alpha, drive))
    loss.backward()
    optimizer.step()
    return loss.item()


def update_target(nets: SacNetworks, tau: float) -> None:
    """Exponential moving average of every online parameter into its target twin."""
    for head, target in zip(nets.q_heads, nets.q_targets):
        for src, dst in zip(head.parameters(), target.parameters()):
            ema_update(dst.data.reshape(-1), src.data.reshape(-1), tau)


# ---------------------------------------------------------------------------
# Checkpoints and the training loop


_ARCHIVE_NAMES = ("policy", "q1", "q2", "q1_target", "q2_target")


def save_checkpoint(directory, nets: SacNetworks, temperature: TemperatureParam, step: int,
                    config: SacConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    networks = {"policy": nets.policy}
    for index, (head, target) in enumerate(zip(nets.q_heads, nets.q_targets), start=1):
        networks[f"q{index}"] = head
        networks[f"q{index}_target"] = target
    for name, net in networks.items():
        save_archive(directory / f"{name}.curv", network_tensors(net))
    state = {"step": step, "log_alpha": float(temperature.log_alpha.data), "config": config.to_json()}
    (directory / "state.json").write_text(json.dumps(state, indent=2))
    return directory


def load_checkpoint(directory, nets: SacNetworks, temperature: TemperatureParam) -> int:
    directory = Path(directory)
    state = json.loads((directory / "state.json").read_text())
    networks = {"policy": nets.policy}
    for index, (head, target) in enumerate(zip(nets.q_heads, nets.q_targets), start=1):
        networks[f"q{index}"] = head
        networks[f"q{index}_target"] = target
    for name, net in networks.items():
        apply_tensors(net, load_archive(directory / f"{name}.curv"), context=f"{directory}/{name}.curv")
    temperature.log_alpha.data = np.asarray(state["log_alpha"], dtype=temperature.log_alpha.data.dtype)
    return int(state["step"])


@dataclass
class TrainResult:
    steps: int
    episode_returns: list
    final_checkpoint: Path | None
    log_path: Path | None
    nets: SacNetworks
    temperature: TemperatureParam


def train(entries, config: SacConfig, reward_provider, seed: int = 0, out_dir=None,
          resume_from=None, progress=None) -> TrainResult:
    """Run SAC to completion: alternating environment steps and gradient steps.

    ``entries`` are manifest records (path + classes). Fully deterministic for
    a fixed seed and provider (single-threaded).
    """
    config.validate()
    entries = list(entries)
    if not entries:
        raise ValueError("training manifest is empty")

    rng_init = np.random.default_rng([seed, 0])
    rng_env = np.random.default_rng([seed, 1])
    rng_updates = np.random.default_rng([seed, 2])
    rng_buffer = np.random.default_rng([seed, 3])

    nets = SacNetworks.create(rng_init, config)
    temperature = TemperatureParam()
    optimizers = {
        "policy": Adam(nets.policy.parameters(), lr=config.learning_rate),
        "alpha": Adam([temperature.log_alpha], lr=config.learning_rate),
    }
    for index, qnet in enumerate(nets.q_heads, start=1):
        optimizers[f"q{index}"] = Adam(qnet.parameters(), lr=config.learning_rate)

    step = 0
    if resume_from is not None:
        step = load_checkpoint(resume_from, nets, temperature)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.ndjson"
        log_file = open(log_path, "a" if resume_from else "w")

    def log_line(record: dict) -> None:
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    buffer = ReplayBuffer(config.buffer_capacity)
    image_cache: dict = {}
    episode_returns: list = []
    recent_returns = deque(maxlen=100)
    consecutive_aborts = 0

    try:
        while step < config.total_iterations:
            entry = entries[int(rng_env.integers(len(entries)))]
            if entry.path not in image_cache:
                image_cache[entry.path] = load_image(entry.path)
            uniform = step < config.warmup_steps
            try:
                transitions = run_episode(image_cache[entry.path], entry.classes, nets.policy,
                                          reward_provider, config, rng_env, uniform_actions=uniform)
            except EpisodeAborted as exc:
                consecutive_aborts += 1
                log_line({"event": "episode_aborted", "step": step, "error": str(exc)})
                if consecutive_aborts >= 10:
                    raise ProviderError(f"10 consecutive episode aborts; last: {exc}") from exc
                continue
            consecutive_aborts = 0
            episode_return = float(sum(tr.reward for tr in transitions))
            episode_returns.append(episode_return)
            recent_returns.append(episode_return)

            for transition in transitions:
                buffer.push(transition)
                step += 1
                if step > config.warmup_steps and len(buffer) >= config.batch_size:
                    batch = buffer.sample_batch(config.batch_size, rng_buffer)
                    q_loss, feature_cache = update_q(batch, nets, temperature, config, optimizers, rng_updates)
                    policy_loss, log_probs = update_policy(batch, nets, temperature, config,
                                                           optimizers, rng_updates, feature_cache)
                    alpha_loss = update_temperature(log_probs, temperature, config.entropy_target,
                                                    optimizers["alpha"])
                    if step % config.target_update_interval == 0:
                        update_target(nets, config.tau)
                    log_line({
                        "step": step,
                        "q_loss": q_loss,
                        "policy_loss": policy_loss,
                        "alpha": temperature.alpha,
                        "mean_episode_return": float(np.mean(recent_returns)),
                    })
                if out_dir is not None and step % config.checkpoint_interval == 0:
                    save_checkpoint(out_dir / "checkpoints" / f"step_{step:08d}", nets, temperature,
                                    step, config)
                if step >= config.total_iterations:
                    break
            if progress is not None:
                progress(step, episode_returns)
    finally:
        if log_file is not None:
            log_file.close()

    final_checkpoint = None
    if out_dir is not None:
        final_checkpoint = save_checkpoint(out_dir / "checkpoints" / "final", nets, temperature,
                                           step, config)
    return TrainResult(steps=step, episode_returns=episode_returns, final_checkpoint=final_checkpoint,
                       log_path=log_path, nets=nets, temperature=temperature)
