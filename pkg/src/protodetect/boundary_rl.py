"""RL-steered loss-band control and boundary pseudo-anomaly harvesting.

A small actor-critic controller watches the reconstruction loss of the
pretrained model and picks a step magnitude each batch. The magnitude is
mapped to a signed parameter update: descend when the loss is above the
target band, ascend (perturb) when below, hold inside. Reconstructing the
batch through the perturbed model yields pseudo-anomalous windows that sit
near the boundary of normal behavior; those are pooled, index-aligned with
their source windows, for the representation-learning stage.

The reward is one-step (progress toward the band target plus an in-band
bonus), so the agent is a contextual-bandit actor-critic: the critic
regresses immediate reward, the actor ascends the critic.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import WindowSet
from .numerics import ParamSet, Tensor
from .recon import ReconModel, batch_recon_error, recon_loss


@dataclass
class BandConfig:
    """Target loss band [low, up] plus step-size and action-range settings."""

    low: float
    up: float
    target: float | None = None  # defaults to the band midpoint
    step_pos: float = 0.01
    step_neg: float = 0.01
    action_min: float = 0.0
    action_max: float = 1.0

    def __post_init__(self):
        if not self.low < self.up:
            raise ValueError(f"band requires low < up, got [{self.low}, {self.up}]")
        if self.target is None:
            self.target = 0.5 * (self.low + self.up)
        if not self.low <= self.target <= self.up:
            raise ValueError("band target must lie inside [low, up]")
        if self.step_pos <= 0 or self.step_neg <= 0:
            raise ValueError("base step sizes must be positive")
        if not 0.0 <= self.action_min < self.action_max:
            raise ValueError("need 0 <= action_min < action_max")

    def contains(self, loss: float) -> bool:
        return self.low <= loss <= self.up


@dataclass
class Transition:
    """One controller interaction; reward is recomputable from the fields."""

    state: np.ndarray
    action: float
    step: float
    reward: float
    loss_before: float
    loss_after: float


class ReplayBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._buf: deque[Transition] = deque(maxlen=capacity)

    def push(self, tr: Transition) -> None:
        self._buf.append(tr)

    def __len__(self) -> int:
        return len(self._buf)

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        idx = rng.choice(len(self._buf), size=n, replace=False)
        return [self._buf[i] for i in idx]


def build_state(history, prev_update: float, k: int) -> np.ndarray:
    """Last k losses (left-padded with the oldest available) + previous update."""
    hist = list(history)
    if not hist:
        raise ValueError("loss history is empty")
    tail = hist[-k:]
    if len(tail) < k:
        tail = [tail[0]] * (k - len(tail)) + tail
    return np.array(tail + [prev_update], dtype=np.float64)


def signed_step(action: float, loss: float, band: BandConfig) -> float:
    """Map a nonnegative action to a signed update magnitude.

    Above the band: positive step (descend / repair). Below: negative step
    (ascend / perturb toward the boundary). Inside: no update.
    """
    if loss > band.up:
        return band.step_pos * action
    if loss < band.low:
        return -band.step_neg * action
    return 0.0


def reward(loss_before: float, loss_after: float, band: BandConfig) -> float:
    """Progress of the loss toward the band target, plus an in-band bonus."""
    bonus = 1.0 if band.contains(loss_after) else 0.0
    return abs(loss_before - band.target) - abs(loss_after - band.target) + bonus


class Agent:
    """Actor-critic controller over the loss-history state.

    The actor is an MLP whose output is squashed into [action_min,
    action_max]; the critic is an MLP scoring (state, action) pairs by
    predicted one-step reward.
    """

    def __init__(
        self,
        state_dim: int,
        hidden: int,
        action_min: float,
        action_max: float,
        actor_lr: float,
        critic_lr: float,
        rng: np.random.Generator,
    ):
        self.state_dim = state_dim
        self.action_min = action_min
        self.action_max = action_max
        self.actor_params = ParamSet()
        self.critic_params = ParamSet()
        for params, in_dim, prefix in (
            (self.actor_params, state_dim, "actor"),
            (self.critic_params, state_dim + 1, "critic"),
        ):
            params.register(f"{prefix}.w1", nm.xavier_uniform(rng, in_dim, hidden))
            params.register(f"{prefix}.b1", np.zeros(hidden))
            params.register(f"{prefix}.w2", nm.xavier_uniform(rng, hidden, hidden))
            params.register(f"{prefix}.b2", np.zeros(hidden))
            params.register(f"{prefix}.w3", nm.xavier_uniform(rng, hidden, 1))
            params.register(f"{prefix}.b3", np.zeros(1))
        self._actor_opt = nm.Adam(actor_lr)
        self._critic_opt = nm.Adam(critic_lr)

    def _mlp(self, x: Tensor, params: ParamSet, prefix: str) -> Tensor:
        h = nm.relu(nm.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
        h = nm.relu(nm.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))
        return nm.linear(h, params[f"{prefix}.w3"], params[f"{prefix}.b3"])

    def actor_forward(self, states: Tensor) -> Tensor:
        raw = self._mlp(states, self.actor_params, "actor")
        span = self.action_max - self.action_min
        return nm.add(nm.mul(nm.sigmoid(raw), span), self.action_min)

    def critic_forward(self, states: Tensor, actions: Tensor) -> Tensor:
        return self._mlp(nm.concat([states, actions], axis=-1), self.critic_params, "critic")

    def act(self, state: np.ndarray) -> float:
        out = self.actor_forward(Tensor(state[None, :]))
        return float(out.data[0, 0])

    def act_explore(self, state: np.ndarray, sigma: float, rng: np.random.Generator) -> float:
        noisy = self.act(state) + (rng.normal(0.0, sigma) if sigma > 0 else 0.0)
        return float(np.clip(noisy, self.action_min, self.action_max))

    def update_critic(self, states: np.ndarray, actions: np.ndarray, rewards: np.ndarray) -> float:
        """Regress the critic toward observed one-step rewards (squared error)."""
        self.critic_params.zero_grad()
        pred = self.critic_forward(Tensor(states), Tensor(actions))
        critic_loss = nm.tmean(nm.square(nm.sub(pred, Tensor(rewards))))
        nm.backward(critic_loss, self.critic_params)
        self._critic_opt.step(self.critic_params)
        return critic_loss.item()

    def update_actor(self, states: np.ndarray) -> float:
        """Push the actor to increase the critic's prediction at its own action.

        Gradients flow through the (held-fixed) critic into the actor; critic
        grads from this pass are discarded by the next zero_grad.
        """
        self.actor_params.zero_grad()
        self.critic_params.zero_grad()
        value = self.critic_forward(Tensor(states), self.actor_forward(Tensor(states)))
        actor_loss = nm.neg(nm.tmean(value))
        nm.backward(actor_loss, self.actor_params)
        self._actor_opt.step(self.actor_params)
        return actor_loss.item()

    def update(self, transitions: list[Transition]) -> dict:
        states = np.stack([t.state for t in transitions])
        actions = np.array([[t.action] for t in transitions])
        rewards = np.array([[t.reward] for t in transitions])
        critic_loss = self.update_critic(states, actions, rewards)
        actor_loss = self.update_actor(states)
        if not (np.isfinite(critic_loss) and np.isfinite(actor_loss)):
            raise nm.NonFiniteError("agent update produced a non-finite loss")
        return {"skipped": False, "critic_loss": critic_loss, "actor_loss": actor_loss}


def agent_update(agent: Agent, buffer: ReplayBuffer, minibatch: int, rng: np.random.Generator) -> dict:
    """One learning step from replay; a no-op while the buffer is underfull."""
    if len(buffer) < minibatch:
        return {"skipped": True, "critic_loss": float("nan"), "actor_loss": float("nan")}
    return agent.update(buffer.sample(rng, minibatch))


def apply_manual_update(model: ReconModel, batch: np.ndarray, step: float) -> float:
    """One raw gradient step theta <- theta - step * grad; returns the
    post-update loss on the same batch. The update persists on the model."""
    if not np.isfinite(step):
        raise nm.NonFiniteError("manual update step is not finite")
    model.params.zero_grad()
    loss = recon_loss(model, batch)
    nm.backward(loss, model.params)
    if step != 0.0:
        for name, p in model.params.items():
            if not np.isfinite(p.grad).all():
                raise nm.NonFiniteError(f"non-finite gradient in '{name}' during manual update")
            p.data = p.data - step * p.grad
    return batch_recon_error(model.reconstruct(batch), batch)


def generate_negatives(model: ReconModel, pos_batch: np.ndarray) -> np.ndarray:
    """Pseudo-anomalous windows: the batch reconstructed through the
    (perturbed) model. One negative per positive, shape preserved."""
    return model.reconstruct(pos_batch)


def calibrate_step_size(
    model: ReconModel,
    windows: np.ndarray,
    band: BandConfig,
    batch_size: int,
    fraction: float = 0.3,
    max_probe_steps: int = 300,
) -> float:
    """Pick a base step so one full-magnitude update near the band moves the
    loss by about ``fraction`` of the band width.

    A raw gradient step changes the loss by roughly step * ||grad||^2, and
    the gradient norm at the band is orders of magnitude larger than at the
    pretrained optimum, so the norm must be measured *at the band*: the probe
    ascends a snapshot of the model with self-normalized steps (each moving
    the loss ~20%) until the loss enters the band, records the gradient norm
    there, then restores the model.
    """
    n = len(windows)
    if n == 0:
        raise ValueError("cannot calibrate on an empty window set")
    snap = model.params.snapshot()
    batch = windows[: min(batch_size, n)]
    grad_sq = None
    try:
        for _ in range(max_probe_steps):
            model.params.zero_grad()
            loss = recon_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise nm.NonFiniteError("step-size probe diverged")
            nm.backward(loss, model.params)
            grad_sq = max(
                sum(float((p.grad**2).sum()) for _, p in model.params.items()), 1e-300
            )
            if value >= band.low:
                break
            trial = 0.2 * value / grad_sq  # ~20% loss growth per probe step
            for _, p in model.params.items():
                p.data = p.data + trial * p.grad
    finally:
        model.params.restore(snap)
        model.params.zero_grad()
    return fraction * (band.up - band.low) / grad_sq


class Stage2Diverged(RuntimeError):
    """Reconstruction loss left the controllable regime; carries the
    trajectory recorded so far for post-mortem logging."""

    def __init__(self, message: str, trajectory: list[Transition]):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class Stage2RLConfig:
    epochs: int = 4
    batch_size: int = 32
    history_len: int = 8  # k losses in the controller state
    buffer_capacity: int = 4096
    minibatch: int = 64
    agent_hidden: int = 32
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    explore_sigma: float = 0.2
    explore_decay: float = 0.95
    policy: str = "rl"  # "rl" or "random" (ablation baseline)
    pool_all: bool = False  # disable boundary gating of the negative pool
    ephemeral_theta: bool = False  # restore weights after each perturbation
    reset_per_epoch: bool = True  # restart each epoch from the pretrained weights

    def __post_init__(self):
        if self.policy not in ("rl", "random"):
            raise ValueError(f"unknown policy '{self.policy}'")


@dataclass
class Stage2Result:
    pos_pool: np.ndarray  # M x w x D
    neg_pool: np.ndarray  # M x w x D, index-aligned with pos_pool
    pool_starts: np.ndarray  # M
    trajectory: list[Transition] = field(default_factory=list)
    in_band_per_epoch: list[float] = field(default_factory=list)
    agent_diagnostics: list[dict] = field(default_factory=list)


def make_agent(cfg: Stage2RLConfig, band: BandConfig, rng: np.random.Generator) -> Agent:
    return Agent(
        state_dim=cfg.history_len + 1,
        hidden=cfg.agent_hidden,
        action_min=band.action_min,
        action_max=band.action_max,
        actor_lr=cfg.actor_lr,
        critic_lr=cfg.critic_lr,
        rng=rng,
    )


def run_stage2_rl(
    model: ReconModel,
    agent: Agent,
    windows: WindowSet,
    band: BandConfig,
    cfg: Stage2RLConfig,
    rng: np.random.Generator,
) -> Stage2Result:
    """Run the controller over the training windows and harvest pools.

    Per batch: build state -> action (exploration noise, clipped) -> signed
    step -> manual parameter update -> pseudo-negative generation -> reward
    -> replay push -> agent update. Negatives enter the pool only when the
    step was a reverse (step < 0) or the post-update loss sits above the
    band floor, unless pool_all is set. Pooling stays dormant until the loss
    reaches the band: reconstructions from the climb toward the band are
    near-copies of their anchors (inside augmentation noise), not boundary
    negatives.

    With reset_per_epoch (the default), each epoch restarts from the
    pretrained weights, so every epoch runs a complete steer-into-band
    episode: the controller keeps facing live control decisions, the pools
    collect negatives from independent boundary trajectories instead of
    replicas of one settled model, and the pooling warm-up re-arms per epoch.
    """
    n = len(windows)
    w, d = model.cfg.width, model.cfg.dims
    buffer = ReplayBuffer(cfg.buffer_capacity)
    trajectory: list[Transition] = []
    diagnostics: list[dict] = []
    pos_parts: list[np.ndarray] = []
    neg_parts: list[np.ndarray] = []
    start_parts: list[np.ndarray] = []
    in_band_per_epoch: list[float] = []
    loss_history: list[float] = []
    prev_update = 0.0
    pooling_active = False
    limit = 1e3 * band.up

    # batches are contiguous window blocks (shuffled block order): batch
    # losses then vary with local signal content, so the controller faces a
    # moving target instead of statistically identical draws
    n_blocks = (n + cfg.batch_size - 1) // cfg.batch_size
    pretrained = model.params.snapshot() if cfg.reset_per_epoch else None
    for epoch in range(cfg.epochs):
        if pretrained is not None and epoch > 0:
            model.params.restore(pretrained)
            pooling_active = False
        sigma = cfg.explore_sigma * (cfg.explore_decay**epoch)
        block_order = rng.permutation(n_blocks)
        epoch_in_band = []
        for block in block_order:
            lo = int(block) * cfg.batch_size
            idx = np.arange(lo, min(lo + cfg.batch_size, n))
            batch = windows.windows[idx]

            model.params.zero_grad()
            loss = recon_loss(model, batch)
            l_before = loss.item()
            if not np.isfinite(l_before) or l_before > limit:
                raise Stage2Diverged(
                    f"stage-2 rl: loss {l_before} beyond control limit {limit}", trajectory
                )
            nm.backward(loss, model.params)
            loss_history.append(l_before)

            state = build_state(loss_history, prev_update, cfg.history_len)
            if cfg.policy == "random":
                action = float(rng.uniform(band.action_min, band.action_max))
            else:
                action = agent.act_explore(state, sigma, rng)
            step = signed_step(action, l_before, band)

            snap = model.params.snapshot() if cfg.ephemeral_theta else None
            if step != 0.0:
                for name, p in model.params.items():
                    if not np.isfinite(p.grad).all():
                        raise nm.NonFiniteError(f"non-finite gradient in '{name}' during manual update")
                    p.data = p.data - step * p.grad
            negatives = generate_negatives(model, batch)
            l_after = batch_recon_error(negatives, batch)

            r = reward(l_before, l_after, band)
            tr = Transition(state, action, step, r, l_before, l_after)
            buffer.push(tr)
            trajectory.append(tr)
            epoch_in_band.append(1.0 if band.contains(l_after) else 0.0)

            if l_after >= band.low:
                pooling_active = True
            if cfg.pool_all or (pooling_active and (step < 0.0 or l_after > band.low)):
                pos_parts.append(batch)
                neg_parts.append(negatives)
                start_parts.append(windows.starts[idx])

            if cfg.policy == "rl":
                diagnostics.append(agent_update(agent, buffer, cfg.minibatch, rng))

            if snap is not None:
                model.params.restore(snap)
            prev_update = step
        if epoch_in_band:
            in_band_per_epoch.append(float(np.mean(epoch_in_band)))

    if pos_parts:
        pos_pool = np.concatenate(pos_parts)
        neg_pool = np.concatenate(neg_parts)
        pool_starts = np.concatenate(start_parts)
    else:
        pos_pool = np.empty((0, w, d))
        neg_pool = np.empty((0, w, d))
        pool_starts = np.empty((0,), dtype=np.int64)
    return Stage2Result(
        pos_pool=pos_pool,
        neg_pool=neg_pool,
        pool_starts=pool_starts,
        trajectory=trajectory,
        in_band_per_epoch=in_band_per_epoch,
        agent_diagnostics=diagnostics,
    )


TRAJECTORY_COLUMNS = ("step", "l_before", "action", "u", "l_after", "reward", "in_band")


def trajectory_rows(trajectory: list[Transition], band: BandConfig):
    """Yield CSV rows (matching TRAJECTORY_COLUMNS) for the trajectory log."""
    for i, tr in enumerate(trajectory):
        yield (
            i,
            repr(tr.loss_before),
            repr(tr.action),
            repr(tr.step),
            repr(tr.loss_after),
            repr(tr.reward),
            int(band.contains(tr.loss_after)),
        )
