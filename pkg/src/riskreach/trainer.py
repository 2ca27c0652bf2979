"""Off-policy TD3 learner with a distributional cost critic and a CVaR penalty.

Per epoch: collect ``N`` episodes with the budget-augmented state (budget
starts at the VaR estimate ``u`` and follows ``e <- (e - c) / gamma``), run
``U`` replay updates (twin task critics, quantile cost critic, delayed
penalised actor, Polyak targets), then step ``u`` by the exceedance rule and
``lambda`` by the projected slack rule.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .navsim import OBS_DIM, NavEnv, ScenarioConfig
from .risk import (
    LagrangeMultiplier,
    VarTracker,
    budget_update,
    cvar_cost_value,
    cvar_cost_value_grad,
    empirical_quantile,
    huber_quantile_loss,
    lambda_update,
    lambda_update_expectation,
    noncrossing_backward,
    noncrossing_quantiles,
    var_update,
)

MODES = ("unconstrained", "expectation", "cvar")
STATE_DIM = OBS_DIM + 1
ACTION_DIM = 2
BUDGET_SCALE = 0.01
BUDGET_CLIP = 5.0

# random stream offsets under the master seed
STREAM_ENV, STREAM_EXPLORE, STREAM_SAMPLER, STREAM_INIT = 0, 1, 2, 3


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    mode: str = "cvar"
    epochs: int = 100
    episodes_per_epoch: int = 70
    updates_per_epoch: int = 2000
    batch_size: int = 128
    gamma: float = 0.99
    alpha: float = 0.9
    budget: float = 10.0
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    hidden: int = 26
    n_quantiles: int = 32
    kappa: float = 1.0
    var_lr: float = 0.05
    lambda_lr: float = 0.01
    lambda_init: float = 0.0
    lambda_max: float = 100.0
    explore_noise: float = 0.1
    explore_noise_start: float = 1.0
    explore_decay_epochs: int = 30
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    policy_delay: int = 2
    rho: float = 0.995
    warmup_episodes: int = 70
    replay_capacity: int = 200_000

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        for name in ("epochs", "episodes_per_epoch", "batch_size", "hidden", "n_quantiles",
                     "policy_delay", "warmup_episodes", "replay_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.explore_noise, self.explore_noise_start, self.target_noise) < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.updates_per_epoch < 0:
            raise ValueError("updates_per_epoch must be nonnegative")
        if self.budget <= 0 or self.kappa <= 0 or self.lambda_max <= 0:
            raise ValueError("budget, kappa and lambda_max must be positive")
        return self


def augment(obs, e):
    """Policy/critic input: observation plus the scaled, clipped budget."""
    s = np.empty(STATE_DIM)
    s[:OBS_DIM] = obs
    s[OBS_DIM] = min(max(e * BUDGET_SCALE, -BUDGET_CLIP), BUDGET_CLIP)
    return s


def augment_batch(obs, e):
    feat = np.clip(np.asarray(e) * BUDGET_SCALE, -BUDGET_CLIP, BUDGET_CLIP)
    return np.concatenate([obs, feat[:, None]], axis=1)


def make_actor(hidden, scenario: ScenarioConfig, rng=None) -> nn.DenseNet:
    """``STATE_DIM -> hidden (tanh) -> 2 (tanh) -> 2 (identity)``; the last
    layer is a frozen rescale from ``[-1, 1]^2`` into the action box."""
    net = nn.DenseNet([STATE_DIM, hidden, ACTION_DIM, ACTION_DIM], ["tanh", "tanh", "identity"], rng=rng)
    last = net.layers[-1]
    last.W[...] = np.diag([0.5 * scenario.v_max, scenario.w_max])
    last.b[...] = [0.5 * scenario.v_max, 0.0]
    return net


def actor_trainable_mask(actor: nn.DenseNet) -> np.ndarray:
    mask = np.ones_like(actor.params)
    start, stop = actor.layer_slices()[-1]
    mask[start:stop] = 0.0
    return mask


class CostCritic:
    """Shared trunk ``h`` plus a linear head emitting ``[f_phi (M), f_k, f_d]``."""

    def __init__(self, hidden, n_quantiles, rng=None, trunk=None, head=None):
        self.trunk = trunk or nn.DenseNet([STATE_DIM + ACTION_DIM, hidden], ["relu"], rng=rng)
        self.head = head or nn.DenseNet([hidden, n_quantiles + 2], ["identity"], rng=rng)
        self.M = self.head.out_dim - 2

    def copy(self) -> "CostCritic":
        return CostCritic(0, 0, trunk=self.trunk.copy(), head=self.head.copy())

    def quantiles(self, x):
        return noncrossing_quantiles(self.head(self.trunk(x)))[0]

    def forward_cache(self, x):
        h, c_trunk = self.trunk.forward_cache(x)
        raw, c_head = self.head.forward_cache(h)
        q, c_q = noncrossing_quantiles(raw)
        return q, (c_trunk, c_head, c_q)

    def backward(self, cache, grad_q):
        c_trunk, c_head, c_q = cache
        g_raw = noncrossing_backward(c_q, grad_q)
        g_head, g_h = self.head.backward(c_head, g_raw)
        g_trunk, g_x = self.trunk.backward(c_trunk, g_h)
        return g_trunk, g_head, g_x


class ReplayBuffer:
    def __init__(self, capacity, rng):
        self.capacity = capacity
        self.rng = rng
        self.obs = np.zeros((capacity, OBS_DIM))
        self.e = np.zeros(capacity)
        self.act = np.zeros((capacity, ACTION_DIM))
        self.rew = np.zeros(capacity)
        self.cost = np.zeros(capacity)
        self.obs2 = np.zeros((capacity, OBS_DIM))
        self.e2 = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def add_episode(self, ep: "Episode"):
        for t in range(len(ep.rewards)):
            i = self.ptr
            self.obs[i] = ep.obs[t]
            self.e[i] = ep.budgets[t]
            self.act[i] = ep.actions[t]
            self.rew[i] = ep.rewards[t]
            self.cost[i] = ep.costs[t]
            self.obs2[i] = ep.obs[t + 1]
            self.e2[i] = ep.budgets[t + 1]
            self.done[i] = 1.0 if ep.terminal_flags[t] else 0.0
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size):
        idx = self.rng.integers(0, self.size, size=batch_size)
        return Batch(
            s=augment_batch(self.obs[idx], self.e[idx]),
            e=self.e[idx],
            a=self.act[idx],
            r=self.rew[idx],
            c=self.cost[idx],
            s2=augment_batch(self.obs2[idx], self.e2[idx]),
            e2=self.e2[idx],
            done=self.done[idx],
        )


@dataclass
class Batch:
    s: np.ndarray
    e: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s2: np.ndarray
    e2: np.ndarray
    done: np.ndarray


@dataclass
class Episode:
    obs: list = field(default_factory=list)  # T + 1 observations
    budgets: list = field(default_factory=list)  # T + 1 budgets
    poses: list = field(default_factory=list)  # T + 1 poses
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    d_min: list = field(default_factory=list)
    terminal_flags: list = field(default_factory=list)  # bootstrap cut (collision/goal)
    status: str = "running"
    scenario_seed: int = 0

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


class Agent:
    def __init__(self, cfg: TrainConfig, scenario: ScenarioConfig, rng):
        self.cfg = cfg
        self.scenario = scenario
        self.action_low = np.array([0.0, -scenario.w_max])
        self.action_high = np.array([scenario.v_max, scenario.w_max])
        self.actor = make_actor(cfg.hidden, scenario, rng)
        self.critics = [nn.DenseNet([STATE_DIM + ACTION_DIM, cfg.hidden, 1], ["relu", "identity"], rng=rng)
                        for _ in range(2)]
        self.cost = CostCritic(cfg.hidden, cfg.n_quantiles, rng)
        self.actor_t = self.actor.copy()
        self.critics_t = [c.copy() for c in self.critics]
        self.cost_t = self.cost.copy()
        self.actor_mask = actor_trainable_mask(self.actor)
        self.actor_opt = nn.Adam(self.actor.params.size, cfg.actor_lr)
        self.critic_opts = [nn.Adam(c.params.size, cfg.critic_lr) for c in self.critics]
        self.trunk_opt = nn.Adam(self.cost.trunk.params.size, cfg.critic_lr)
        self.head_opt = nn.Adam(self.cost.head.params.size, cfg.critic_lr)
        self.critic_updates = 0
        self.actor_updates = 0

    def act(self, state):
        return self.actor(state)

    def networks(self):
        return {
            "actor": self.actor,
            "critic1": self.critics[0],
            "critic2": self.critics[1],
            "cost_trunk": self.cost.trunk,
            "cost_head": self.cost.head,
        }

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(net.params)) for net in self.networks().values())


def collect_episode(env: NavEnv, agent: Agent, u: float, noise: float, rng, scenario_seed: int,
                    gamma: float, eval_index: int | None = None) -> Episode:
    """Roll out one episode with budget augmentation; ``noise`` is the std of
    Gaussian exploration noise in action units (0 for deterministic)."""
    if eval_index is None:
        arena, pose, obs = env.reset(scenario_seed)
    else:
        arena, pose, obs = env.reset_eval(eval_index)
    ep = Episode(scenario_seed=scenario_seed)
    e = u
    ep.obs.append(obs)
    ep.budgets.append(e)
    ep.poses.append((pose.x, pose.y, pose.theta))
    low, high = agent.action_low, agent.action_high
    while True:
        a = agent.act(augment(obs, e))
        if noise > 0.0:
            a = a + rng.normal(0.0, noise, size=ACTION_DIM)
        a = np.minimum(np.maximum(a, low), high)
        out = env.step(a)
        e = budget_update(e, out.cost, gamma)
        obs = out.observation
        ep.actions.append(a)
        ep.rewards.append(out.reward)
        ep.costs.append(out.cost)
        ep.d_min.append(out.d_min)
        ep.terminal_flags.append(out.status in ("collision", "goal"))
        ep.obs.append(obs)
        ep.budgets.append(e)
        ep.poses.append((out.pose.x, out.pose.y, out.pose.theta))
        if out.status != "running":
            ep.status = out.status
            return ep


def warmup_var_init(env: NavEnv, agent: Agent, n_episodes: int, alpha: float, noise: float, rng,
                    seed_rng, gamma: float):
    """Empirical alpha-quantile of undiscounted episode costs under the
    untrained policy; no parameters change."""
    if n_episodes <= 0:
        raise ValueError("warm-up needs at least one episode")
    costs = []
    for _ in range(n_episodes):
        ep = collect_episode(env, agent, 0.0, noise, rng, int(seed_rng.integers(2 ** 31)), gamma)
        costs.append(ep.total_cost)
    return empirical_quantile(costs, alpha), costs


def td3_target(batch: Batch, agent: Agent, gamma: float, sigma: float, clip: float, rng):
    """Clipped double-Q target with target-policy smoothing. Returns ``(y, a')``."""
    a2 = agent.actor_t(batch.s2)
    if sigma > 0.0:
        a2 = a2 + np.clip(rng.normal(0.0, sigma, size=a2.shape), -clip, clip)
    a2 = np.minimum(np.maximum(a2, agent.action_low), agent.action_high)
    x2 = np.concatenate([batch.s2, a2], axis=1)
    q1 = agent.critics_t[0](x2)[:, 0]
    q2 = agent.critics_t[1](x2)[:, 0]
    y = batch.r + gamma * (1.0 - batch.done) * np.minimum(q1, q2)
    return y, a2


def task_critic_loss(critics, x, y):
    """``sum_i mean((Q_i - y)^2)`` and per-critic parameter gradients."""
    total = 0.0
    grads = []
    B = x.shape[0]
    for critic in critics:
        q, cache = critic.forward_cache(x)
        diff = q[:, 0] - y
        total += float(np.mean(diff * diff))
        g, _ = critic.backward(cache, (2.0 / B) * diff[:, None])
        grads.append(g)
    return total, grads


def cost_critic_loss(cost: CostCritic, cost_t: CostCritic, x, x2, c, done, gamma, kappa):
    """Quantile Huber loss with ``delta_ij = c + gamma q_j(s', a') - q_i(s, a)``."""
    target = c[:, None] + gamma * (1.0 - done)[:, None] * cost_t.quantiles(x2)
    q, cache = cost.forward_cache(x)
    loss, gq = huber_quantile_loss(q, target, kappa)
    g_trunk, g_head, _ = cost.backward(cache, gq)
    return loss, g_trunk, g_head


def actor_loss(agent: Agent, s, e, lam: float, mode: str):
    """``-mean Q1(s, pi(s)) + lam * mean V_C(s, pi(s))`` and its actor gradient."""
    B = s.shape[0]
    a, a_cache = agent.actor.forward_cache(s)
    x = np.concatenate([s, a], axis=1)
    q, q_cache = agent.critics[0].forward_cache(x)
    loss = -float(np.mean(q))
    _, gx = agent.critics[0].backward(q_cache, np.full((B, 1), -1.0 / B))
    ga = gx[:, STATE_DIM:]
    if lam != 0.0:
        qc, c_cache = agent.cost.forward_cache(x)
        thresh = e if mode == "cvar" else np.full(B, -np.inf)
        v = cvar_cost_value(qc, thresh)
        loss += lam * float(np.mean(v))
        gq = (lam / B) * cvar_cost_value_grad(qc, thresh)
        _, _, gx_c = agent.cost.backward(c_cache, gq)
        ga = ga + gx_c[:, STATE_DIM:]
    g_actor, _ = agent.actor.backward(a_cache, ga)
    return loss, g_actor


def update_critics(agent: Agent, batch: Batch, rng, train_cost: bool = True):
    cfg = agent.cfg
    y, a2 = td3_target(batch, agent, cfg.gamma, cfg.target_noise, cfg.target_noise_clip, rng)
    x = np.concatenate([batch.s, batch.a], axis=1)
    lq, grads = task_critic_loss(agent.critics, x, y)
    for critic, opt, g in zip(agent.critics, agent.critic_opts, grads):
        nn.grad_step(critic, g, opt)
    lc = float("nan")
    if train_cost:
        x2 = np.concatenate([batch.s2, a2], axis=1)
        lc, g_trunk, g_head = cost_critic_loss(agent.cost, agent.cost_t, x, x2, batch.c, batch.done,
                                               cfg.gamma, cfg.kappa)
        nn.grad_step(agent.cost.trunk, g_trunk, agent.trunk_opt)
        nn.grad_step(agent.cost.head, g_head, agent.head_opt)
    if not (math.isfinite(lq) and (not train_cost or math.isfinite(lc))):
        raise TrainingDiverged(f"non-finite critic loss (task {lq}, cost {lc})")
    agent.critic_updates += 1
    return lq, lc


def update_actor(agent: Agent, batch: Batch, lam: float):
    cfg = agent.cfg
    loss, g = actor_loss(agent, batch.s, batch.e, lam, cfg.mode)
    nn.grad_step(agent.actor, g, agent.actor_opt, agent.actor_mask)
    agent.actor_updates += 1
    nn.polyak_update(agent.actor_t, agent.actor, cfg.rho)
    for tgt, src in zip(agent.critics_t, agent.critics):
        nn.polyak_update(tgt, src, cfg.rho)
    nn.polyak_update(agent.cost_t.trunk, agent.cost.trunk, cfg.rho)
    nn.polyak_update(agent.cost_t.head, agent.cost.head, cfg.rho)
    return loss


HISTORY_COLUMNS = [
    "epoch", "episodes", "mean_reward", "mean_cost", "successes", "collisions", "timeouts",
    "u", "lambda", "exceedance", "critic_loss", "cost_loss", "actor_loss",
    "critic_updates", "actor_updates",
]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def history_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def exploration_noise(cfg: TrainConfig, epoch: int) -> float:
    """Linear decay from ``explore_noise_start`` to ``explore_noise`` over the
    first ``explore_decay_epochs`` epochs (1-based)."""
    if cfg.explore_decay_epochs <= 0:
        return cfg.explore_noise
    frac = min(max((epoch - 1) / cfg.explore_decay_epochs, 0.0), 1.0)
    return cfg.explore_noise_start + frac * (cfg.explore_noise - cfg.explore_noise_start)


@dataclass
class TrainResult:
    agent: Agent
    tracker: VarTracker
    multiplier: LagrangeMultiplier
    history: list
    warmup_costs: list
    u0: float


def train(cfg: TrainConfig, scenario: ScenarioConfig, seed: int, on_epoch=None,
          cost_override=None) -> TrainResult:
    """Full constrained training run.

    ``on_epoch(result_so_far)`` is called after each epoch (used for
    checkpointing). ``cost_override`` replaces the environment cost with a
    constant (tests use 0 to compare against the unconstrained learner).
    """
    cfg.validate()
    env_rng = np.random.default_rng([seed, STREAM_ENV])
    explore_rng = np.random.default_rng([seed, STREAM_EXPLORE])
    sampler_rng = np.random.default_rng([seed, STREAM_SAMPLER])
    init_rng = np.random.default_rng([seed, STREAM_INIT])
    env = NavEnv(scenario)
    if cost_override is not None:
        env = _CostOverrideEnv(env, cost_override)
    agent = Agent(cfg, scenario, init_rng)
    buffer = ReplayBuffer(cfg.replay_capacity, sampler_rng)

    u0, warm_costs = warmup_var_init(env, agent, cfg.warmup_episodes, cfg.alpha, cfg.explore_noise,
                                     explore_rng, env_rng, cfg.gamma)
    tracker = VarTracker(u0, cfg.alpha, cfg.var_lr)
    lm = LagrangeMultiplier(cfg.lambda_init, cfg.lambda_lr, cfg.lambda_max, cfg.budget)
    train_cost = cfg.mode != "unconstrained"
    history = []
    result = TrainResult(agent, tracker, lm, history, warm_costs, u0)
    for epoch in range(1, cfg.epochs + 1):
        costs, rewards, status = [], [], []
        noise = exploration_noise(cfg, epoch)
        for _ in range(cfg.episodes_per_epoch):
            ep = collect_episode(env, agent, tracker.u, noise, explore_rng,
                                 int(env_rng.integers(2 ** 31)), cfg.gamma)
            buffer.add_episode(ep)
            costs.append(ep.total_cost)
            rewards.append(ep.total_reward)
            status.append(ep.status)
        lq_sum = lc_sum = la_sum = 0.0
        n_q = n_a = 0
        for _ in range(cfg.updates_per_epoch):
            if buffer.size < cfg.batch_size:
                break
            batch = buffer.sample(cfg.batch_size)
            lq, lc = update_critics(agent, batch, sampler_rng, train_cost)
            lq_sum += lq
            lc_sum += lc if train_cost else 0.0
            n_q += 1
            if agent.critic_updates % cfg.policy_delay == 0:
                la_sum += update_actor(agent, batch, lm.value if cfg.mode != "unconstrained" else 0.0)
                n_a += 1
        if not agent.all_finite():
            result.tracker, result.multiplier = tracker, lm
            if on_epoch is not None:
                on_epoch(result)
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        u_k = tracker.u
        tracker, p_hat = var_update(tracker, costs)
        mean_cost = float(np.mean(costs))
        if cfg.mode == "cvar":
            lm = lambda_update(lm, u_k, mean_cost)
        elif cfg.mode == "expectation":
            lm = lambda_update_expectation(lm, mean_cost)
        history.append({
            "epoch": epoch,
            "episodes": len(costs),
            "mean_reward": float(np.mean(rewards)),
            "mean_cost": mean_cost,
            "successes": status.count("goal"),
            "collisions": status.count("collision"),
            "timeouts": status.count("timeout"),
            "u": float(tracker.u),
            "lambda": float(lm.value),
            "exceedance": float(p_hat),
            "critic_loss": lq_sum / n_q if n_q else 0.0,
            "cost_loss": lc_sum / n_q if n_q else 0.0,
            "actor_loss": la_sum / n_a if n_a else 0.0,
            "critic_updates": agent.critic_updates,
            "actor_updates": agent.actor_updates,
        })
        result.tracker, result.multiplier = tracker, lm
        if on_epoch is not None:
            on_epoch(result)
    return result


class _CostOverrideEnv:
    def __init__(self, env: NavEnv, cost: int):
        self._env = env
        self._cost = cost

    def __getattr__(self, name):
        return getattr(self._env, name)

    def step(self, action):
        from dataclasses import replace
        return replace(self._env.step(action), cost=self._cost)


def evaluate_policy(actor: nn.DenseNet, scenario: ScenarioConfig, u: float, gamma: float):
    """Noise-free rollouts on every fixed evaluation pair."""
    env = NavEnv(scenario)

    class _Greedy:
        action_low = np.array([0.0, -scenario.w_max])
        action_high = np.array([scenario.v_max, scenario.w_max])

        @staticmethod
        def act(state):
            return actor(state)

    return [collect_episode(env, _Greedy, u, 0.0, None, scenario.eval_map_seed + i, gamma, eval_index=i)
            for i in range(len(scenario.eval_pairs))]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**d)


def save_agent(agent: Agent, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in agent.networks().items():
        nn.save(net, directory / f"{name}.txt")
