"""PPO with a clipped surrogate, GAE and Adam, plus two-stage orchestration.

Collection is synchronous: one batched policy forward per control step, then
each env advances in index order (optionally on a thread pool; the numba
physics kernel releases the GIL). All random draws come from a single
generator in a fixed order, so the worker count never changes the result.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import policy as pol
from .dynamics import RobotState
from .env import StepResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatch: int = 512
    horizon: int = 256
    n_envs: int = 16
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    updates: int = 300
    seed: int = 0
    checkpoint_every: int = 25
    scale_rewards: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        for name in ("epochs", "minibatch", "horizon", "n_envs", "updates", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


class PPOUpdateError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    """Arrays shaped (horizon, n_envs, ...) until :meth:`flat` is called."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray           # as used for learning (possibly scaled)
    values: np.ndarray
    next_values: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    raw_rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    term_sums: dict = field(default_factory=dict)

    def __len__(self):
        return self.rewards.size

    def flat(self):
        """(obs, actions, log_probs, advantages, returns) flattened env-major."""
        def f(a):
            a = np.swapaxes(a, 0, 1)
            return a.reshape(-1, *a.shape[2:])
        return f(self.obs), f(self.actions), f(self.log_probs), f(self.advantages), f(self.returns)


class RewardScaler:
    """Divides rewards by the running std of the discounted return.

    Statistics are updated once per control step from all envs in index
    order, so the result does not depend on the worker count.
    """

    def __init__(self, n_envs: int, gamma: float, eps: float = 1e-8):
        self.gamma = gamma
        self.eps = eps
        self.ret = np.zeros(n_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def __call__(self, rewards, dones):
        self.ret = self.ret * self.gamma + rewards
        for x in self.ret:
            self.count += 1
            d = x - self.mean
            self.mean += d / self.count
            self.m2 += d * (x - self.mean)
        var = self.m2 / self.count if self.count > 1 else 1.0
        self.ret[np.asarray(dones, dtype=bool)] = 0.0
        return rewards / math.sqrt(var + self.eps)

    def state_dict(self):
        return dict(ret=[repr(float(x)) for x in self.ret], count=self.count,
                    mean=repr(float(self.mean)), m2=repr(float(self.m2)))

    def load_state_dict(self, d):
        self.ret = np.array([float(x) for x in d["ret"]])
        self.count = int(d["count"])
        self.mean = float(d["mean"])
        self.m2 = float(d["m2"])


class RolloutCollector:
    """Keeps envs, their running episode statistics and the sampling rng."""

    def __init__(self, envs, rng: np.random.Generator, workers: int = 1,
                 scaler: RewardScaler | None = None):
        self.envs = envs
        self.rng = rng
        self.workers = max(1, int(workers))
        self.scaler = scaler
        self.obs = None
        self.ep_return = np.zeros(len(envs))
        self.ep_len = np.zeros(len(envs), dtype=int)

    def start(self):
        self.obs = np.array([env.reset() for env in self.envs])
        self.ep_return[:] = 0.0
        self.ep_len[:] = 0

    def _step_all(self, actions):
        if self.workers == 1:
            return [env.step(a) for env, a in zip(self.envs, actions)]
        with ThreadPoolExecutor(self.workers) as ex:
            return list(ex.map(lambda ea: ea[0].step(ea[1]), zip(self.envs, actions)))

    def collect(self, params: pol.PolicyParams, horizon: int) -> RolloutBatch:
        if self.obs is None:
            self.start()
        n = len(self.envs)
        d = self.obs.shape[1]
        B = dict(obs=np.zeros((horizon, n, d)), actions=np.zeros((horizon, n, 4)),
                 log_probs=np.zeros((horizon, n)), rewards=np.zeros((horizon, n)),
                 raw_rewards=np.zeros((horizon, n)),
                 values=np.zeros((horizon, n)), next_values=np.zeros((horizon, n)),
                 terminated=np.zeros((horizon, n), dtype=bool),
                 truncated=np.zeros((horizon, n), dtype=bool))
        ep_returns, ep_lengths = [], []
        term_sums = {}
        for t in range(horizon):
            obs = self.obs
            mean = pol.actor_forward(params, obs)
            values = pol.critic_forward(params, obs)
            log_std = params["log_std"]
            actions = mean + np.exp(log_std) * self.rng.standard_normal(mean.shape)
            logp = pol.gaussian_log_prob(mean, log_std, actions)
            results: list[StepResult] = self._step_all(actions)
            next_obs = np.array([r.observation for r in results])
            B["obs"][t] = obs
            B["actions"][t] = actions
            B["log_probs"][t] = logp
            B["values"][t] = values
            raw = np.array([r.reward for r in results])
            B["terminated"][t] = [r.terminated for r in results]
            B["truncated"][t] = [r.truncated for r in results]
            B["raw_rewards"][t] = raw
            B["rewards"][t] = raw if self.scaler is None else self.scaler(
                raw, B["terminated"][t] | B["truncated"][t])
            # successor values: true next state, even if the episode ends here
            B["next_values"][t] = pol.critic_forward(params, next_obs)
            for i, r in enumerate(results):
                for k, v in r.info.get("terms", {}).items():
                    term_sums[k] = term_sums.get(k, 0.0) + v
                self.ep_return[i] += r.reward
                self.ep_len[i] += 1
                if r.terminated or r.truncated:
                    ep_returns.append(self.ep_return[i])
                    ep_lengths.append(int(self.ep_len[i]))
                    self.ep_return[i] = 0.0
                    self.ep_len[i] = 0
                    next_obs[i] = self.envs[i].reset()
            self.obs = next_obs
        batch = RolloutBatch(**B)
        batch.episode_returns = ep_returns
        batch.episode_lengths = ep_lengths
        batch.term_sums = term_sums
        return batch


def collect_rollouts(envs, params, horizon, rng, workers: int = 1) -> RolloutBatch:
    """Fresh-start collection over ``envs`` (resets them first)."""
    c = RolloutCollector(envs, rng, workers)
    c.start()
    return c.collect(params, horizon)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Generalized advantage estimation along axis 0.

    Termination cuts bootstrapping; truncation bootstraps from V(s_{t+1}) but
    still stops the advantage recursion.
    """
    r = batch.rewards
    T = r.shape[0]
    not_term = 1.0 - batch.terminated.astype(float)
    not_done = 1.0 - (batch.terminated | batch.truncated).astype(float)
    delta = r + gamma * batch.next_values * not_term - batch.values
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        running = delta[t] + gamma * lam * not_done[t] * running
        adv[t] = running
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


# ---------------------------------------------------------------------------
# loss, gradients, optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: pol.PolicyParams, cfg: PpoConfig | None = None):
        cfg = cfg or PpoConfig()
        return cls(np.zeros(params.size), np.zeros(params.size), 0, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def apply(self, params: pol.PolicyParams, grad: np.ndarray, lr: float) -> None:
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        params.set_flat(params.flat() - lr * mhat / (np.sqrt(vhat) + self.eps))
        params.clamp_log_std()


def ppo_loss_and_grad(params: pol.PolicyParams, obs, actions, old_logp, adv, returns,
                      cfg: PpoConfig, with_grad: bool = True):
    """Clipped-surrogate PPO loss on one minibatch, with its exact gradient."""
    n = obs.shape[0]
    log_std = params["log_std"]
    mean = pol.actor_forward(params, obs)
    value = pol.critic_forward(params, obs)
    logp = pol.gaussian_log_prob(mean, log_std, actions)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -surr.mean()
    value_loss = np.mean((value - returns) ** 2)
    entropy = pol.gaussian_entropy(log_std)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    diag = dict(loss=float(loss), policy_loss=float(policy_loss), value_loss=float(value_loss),
                entropy=float(entropy),
                approx_kl=float(np.mean((ratio - 1) - (logp - old_logp))),
                clip_frac=float(np.mean(np.abs(ratio - 1) > cfg.clip)))
    if not with_grad:
        return loss, None, diag
    # d min(r A, clip(r) A) / d logp = r A where the unclipped branch is active
    active = (ratio * adv <= clipped * adv) | ((ratio >= 1 - cfg.clip) & (ratio <= 1 + cfg.clip))
    g_logp = -(active * ratio * adv) / n
    inv_var = np.exp(-2 * log_std)
    z = actions - mean
    g_mean = g_logp[:, None] * z * inv_var
    g_log_std = (g_logp[:, None] * (z * z * inv_var - 1.0)).sum(axis=0) - cfg.entropy_coef
    g_value = cfg.value_coef * 2.0 * (value - returns) / n
    grads = pol.backward(params, obs, grad_mean=g_mean, grad_value=g_value, grad_log_std=g_log_std)
    return loss, grads, diag


def ppo_update(params: pol.PolicyParams, opt: OptimizerState, batch: RolloutBatch,
               cfg: PpoConfig, rng: np.random.Generator):
    """Several epochs of minibatch Adam steps. Returns (new params, diagnostics)."""
    params = params.copy()
    obs, actions, old_logp, adv, returns = batch.flat()
    adv = normalize_advantages(adv)
    n = obs.shape[0]
    mb = min(cfg.minibatch, n)
    acc = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            loss, grads, diag = ppo_loss_and_grad(params, obs[idx], actions[idx], old_logp[idx],
                                                  adv[idx], returns[idx], cfg)
            g = grads.flat()
            gnorm = float(np.sqrt(g @ g))
            diag["grad_norm"] = gnorm
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise PPOUpdateError(f"non-finite loss/gradient (loss={loss}, |g|={gnorm})", diag)
            if gnorm > cfg.max_grad_norm:
                g = g * (cfg.max_grad_norm / gnorm)
            opt.apply(params, g, cfg.lr)
            for k, v in diag.items():
                acc[k] = acc.get(k, 0.0) + v
            count += 1
    return params, {k: v / count for k, v in acc.items()}


# ---------------------------------------------------------------------------
# toy environment used to sanity-check learning


class PointMassEnv:
    """1-D point mass driven by velocity commands; reward -|x - target|."""

    obs_dim = 2

    def __init__(self, seed: int = 0, instance: int = 0, max_steps: int = 50, dt: float = 0.1):
        self.rng = np.random.default_rng(seed + instance)
        self.max_steps = max_steps
        self.dt = dt
        self.done = True

    def reset(self, rng=None):
        rng = rng if rng is not None else self.rng
        self.x = float(rng.uniform(-2, 2))
        self.target = float(rng.uniform(-1, 1))
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self):
        return np.array([self.x - self.target, self.target])

    def step(self, action):
        self.x += self.dt * float(np.clip(action[0], -2.0, 2.0))
        self.steps += 1
        reward = -abs(self.x - self.target)
        truncated = self.steps >= self.max_steps
        self.done = truncated
        return StepResult(self.observe(), reward, False, truncated, {})


# ---------------------------------------------------------------------------
# checkpoints and orchestration

_ADAM_HEADER = "locoforge-adam v1"


def save_optimizer(opt: OptimizerState, path) -> None:
    header = f"{_ADAM_HEADER} n={opt.m.size} step={opt.step} beta1={opt.beta1!r} beta2={opt.beta2!r} eps={opt.eps!r}"
    pol._write_flat(path, header, np.concatenate([opt.m, opt.v]))


def load_optimizer(path) -> OptimizerState:
    header, values = pol._read_flat(path)
    f = pol._parse_header(header, _ADAM_HEADER)
    n = int(f["n"])
    if values.size != 2 * n:
        raise pol.CheckpointError(f"{path}: expected {2 * n} values, found {values.size}")
    return OptimizerState(values[:n].copy(), values[n:].copy(), int(f["step"]),
                          float(f["beta1"]), float(f["beta2"]), float(f["eps"]))


def _env_snapshot(env) -> dict:
    s = env.state
    return dict(q=[repr(float(x)) for x in s.q], v=[repr(float(x)) for x in s.v], t=repr(s.t),
                anchors=[repr(float(x)) for x in s.anchors],
                ground_height=repr(env.ground.height), friction=repr(env.ground.friction_coeff),
                steps=env.steps, done=env.done, start_frame=env.start_frame,
                prev_torque=None if env.prev_torque is None else [repr(float(x)) for x in env.prev_torque],
                rng=env.rng.bit_generator.state)


def _env_restore(env, snap: dict) -> None:
    from dataclasses import replace
    f = lambda xs: np.array([float(x) for x in xs])
    env.state = RobotState(q=f(snap["q"]), v=f(snap["v"]), t=float(snap["t"]), anchors=f(snap["anchors"]))
    env.ground = replace(env.base_ground, height=float(snap["ground_height"]),
                         friction_coeff=float(snap["friction"]))
    env.steps = snap["steps"]
    env.done = snap["done"]
    env.start_frame = snap["start_frame"]
    env.prev_torque = None if snap["prev_torque"] is None else f(snap["prev_torque"])
    env.rng.bit_generator.state = snap["rng"]


LOG_DIAG = ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac", "grad_norm")


def log_columns(term_names) -> list[str]:
    return (["update", "env_steps", "episodes", "mean_return", "mean_ep_len", "mean_step_reward"]
            + [f"mean_{t}" for t in term_names] + list(LOG_DIAG) + ["log_std_mean"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Trainer:
    """Runs collect -> GAE -> update for one stage, with exact resume support.

    The run directory holds ``policy_XXXX.txt`` / ``adam_XXXX.txt`` /
    ``trainer_XXXX.json`` triples, ``policy_final.txt`` and ``train_log.csv``.
    """

    def __init__(self, envs, params: pol.PolicyParams, cfg: PpoConfig, out_dir=None,
                 term_names=(), workers: int = 1, opt: OptimizerState | None = None):
        self.envs = envs
        self.params = params
        self.cfg = cfg
        self.opt = opt or OptimizerState.for_params(params, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        scaler = RewardScaler(len(envs), cfg.gamma) if cfg.scale_rewards else None
        self.collector = RolloutCollector(envs, self.rng, workers, scaler)
        self.term_names = tuple(term_names)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.update = 0
        self.rows = []

    # -- persistence ---------------------------------------------------

    def checkpoint(self):
        if self.out_dir is None:
            return
        tag = f"{self.update:04d}"
        pol.save_params(self.params, self.out_dir / f"policy_{tag}.txt")
        save_optimizer(self.opt, self.out_dir / f"adam_{tag}.txt")
        state = dict(update=self.update, rng=self.rng.bit_generator.state,
                     obs=None if self.collector.obs is None else [[repr(float(x)) for x in o] for o in self.collector.obs],
                     ep_return=[repr(float(x)) for x in self.collector.ep_return],
                     ep_len=[int(x) for x in self.collector.ep_len],
                     envs=[_env_snapshot(e) for e in self.envs] if self.collector.obs is not None else None,
                     scaler=None if self.collector.scaler is None else self.collector.scaler.state_dict())
        (self.out_dir / f"trainer_{tag}.json").write_text(json.dumps(state))

    def restore(self, tag_or_update):
        tag = f"{int(tag_or_update):04d}"
        self.params = pol.load_params(self.out_dir / f"policy_{tag}.txt")
        self.opt = load_optimizer(self.out_dir / f"adam_{tag}.txt")
        state = json.loads((self.out_dir / f"trainer_{tag}.json").read_text())
        self.update = state["update"]
        self.rng.bit_generator.state = state["rng"]
        if state["obs"] is not None:
            self.collector.obs = np.array([[float(x) for x in o] for o in state["obs"]])
            self.collector.ep_return = np.array([float(x) for x in state["ep_return"]])
            self.collector.ep_len = np.array(state["ep_len"], dtype=int)
            for env, snap in zip(self.envs, state["envs"]):
                _env_restore(env, snap)
        if self.collector.scaler is not None and state.get("scaler"):
            self.collector.scaler.load_state_dict(state["scaler"])
        log_path = self.out_dir / "train_log.csv"
        if log_path.exists():
            with open(log_path) as fh:
                lines = fh.read().splitlines()
            # keep the header plus the rows written before this checkpoint
            log_path.write_text("\n".join(lines[:1 + self.update]) + "\n")

    # -- loop ----------------------------------------------------------

    def _write_row(self, row):
        self.rows.append(row)
        if self.out_dir is None:
            return
        path = self.out_dir / "train_log.csv"
        cols = log_columns(self.term_names)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(cols)
            w.writerow([_fmt(row[c]) for c in cols])

    def run(self, updates: int | None = None, stop_after: int | None = None):
        updates = updates or self.cfg.updates
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if self.update == 0:
                (self.out_dir / "train_log.csv").unlink(missing_ok=True)
                self.checkpoint()
        done_here = 0
        while self.update < updates:
            batch = self.collector.collect(self.params, self.cfg.horizon)
            compute_gae(batch, self.cfg.gamma, self.cfg.lam)
            self.params, diag = ppo_update(self.params, self.opt, batch, self.cfg, self.rng)
            self.update += 1
            n_steps = len(batch)
            row = dict(update=self.update, env_steps=self.update * n_steps,
                       episodes=len(batch.episode_returns),
                       mean_return=float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
                       mean_ep_len=float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float("nan"),
                       mean_step_reward=float(batch.raw_rewards.mean()),
                       log_std_mean=float(self.params["log_std"].mean()))
            for t in self.term_names:
                row[f"mean_{t}"] = batch.term_sums.get(t, 0.0) / n_steps
            for k in LOG_DIAG:
                row[k] = diag[k]
            self._write_row(row)
            log.info("update %d  return %.3f  len %.1f  kl %.4f", self.update, row["mean_return"],
                     row["mean_ep_len"], diag["approx_kl"])
            if self.update % self.cfg.checkpoint_every == 0 or self.update == updates:
                self.checkpoint()
            done_here += 1
            if stop_after is not None and done_here >= stop_after:
                break
        if self.out_dir is not None and self.update >= updates:
            pol.save_params(self.params, self.out_dir / "policy_final.txt")
        return self.params


def warm_start(params: pol.PolicyParams, log_std: float = pol.LOG_STD_INIT) -> pol.PolicyParams:
    """Stage-2 initial parameters: copy actor and critic, reset exploration."""
    p = params.copy()
    p["log_std"] = log_std
    return p


def fresh_params(obs_dim: int, seed: int) -> pol.PolicyParams:
    return pol.init_params(obs_dim, np.random.default_rng([seed, 7]))


def evaluate_policy(make_env, params: pol.PolicyParams, episodes: int, seed: int,
                    deterministic: bool = False):
    """Per-episode (return, length, mean per-step terms) on fresh episodes."""
    rng = np.random.default_rng(seed)
    env = make_env()
    out = []
    for _ in range(episodes):
        obs = env.reset(rng)
        ret, terms = 0.0, {}
        while not env.done:
            if deterministic:
                a = pol.actor_forward(params, obs)
            else:
                a, _ = pol.sample_action(params, obs, rng)
            r = env.step(a)
            ret += r.reward
            for k, v in r.info.get("terms", {}).items():
                terms[k] = terms.get(k, 0.0) + v
            obs = r.observation
        out.append((ret, env.steps, {k: v / env.steps for k, v in terms.items()}))
    return out


def train_stage(stage: int, task: str, demo, run_config, out_dir=None, init_params=None,
                workers: int = 1, updates: int | None = None, resume: bool = False):
    """Train one stage; stage 2 requires ``init_params`` from stage 1."""
    from .config import build_envs
    if stage == 2 and init_params is None:
        raise ValueError("stage 2 needs the stage-1 policy to start from")
    cfg = run_config.ppo
    envs = build_envs(run_config, demo, stage=stage, task=task)
    if init_params is None:
        params = fresh_params(envs[0].config.obs_dim, cfg.seed)
    elif stage == 2:
        params = warm_start(init_params)
    else:
        params = init_params.copy()
    trainer = Trainer(envs, params, cfg, out_dir, term_names=envs[0].term_names, workers=workers)
    if resume and out_dir is not None:
        tags = sorted(int(p.stem.split("_")[1]) for p in Path(out_dir).glob("trainer_*.json"))
        if tags:
            trainer.restore(tags[-1])
    trainer.run(updates)
    return trainer
