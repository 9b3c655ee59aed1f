"""Policy-gradient training over batches of variable-size episodes.

REINFORCE recomputes log-probabilities of the sampled actions under the
current parameters and ascends the discounted-return-weighted objective,
averaged over all steps in a batch of K episodes.  Sampling follows the
epsilon-mixed behavior policy with epsilon decaying linearly over episodes;
by default gradients are taken through the policy itself (on-policy
treatment), with an optional importance-ratio correction and an optional
mean-return baseline behind flags.

PPO adds a critic (its own conv encoder and per-element head, mean-pooled to
a scalar state value), generalized advantage estimation, the clipped ratio
objective with entropy and value terms, and several epochs of shuffled
minibatches per batch.

All randomness derives from one master seed through fixed stream keys
(episode seeds, policy init, per-episode sampling, minibatch shuffles), so a
single-worker run is bitwise reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import nn
from .env import EnvConfig, Observation, RefineEnv
from .policies import Policy, PolicyConfig, make_policy, sample_action

EPISODE_STREAM, POLICY_STREAM, SAMPLER_STREAM, SHUFFLE_STREAM = 0, 1, 2, 3


def stream_seed(master_seed: int, stream: int, index: int = 0) -> np.random.SeedSequence:
    """Named, stateless substream derivation from one master seed."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(stream, index))


@dataclass
class TrainConfig:
    algorithm: str = "reinforce"         # "reinforce" or "ppo"
    episodes: int = 2000
    batch_size: int = 8                  # episodes per update (K)
    gamma: float = 0.99
    alpha: float = 1e-4
    optimizer: str = "adam"              # "adam" or "sgd"
    eps_start: float = 0.5
    eps_end: float = 0.05
    eps_div: int = 500
    importance_correction: bool = False
    mean_return_baseline: bool = False
    # PPO extras
    ppo_eps: float = 0.2
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_loss_coef: float = 0.5
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    advantage_norm: bool = False
    checkpoint_every: int = 0            # extra checkpoints every n episodes (0: final only)

    def __post_init__(self):
        if self.algorithm not in ("reinforce", "ppo"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.eps_start >= self.eps_end >= 0.0:
            raise ValueError("need eps_start >= eps_end >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon(episode: int, cfg: TrainConfig) -> float:
    frac = episode / cfg.eps_div
    return max(cfg.eps_end, cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    G = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        G[t] = acc
    return G


@dataclass
class Trajectory:
    observations: list[Observation]
    actions: list[int]
    rewards: list[float]
    behavior_probs: list[float]
    policy_probs: list[float]
    episode_seed: object
    e0: float
    final_info: dict = dc_field(default_factory=dict)

    def __len__(self):
        return len(self.actions)


def rollout(env: RefineEnv, policy: Policy, eps: float, episode_seed,
            rng: np.random.Generator) -> Trajectory:
    obs = env.reset(episode_seed)
    traj = Trajectory([], [], [], [], [], episode_seed, env.e0)
    while True:
        probs = policy.probs(obs)
        a, bp = sample_action(probs, obs.valid, eps, rng)
        step = env.step(a)
        traj.observations.append(obs)
        traj.actions.append(a)
        traj.rewards.append(step.reward)
        traj.behavior_probs.append(bp)
        traj.policy_probs.append(float(probs[a]))
        obs = step.obs
        if step.done:
            traj.final_info = step.info
            return traj


class ValueNet(nn.Module):
    """Per-element conv+dense head, mean-pooled to one scalar per state."""

    def __init__(self, cfg: PolicyConfig, ss: np.random.SeedSequence, hidden: int = 128):
        from .policies import ConvFrontEnd
        s1, s2, s3 = ss.spawn(3)
        self.front = ConvFrontEnd(cfg, s1)
        self.fc = nn.Dense(cfg.conv_out, hidden, s2)
        self.out = nn.Dense(hidden, 1, s3)

    def value(self, obs: Observation) -> nn.Tensor:
        feats = self.front(nn.Tensor(obs.tensors))
        h = nn.relu(self.fc(feats))
        v = nn.reshape(self.out(h), (obs.n_actions,))
        return nn.tmean(v)


def reinforce_update(policy: Policy, batch: list[Trajectory], cfg: TrainConfig,
                     optimizer) -> dict:
    if not batch:
        raise ValueError("empty batch")
    total_steps = sum(len(t) for t in batch)
    weights = []
    for traj in batch:
        G = discounted_returns(traj.rewards, cfg.gamma)
        w = (cfg.gamma ** np.arange(len(traj))) * G
        if cfg.importance_correction:
            w = w * (np.array(traj.policy_probs) / np.array(traj.behavior_probs))
        weights.append(w)
    if cfg.mean_return_baseline:
        base = float(np.mean(np.concatenate(weights)))
        weights = [w - base for w in weights]

    optimizer.zero_grad()
    loss_total = 0.0
    ent_total = 0.0
    for traj, w in zip(batch, weights):
        lps = policy.batch_log_probs(traj.observations)
        terms = []
        for t, lp in enumerate(lps):
            terms.append(nn.mul(nn.gather(lp, [traj.actions[t]]), -w[t] / total_steps))
            lpv = lp.value
            ok = np.isfinite(lpv)
            ent_total += float(-np.sum(np.exp(lpv[ok]) * lpv[ok]))
        loss = nn.tsum(nn.concat(terms, axis=0))
        nn.backward(loss)
        loss_total += loss.item()
    optimizer.step()
    returns = [discounted_returns(t.rewards, cfg.gamma)[0] for t in batch]
    return {"loss": loss_total, "entropy": ent_total / total_steps,
            "mean_return": float(np.mean(returns))}


def gae_advantages(rewards, values, gamma: float, lam: float):
    """Generalized advantage estimates and value targets (terminal V = 0)."""
    T = len(rewards)
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        v_next = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + gamma * v_next - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + np.asarray(values[:T])


def ppo_update(policy: Policy, value_net: ValueNet, batch: list[Trajectory],
               cfg: TrainConfig, optimizer, value_optimizer,
               shuffle_rng: np.random.Generator) -> dict:
    if not batch:
        raise ValueError("empty batch")
    steps = []        # (obs, action, old_logp, advantage, value_target)
    for traj in batch:
        values = [value_net.value(o).item() for o in traj.observations]
        adv, targets = gae_advantages(traj.rewards, values, cfg.gamma, cfg.gae_lambda)
        for t, obs in enumerate(traj.observations):
            old_lp = np.log(max(traj.policy_probs[t], 1e-300))
            steps.append((obs, traj.actions[t], old_lp, adv[t], targets[t]))
    if cfg.advantage_norm:
        a = np.array([s[3] for s in steps])
        mu, sd = a.mean(), a.std() + 1e-8
        steps = [(o, ac, lp, (ad - mu) / sd, tg) for (o, ac, lp, ad, tg) in steps]

    stats = {"loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    n_updates = 0
    for _ in range(cfg.ppo_epochs):
        order = shuffle_rng.permutation(len(steps))
        for mb in np.array_split(order, cfg.ppo_minibatches):
            if len(mb) == 0:
                continue
            chunk = [steps[i] for i in mb]
            optimizer.zero_grad()
            value_optimizer.zero_grad()
            lps = policy.batch_log_probs([c[0] for c in chunk])
            pol_terms, ent_terms = [], []
            v_terms = []
            for (obs, action, old_lp, adv, target), lp in zip(chunk, lps):
                ratio = nn.exp(nn.add(nn.gather(lp, [action]), -old_lp))
                unclipped = nn.mul(ratio, adv)
                clipped = nn.mul(nn.clip(ratio, 1.0 - cfg.ppo_eps, 1.0 + cfg.ppo_eps), adv)
                pol_terms.append(nn.mul(nn.minimum(unclipped, clipped), -1.0))
                ent_terms.append(nn.mul(nn.tsum(nn.plogp(lp)), -1.0))
                v = value_net.value(obs)
                v_terms.append(nn.square(nn.add(v, -target)))
            m = float(len(chunk))
            pol_loss = nn.mul(nn.tsum(nn.concat(pol_terms, axis=0)), 1.0 / m)
            entropy = nn.mul(nn.sum_tensors(ent_terms), 1.0 / m)
            v_loss = nn.mul(nn.sum_tensors(v_terms), 1.0 / m)
            total = nn.add(nn.add(pol_loss, nn.mul(v_loss, cfg.value_loss_coef)),
                           nn.mul(entropy, -cfg.entropy_coef))
            nn.backward(total)
            optimizer.step()
            value_optimizer.step()
            stats["loss"] += total.item()
            stats["value_loss"] += v_loss.item()
            stats["entropy"] += entropy.item()
            n_updates += 1
    for k in stats:
        stats[k] /= max(n_updates, 1)
    stats["mean_return"] = float(np.mean(
        [discounted_returns(t.rewards, cfg.gamma)[0] for t in batch]))
    return stats


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return nn.Adam(params, cfg.alpha)
    if cfg.optimizer == "sgd":
        return nn.SGD(params, cfg.alpha)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


_NO_REFINE_CACHE: dict = {}


def _seed_key(episode_seed):
    if isinstance(episode_seed, np.random.SeedSequence):
        return ("ss", episode_seed.entropy, tuple(episode_seed.spawn_key))
    return ("raw", episode_seed)


def no_refine_final_error(env_cfg: EnvConfig, episode_seed) -> float:
    """Final error of the same episode when nothing is ever refined.

    Pure in (config, seed), so results are memoized; evaluation runs replay
    the same episodes once per policy and per policy seed otherwise.
    """
    cfg = EnvConfig(**{**vars(env_cfg), "build_obs": False, "reward": "true"})
    key = (tuple(sorted(vars(cfg).items())), _seed_key(episode_seed))
    if key in _NO_REFINE_CACHE:
        return _NO_REFINE_CACHE[key]
    env = RefineEnv(cfg)
    env.reset(episode_seed)
    while True:
        step = env.step(0)
        if step.done:
            _NO_REFINE_CACHE[key] = step.info["e"]
            return step.info["e"]


def episode_performance(env_cfg: EnvConfig, traj_e0: float, final_info: dict,
                        episode_seed) -> float:
    """Normalized error reduction; advecting episodes use a no-refine replay."""
    e_final = final_info["e"]
    if env_cfg.mode == "static":
        return (traj_e0 - e_final) / traj_e0
    e_nr = no_refine_final_error(env_cfg, episode_seed)
    return (e_nr - e_final) / traj_e0


@dataclass
class TrainResult:
    policy: Policy
    value_net: object
    rows: list[dict]
    checkpoint_path: str | None


def train(env_cfg: EnvConfig, policy_cfg: PolicyConfig, train_cfg: TrainConfig,
          master_seed: int = 0, out_path: str | None = None, workers: int = 1,
          log_every: int = 0) -> TrainResult:
    """Rollout/update loop; serial regardless of `workers` (kept for the CLI).

    Returns per-episode rows (episode, return, performance, epsilon,
    leaves_final) and, when out_path is given, writes the final checkpoint
    there.
    """
    env = RefineEnv(env_cfg)
    policy = make_policy(policy_cfg, stream_seed(master_seed, POLICY_STREAM))
    optimizer = make_optimizer(policy.named_parameters(), train_cfg)
    value_net = None
    value_opt = None
    if train_cfg.algorithm == "ppo":
        value_net = ValueNet(policy_cfg, stream_seed(master_seed, POLICY_STREAM, 1))
        value_opt = make_optimizer(value_net.named_parameters(), train_cfg)

    rows: list[dict] = []
    batch: list[Trajectory] = []
    t_start = time.time()
    n_updates = 0
    for episode in range(train_cfg.episodes):
        eps = epsilon(episode, train_cfg)
        ep_seed = stream_seed(master_seed, EPISODE_STREAM, episode)
        sampler = np.random.Generator(np.random.Philox(
            stream_seed(master_seed, SAMPLER_STREAM, episode)))
        traj = rollout(env, policy, eps, ep_seed, sampler)
        perf = episode_performance(env_cfg, traj.e0, traj.final_info, ep_seed)
        rows.append({
            "episode": episode,
            "return": discounted_returns(traj.rewards, train_cfg.gamma)[0],
            "performance": perf,
            "epsilon": eps,
            "leaves_final": traj.final_info["n_leaves"],
        })
        batch.append(traj)
        if len(batch) == train_cfg.batch_size or episode == train_cfg.episodes - 1:
            if train_cfg.algorithm == "reinforce":
                reinforce_update(policy, batch, train_cfg, optimizer)
            else:
                shuffle = np.random.Generator(np.random.Philox(
                    stream_seed(master_seed, SHUFFLE_STREAM, n_updates)))
                ppo_update(policy, value_net, batch, train_cfg, optimizer,
                           value_opt, shuffle)
            n_updates += 1
            batch = []
        if (train_cfg.checkpoint_every and out_path
                and (episode + 1) % train_cfg.checkpoint_every == 0):
            nn.save_checkpoint(f"{out_path}.ep{episode + 1}", policy,
                               _ckpt_meta(policy_cfg, env_cfg, train_cfg,
                                          master_seed, episode + 1))
        if log_every and (episode + 1) % log_every == 0:
            recent = [r["performance"] for r in rows[-log_every:]]
            print(f"episode {episode + 1}/{train_cfg.episodes}  "
                  f"perf(last {len(recent)}) = {np.mean(recent):.4f}  "
                  f"eps = {eps:.3f}  [{time.time() - t_start:.0f}s]", flush=True)

    ckpt = None
    if out_path:
        ckpt = nn.save_checkpoint(out_path, policy,
                                  _ckpt_meta(policy_cfg, env_cfg, train_cfg,
                                             master_seed, train_cfg.episodes),
                                  optimizer if train_cfg.optimizer == "adam" else None)
    return TrainResult(policy, value_net, rows, ckpt)


def _ckpt_meta(policy_cfg, env_cfg, train_cfg, master_seed, episodes_done) -> dict:
    env_d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(env_cfg).items()}
    return {"arch": policy_cfg.arch, "policy_config": policy_cfg.to_dict(),
            "env_config": env_d, "train_config": train_cfg.to_dict(),
            "master_seed": master_seed, "episodes_done": episodes_done}
