"""Shared-seed evaluation protocol, aggregation, and artifact export.

Every method in one evaluation run replays the same per-episode
environment seeds, so all of them face identical initial conditions; the
normalized error-reduction metric is averaged per policy seed and then
aggregated into a mean and standard error across seeds.  Artifacts (CSV
metric tables, JSON step snapshots, SVG mesh renders) are deterministic:
regenerating them from the same seeds reproduces them byte for byte.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from hashlib import sha256

import numpy as np

from . import nn
from .baselines import make_selector
from .basis import FEField, get_basis
from .env import EnvConfig, RefineEnv
from .mesh import QuadMesh
from .policies import Policy, PolicyConfig, make_policy, sample_action
from .rl import EPISODE_STREAM, SAMPLER_STREAM, episode_performance, stream_seed


class EmptyInput(Exception):
    pass


class ConfigMismatch(Exception):
    pass


# -- aggregation ----------------------------------------------------------

def config_hash(env_cfg: EnvConfig) -> str:
    """Short stable digest of an environment configuration."""
    plain = {k: (list(v) if isinstance(v, tuple) else v)
             for k, v in vars(env_cfg).items()}
    blob = json.dumps(plain, sort_keys=True)
    return sha256(blob.encode()).hexdigest()[:12]


def aggregate(per_seed_values) -> tuple[float, float]:
    """Mean and standard error of per-seed episode means.

    ``per_seed_values`` holds one sequence of per-episode metric values per
    policy seed.  Each seed is first reduced to its episode mean; the
    returned stderr is the sample standard deviation of those means divided
    by sqrt(S).  A single seed gives stderr 0 by convention.
    """
    if len(per_seed_values) == 0 or any(len(v) == 0 for v in per_seed_values):
        raise EmptyInput("need at least one seed with at least one episode")
    means = np.array([float(np.mean(v)) for v in per_seed_values])
    if len(means) == 1:
        return float(means[0]), 0.0
    return float(means.mean()), float(means.std(ddof=1) / np.sqrt(len(means)))


def pooled_stderr(se_a: float, se_b: float) -> float:
    """Standard error of a difference of two independent means."""
    return float(np.hypot(se_a, se_b))


# -- evaluation protocol --------------------------------------------------

def policy_selector(policy: Policy, greedy: bool = False):
    """Wrap a trained policy as an ``(env, obs, rng) -> action`` callable.

    Evaluation draws actions from the policy distribution itself, with no
    exploration mixing; ``greedy`` takes the highest-probability action
    instead.
    """

    def select(env, obs, rng):
        probs = policy.probs(obs)
        if greedy:
            return int(np.argmax(probs))
        a, _ = sample_action(probs, obs.valid, 0.0, rng)
        return a

    return select


def _as_entry(entry, n_seeds: int, greedy: bool = False):
    """Normalize a policies-dict value to (selectors[n_seeds], needs_obs)."""
    if isinstance(entry, str):
        return [make_selector(entry)] * n_seeds, False
    if isinstance(entry, Policy):
        return [policy_selector(entry, greedy)] * n_seeds, True
    if isinstance(entry, (list, tuple)):
        if len(entry) != n_seeds:
            raise ValueError(f"need {n_seeds} per-seed policies, got {len(entry)}")
        sels = [policy_selector(e, greedy) if isinstance(e, Policy) else e
                for e in entry]
        return sels, True
    if callable(entry):
        return [entry] * n_seeds, True
    raise TypeError(f"cannot interpret policy entry {entry!r}")


def run_episode(env: RefineEnv, selector, episode_seed,
                rng: np.random.Generator) -> float:
    """One full episode under `selector`; returns its performance metric."""
    obs = env.reset(episode_seed)
    while True:
        a = selector(env, obs, rng)
        step = env.step(a)
        obs = step.obs
        if step.done:
            return episode_performance(env.cfg, env.e0, step.info, episode_seed)


@dataclass
class PolicyEval:
    name: str
    per_episode: np.ndarray        # (policy_seeds, episodes)

    @property
    def seed_means(self) -> np.ndarray:
        return self.per_episode.mean(axis=1)

    @property
    def mean(self) -> float:
        return aggregate(self.per_episode)[0]

    @property
    def stderr(self) -> float:
        return aggregate(self.per_episode)[1]


@dataclass
class EvalReport:
    env: dict
    config_hash: str
    eval_seed: int
    episodes: int
    policy_seeds: int
    results: dict

    def summary(self) -> list:
        """(name, mean, stderr, note) rows in insertion order."""
        note = "single-seed" if self.policy_seeds == 1 else ""
        return [(n, r.mean, r.stderr, note) for n, r in self.results.items()]

    def gap_sigmas(self, a: str, b: str) -> float:
        """Mean gap between policies a and b in pooled-stderr units."""
        ra, rb = self.results[a], self.results[b]
        se = pooled_stderr(ra.stderr, rb.stderr)
        diff = ra.mean - rb.mean
        if se == 0.0:
            return float(np.inf) if diff > 0 else (-np.inf if diff < 0 else 0.0)
        return diff / se


def episode_seeds(eval_seed: int, episodes: int) -> list:
    return [stream_seed(eval_seed, EPISODE_STREAM, i) for i in range(episodes)]


def _sampler(eval_seed: int, policy_seed: int, episode: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=eval_seed,
                                spawn_key=(SAMPLER_STREAM, policy_seed, episode))
    return np.random.Generator(np.random.Philox(ss))


def evaluate(env_cfg: EnvConfig, policies: dict, episodes: int = 100,
             policy_seeds: int = 4, eval_seed: int = 0, greedy: bool = False,
             progress=None) -> EvalReport:
    """Run the shared-seed evaluation protocol.

    ``policies`` maps display names to baseline names, Policy instances,
    lists of per-seed Policy instances, or raw selector callables.  Episode
    i uses one environment seed for every policy and every policy seed;
    stochastic selectors get an independent sampler stream per
    (policy seed, episode).
    """
    if episodes < 1 or policy_seeds < 1:
        raise EmptyInput("episodes and policy_seeds must be positive")
    ep_seeds = episode_seeds(eval_seed, episodes)
    results = {}
    for name, entry in policies.items():
        sels, needs_obs = _as_entry(entry, policy_seeds, greedy)
        cfg = env_cfg if needs_obs else replace(env_cfg, build_obs=False)
        env = RefineEnv(cfg)
        per = np.zeros((policy_seeds, episodes))
        for s in range(policy_seeds):
            for i, es in enumerate(ep_seeds):
                per[s, i] = run_episode(env, sels[s], es,
                                        _sampler(eval_seed, s, i))
            if progress:
                progress(name, s)
        results[name] = PolicyEval(name, per)
    return EvalReport(env={k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in vars(env_cfg).items()},
                      config_hash=config_hash(env_cfg), eval_seed=eval_seed,
                      episodes=episodes, policy_seeds=policy_seeds,
                      results=results)


# -- CSV artifacts --------------------------------------------------------

EVAL_HEADER = "policy,policy_seed,episode,performance"
TRAIN_HEADER = "episode,return,performance,epsilon,leaves_final"
TIMING_HEADER = "policy,mesh,mean_ms,stderr_ms"


def eval_csv_text(report: EvalReport) -> str:
    lines = [f"# meshrl-eval config_hash={report.config_hash} "
             f"eval_seed={report.eval_seed} episodes={report.episodes} "
             f"policy_seeds={report.policy_seeds}",
             f"# env={json.dumps(report.env, sort_keys=True)}",
             EVAL_HEADER]
    for name, r in report.results.items():
        S, E = r.per_episode.shape
        for s in range(S):
            for i in range(E):
                lines.append(f"{name},{s},{i},{float(r.per_episode[s, i])!r}")
    return "\n".join(lines) + "\n"


def write_eval_csv(path, report: EvalReport) -> str:
    with open(path, "w") as fh:
        fh.write(eval_csv_text(report))
    return str(path)


def read_eval_csv(path) -> EvalReport:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# meshrl-eval "):
        raise ConfigMismatch(f"{path}: not an evaluation CSV")
    head = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    env = json.loads(lines[1][len("# env="):])
    if lines[2] != EVAL_HEADER:
        raise ConfigMismatch(f"{path}: unexpected header {lines[2]!r}")
    S, E = int(head["policy_seeds"]), int(head["episodes"])
    data: dict = {}
    for ln in lines[3:]:
        name, s, i, v = ln.split(",")
        data.setdefault(name, np.zeros((S, E)))[int(s), int(i)] = float(v)
    results = {n: PolicyEval(n, a) for n, a in data.items()}
    return EvalReport(env=env, config_hash=head["config_hash"],
                      eval_seed=int(head["eval_seed"]), episodes=E,
                      policy_seeds=S, results=results)


def check_same_config(reports) -> str:
    """The common config hash, or ConfigMismatch if the runs disagree."""
    hashes = {r.config_hash for r in reports}
    if len(hashes) > 1:
        raise ConfigMismatch(f"mixing artifacts from different configs: "
                             f"{sorted(hashes)}")
    if not hashes:
        raise EmptyInput("no reports given")
    return hashes.pop()


def write_train_csv(path, rows, env_cfg: EnvConfig, meta: dict | None = None) -> str:
    extra = "".join(f" {k}={v}" for k, v in (meta or {}).items())
    lines = [f"# meshrl-train config_hash={config_hash(env_cfg)}{extra}",
             TRAIN_HEADER]
    for r in rows:
        lines.append(f"{r['episode']},{float(r['return'])!r},"
                     f"{float(r['performance'])!r},{float(r['epsilon'])!r},"
                     f"{r['leaves_final']}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


# -- decision timing ------------------------------------------------------

def decision_timing(policy, sizes, env_cfg: EnvConfig | None = None,
                    episodes: int = 10, steps: int = 10, seed: int = 0) -> dict:
    """Milliseconds per refinement decision, per mesh size.

    Times only the selector call, pooled over ``episodes`` x ``steps``
    samples for each size; the environment transition between decisions is
    excluded.  Returns ``{(nx, ny): (mean_ms, stderr_ms)}``.
    """
    base = env_cfg if env_cfg is not None else EnvConfig()
    sels, needs_obs = _as_entry(policy, 1)
    sel = sels[0]
    out = {}
    for size in sizes:
        nx, ny = (size, size) if isinstance(size, int) else size
        cfg = replace(base, base_nx=nx, base_ny=ny,
                      budget=max(base.budget, steps), build_obs=needs_obs)
        env = RefineEnv(cfg)
        samples = []
        for ep in range(episodes):
            rng = _sampler(seed, 0, ep)
            obs = env.reset(stream_seed(seed, EPISODE_STREAM, ep))
            for _ in range(steps):
                t0 = time.perf_counter()
                a = sel(env, obs, rng)
                samples.append((time.perf_counter() - t0) * 1e3)
                obs = env.step(a).obs
        arr = np.asarray(samples)
        out[(nx, ny)] = (float(arr.mean()),
                         float(arr.std(ddof=1) / np.sqrt(len(arr))))
    return out


def timing_table(policies: dict, sizes, env_cfg: EnvConfig | None = None,
                 episodes: int = 10, steps: int = 10, seed: int = 0) -> list:
    """Policy-by-mesh-size timing grid as a list of row dicts."""
    rows = []
    for name, entry in policies.items():
        per = decision_timing(entry, sizes, env_cfg, episodes, steps, seed)
        for (nx, ny), (m, se) in per.items():
            rows.append({"policy": name, "mesh": f"{nx}x{ny}",
                         "mean_ms": m, "stderr_ms": se})
    return rows


def write_timing_csv(path, rows, env_cfg: EnvConfig) -> str:
    lines = [f"# meshrl-timing config_hash={config_hash(env_cfg)}",
             TIMING_HEADER]
    for r in rows:
        lines.append(f"{r['policy']},{r['mesh']},{r['mean_ms']!r},"
                     f"{r['stderr_ms']!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


# -- replay and export ----------------------------------------------------

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def replay(env_cfg: EnvConfig, episode_seed, policy=None, actions=None,
           out_dir=None, eval_seed: int = 0) -> list:
    """Step-by-step snapshots of one seeded episode.

    Actions come from an explicit ``actions`` list, from a policy/baseline
    entry (same forms as in evaluate()), or default to do-nothing.  Each
    snapshot is JSON-serializable and carries the mesh, the field
    coefficients, and the step bookkeeping; with ``out_dir`` the snapshots
    are written as step_000.json, step_001.json, ...
    """
    sel = None
    if policy is not None:
        sels, needs_obs = _as_entry(policy, 1)
        sel = sels[0]
    else:
        needs_obs = False
    cfg = env_cfg if needs_obs else replace(env_cfg, build_obs=False)
    env = RefineEnv(cfg)
    obs = env.reset(episode_seed)
    rng = _sampler(eval_seed, 0, 0)

    def snap(action=None, reward=None):
        s = env.episode_snapshot()
        s["coeffs"] = env.field.coeffs
        s["action"] = action
        s["reward"] = reward
        return _jsonable(s)

    snaps = [snap()]
    t = 0
    while True:
        if actions is not None:
            a = int(actions[t]) if t < len(actions) else 0
        elif sel is not None:
            a = sel(env, obs, rng)
        else:
            a = 0
        step = env.step(a)
        snaps.append(snap(a, step.reward))
        obs = step.obs
        t += 1
        if step.done:
            break
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        for i, s in enumerate(snaps):
            with open(os.path.join(out_dir, f"step_{i:03d}.json"), "w") as fh:
                json.dump(s, fh, indent=1, sort_keys=True)
    return snaps


def field_from_snapshot(snap: dict) -> FEField:
    """Rebuild the discrete solution stored in a replay snapshot."""
    mesh = QuadMesh.from_snapshot(snap["mesh"])
    cfg = snap["config"]
    basis = get_basis(cfg["p"], cfg["q"])
    coeffs = np.asarray(snap["coeffs"], dtype=float)
    return FEField(mesh, coeffs, basis)


# -- SVG rendering --------------------------------------------------------

_DEPTH_STROKES = ("#355070", "#6d597a", "#b56576", "#e56b6f", "#eaac8b",
                  "#ffd166", "#06d6a0")

_RAMP = ((0.0, (68, 1, 84)), (0.25, (59, 82, 139)), (0.5, (33, 145, 140)),
         (0.75, (94, 201, 98)), (1.0, (253, 231, 37)))


def _heat_color(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(_RAMP[:-1], _RAMP[1:]):
        if v <= t1:
            f = (v - t0) / (t1 - t0)
            r, g, b = (round(a + f * (b_ - a)) for a, b_ in zip(c0, c1))
            return f"#{r:02x}{g:02x}{b:02x}"
    return "#fde725"


def render_mesh_svg(mesh, path=None, field: FEField | None = None,
                    size: int = 512, heat_cells: int = 96) -> str:
    """SVG of leaf outlines colored by depth, optional solution underlay.

    ``mesh`` may be a QuadMesh or a mesh snapshot dict.  The heatmap
    rasterizes the field at ``heat_cells`` x ``heat_cells`` cell centers and
    normalizes colors to the field's own range.
    """
    if isinstance(mesh, dict):
        mesh = QuadMesh.from_snapshot(mesh)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="#ffffff"/>']
    if field is not None:
        cc = (np.arange(heat_cells) + 0.5) / heat_cells
        X, Y = np.meshgrid(cc, cc)
        vals = field.eval(X, Y)
        lo, hi = float(vals.min()), float(vals.max())
        span = hi - lo if hi > lo else 1.0
        cell = size / heat_cells
        for r in range(heat_cells):
            for c in range(heat_cells):
                col = _heat_color((vals[r, c] - lo) / span)
                yy = size - (r + 1) * cell
                parts.append(f'<rect x="{c * cell:.2f}" y="{yy:.2f}" '
                             f'width="{cell + 0.5:.2f}" height="{cell + 0.5:.2f}" '
                             f'fill="{col}"/>')
    x0, y0, hx, hy = mesh.leaf_boxes()
    for i in range(mesh.n_leaves):
        stroke = _DEPTH_STROKES[int(mesh.depth[i]) % len(_DEPTH_STROKES)]
        parts.append(
            f'<rect x="{x0[i] * size:.2f}" y="{(1 - y0[i] - hy[i]) * size:.2f}" '
            f'width="{hx[i] * size:.2f}" height="{hy[i] * size:.2f}" '
            f'fill="none" stroke="{stroke}" stroke-width="1.2"/>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def render_snapshot_svg(snap: dict, path=None, with_field: bool = True,
                        size: int = 512) -> str:
    """Render a replay snapshot; the solution underlay is optional."""
    field = field_from_snapshot(snap) if with_field and "coeffs" in snap else None
    mesh = QuadMesh.from_snapshot(snap["mesh"])
    return render_mesh_svg(mesh, path, field=field, size=size)


# -- checkpoints ----------------------------------------------------------

def load_policy(path) -> tuple:
    """Rebuild a policy (architecture + weights) from a checkpoint file."""
    p = str(path)
    if not p.endswith(".npz"):
        p = f"{p}.npz"
    with np.load(p) as z:
        if "meta" not in z.files:
            raise ConfigMismatch(f"{path}: checkpoint has no metadata")
        meta = json.loads(bytes(z["meta"]).decode())
    pol = make_policy(PolicyConfig(**meta["policy_config"]), seed=0)
    meta = nn.load_checkpoint(p, pol)
    return pol, meta
