"""Command-line front end: train, eval, replay, and export subcommands.

Configuration lives in flat key=value sections ([env], [policy], [train],
[eval]); every key can be overridden on the command line with
``--set section.key=value``.  Exit codes: 0 success, 2 configuration
error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness
from .baselines import BASELINES
from .env import EnvConfig
from .policies import PolicyConfig, table_defaults
from .rl import TrainConfig, train
from .harness import ConfigMismatch


class ConfigError(Exception):
    pass


_SECTIONS = ("env", "policy", "train", "eval")

_EVAL_DEFAULTS = {"episodes": 100, "policy_seeds": 4, "eval_seed": 0,
                  "baselines": "", "greedy": False}


# -- config parsing -------------------------------------------------------

def parse_config_text(text: str, path: str = "<config>") -> dict:
    """Flat INI-like sections; values kept as (string, line number)."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown section "
                                  f"[{current}]; expected one of {_SECTIONS}")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, "
                              f"got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        k, v = line.split("=", 1)
        sections[current][k.strip()] = (v.strip(), lineno)
    return sections


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def apply_overrides(sections: dict, pairs) -> dict:
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, v = item.split("=", 1)
        sect, k = target.split(".", 1)
        if sect not in _SECTIONS:
            raise ConfigError(f"--set {item!r}: unknown section {sect!r}")
        sections.setdefault(sect, {})[k.strip()] = (v.strip(), f"--set {item}")
    return sections


def _coerce(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(t) for t in text.replace(",", " ").split())
        if default is None:                      # optional integer knobs
            return None if text.lower() in ("none", "") else int(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def _build_dataclass(cls, section: dict, path: str, name: str):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, (v, ln) in section.items():
        if k not in known:
            raise ConfigError(f"{path}:{ln}: unknown {name} key {k!r}")
        kwargs[k] = _coerce(v, getattr(defaults, k), f"{path}:{ln}")
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path} [{name}]: {e}") from e


def build_configs(sections: dict, path: str = "<config>"):
    """(EnvConfig, PolicyConfig, TrainConfig, eval options) from sections."""
    env_cfg = _build_dataclass(EnvConfig, sections.get("env", {}), path, "env")
    pol_sect = dict(sections.get("policy", {}))
    arch = pol_sect.get("arch", ("ipn", 0))[0]
    try:
        presets = table_defaults(arch, env_cfg.mode)
    except ValueError as e:
        raise ConfigError(f"{path} [policy]: {e}") from e
    merged = {k: (str(v), 0) for k, v in presets.items() if k != "alpha"}
    merged.update(pol_sect)
    merged.setdefault("d_max", (str(env_cfg.d_max), 0))
    merged.setdefault("obs_size", (str(env_cfg.obs_size), 0))
    policy_cfg = _build_dataclass(PolicyConfig, merged, path, "policy")
    train_sect = dict(sections.get("train", {}))
    train_sect.setdefault("alpha", (str(presets["alpha"]), 0))
    train_cfg = _build_dataclass(TrainConfig, train_sect, path, "train")
    ev = dict(_EVAL_DEFAULTS)
    for k, (v, ln) in sections.get("eval", {}).items():
        if k not in ev:
            raise ConfigError(f"{path}:{ln}: unknown eval key {k!r}")
        ev[k] = _coerce(v, ev[k], f"{path}:{ln}")
    return env_cfg, policy_cfg, train_cfg, ev


def _check_compat(policy_cfg: PolicyConfig, env_cfg: EnvConfig):
    if policy_cfg.obs_size != env_cfg.obs_size:
        raise ConfigError(
            f"policy expects {policy_cfg.obs_size}x{policy_cfg.obs_size} "
            f"observations but the environment produces "
            f"{env_cfg.obs_size}x{env_cfg.obs_size}")


# -- subcommands ----------------------------------------------------------

def cmd_train(args) -> int:
    sections = apply_overrides(load_config(args.config), args.set)
    env_cfg, policy_cfg, train_cfg, _ = build_configs(sections, args.config)
    _check_compat(policy_cfg, env_cfg)
    result = train(env_cfg, policy_cfg, train_cfg, master_seed=args.seed,
                   out_path=args.out, log_every=args.log_every)
    if args.csv:
        harness.write_train_csv(args.csv, result.rows, env_cfg,
                                {"master_seed": args.seed,
                                 "arch": policy_cfg.arch,
                                 "algorithm": train_cfg.algorithm})
        print(f"wrote {args.csv}")
    if result.checkpoint_path:
        print(f"wrote {result.checkpoint_path}")
    tail = [r["performance"] for r in result.rows[-100:]]
    print(f"trained {train_cfg.episodes} episodes; "
          f"mean performance over last {len(tail)}: {np.mean(tail):.4f}")
    return 0


def _eval_policies(args, env_cfg, policy_seeds):
    policies: dict = {}
    for name in filter(None, (args.baselines or "").split(",")):
        name = name.strip()
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}; "
                              f"choose from {BASELINES}")
        policies[name] = name
    if args.checkpoint:
        loaded = []
        arch = None
        for ck in args.checkpoint:
            if not os.path.exists(ck) and not os.path.exists(f"{ck}.npz"):
                raise ConfigError(f"missing checkpoint {ck!r}")
            pol, meta = harness.load_policy(ck)
            _check_compat(pol.cfg, env_cfg)
            loaded.append(pol)
            arch = meta.get("arch", pol.cfg.arch)
        if len(loaded) == 1:
            policies[arch] = loaded[0]
        elif len(loaded) == policy_seeds:
            policies[arch] = loaded
        else:
            raise ConfigError(f"got {len(loaded)} checkpoints for "
                              f"{policy_seeds} policy seeds; pass 1 or "
                              f"exactly {policy_seeds}")
    if not policies:
        raise ConfigError("nothing to evaluate: pass --baselines and/or "
                          "--checkpoint")
    return policies


def cmd_eval(args) -> int:
    sections = apply_overrides(load_config(args.config), args.set)
    env_cfg, _, _, ev = build_configs(sections, args.config)
    episodes = args.episodes if args.episodes is not None else ev["episodes"]
    seeds = (args.policy_seeds if args.policy_seeds is not None
             else ev["policy_seeds"])
    eval_seed = (args.eval_seed if args.eval_seed is not None
                 else ev["eval_seed"])
    if args.baselines is None:
        args.baselines = ev["baselines"]
    policies = _eval_policies(args, env_cfg, seeds)
    report = harness.evaluate(env_cfg, policies, episodes=episodes,
                              policy_seeds=seeds, eval_seed=eval_seed,
                              greedy=args.greedy or ev["greedy"])
    width = max(len(n) for n in report.results)
    print(f"# config_hash={report.config_hash} episodes={episodes} "
          f"policy_seeds={seeds} eval_seed={eval_seed}")
    for name, mean, stderr, note in report.summary():
        flag = f"  [{note}]" if note else ""
        print(f"{name:<{width}s}  {mean:+.4f} +- {stderr:.4f}{flag}")
    if args.out:
        harness.write_eval_csv(args.out, report)
        print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    sections = apply_overrides(load_config(args.config), args.set)
    env_cfg, _, _, _ = build_configs(sections, args.config)
    policy = None
    if args.checkpoint:
        pol, _ = harness.load_policy(args.checkpoint)
        _check_compat(pol.cfg, env_cfg)
        policy = pol
    elif args.baseline:
        if args.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {args.baseline!r}")
        policy = args.baseline
    actions = None
    if args.actions:
        actions = [int(a) for a in args.actions.split(",")]
    snaps = harness.replay(env_cfg, args.episode_seed, policy=policy,
                           actions=actions, out_dir=args.out_dir)
    for t, s in enumerate(snaps):
        act = s["action"]
        rew = s["reward"]
        print(f"t={t:2d} action={'-' if act is None else act:>4} "
              f"reward={'-' if rew is None else format(rew, '+.5f'):>9} "
              f"leaves={len(s['mesh']['leaves']):4d} e={s['e']:.6e}")
    if args.out_dir:
        print(f"wrote {len(snaps)} snapshots to {args.out_dir}")
    return 0


def cmd_export(args) -> int:
    paths = list(args.snapshot or [])
    if args.dir:
        paths.extend(sorted(
            os.path.join(args.dir, f) for f in os.listdir(args.dir)
            if f.endswith(".json")))
    if not paths:
        raise ConfigError("nothing to export: pass --snapshot and/or --dir")
    for p in paths:
        try:
            with open(p) as fh:
                snap = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read snapshot {p}: {e}") from e
        out = args.out if args.out and len(paths) == 1 else \
            os.path.splitext(p)[0] + ".svg"
        harness.render_snapshot_svg(snap, out, with_field=not args.no_field,
                                    size=args.size)
        print(f"wrote {out}")
    return 0


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="meshrl",
        description="Budgeted mesh-refinement policies: train, evaluate, "
                    "replay, and export.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    t = sub.add_parser("train", help="train a refinement policy")
    common(t)
    t.add_argument("--seed", type=int, default=0, help="master seed")
    t.add_argument("--out", default="checkpoint.npz", help="checkpoint path")
    t.add_argument("--csv", default=None, help="write per-episode metrics CSV")
    t.add_argument("--log-every", type=int, default=0, metavar="N",
                   help="print progress every N episodes")

    e = sub.add_parser("eval", help="shared-seed evaluation protocol")
    common(e)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--policy-seeds", type=int, default=None)
    e.add_argument("--eval-seed", type=int, default=None)
    e.add_argument("--baselines", default=None,
                   help=f"comma list from {', '.join(BASELINES)}")
    e.add_argument("--checkpoint", action="append", default=[],
                   help="trained policy checkpoint (repeat for per-seed "
                        "checkpoints)")
    e.add_argument("--greedy", action="store_true",
                   help="argmax actions instead of sampling")
    e.add_argument("--out", default=None, help="write the report CSV here")

    r = sub.add_parser("replay", help="step through one seeded episode")
    common(r)
    r.add_argument("--episode-seed", type=int, required=True)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--baseline", default=None)
    r.add_argument("--actions", default=None,
                   help="comma-separated action overrides")
    r.add_argument("--out-dir", default=None,
                   help="write step_NNN.json snapshots here")

    x = sub.add_parser("export", help="render snapshots to SVG")
    x.add_argument("--snapshot", action="append", help="snapshot JSON file")
    x.add_argument("--dir", default=None, help="render every *.json inside")
    x.add_argument("--out", default=None,
                   help="output path (single snapshot only)")
    x.add_argument("--no-field", action="store_true",
                   help="outlines only, no solution heatmap")
    x.add_argument("--size", type=int, default=512)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval,
                "replay": cmd_replay, "export": cmd_export}
    try:
        return handlers[args.command](args)
    except (ConfigError, ConfigMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:                               # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
