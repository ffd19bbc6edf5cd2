"""Experiment command line: pretrain, transfer, and encoder analysis.

Each subcommand resolves one experiment config (flags beat config-file
entries, which beat mode and profile defaults), works inside its own
directory under --out-dir, and finishes by writing a manifest that lists
every artifact it produced. Exit codes follow the shared error taxonomy:
2 for bad configuration or malformed artifacts, 3 for missing inputs,
4 for numeric failures.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys

import numpy as np

from . import analysis
from .autodiff import Tensor
from .config import (MODES, PROFILES, ExperimentConfig, build_config,
                     config_hash, tasks_for, to_json_dict)
from .env import (JumpEnv, TaskSpec, WorldState, batched_rollout,
                  calibrate_geometry, optimal_action, write_pgm)
from .errors import (ConfigError, MissingArtifactError, NumericError,
                     SchemaError)
from .nets import LAYER_NAMES, init_agent
from .ppo import init_training, train
from .runio import (RunManifest, load_agent_params, load_encoder_into,
                    read_train_log, save_checkpoint, svg_bar_chart,
                    svg_line_plot, write_manifest, write_table,
                    write_train_log)

_OVERRIDE_FIELDS = ("seed", "mode", "profile", "freeze_upto", "checkpoint_in",
                    "out_dir", "svg", "deterministic", "iterations",
                    "episodes_per_iter", "updates_per_iter", "batch_size")


def _resolve(args) -> ExperimentConfig:
    overrides = {}
    for name in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return build_config(config_file=getattr(args, "config", None), **overrides)


def _now(deterministic: bool) -> str:
    if deterministic:
        return ""
    return datetime.datetime.now(datetime.timezone.utc).isoformat(
        timespec="seconds")


def _start_run(cfg: ExperimentConfig, name: str):
    run_dir = os.path.join(cfg.out_dir, name)
    os.makedirs(run_dir, exist_ok=True)
    return run_dir, _now(cfg.deterministic)


def _finish_run(cfg, run_dir, started, outputs) -> None:
    manifest = RunManifest(
        config_hash=config_hash(cfg), seed=cfg.seed,
        revision=os.environ.get("PISCOLAB_REVISION", "unknown"),
        started=started, finished=_now(cfg.deterministic),
        outputs=list(outputs), effective_config=to_json_dict(cfg))
    write_manifest(os.path.join(run_dir, "manifest.json"), manifest)


def _agent_policy(agent):
    def policy_fn(obs, keys):
        z = agent.encoder.forward(Tensor(obs))
        return {"logits": agent.policy_logits(z).data,
                "values": agent.value(z).data}
    return policy_fn


def _run_training(cfg, env_cfg, tasks, freeze_upto, name):
    agent = init_agent(cfg.seed)
    if cfg.checkpoint_in is not None:
        load_encoder_into(agent, cfg.checkpoint_in)
    state = init_training(agent, env_cfg, tasks, cfg.ppo, seed=cfg.seed,
                          freeze_upto=freeze_upto)

    def report(row):
        print(f"[{name}] iter {row.iteration}/{cfg.ppo.iterations} "
              f"mean_return {row.mean_return:.2f} entropy {row.entropy:.3f}",
              flush=True)

    rows = train(state, on_row=report)
    return agent, rows


def _checkpoint_meta(cfg, command, rows) -> dict:
    return {"command": command, "mode": cfg.mode, "profile": cfg.profile,
            "seed": cfg.seed, "iterations": len(rows),
            "final_mean_return": float(rows[-1].mean_return)}


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    if cfg.checkpoint_in is not None:
        raise ConfigError("pretrain starts from scratch; checkpoint_in "
                          "is not applicable")
    name = f"pretrain-{cfg.mode}-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "pretrain")
    agent, rows = _run_training(cfg, env_cfg, tasks, cfg.freeze_upto, name)

    write_train_log(os.path.join(run_dir, "train_log.csv"), rows)
    save_checkpoint(os.path.join(run_dir, "checkpoint.npz"), agent,
                    _checkpoint_meta(cfg, "pretrain", rows))
    outputs = ["train_log.csv", "checkpoint.npz"]
    if cfg.svg:
        svg_line_plot(os.path.join(run_dir, "train_log.svg"),
                      {"mean return": [r.mean_return for r in rows]},
                      title=name, x_label="iteration", y_label="mean return")
        outputs.append("train_log.svg")
    _finish_run(cfg, run_dir, started, outputs)
    print(f"wrote {run_dir}: final mean_return {rows[-1].mean_return:.2f}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _resolve(args)
    if cfg.mode == "DeNovo":
        if cfg.checkpoint_in is not None:
            raise ConfigError("DeNovo trains from scratch; checkpoint_in "
                              "is not applicable")
    elif cfg.checkpoint_in is None:
        raise ConfigError(f"mode {cfg.mode} transfers a pretrained encoder; "
                          "pass --checkpoint-in")
    name = f"transfer-{cfg.mode}-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "transfer")
    agent, rows = _run_training(cfg, env_cfg, tasks, cfg.freeze_upto, name)

    write_train_log(os.path.join(run_dir, "train_log.csv"), rows)
    value = analysis.aurc([r.mean_return for r in rows],
                          max_return=env_cfg.optimal_return)
    write_table(os.path.join(run_dir, "aurc.csv"), ("aurc",), [(value,)])
    save_checkpoint(os.path.join(run_dir, "checkpoint.npz"), agent,
                    _checkpoint_meta(cfg, "transfer", rows))
    outputs = ["train_log.csv", "aurc.csv", "checkpoint.npz"]
    if cfg.svg:
        svg_line_plot(os.path.join(run_dir, "train_log.svg"),
                      {"mean return": [r.mean_return for r in rows]},
                      title=name, x_label="iteration", y_label="mean return")
        outputs.append("train_log.svg")
    _finish_run(cfg, run_dir, started, outputs)
    print(f"wrote {run_dir}: final mean_return {rows[-1].mean_return:.2f} "
          f"aurc {value:.4f}")
    return 0


def cmd_sweep_freeze(args) -> int:
    if args.mode is None:
        args.mode = "Finetuned"
    cfg = _resolve(args)
    if cfg.mode == "DeNovo":
        raise ConfigError("sweep-freeze transfers a pretrained encoder; "
                          "DeNovo does not apply")
    if cfg.checkpoint_in is None:
        raise ConfigError("sweep-freeze needs a pretrained encoder; "
                          "pass --checkpoint-in")
    name = f"sweep-freeze-{cfg.mode}-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "transfer")

    table = []
    outputs = ["sweep_freeze.csv"]
    for label in ("none",) + LAYER_NAMES:
        depth = None if label == "none" else label
        _, rows = _run_training(cfg, env_cfg, tasks, depth, f"{name}/{label}")
        sub = os.path.join(run_dir, "sub", label)
        os.makedirs(sub, exist_ok=True)
        write_train_log(os.path.join(sub, "train_log.csv"), rows)
        outputs.append(f"sub/{label}/train_log.csv")
        value = analysis.aurc([r.mean_return for r in rows],
                              max_return=env_cfg.optimal_return)
        table.append((label, value))
        print(f"[{name}] freeze_upto={label} aurc {value:.4f}", flush=True)

    write_table(os.path.join(run_dir, "sweep_freeze.csv"),
                ("freeze_upto", "aurc"), table)
    if cfg.svg:
        svg_bar_chart(os.path.join(run_dir, "sweep_freeze.svg"),
                      {label: value for label, value in table},
                      title=name, y_label="aurc")
        outputs.append("sweep_freeze.svg")
    _finish_run(cfg, run_dir, started, outputs)
    print(f"wrote {run_dir}")
    return 0


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _variant_encoders(cfg, args):
    """Frozen = pretrained encoder, Finetuned = transferred encoder."""
    frozen = init_agent(cfg.seed)
    load_encoder_into(frozen, _require_file(args.checkpoint_in,
                                            "pretrained checkpoint"))
    finetuned = init_agent(cfg.seed)
    load_encoder_into(finetuned, _require_file(args.finetuned_in,
                                               "finetuned checkpoint"))
    return frozen.encoder, finetuned.encoder


def _decision_states(env_cfg, tasks):
    """Grounded approach states near the jump decision, with optimal labels.

    The gap window 5..24 spans both sides of the trigger: wide enough to
    cover doomed and safe ground, narrow enough that jump labels keep a
    usable share of the set.
    """
    env = JumpEnv(env_cfg)
    obs, labels = [], []
    for task in tasks:
        for gap in range(5, 25):
            x = task.obstacle_x - gap
            if x < env_cfg.agent_start_x:
                continue
            state = WorldState(task=task, agent_x=x, agent_alt=0,
                               phase_step=0, steps=0, terminated=False,
                               outcome=None)
            obs.append(env.render(state))
            labels.append(optimal_action(env_cfg, state))
    return np.stack(obs), np.asarray(labels, dtype=np.int64)


def _collect_transitions(cfg, env_cfg, tasks, agent, size):
    """Roll the agent's stochastic policy until `size` transitions exist."""
    env = JumpEnv(env_cfg)
    policy_fn = _agent_policy(agent)
    rng = np.random.default_rng(cfg.seed)
    episodes = []
    total = 0
    while total < size:
        eps = batched_rollout(env, tasks, policy_fn,
                              seed=int(rng.integers(0, 2 ** 63)))
        episodes.extend(eps)
        total += sum(len(e.actions) for e in eps)
    return episodes


def cmd_probe(args) -> int:
    cfg = _resolve(args)
    name = f"probe-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "transfer")
    frozen_enc, finetuned_enc = _variant_encoders(cfg, args)

    # the finetuned policy generates the probe data it is probed on
    collector = init_agent(cfg.seed)
    load_agent_params(collector, args.finetuned_in)
    size = args.probe_size
    if size is None:
        size = 10000 if cfg.profile == "paper" else 2000
    episodes = _collect_transitions(cfg, env_cfg, tasks, collector, size)
    dataset = analysis.fit_action_values(episodes, gamma=cfg.ppo.gamma,
                                         size=size, seed=cfg.seed)
    print(f"[{name}] dataset size {size} mlp_mse {dataset.mlp_mse:.4f}",
          flush=True)

    table = []
    by_variant = {}
    for variant, enc in (("Frozen", frozen_enc), ("Finetuned", finetuned_enc)):
        mses = {}
        for layer in LAYER_NAMES:
            mses[layer] = analysis.probe_layer(enc, layer, dataset)
            table.append((variant, layer, mses[layer]))
            print(f"[{name}] {variant} {layer} probe_mse {mses[layer]:.4f}",
                  flush=True)
        by_variant[variant] = mses
    write_table(os.path.join(run_dir, "probe.csv"),
                ("variant", "layer", "mse"),
                [(v, layer, m) for v, layer, m in table])

    rec = analysis.recommend_freeze_depth(by_variant["Frozen"],
                                          by_variant["Finetuned"])
    print(f"recommended freeze depth: {rec if rec is not None else 'none'}")

    gaps = np.concatenate([[info.gap for info in ep.infos]
                           for ep in episodes]).astype(np.float32)[:size]
    distance_rows = []
    for variant, enc in (("Frozen", frozen_enc), ("Finetuned", finetuned_enc)):
        mse = analysis.regress_distance(enc, dataset.observations, gaps)
        distance_rows.append((variant, mse))
        print(f"[{name}] {variant} distance_mse {mse:.4f}", flush=True)
    write_table(os.path.join(run_dir, "distance.csv"), ("variant", "mse"),
                distance_rows)

    _finish_run(cfg, run_dir, started, ["probe.csv", "distance.csv"])
    print(f"wrote {run_dir}")
    return 0


def cmd_purity(args) -> int:
    cfg = _resolve(args)
    name = f"purity-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "transfer")
    frozen_enc, finetuned_enc = _variant_encoders(cfg, args)
    states, labels = _decision_states(env_cfg, tasks)

    rows = []
    for variant, enc in (("Random", init_agent(cfg.seed).encoder),
                         ("Frozen", frozen_enc),
                         ("Finetuned", finetuned_enc)):
        value = analysis.cluster_purity(enc, states, labels)
        rows.append((variant, value))
        print(f"[{name}] {variant} purity {value:.4f}", flush=True)
    write_table(os.path.join(run_dir, "purity.csv"), ("variant", "purity"),
                rows)
    _finish_run(cfg, run_dir, started, ["purity.csv"])
    print(f"wrote {run_dir}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _resolve(args)
    name = f"robustness-{cfg.profile}-s{cfg.seed}"
    run_dir, started = _start_run(cfg, name)
    env_cfg = calibrate_geometry(cfg.env)
    tasks = tasks_for(cfg.profile, "transfer")
    frozen_enc, finetuned_enc = _variant_encoders(cfg, args)
    states, labels = _decision_states(env_cfg, tasks)

    rows = []
    series = {}
    for variant, enc in (("Frozen", frozen_enc), ("Finetuned", finetuned_enc)):
        report = analysis.robustness_curve(enc, states, labels, seed=cfg.seed)
        series[variant] = list(report.errors)
        for deg, err in zip(report.degrees, report.errors):
            rows.append((variant, deg, err))
        print(f"[{name}] {variant} error@12deg {report.errors[-1]:.4f}",
              flush=True)
    write_table(os.path.join(run_dir, "robustness.csv"),
                ("variant", "degrees", "error"), rows)
    outputs = ["robustness.csv"]
    if cfg.svg:
        svg_line_plot(os.path.join(run_dir, "robustness.svg"), series,
                      title=name, x_label="degrees", y_label="error")
        outputs.append("robustness.svg")
    _finish_run(cfg, run_dir, started, outputs)
    print(f"wrote {run_dir}")
    return 0


def cmd_aurc(args) -> int:
    cfg = _resolve(args)
    rows = read_train_log(args.log)
    value = analysis.aurc([r.mean_return for r in rows],
                          max_return=args.max_return)
    run_dir, started = _start_run(cfg, "aurc")
    write_table(os.path.join(run_dir, "aurc.csv"), ("aurc",), [(value,)])
    _finish_run(cfg, run_dir, started, ["aurc.csv"])
    print(f"aurc {value:.6f} over {len(rows)} iterations")
    return 0


def cmd_render_task(args) -> int:
    cfg = _resolve(args)
    env_cfg = calibrate_geometry(cfg.env)
    env = JumpEnv(env_cfg)
    task = TaskSpec(args.obstacle_x, args.floor_y)
    state = env.reset(task)
    for _ in range(args.step):
        if state.terminated:
            break
        state, _ = env.step(state, optimal_action(env_cfg, state))
    run_dir, started = _start_run(cfg, f"render-x{task.obstacle_x}"
                                       f"-y{task.floor_y}")
    write_pgm(os.path.join(run_dir, "task.pgm"), env.render(state))
    _finish_run(cfg, run_dir, started, ["task.pgm"])
    print(f"wrote {run_dir}/task.pgm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pisco",
        description="Train, transfer, and analyze jump-task agents.")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=PROFILES)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--svg", action="store_const", const=True,
                        help="also render SVG charts")
    common.add_argument("--deterministic", action="store_const", const=True,
                        help="blank wall-clock fields so reruns compare equal")

    ppo_flags = argparse.ArgumentParser(add_help=False)
    ppo_flags.add_argument("--iterations", type=int)
    ppo_flags.add_argument("--episodes-per-iter", type=int,
                           dest="episodes_per_iter")
    ppo_flags.add_argument("--updates-per-iter", type=int,
                           dest="updates_per_iter")
    ppo_flags.add_argument("--batch-size", type=int, dest="batch_size")

    mode_flags = argparse.ArgumentParser(add_help=False)
    mode_flags.add_argument("--mode", choices=MODES)
    mode_flags.add_argument("--checkpoint-in", dest="checkpoint_in",
                            help="pretrained checkpoint to start from")

    freeze_flags = argparse.ArgumentParser(add_help=False)
    freeze_flags.add_argument("--freeze-upto", dest="freeze_upto",
                              choices=LAYER_NAMES + ("none",))

    variant_flags = argparse.ArgumentParser(add_help=False)
    variant_flags.add_argument("--checkpoint-in", dest="checkpoint_in",
                               required=True,
                               help="pretrained checkpoint (Frozen variant)")
    variant_flags.add_argument("--finetuned-in", dest="finetuned_in",
                               required=True,
                               help="transferred checkpoint (Finetuned variant)")

    p = sub.add_parser("pretrain", parents=[common, ppo_flags, freeze_flags],
                       help="train from scratch on the pretraining tasks")
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("transfer",
                       parents=[common, ppo_flags, mode_flags, freeze_flags],
                       help="train on the evaluation tasks under a mode")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("sweep-freeze",
                       parents=[common, ppo_flags, mode_flags],
                       help="transfer once per freeze depth, report AURC")
    p.set_defaults(fn=cmd_sweep_freeze)

    p = sub.add_parser("probe", parents=[common, variant_flags],
                       help="layer-wise action-value probes of both encoders")
    p.add_argument("--probe-size", type=int, dest="probe_size",
                   help="transitions in the probe dataset")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("purity", parents=[common, variant_flags],
                       help="neighborhood purity of encoder representations")
    p.set_defaults(fn=cmd_purity)

    p = sub.add_parser("robustness", parents=[common, variant_flags],
                       help="classifier error under input rotations")
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("aurc", parents=[common],
                       help="area under the return curve of a train log")
    p.add_argument("--log", required=True)
    p.add_argument("--max-return", type=float, default=81.0,
                   dest="max_return")
    p.set_defaults(fn=cmd_aurc)

    p = sub.add_parser("render-task", parents=[common],
                       help="write one task frame as a PGM image")
    p.add_argument("--obstacle-x", type=int, required=True, dest="obstacle_x")
    p.add_argument("--floor-y", type=int, required=True, dest="floor_y")
    p.add_argument("--step", type=int, default=0,
                   help="advance this many optimal-policy steps first")
    p.set_defaults(fn=cmd_render_task)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
