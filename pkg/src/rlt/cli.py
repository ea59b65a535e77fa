"""Command-line entry point.

Subcommands: gen-demos | train-token | train-rl | eval | replay-dump |
serve | report. Every command takes --config/--seed/--out; all randomness
derives from --seed. Exit codes: 0 success, 2 invalid config (the message
names the key), 3 missing input file or checkpoint.

RLT_LOG={error|info|debug} controls verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3

log = logging.getLogger("rlt")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("RLT_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="INI config path (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run", help="run directory for outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    _common_args(p)

    p = sub.add_parser("train-token", help="stage-1 readout training on demos")
    _common_args(p)
    p.add_argument("--demos", default=None, help="demo file (default {out}/demos.rltd)")

    p = sub.add_parser("train-rl", help="stage-2 online actor-critic refinement")
    _common_args(p)
    p.add_argument("--mode", choices=["critical", "full"], default=None)
    p.add_argument("--supervisor", choices=["scripted", "interactive"], default="scripted")
    p.add_argument("--token", default=None, help="trained token checkpoint (default {out}/token.rltn)")
    p.add_argument("--port", type=int, default=8765, help="console port (interactive supervisor)")

    p = sub.add_parser("eval", help="evaluate a trained actor checkpoint")
    _common_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--token", default=None)
    p.add_argument("--baseline", choices=["stub", "expert", "none"], default="stub")
    p.add_argument("--zero-refs", action="store_true", help="feed the actor all-zero references")

    p = sub.add_parser("replay-dump", help="dump a replay buffer file as TSV")
    p.add_argument("--buffer", required=True)
    p.add_argument("--out", default=None, help="output file (stdout when omitted)")
    p.add_argument("--full", action="store_true", help="include full vectors")

    p = sub.add_parser("serve", help="interactive training with the browser console")
    _common_args(p)
    p.add_argument("--mode", choices=["critical", "full"], default=None)
    p.add_argument("--token", default=None)
    p.add_argument("--port", type=int, default=8765)

    p = sub.add_parser("report", help="re-render figures from a run directory")
    p.add_argument("--run", required=True)
    return parser


def _load_config(args, overrides=None):
    from .config import ConfigError, load_config

    try:
        return load_config(args.config, seed=args.seed, overrides=overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _write_resolved(cfg, out_dir):
    from .config import resolved_text

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.ini")
    with open(path, "w") as fh:
        fh.write(resolved_text(cfg))
    return path


def _require(path, what) -> str:
    if path is None or not os.path.exists(path):
        print(f"missing {what}: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING)
    return path


def cmd_gen_demos(args) -> int:
    from . import report, vlastub
    from .orchestrate import EpisodeTrace

    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    demos = vlastub.generate_demos(
        cfg.demo.n_demos,
        seed=args.seed,
        episode_config=cfg.env,
        action_noise=cfg.demo.demo_noise,
        chunk_len=cfg.demo.demo_chunk_len,
    )
    out_path = os.path.join(args.out, "demos.rltd")
    vlastub.save_demos(demos, out_path)
    summary = os.path.join(args.out, "demo_summary.tsv")
    with open(summary, "w") as fh:
        fh.write("trajectory\tsteps\tsuccess\tslot_cx\tslot_cy\n")
        for i, traj in enumerate(demos.trajectories):
            fh.write(
                f"{i}\t{len(traj)}\t{int(traj.success)}\t{traj.slot_center[0]:.6g}\t{traj.slot_center[1]:.6g}\n"
            )
    if demos.trajectories:
        t0 = demos.trajectories[0]
        trace = EpisodeTrace(
            seed=args.seed, chunk_len=cfg.run.chunk_len,
            pixels=np.stack([s.pixels for s in t0.steps]),
            proprios=np.stack([s.proprio for s in t0.steps]),
            actions=np.stack([s.action for s in t0.steps]),
            sources=np.full(len(t0.steps), 2, dtype=np.uint8),
            rewards=np.array([s.reward for s in t0.steps], dtype=np.float32),
            proposals=[], handover_step=None, label=t0.success, final_success=t0.success,
        )
        report.render_trace(trace, args.out, "demo_trace.png")
    log.info("wrote %d demos (%d frames) to %s", len(demos), demos.n_frames(), out_path)
    return EXIT_OK


def cmd_train_token(args) -> int:
    from . import report, rltoken, vlastub

    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    demos_path = _require(args.demos or os.path.join(args.out, "demos.rltd"), "demo file")
    demos = vlastub.load_demos(demos_path)
    backbone = vlastub.FrozenBackbone()
    readout = rltoken.ReadoutModule.create(seed=args.seed)
    readout, rep = rltoken.train_readout(
        readout, demos, steps=cfg.token.steps, batch=cfg.token.batch,
        lr=cfg.token.lr, seed=args.seed, backbone=backbone, log_every=cfg.token.log_every,
    )
    token_path = os.path.join(args.out, "token.rltn")
    readout.params.save(token_path)
    curve_path = os.path.join(args.out, "token_loss.tsv")
    with open(curve_path, "w") as fh:
        fh.write("step\tloss\n")
        for i, v in enumerate(rep.loss_curve):
            fh.write(f"{i * cfg.token.log_every}\t{v:.6g}\n")
    if rep.loss_curve:
        report.render_token_loss(rep.loss_curve, cfg.token.log_every, args.out)
        log.info(
            "token trained: loss %.4g -> %.4g (ratio %.3g), saved %s",
            rep.initial, rep.final, rep.final / rep.initial, token_path,
        )
    return EXIT_OK


def _build_components(cfg, seed, token_path):
    from .chunkrl import Learner
    from .orchestrate import Components
    from .replay import ReplayBuffer
    from .rltoken import ReadoutModule
    from .vlastub import FrozenBackbone, ReferencePolicy

    backbone = FrozenBackbone()
    readout = ReadoutModule.create(seed=seed)
    readout.params.load(token_path)
    readout.freeze()
    learner = Learner.create(
        seed=seed, gamma=cfg.run.gamma, beta=cfg.run.beta, sigma=cfg.run.sigma,
        p_ref=cfg.run.p_ref, tau=cfg.run.tau, lr_critic=cfg.run.lr_critic,
        lr_actor=cfg.run.lr_actor, critic_layernorm=cfg.run.critic_layernorm,
    )
    return Components(
        episode_template=cfg.env,
        backbone=backbone,
        stub=ReferencePolicy(cfg.stub, cfg.env),
        readout=readout,
        learner=learner,
        replay=ReplayBuffer(capacity=cfg.run.replay_capacity),
    )


def _train_rl(args, interactive: bool) -> int:
    from . import report
    from .chunkrl import save_actor, save_critics
    from .orchestrate import (
        MetricsLog, ScriptedSupervisor, actor_policy, evaluate, train_online, warmup,
    )

    overrides = {}
    if args.mode:
        overrides["run.phase_mode"] = {"critical": "critical", "full": "full"}[args.mode]
    cfg = _load_config(args, overrides)
    _write_resolved(cfg, args.out)
    token_path = _require(args.token or os.path.join(args.out, "token.rltn"), "token checkpoint")
    comps = _build_components(cfg, args.seed, token_path)
    run_cfg = cfg.run
    metrics_path = os.path.join(args.out, "metrics.log")
    mlog = MetricsLog(metrics_path)

    if interactive:
        from .serve import InteractiveSupervisor, ConsoleServer

        server = ConsoleServer(port=args.port)
        server.start()
        log.info("console listening on port %d", server.port)
        supervisor = InteractiveSupervisor(server)
    else:
        supervisor = ScriptedSupervisor(run_cfg)

    ss = np.random.SeedSequence([run_cfg.seed, 0xAA])
    rng_env, rng_roll = (np.random.default_rng(s) for s in ss.spawn(2))
    warmup(run_cfg, comps, supervisor, rng_env, rng_roll, mlog)

    def checkpoint_fn(tag, comps_):
        step = comps_.learner.update_count
        save_actor(comps_.learner.actor, os.path.join(args.out, f"actor_{step}.rltn"))
        save_critics(comps_.learner.critics, os.path.join(args.out, f"critic_{step}.rltn"))

    def eval_fn(comps_):
        return evaluate(
            actor_policy(comps_, run_cfg), run_cfg, cfg.env, comps_,
            run_cfg.eval_episodes, seed_base=run_cfg.seed * 1000 + 880001,
        )

    try:
        result = train_online(run_cfg, comps, supervisor, mlog,
                              checkpoint_fn=checkpoint_fn, eval_fn=eval_fn)
    finally:
        if interactive:
            server.stop()
    comps.replay.persist(os.path.join(args.out, "replay.rltb"))
    mlog.event("done", f"episodes={result.episodes} updates={result.updates} diverged={result.diverged}")
    mlog.close()
    report.render_training_figures(report.parse_metrics(metrics_path), args.out)
    log.info(
        "train-rl finished: %d episodes, %d updates, %d stored transitions%s",
        result.episodes, result.updates, result.stored,
        " (DIVERGED)" if result.diverged else "",
    )
    return EXIT_OK


def cmd_train_rl(args) -> int:
    return _train_rl(args, interactive=args.supervisor == "interactive")


def cmd_serve(args) -> int:
    return _train_rl(args, interactive=True)


def cmd_eval(args) -> int:
    from . import report
    from .chunkrl import load_actor
    from .orchestrate import MetricsLog, actor_policy, evaluate, expert_policy, stub_policy

    cfg = _load_config(args)
    _write_resolved(cfg, args.out)
    metrics_path = os.path.join(args.out, "eval.tsv")
    if args.episodes == 0:
        with open(metrics_path, "w") as fh:
            fh.write("policy\tepisodes\tsuccess_rate\tmedian_steps\tmean_steps\tthroughput\n")
        log.info("0 episodes requested; empty metrics written")
        return EXIT_OK
    token_path = _require(args.token or os.path.join(args.out, "token.rltn"), "token checkpoint")
    ckpt = _require(args.checkpoint, "actor checkpoint")
    comps = _build_components(cfg, args.seed, token_path)
    comps.learner.actor = load_actor(ckpt, sigma=cfg.run.sigma, p_ref=cfg.run.p_ref)
    run_cfg = cfg.run
    seed_base = args.seed * 1000 + 970001

    rows = []
    ev_actor = evaluate(
        actor_policy(comps, run_cfg, zero_refs=args.zero_refs), run_cfg, cfg.env, comps,
        args.episodes, seed_base,
    )
    rows.append(("actor" + ("_zero_refs" if args.zero_refs else ""), ev_actor))
    ev_base = None
    if args.baseline == "stub":
        ev_base = evaluate(stub_policy(comps, run_cfg), run_cfg, cfg.env, comps, args.episodes, seed_base)
        rows.append(("stub", ev_base))
    elif args.baseline == "expert":
        ev_base = evaluate(expert_policy(comps, run_cfg), run_cfg, cfg.env, comps, args.episodes, seed_base)
        rows.append(("expert", ev_base))

    with open(metrics_path, "w") as fh:
        fh.write("policy\tepisodes\tsuccess_rate\tmedian_steps\tmean_steps\tthroughput\n")
        for name, ev in rows:
            fh.write(
                f"{name}\t{ev['episodes']}\t{ev['success_rate']:.6g}\t"
                f"{MetricsLog._fmt(ev['median_steps_to_success'])}\t"
                f"{MetricsLog._fmt(ev['mean_steps_to_success'])}\t{ev['throughput']:.6g}\n"
            )
    report.render_eval_summary(
        ev_actor, ev_base, ev_actor["steps_to_success"],
        ev_base["steps_to_success"] if ev_base else None, args.out,
    )
    for name, ev in rows:
        log.info(
            "%s: success %.3f, median steps %s, throughput %.2f/10min",
            name, ev["success_rate"], ev["median_steps_to_success"], ev["throughput"],
        )
    return EXIT_OK


def cmd_replay_dump(args) -> int:
    from .replay import SOURCE_NAMES, ReplayBuffer

    path = _require(args.buffer, "replay buffer")
    try:
        buf = ReplayBuffer.load(path)
    except Exception as e:
        print(f"cannot load buffer: {e}", file=sys.stderr)
        return EXIT_MISSING
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        header = "idx\tsource\tterminal_within\treward_sum\tref_equals_action\tref_dev"
        if args.full:
            header += "\tx\taction\tref\trewards\tnext_x"
        out.write(header + "\n")
        for i in range(len(buf)):
            tr = buf.get(i)
            ref_dev = float(np.linalg.norm(tr.action - tr.ref))
            row = (
                f"{i}\t{SOURCE_NAMES[tr.source]}\t"
                f"{'-' if tr.terminal_within is None else tr.terminal_within}\t"
                f"{tr.rewards.sum():.6g}\t{int(np.array_equal(tr.action, tr.ref))}\t{ref_dev:.6g}"
            )
            if args.full:
                def v(a):
                    return ",".join(f"{x:.6g}" for x in np.asarray(a).ravel())
                row += f"\t{v(tr.x)}\t{v(tr.action)}\t{v(tr.ref)}\t{v(tr.rewards)}\t{v(tr.next_x)}"
            out.write(row + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_report(args) -> int:
    from . import report

    metrics_path = _require(os.path.join(args.run, "metrics.log"), "metrics log")
    paths = report.render_training_figures(report.parse_metrics(metrics_path), args.run)
    log.info("rendered %d figures in %s", len(paths), args.run)
    return EXIT_OK


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-token": cmd_train_token,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "replay-dump": cmd_replay_dump,
    "serve": cmd_serve,
    "report": cmd_report,
}


def run_command(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    except Exception as e:
        log.error("%s", e, exc_info=os.environ.get("RLT_LOG") == "debug")
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
