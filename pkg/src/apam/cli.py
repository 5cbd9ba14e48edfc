"""Command-line driver.

Subcommands: train (run one experiment, emit a trace CSV), simulate
(staleness sweep over a list of injected delays), verify (invariant audit
across seeds, nonzero exit on any failure), gradcheck (finite-difference
gradient verification), bounds (evaluate the rate bounds from estimated
plus supplied constants and print them next to the empirical run).

The APAM_SEED environment variable overrides run.master_seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    build_hyperparams,
    build_problem,
    build_run_config,
    parse_config,
)
from .metrics import (
    StepRecorder,
    bound_cvx_delay,
    bound_cvx_nodelay,
    bound_ncvx,
    estimate_inputs,
    invariant_audit,
    vtilde_inv_l1,
)
from .problems import grad_check
from .runtime import Fixed, run as run_any


def _master_seed(cfg) -> int:
    env = os.environ.get("APAM_SEED")
    return int(env) if env else cfg.run.master_seed


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.mode:
        cfg.run.mode = args.mode
    if args.workers:
        cfg.run.workers = args.workers
    problem = build_problem(cfg.problem)
    hp = build_hyperparams(cfg)
    rc = build_run_config(cfg, _master_seed(cfg))
    hooks = []
    recorder = None
    if cfg.audit.enabled:
        recorder = StepRecorder(problem.dim)
        hooks.append(recorder)
    trace = run_any(problem, hp, rc, hooks=hooks)
    comments = []
    if rc.mode in ("threads", "wire"):
        comments.append(trace.histogram_comment())
        comments.append(f"throughput_applied_per_s {trace.throughput:.2f}")
    out = args.out or cfg.output.trace
    trace.to_csv(out, comments)
    print(f"mode={rc.mode} applied={trace.applied} dropped={trace.dropped} "
          f"final_objective={problem.full_value(trace.final_state.x):.6g}")
    print(f"trace written to {out}")
    if recorder is not None and recorder.records:
        report = invariant_audit(recorder.records, hp.beta1, hp.beta2,
                                 eps=hp.eps, stride=cfg.audit.stride)
        print(report.to_text())
        if not report.ok():
            return 1
    return 0


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    cfg.run.mode = "sim"
    taus = [int(t) for t in args.tau.split(",")]
    problem = build_problem(cfg.problem)
    hp = build_hyperparams(cfg)
    base = Path(args.out or cfg.output.trace)
    for tau in taus:
        rc = dataclasses.replace(
            build_run_config(cfg, _master_seed(cfg)), delay_model=Fixed(tau)
        )
        trace = run_any(problem, hp, rc)
        out = base.with_name(f"{base.stem}_tau{tau}{base.suffix or '.csv'}")
        trace.to_csv(out)
        print(f"tau={tau} applied={trace.applied} dropped={trace.dropped} "
              f"final_objective={problem.full_value(trace.final_state.x):.6g} -> {out}")
    return 0


def cmd_verify(args) -> int:
    cfg = parse_config(args.config)
    problem = build_problem(cfg.problem)
    hp = build_hyperparams(cfg)
    all_ok = True
    csv_lines = ["seed,check,instances,worst_slack,pass"]
    for seed in range(args.seeds):
        rc = build_run_config(cfg, master_seed=seed)
        recorder = StepRecorder(problem.dim)
        trace = run_any(problem, hp, rc, hooks=[recorder])
        if not recorder.records:
            print(f"seed {seed}: no applied gradients, nothing to audit")
            all_ok = False
            continue
        report = invariant_audit(recorder.records, hp.beta1, hp.beta2,
                                 eps=hp.eps, stride=cfg.audit.stride)
        staleness_ok = trace.max_applied_tau() <= rc.policy.tau_max
        status = "pass" if (report.ok() and staleness_ok) else "FAIL"
        print(f"seed {seed}: {status} (applied={trace.applied}, "
              f"max_tau={trace.max_applied_tau()}, tau_max={rc.policy.tau_max})")
        print(report.to_text())
        csv_lines.extend(f"{seed},{ln}" for ln in report.to_csv().splitlines()[1:])
        all_ok = all_ok and report.ok() and staleness_ok
    if args.report_csv:
        with open(args.report_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(csv_lines) + "\n")
        print(f"audit report written to {args.report_csv}")
    return 0 if all_ok else 1


def cmd_gradcheck(args) -> int:
    cfg = parse_config(args.config)
    problem = build_problem(cfg.problem)
    threshold = 1e-9 if cfg.problem.kind == "quadratic" else 1e-5
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(args.points):
        x = rng.standard_normal(problem.dim)
        worst = max(worst, grad_check(problem, x, h=args.h))
    ok = worst <= threshold
    print(f"{cfg.problem.kind}: max relative gradient error {worst:.3e} "
          f"(threshold {threshold:.0e}) -> {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_bounds(args) -> int:
    cfg = parse_config(args.config)
    problem = build_problem(cfg.problem)
    hp = build_hyperparams(cfg)
    rc = build_run_config(cfg, _master_seed(cfg))
    K = rc.total_iterations
    k0 = max(2, K // 2)
    recorder = StepRecorder(problem.dim, k0=k0, keep_states=False)
    trace = run_any(problem, hp, rc, hooks=[recorder])
    bi = estimate_inputs(
        recorder.tracker, n=problem.dim, beta1=hp.beta1, beta2=hp.beta2,
        alpha=hp.alpha, K=K, k0=k0, tau=rc.policy.tau_max,
        box=getattr(problem, "box", None), L=args.L, C_F=args.C_F,
    )
    lines = []
    lines.append("bound inputs (value [provenance]):")
    for name in ("n", "D_inf", "G1", "G_inf", "L", "s", "tau", "C_F", "c"):
        val = getattr(bi, name)
        prov = bi.provenance.get(name, "exact")
        lines.append(f"  {name:6s} = {val!r:24s} [{prov}]")
    sched = "const" if cfg.optimizer.schedule == "const" else "invsqrt"
    try:
        lines.append(f"convex_no_delay_bound({sched}) = {bound_cvx_nodelay(bi, sched)!r}")
    except ValueError as exc:
        lines.append(f"convex_no_delay_bound unavailable: {exc}")
    try:
        lines.append(f"convex_delay_bound(tau={bi.tau}) = {bound_cvx_delay(bi)!r}")
    except ValueError as exc:
        lines.append(f"convex_delay_bound unavailable: {exc}")
    ev = vtilde_inv_l1(recorder.tracker)
    try:
        setting = 2 if (cfg.optimizer.schedule == "invsqrt" and 2 * k0 == K) else 1
        if ev is None:
            raise ValueError("second-moment floor estimate unavailable")
        lines.append(
            f"nonconvex_bound(setting={setting}, E_vtilde_inv_l1={ev!r}) = "
            f"{bound_ncvx(bi, setting, ev)!r}"
        )
    except ValueError as exc:
        lines.append(f"nonconvex_bound unavailable: {exc}")
    lines.append(f"empirical final_objective = {problem.full_value(trace.final_state.x)!r}")
    gnorm = float(np.dot(problem.full_grad(trace.final_state.x),
                         problem.full_grad(trace.final_state.x)))
    lines.append(f"empirical final_full_grad_norm_sq = {gnorm!r}")
    for ln in lines:
        print(ln)
    if args.out:
        trace.to_csv(args.out, comments=lines)
        print(f"trace written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment and emit a trace CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=["sim", "threads", "wire"])
    t.add_argument("--workers", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="sim-mode staleness sweep over a tau list")
    s.add_argument("--config", required=True)
    s.add_argument("--tau", required=True, help="comma-separated delays, e.g. 0,8,32")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="invariant audit across seeds")
    v.add_argument("--config", required=True)
    v.add_argument("--seeds", type=int, default=10)
    v.add_argument("--report-csv", dest="report_csv",
                   help="also write the audit results as CSV")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--config", required=True)
    g.add_argument("--points", type=int, default=3)
    g.add_argument("--h", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bounds", help="evaluate rate bounds next to an empirical run")
    b.add_argument("--config", required=True)
    b.add_argument("--L", type=float, default=None, help="assumed smoothness constant")
    b.add_argument("--C-F", dest="C_F", type=float, default=None,
                   help="assumed bound on |F|")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, LookupError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
