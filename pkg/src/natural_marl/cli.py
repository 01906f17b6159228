"""Command line entry point (``natural-marl``).

Exit codes: 0 success, 1 configuration error, 2 a run aborted.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, env_abstract, harness

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _config(args):
    if args.config:
        return harness.load_config(args.config, fast=args.fast, seed=args.seed)
    cfg = harness.default_config(args.env or "abstract", fast=args.fast, seed=args.seed or 0)
    return cfg.validate()


def cmd_gen_env(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.env == "abstract":
        mdp = harness.build_env(cfg, harness.seed_streams(seed)[0])
        path = out / f"abstract-s{seed}.mdp"
        env_abstract.save(mdp, path)
    else:
        net = harness.build_env(cfg, None)
        path = out / f"traffic-p{net.arrival_pattern}.json"
        desc = {"arrival_pattern": net.arrival_pattern, "rates": net.pattern.vector().tolist(),
                "routes": net.routes.tolist(), "route_len": net.route_len.tolist(),
                "policy_dim": net.policy_dim, "value_dim": net.value_dim, "reward_dim": net.reward_dim}
        path.write_text(json.dumps(desc, indent=1) + "\n")
    print(path)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    if args.workers:
        cfg.workers = args.workers
    out = Path(args.out or cfg.out)
    man = harness.run_experiment(cfg, out)
    aborted = [r for r in man["runs"] if r["status"] != "ok"]
    for r in man["runs"]:
        extra = f" (step {r['abort_step']}: {r['abort_reason']})" if r["status"] != "ok" else ""
        print(f"{r['run_id']:<16} {r['status']}{extra}")
    print(f"wrote {len(man['runs'])} runs to {out}")
    return EXIT_ABORT if aborted else EXIT_OK


def _files(args):
    out = Path(args.out or "runs")
    if not (out / "manifest.json").is_file():
        raise harness.ConfigError([f"no manifest.json in {out}"])
    return harness.manifest_files(out)


def cmd_summarize(args):
    files, man = _files(args)
    metric = args.metric or man["metric"]
    table = harness.summarize(files, window=args.window, metric=metric)
    print(harness.format_summary(table, metric))
    (Path(args.out or "runs") / "summary.csv").write_text(harness.summary_csv(table))
    return EXIT_OK


def cmd_plot_data(args):
    files, man = _files(args)
    out = Path(args.out or "runs")
    kinds = harness.PLOT_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        path = out / "plots" / f"{kind}.dat"
        harness.emit_plot_data(files, kind, path, metric=man["metric"])
        print(path)
    return EXIT_OK


def cmd_analyze_kl(args):
    rng = np.random.default_rng(args.seed or 0)
    print(f"{'inst':>4} {'|dtheta|':>9} {'exact KL':>12} {'KL-def':>10} {'quad ratio':>11} {'MC grad err':>11}")
    rows = []
    for k in range(args.instances):
        q, theta, d = analysis.random_boltzmann(rng)
        for norm in (1e-3, 1.5):
            dt = rng.normal(size=theta.size)
            dt *= norm / np.linalg.norm(dt)
            rep = analysis.kl_report(q, theta, dt, d, args.samples, rng)
            diff = abs(rep.exact_kl - rep.definitional_kl)
            rows.append((k, norm, rep.exact_kl, diff, rep.quadratic_ratio, rep.mc_rel_error))
            print(f"{k:>4} {norm:>9.0e} {rep.exact_kl:>12.4e} {diff:>10.1e} {rep.quadratic_ratio:>11.6f} "
                  f"{rep.mc_rel_error:>11.2e}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        lines = ["instance,step_norm,exact_kl,definitional_gap,quadratic_ratio,mc_rel_error"]
        lines += [",".join(repr(float(x)) if i else str(x) for i, x in enumerate(r)) for r in rows]
        (Path(args.out) / "kl_report.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_compare_deterministic(args):
    rng = np.random.default_rng(args.seed or 0)
    print(f"{'inst':>4} {'n':>2} {'|S|':>3} {'H':>9} {'t0':>4} {'dominance':>9} {'J_M(T)':>9} {'J_N(T)':>9}")
    for k in range(args.instances):
        n = int(rng.integers(1, 3))
        mdp = env_abstract.generate(n, int(rng.integers(2, 5)), rng, m=3)
        theta0 = args.init_scale * rng.normal(size=(n, 3))
        tr = analysis.deterministic_compare(mdp, theta0, args.steps)
        dom = "n/a" if tr.t0 is None else str(tr.dominance_holds)
        t0 = "-" if tr.t0 is None else str(tr.t0)
        print(f"{k:>4} {n:>2} {mdp.n_states:>3} {tr.H:>9.3g} {t0:>4} {dom:>9} {tr.j_m[-1]:>9.5f} {tr.j_n[-1]:>9.5f}")
    return EXIT_OK


def cmd_check_fisher(args):
    rng = np.random.default_rng(args.seed or 0)
    mdp = env_abstract.generate(2, 4, rng, m=3)
    theta = rng.normal(size=(2, 3))
    rep = analysis.check_fisher_recursion(mdp, theta, args.samples, np.random.default_rng(rng.integers(2**63)),
                                          np.random.default_rng(rng.integers(2**63)), schedule=args.schedule)
    print(f"samples {rep.samples}  schedule {args.schedule}")
    print(f"relative Frobenius error of G_T: {rep.rel_error:.4e}")
    print(f"max ||G G^-1 - I||_F:           {rep.max_lockstep:.4e}")
    print(f"skipped rank-one updates:       {rep.skipped}")
    return EXIT_OK


def _global_flags(parser, suppress=False):
    # subcommands repeat the flags with suppressed defaults so values given
    # before the subcommand are not overwritten
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="INI-style run configuration", **kw)
    parser.add_argument("--seed", type=int, help="master seed (u64)", **kw)
    parser.add_argument("--out", help="output directory", **kw)
    parser.add_argument("--fast", action="store_true", help="short profile: fewer epochs, 3 seeds", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="natural-marl", description="Decentralized natural actor-critic experiments.")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", parents=[common], help="generate and save an environment instance")
    g.add_argument("--env", choices=sorted(harness.ENV_DEFAULTS))
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", parents=[common], help="run every (algorithm, seed) pair")
    t.add_argument("--env", choices=sorted(harness.ENV_DEFAULTS))
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("summarize", parents=[common], help="final-window statistics per algorithm")
    s.add_argument("--window", type=int)
    s.add_argument("--metric", choices=("congestion", "average_reward", "network_total"))
    s.set_defaults(func=cmd_summarize)

    pd = sub.add_parser("plot-data", parents=[common], help="write columnar series for plotting")
    pd.add_argument("--kind", choices=harness.PLOT_KINDS + ("all",), default="all")
    pd.set_defaults(func=cmd_plot_data)

    k = sub.add_parser("analyze-kl", parents=[common], help="KL identities on random Boltzmann instances")
    k.add_argument("--instances", type=int, default=5)
    k.add_argument("--samples", type=int, default=10**6)
    k.set_defaults(func=cmd_analyze_kl)

    d = sub.add_parser("compare-deterministic", parents=[common], help="deterministic MAAC vs FI-MAN")
    d.add_argument("--instances", type=int, default=10)
    d.add_argument("--steps", type=int, default=40)
    d.add_argument("--init-scale", type=float, default=6.0)
    d.set_defaults(func=cmd_compare_deterministic)

    f = sub.add_parser("check-fisher", parents=[common], help="Fisher recursion at a frozen policy")
    f.add_argument("--samples", type=int, default=10**5)
    f.add_argument("--schedule", choices=("critic", "sample_average"), default="critic")
    f.set_defaults(func=cmd_check_fisher)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
