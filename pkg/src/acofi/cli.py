"""Command-line entry point: ``acofi {solve,simulate,compare,verify-theorem,export-plot}``.

Exit codes: 0 success, 2 configuration error, 3 solver did not converge,
4 a theorem check failed, 5 I/O or malformed input. Failures print one
``error code=N kind=... message="..."`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import shutil
import sys
import tempfile

from .config import dump_config, load_config
from .environment import Scenario
from .errors import AcofiError, ConfigError, TheoremCheckFailed
from .harness import (read_trace, run_episode, run_matrix, runs_to_csv, summarize,
                      summary_to_csv, trace_filename, trace_to_csv, verify_theorems)
from .safety_bellman import (check_header, export_qtable_csv, load_qtable, save_qtable,
                             solve_safety_bellman)

log = logging.getLogger("acofi")

IO_EXIT = 5


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _publish_dir(files: dict[str, str], out_dir: str) -> None:
    """Write ``files`` (relative path -> text) into ``out_dir`` all at once.

    Everything is staged in a sibling temporary directory and moved into
    place only after every file has been written.
    """
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".acofi-", dir=parent)
    try:
        for rel, text in files.items():
            path = os.path.join(stage, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)
        os.makedirs(out_dir, exist_ok=True)
        for rel in files:
            dst = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            os.replace(os.path.join(stage, rel), dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _load_table(path, cfg):
    table = load_qtable(path)
    check_header(table, cfg.grid, cfg.dyn, cfg.solver.gamma)
    return table


def cmd_solve(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    s = cfg.solver
    table = solve_safety_bellman(cfg.world, cfg.grid, cfg.dyn, s.gamma, s.tol, s.max_iters)
    save_qtable(table, args.out)
    if args.csv:
        export_qtable_csv(table, args.csv)
    print(f"residual = {table.residual!r}")
    print(f"iterations = {table.iterations}")
    print(f"interp_error = {table.interp_error!r}")
    return 0


def _verification_text(results, cfg) -> tuple[str, bool]:
    lines = []
    all_ok = True
    for res in results:
        if res.policy != "acofi":
            continue
        rep = verify_theorems(res.trace, cfg.filter)
        all_ok &= rep.ok
        lines.append(f"[{trace_filename(res)}]")
        lines += rep.lines()
        lines.append("")
    lines.insert(0, f"all_ok = {'true' if all_ok else 'false'}\n")
    return "\n".join(lines), all_ok


def _experiment_files(results, cfg) -> tuple[dict[str, str], bool]:
    files = {os.path.join("traces", trace_filename(r)): trace_to_csv(r.trace) for r in results}
    files["runs.csv"] = runs_to_csv(results)
    files["summary.csv"] = summary_to_csv(summarize(results))
    files["config.ini"] = dump_config(cfg)
    text, ok = _verification_text(results, cfg)
    if text.strip():
        files["verification.txt"] = text
    return files, ok


def cmd_simulate(args) -> int:
    ov = _overrides(args)
    ov["experiment.policies"] = args.policy
    ov["experiment.scenarios"] = args.scenario
    ov["experiment.base_seed"] = str(args.seed)
    ov["experiment.n_runs"] = "1"
    cfg = load_config(args.config, ov)
    table = _load_table(args.qtable, cfg)
    res = run_episode(args.policy, cfg, args.seed, table, Scenario.parse(args.scenario))
    files, ok = _experiment_files([res], cfg)
    _publish_dir(files, args.out)
    m = res.metrics
    print(f"total_steps = {m.total_steps}")
    print(f"goal_reaches = {m.goal_reaches}")
    print(f"min_v = {m.min_v!r}")
    print(f"unsafe_steps = {m.unsafe_steps}")
    print(f"safe_policy_steps = {m.safe_policy_steps}")
    if not ok:
        raise TheoremCheckFailed("theorem check failed; see verification.txt")
    return 0


def cmd_compare(args) -> int:
    ov = _overrides(args)
    if args.jobs is not None:
        ov["experiment.jobs"] = str(args.jobs)
    if args.reset_aci_on_respawn:
        ov["experiment.reset_aci_on_respawn"] = "true"
    cfg = load_config(args.config, ov)
    table = _load_table(args.qtable, cfg)
    results = run_matrix(cfg, table)
    files, ok = _experiment_files(results, cfg)
    _publish_dir(files, args.out)
    sys.stdout.write(files["summary.csv"])
    if not ok:
        raise TheoremCheckFailed("theorem check failed; see verification.txt")
    return 0


def cmd_verify(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    rep = verify_theorems(read_trace(args.trace), cfg.filter)
    print("\n".join(rep.lines()))
    if not rep.ok:
        raise TheoremCheckFailed(f"theorem check failed for {args.trace}")
    return 0


def export_plot(trace_path: str, out_path: str, epsilon: float) -> None:
    """Whitespace-separated columns ``t V B eps policy`` for external plotting.

    ``V`` is the value reached by the step and ``B`` its certified lower
    bound; an infinite quantile shows up as ``-inf`` in ``B``.
    """
    trace = read_trace(trace_path)
    lines = ["# t V B eps policy"]
    for r in trace:
        lines.append(f"{r.t} {r.v_next!r} {r.b_t!r} {epsilon!r} {r.policy_used}")
    _write_text(out_path, "\n".join(lines) + "\n")


def cmd_export_plot(args) -> int:
    eps = args.epsilon
    if eps is None:
        eps = load_config(args.config).filter.epsilon if args.config else 0.1
    if not (math.isfinite(eps) and eps > 0):
        raise ConfigError(f"epsilon must be positive, got {eps}")
    export_plot(args.trace, args.out, eps)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acofi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_set(p):
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        return p

    p = with_set(sub.add_parser("solve", help="solve the safety Bellman equation"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="binary Q-table output")
    p.add_argument("--csv", help="also export px,py,theta,a,Q rows")
    p.set_defaults(func=cmd_solve)

    p = with_set(sub.add_parser("simulate", help="run one episode"))
    p.add_argument("--config", required=True)
    p.add_argument("--qtable", required=True)
    p.add_argument("--policy", required=True, choices=("task", "fixed", "acofi"))
    p.add_argument("--scenario", required=True,
                   choices=("id", "varspeed", "varsteer", "varspeedsteer"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = with_set(sub.add_parser("compare", help="run the full policy x scenario x seed matrix"))
    p.add_argument("--config", required=True)
    p.add_argument("--qtable", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)
    p.add_argument("--reset-aci-on-respawn", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = with_set(sub.add_parser("verify-theorem", help="check coverage guarantees on a trace"))
    p.add_argument("--trace", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-plot", help="write plot columns from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_export_plot)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    message = " ".join(str(message).split()).replace('"', "'")
    print(f'error code={code} kind={kind} message="{message}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AcofiError as exc:
        return _fail(exc.exit_code, exc.kind, exc)
    except OSError as exc:
        return _fail(IO_EXIT, "IoError", f"{exc.filename or ''}: {exc.strerror or exc}")


if __name__ == "__main__":
    sys.exit(main())
