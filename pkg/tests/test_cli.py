import math
import re
from pathlib import Path

import numpy as np
import pytest

from acofi.cli import main
from acofi.config import dump_config, load_config, parse_config
from acofi.errors import ConfigError
from acofi.harness import parse_trace, trace_to_csv
from acofi.safety_bellman import load_qtable, save_qtable, solve_safety_bellman

from conftest import MICRO_DYN, MICRO_GAMMA
from oracles import value_iteration

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
MICRO = str(CONFIGS / "micro.ini")
ERROR_LINE = re.compile(r'^error code=(\d) kind=(\w+) message=".*"$')


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    m = ERROR_LINE.match(err[0])
    assert m, err[0]
    return int(m.group(1)), m.group(2)


@pytest.fixture(scope="module")
def micro_qbin(tmp_path_factory):
    path = tmp_path_factory.mktemp("q") / "micro.bin"
    assert main(["solve", "--config", MICRO, "--out", str(path)]) == 0
    return path


def test_shipped_configs_parse():
    default = load_config(CONFIGS / "default.ini")
    assert default.grid.shape == (101, 101, 64) and default.n_runs == 16
    micro = load_config(MICRO)
    assert micro.dyn == MICRO_DYN and micro.solver.gamma == MICRO_GAMMA


def test_config_round_trip():
    cfg = load_config(MICRO, {"filter.alpha_init": "0.4", "experiment.scenarios": "id varsteer"})
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[grid]\nmx = 3\n", "[grid]\nnx = abc\n",
                                  "[solver]\ngamma = 1.0\n", "[world]\ngoal = 1 2\n",
                                  "[experiment]\nscenarios = windy\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_solve_micro_matches_library_and_oracle(tmp_path, micro_qbin, world):
    lib = solve_safety_bellman(world, load_config(MICRO).grid, MICRO_DYN, MICRO_GAMMA, 1e-6)
    ref = tmp_path / "lib.bin"
    save_qtable(lib, ref)
    assert micro_qbin.read_bytes() == ref.read_bytes()
    oracle, _ = value_iteration(world, 5, 5, 4, MICRO_DYN, MICRO_GAMMA, 1e-6)
    assert np.max(np.abs(load_qtable(micro_qbin).values - np.array(oracle))) <= 1e-5


def test_solve_prints_residual(tmp_path, capsys):
    assert main(["solve", "--config", MICRO, "--out", str(tmp_path / "q.bin"),
                 "--csv", str(tmp_path / "q.csv")]) == 0
    out = capsys.readouterr().out
    residual = float(re.search(r"residual = (\S+)", out).group(1))
    assert residual <= 1e-6 and "iterations = " in out
    assert (tmp_path / "q.csv").read_text().startswith("px,py,theta,a,Q\n")


def test_solve_rejects_gamma_one(tmp_path, capsys):
    out = tmp_path / "q.bin"
    assert main(["solve", "--config", MICRO, "--out", str(out), "--set", "solver.gamma=1"]) == 2
    assert _error(capsys) == (2, "ConfigError")
    assert not out.exists()


def test_solve_nonconvergence(tmp_path, capsys):
    out = tmp_path / "q.bin"
    code = main(["solve", "--config", MICRO, "--out", str(out), "--set", "solver.max_iters=2"])
    assert code == 3 and _error(capsys) == (3, "NonConvergence")
    assert not out.exists()


def test_bad_override_syntax(tmp_path, capsys):
    assert main(["solve", "--config", MICRO, "--out", str(tmp_path / "q"), "--set", "gamma"]) == 2
    _error(capsys)


def test_missing_qtable_is_io_error(tmp_path, capsys):
    code = main(["compare", "--config", MICRO, "--qtable", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path / "out")])
    assert code == 5 and _error(capsys)[0] == 5


def test_simulate_writes_outputs(tmp_path, capsys, micro_qbin):
    out = tmp_path / "sim"
    code = main(["simulate", "--config", MICRO, "--qtable", str(micro_qbin), "--policy", "acofi",
                 "--scenario", "varspeed", "--seed", "3", "--out", str(out)])
    assert code == 0
    assert "total_steps = " in capsys.readouterr().out
    trace = out / "traces" / "trace_acofi_varspeed_seed3.csv"
    assert trace.exists() and (out / "summary.csv").exists() and (out / "runs.csv").exists()
    assert "all_ok = true" in (out / "verification.txt").read_text()
    echoed = load_config(out / "config.ini")
    assert echoed.base_seed == 3 and echoed.policies == ("acofi",)


def test_compare_header_mismatch_writes_nothing(tmp_path, capsys, micro_qbin):
    out = tmp_path / "cmp"
    code = main(["compare", "--config", MICRO, "--qtable", str(micro_qbin), "--out", str(out),
                 "--set", "solver.gamma=0.95"])
    assert code == 2 and _error(capsys) == (2, "HeaderMismatch")
    assert not out.exists()
    assert not any(p.name.startswith(".acofi-") for p in tmp_path.iterdir())


def test_compare_single_run_summary(tmp_path, capsys, micro_qbin):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", MICRO, "--qtable", str(micro_qbin), "--out", str(out),
                 "--set", "experiment.n_runs=1", "--set", "experiment.scenarios=varsteer"]) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    runs = (out / "runs.csv").read_text().splitlines()
    assert capsys.readouterr().out.splitlines() == summary
    head_s, head_r = summary[0].split(","), runs[0].split(",")
    for srow, rrow in zip(summary[1:], runs[1:]):
        s, r = dict(zip(head_s, srow.split(","))), dict(zip(head_r, rrow.split(",")))
        assert s["policy"] == r["policy"]
        for key in ("min_v", "unsafe_steps", "total_steps", "safe_policy_steps"):
            assert float(s[key]) == float(r[key])
        assert s["n_runs"] == "1"
    assert len(list((out / "traces").iterdir())) == 3


def test_compare_is_reproducible(tmp_path, micro_qbin):
    args = ["compare", "--config", MICRO, "--qtable", str(micro_qbin)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.fixture()
def acofi_trace(tmp_path, micro_qbin):
    out = tmp_path / "sim"
    main(["simulate", "--config", MICRO, "--qtable", str(micro_qbin), "--policy", "acofi",
          "--scenario", "id", "--seed", "0", "--out", str(out)])
    return out / "traces" / "trace_acofi_id_seed0.csv"


def test_verify_theorem(acofi_trace, capsys):
    assert main(["verify-theorem", "--trace", str(acofi_trace), "--config", MICRO]) == 0
    out = capsys.readouterr().out
    assert "thm1_ok = true" in out and "thm2_ok = true" in out


def test_verify_theorem_malformed(acofi_trace, tmp_path, capsys):
    rows = parse_trace(acofi_trace.read_text())
    bad = tmp_path / "bad.csv"
    bad.write_text(trace_to_csv(rows).replace("\n1,", "\n7,", 1))
    assert main(["verify-theorem", "--trace", str(bad), "--config", MICRO]) == 5
    assert _error(capsys) == (5, "MalformedTrace")


def test_verify_theorem_failure_exit_code(tmp_path, capsys):
    # err = 1 every step against q = 0: consistent rows, coverage bound broken
    g, l = MICRO_GAMMA, 0.5
    r = (1 - g) * l + g * 0.5
    lines = ["t,px,py,theta,action,policy,l,Q,R,err,q,B,Vnext"]
    for t in range(1, 100):
        lines.append(f"{t},0.5,0.5,0.0,0,task,{l!r},1.0,{r!r},1,0.0,{(1.0 - (1 - g) * l) / g!r},0.5")
    path = tmp_path / "t.csv"
    path.write_text("\n".join(lines) + "\n")
    assert main(["verify-theorem", "--trace", str(path), "--config", MICRO]) == 4
    assert _error(capsys)[1] == "TheoremCheckFailed"


def test_export_plot(acofi_trace, tmp_path):
    out = tmp_path / "p.dat"
    assert main(["export-plot", "--trace", str(acofi_trace), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    rows = parse_trace(acofi_trace.read_text())
    assert lines[0] == "# t V B eps policy"
    assert len(lines) == 1 + len(rows)
    first = lines[1].split()
    assert int(first[0]) == rows[0].t and float(first[1]) == rows[0].v_next
    assert float(first[3]) == 0.1 and first[4] in ("task", "safe")
    # the opening steps have too few scores, so q is infinite and B is -inf
    assert any(ln.split()[2] == "-inf" for ln in lines[1:])
    assert all(math.isinf(float(ln.split()[2])) == math.isinf(r.quantile_t)
               for ln, r in zip(lines[1:], rows))


def test_export_plot_empty_trace(tmp_path):
    trace = tmp_path / "empty.csv"
    trace.write_text("t,px,py,theta,action,policy,l,Q,R,err,q,B,Vnext\n")
    out = tmp_path / "p.dat"
    assert main(["export-plot", "--trace", str(trace), "--out", str(out), "--epsilon", "0.2"]) == 0
    assert out.read_text() == "# t V B eps policy\n"


def test_export_plot_bad_epsilon(acofi_trace, tmp_path, capsys):
    code = main(["export-plot", "--trace", str(acofi_trace), "--out", str(tmp_path / "p"),
                 "--epsilon", "-1"])
    assert code == 2 and _error(capsys)[0] == 2
