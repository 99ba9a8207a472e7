import csv
import io
import subprocess
import sys

import pytest

from collectorbft.harness import cli
from collectorbft.harness.metrics import COLUMNS, _percentile
from collectorbft.harness.scenario import ScenarioError, bundled_scenarios, load_scenario, parse_scenario

GOOD = """\
version: 1
name: tiny
cluster: {f: 1, c: 0, window: 16}
sim:
  seed: 3
  mode: synchronous
  link: {base: 1000}
workload: {clients: 1, ops_per_client: 2}
assertions: {all_complete: true}
"""


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def run_cli(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def test_bundled_list_is_complete():
    names = bundled_scenarios()
    for name in ("fast_path_n4", "equivocating_primary_n4", "stale_viewchange_n4",
                 "invalid_shares_n4", "silent_collector_n4", "partial_send_n4", "one_crash_c1"):
        assert name in names


def test_parse_and_override():
    sc = parse_scenario(GOOD)
    assert sc.name == "tiny" and sc.n == 4 and sc.sim.seed == 3
    big = sc.with_overrides(seed=7, variant="linear_pbft", n=13)
    assert (big.cluster.f, big.cluster.variant, big.sim.seed, big.n) == (4, "linear_pbft", 7, 13)
    with pytest.raises(ValueError):
        sc.with_overrides(n=5)


@pytest.mark.parametrize("text,line,needle", [
    (GOOD.replace("seed: 3", "seed: -3"), 5, "seed"),
    (GOOD.replace("mode: synchronous", "mode: lockstep"), 6, "mode"),
    (GOOD.replace("window: 16", "window: 10"), 3, "window"),
    (GOOD + "bogus: 1\n", 10, "bogus"),
    (GOOD.replace("  seed: 3\n", "  seed: 3\n  seed: 4\n"), 6, "duplicate"),
    (GOOD.replace("version: 1", "version: 2"), 1, "version"),
    (GOOD + "faults:\n  - {replica: 9, behavior: crash}\n", 11, "replica"),
])
def test_config_errors_point_at_the_line(text, line, needle):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text, "x.yaml")
    msg = str(exc.value)
    assert msg.startswith(f"x.yaml:{line}:") and needle in msg.lower(), msg


def test_yaml_syntax_error_reports_line():
    with pytest.raises(ScenarioError) as exc:
        parse_scenario("version: 1\nname: [unclosed\n", "y.yaml")
    assert str(exc.value).startswith("y.yaml:")


def test_strict_plan_violation_is_config_error(tmp_path, capsys):
    text = GOOD + ("faults:\n  - {replica: 1, behavior: byzantine, script: partial_send}\n"
                   "  - {replica: 2, behavior: byzantine, script: partial_send}\n")
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    code, out, err = run_cli(["run", str(path)], capsys)
    assert code == 2 and "exceed f=1" in err


def test_run_fast_path_bundle(capsys):
    code, out, _ = run_cli(["run", "fast_path_n4"], capsys)
    r = rows(out)[0]
    assert code == 0 and float(r["fast_path_fraction"]) == 1.0
    assert list(rows(out)[0]) == COLUMNS


def test_run_equivocating_primary_bundle(capsys):
    code, out, _ = run_cli(["run", "equivocating_primary_n4"], capsys)
    assert code == 0 and int(rows(out)[0]["view_changes"]) >= 1


def test_run_writes_outputs(tmp_path, capsys):
    code, out, _ = run_cli(["run", "fast_path_n4", "--seed", "2", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "fast_path_n4.trace.ndjson").exists()
    assert rows((tmp_path / "fast_path_n4.csv").read_text()) == rows(out)


def test_failed_assertion_exit_code(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text(GOOD.replace("assertions: {all_complete: true}",
                                 "assertions: {min_view_changes: 1}"))
    code, _, err = run_cli(["run", str(path)], capsys)
    assert code == 1 and "view_changes" in err


def test_sweep_linear_fit(capsys):
    code, out, _ = run_cli(["sweep", "linear_pbft_n4", "--vary", "n=4,13,25"], capsys)
    assert code == 0
    pts = [(int(r["n"]), float(r["msgs_per_block"])) for r in rows(out)]
    assert [n for n, _ in pts] == [4, 13, 25]
    (n0, y0), (n1, y1), (n2, y2) = pts
    slope = (y2 - y0) / (n2 - n0)
    predicted = y0 + slope * (n1 - n0)
    assert abs(predicted - y1) / y1 < 0.10


def test_sweep_all_to_all_superlinear(capsys):
    code, out, _ = run_cli(["sweep", "linear_pbft_n4", "--vary", "n=4,13,25",
                            "--variant", "pbft_all_to_all"], capsys)
    assert code == 0
    ys = [float(r["msgs_per_block"]) for r in rows(out)]
    # growth per added replica keeps increasing
    assert (ys[2] - ys[1]) / 12 > 1.5 * (ys[1] - ys[0]) / 9


def test_sweep_seeds_one_crash(tmp_path, capsys):
    out_file = tmp_path / "sweep.csv"
    code, _, _ = run_cli(["sweep", "one_crash_c1", "--vary", "seeds=1..100", "--out", str(out_file)],
                         capsys)
    data = rows(out_file.read_text())
    assert code == 0 and len(data) == 100
    assert {float(r["fast_path_fraction"]) for r in data} == {1.0}
    assert {int(r["violations"]) for r in data} == {0}


def test_parse_vary_errors():
    assert cli.parse_vary("seeds=1..3") == ("seed", [1, 2, 3])
    for bad in ("n", "window=4", "n="):
        with pytest.raises(ValueError):
            cli.parse_vary(bad)


def test_replay_filters_and_raw(tmp_path, capsys):
    run_cli(["run", "fast_path_n4", "--out", str(tmp_path)], capsys)
    path = tmp_path / "fast_path_n4.trace.ndjson"
    code, out, _ = run_cli(["replay", str(path), "--raw"], capsys)
    assert code == 0 and out == path.read_text()
    code, out, _ = run_cli(["replay", str(path), "--seq", "3"], capsys)
    body = [ln for ln in out.splitlines() if not ln.startswith("#")]
    assert body
    for ln in body:
        kind = ln.split()[1]
        if kind in ("send", "complete"):
            assert ln.split()[5] == "3"
        else:
            assert kind in ("commit", "execute", "ls") and ln.split()[3] == "3"
    code, out, _ = run_cli(["replay", str(path), "--replica", "2", "--kind", "commit"], capsys)
    body = [ln.split() for ln in out.splitlines() if not ln.startswith("#")]
    assert body and all(b[1] == "commit" and b[2] == "2" for b in body)


def test_replay_corrupt_trace(tmp_path, capsys):
    path = tmp_path / "broken.ndjson"
    path.write_text('{"version": 1, "level": "protocol", "meta": {}}\n[1, "commit"\n')
    code, _, err = run_cli(["replay", str(path)], capsys)
    assert code == 2 and "corrupt" in err


def test_missing_file(capsys):
    code, _, err = run_cli(["run", "/nonexistent/file.yaml"], capsys)
    assert code == 2 and err


def test_percentile_nearest_rank():
    assert _percentile([], 0.99) == 0.0
    assert _percentile(list(range(1, 101)), 0.99) == 99.0
    assert _percentile([5], 0.5) == 5.0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "collectorbft", "list"], capture_output=True,
                          text=True, check=True)
    assert "fast_path_n4" in proc.stdout.split()
