import json
from pathlib import Path

import pytest

from flowactor.harness.cli import main
from flowactor.harness.golden import ChainMismatch, golden_compare, load_dump, save_dump
from flowactor.harness.run import run_scenario
from flowactor.harness.scenario import ScenarioError, load_scenario, parse_scenario
from flowactor.harness.traffic import FlowClass, Generator, TrafficSpec, plan_flows
from flowactor.sim import NS_PER_S, Simulator

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def small(extra: str = "", flows: int = 50) -> str:
    return f"""
name = "small"
seed = 4
[cluster]
runtimes = 2
standby = 1
[traffic]
flows = {flows}
pps_per_flow = 10
duration_s = 1.0
start_spread_s = 0.1
{extra}
"""


MIGRATE = """
[[migrations]]
at_s = 0.5
src = 2
dst = 4
"""


# -- end-to-end runs -------------------------------------------------------------


def test_minimal_scenario_delivers_every_packet():
    rep = run_scenario(SCENARIOS / "minimal.toml").report
    assert rep.generated == rep.delivered == 100
    assert rep.dropped == 0 and rep.in_flight == 0 and rep.conservation_holds()
    assert rep.passed


def test_migration_run_has_no_protocol_drops_and_matches_golden():
    sc = parse_scenario(small(MIGRATE + "[assertions]\ngolden = true\nprotocol_drops = 0", flows=1000))
    res = run_scenario(sc)
    rep = res.report
    assert rep.extra["migrations_done"] > 0
    assert rep.dropped_protocol == 0 and rep.conservation_holds()
    assert res.golden_diff == [] and rep.passed


def test_same_seed_gives_identical_reports():
    sc = parse_scenario(small(MIGRATE))
    a, b = run_scenario(sc).report, run_scenario(sc).report
    assert a.trace_digest == b.trace_digest
    assert a.to_dict(samples=True) == b.to_dict(samples=True)


def test_different_seed_changes_the_trace():
    sc = parse_scenario(small())
    assert run_scenario(sc).report.trace_digest != run_scenario(sc, seed=99).report.trace_digest


# -- golden_compare -----------------------------------------------------------------


def test_golden_compare_of_identical_runs_is_empty():
    sc = parse_scenario(small())
    a, b = run_scenario(sc).dump, run_scenario(sc).dump
    assert golden_compare(a, b) == []


def test_golden_compare_reports_field_differences():
    dump = run_scenario(parse_scenario(small())).dump
    other = json.loads(json.dumps(dump))
    flow = next(iter(other["flows"]))
    other["flows"][flow]["states"]["firewall"]["pkt_count"] += 1
    diffs = golden_compare(dump, other)
    assert len(diffs) == 1 and "firewall.pkt_count" in diffs[0]


def test_golden_compare_rejects_different_chains():
    with pytest.raises(ChainMismatch):
        golden_compare({"chain": "firewall"}, {"chain": "nat"})


def test_dump_round_trips_through_a_file(tmp_path):
    dump = run_scenario(SCENARIOS / "minimal.toml").dump
    save_dump(dump, tmp_path / "d.json")
    assert load_dump(tmp_path / "d.json") == dump


# -- traffic ---------------------------------------------------------------------


def test_ten_flows_ten_pps_one_second_is_one_hundred_packets():
    spec = TrafficSpec(flows=10, pps_per_flow=10, duration_s=1.0, seed=1)
    sim = Simulator()
    got = []
    gen = Generator(sim, spec, got.append)
    gen.start()
    sim.run()
    assert gen.total == 100 and len(got) == 100
    per_flow = {}
    for p in got:
        per_flow.setdefault(p.key, []).append(p.gen_seq)
    assert len(per_flow) == 10 and all(len(s) == 10 for s in per_flow.values())
    assert all(len(p.payload) == 64 for p in got)


def test_mix_makes_long_flows_outlive_short_ones():
    spec = TrafficSpec(flows=100, pps_per_flow=10, duration_s=10.0, seed=2,
                       mix=[FlowClass(0.5, 1.0), FlowClass(0.5, 10.0)])
    plans = plan_flows(spec)
    counts = sorted(p.count for p in plans)
    assert counts[:50] == [10] * 50 and counts[50:] == [100] * 50
    ends = sorted(p.time_of(p.count - 1) for p in plans)
    assert ends[49] < 2 * NS_PER_S < 9 * NS_PER_S < ends[50]


def test_fixed_seed_gives_identical_keys():
    spec = TrafficSpec(flows=200, seed=7)
    a, b = plan_flows(spec), plan_flows(TrafficSpec(flows=200, seed=7))
    assert [p.key for p in a] == [p.key for p in b]
    assert len({p.key for p in a}) == 200
    assert [p.key for p in plan_flows(TrafficSpec(flows=200, seed=8))] != [p.key for p in a]


def test_payload_starts_with_the_generator_sequence():
    sim = Simulator()
    got = []
    Generator(sim, TrafficSpec(flows=1, pps_per_flow=5, duration_s=1.0, pkt_size=80), got.append).start()
    sim.run()
    assert [int.from_bytes(p.payload[:8], "little") for p in got] == [p.gen_seq for p in got]
    assert all(len(p.payload) == 80 for p in got)


# -- scenario parsing --------------------------------------------------------------


def test_scenario_error_names_line_and_field():
    text = 'name = "x"\n[traffic]\nflows = -3\n'
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text, "bad.toml")
    assert str(err.value) == "bad.toml:3: traffic.flows: must be positive"
    assert err.value.line == 3 and err.value.field == "traffic.flows"


def test_unknown_keys_are_rejected():
    with pytest.raises(ScenarioError) as err:
        parse_scenario('[cluster]\nruntimez = 2\n', "x.toml")
    assert "runtimez" in str(err.value)


def test_faults_must_be_ordered_in_time():
    text = '[[faults]]\nat_s = 2.0\naction = "kill"\nruntime = 2\n[[faults]]\nat_s = 1.0\naction = "kill"\nruntime = 3\n'
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_toml_syntax_errors_are_scenario_errors():
    with pytest.raises(ScenarioError):
        parse_scenario("[cluster\n", "broken.toml")


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_scenarios_parse(path):
    sc = load_scenario(path)
    assert sc.name


# -- CLI -------------------------------------------------------------------------------


def test_cli_run_passes_and_writes_outputs(tmp_path, capsys):
    out, dump, csv = tmp_path / "m.ndjson", tmp_path / "d.json", tmp_path / "lat.csv"
    code = main(["run", str(SCENARIOS / "minimal.toml"), "--out", str(out), "--dump-state", str(dump),
                 "--latency-csv", str(csv)])
    assert code == 0
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert lines and all(isinstance(x, dict) for x in lines)
    assert load_dump(dump)["chain"] == "firewall->nat->lb"
    assert len(csv.read_text().splitlines()) == 101
    assert "conservation" in capsys.readouterr().out


def test_cli_failing_assertion_exits_one(tmp_path):
    path = tmp_path / "fail.toml"
    # lossy data links make full delivery impossible
    path.write_text(small("[transport]\nloss_prob = 0.2\n[assertions]\nmin_delivered_fraction = 1.0\n"))
    assert main(["run", str(path)]) == 1


def test_cli_bad_scenario_exits_two(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('name = "x"\n[traffic]\nflows = 0\n')
    assert main(["run", str(path)]) == 2
    assert "bad.toml:3: traffic.flows" in capsys.readouterr().err


def test_cli_compare(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["run", str(SCENARIOS / "minimal.toml"), "--dump-state", str(a)]) == 0
    assert main(["run", str(SCENARIOS / "minimal.toml"), "--dump-state", str(b)]) == 0
    assert main(["compare", str(a), str(b)]) == 0
    assert main(["run", str(SCENARIOS / "minimal.toml"), "--seed", "5", "--dump-state", str(b)]) == 0
    assert main(["compare", str(a), str(b)]) == 1


def test_cli_replay_log(tmp_path, capsys):
    log = tmp_path / "coord.ndjson"
    assert main(["run", str(SCENARIOS / "minimal.toml"), "--log", str(log)]) == 0
    capsys.readouterr()
    assert main(["replay-log", str(log), "--actions"]) == 0
    assert "Deploy" in capsys.readouterr().out
    assert main(["replay-log", str(tmp_path / "missing.ndjson")]) == 2


def test_cli_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
