import json

import pytest

from oracle_sim import oracle_simulate
from tpcost.errors import CycleDetected, InvalidDevice, ValidationError
from tpcost.replayer import (Dfg, DfgNode, dedup_predict,
                             expand_device_parallel, load_graph,
                             load_programs, replay_model, simulate)


def _dfg(nodes, edges):
    return Dfg(nodes=[DfgNode(id=i, tir_key=k, duration=d, gap=g, device=dev)
                      for i, k, d, g, dev in nodes],
               edges=list(edges))


def rand_dag(rng, max_nodes=12, max_devices=3):
    n = int(rng.integers(1, max_nodes + 1))
    n_devices = int(rng.integers(1, max_devices + 1))
    nodes = []
    for i in range(n):
        nodes.append((f"n{i:02d}", f"k{i}", float(rng.uniform(0.1, 5.0)),
                      float(rng.choice([0.0, 0.0, 0.25])),
                      int(rng.integers(0, n_devices))))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.25:
                edges.append((f"n{i:02d}", f"n{j:02d}"))
    return _dfg(nodes, edges), n_devices


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_single_node():
    dfg = _dfg([("a", "k", 5.0, 0.0, 0)], [])
    result = simulate(dfg, 1)
    assert result.iteration_time == 5.0
    assert result.schedule["a"] == (0.0, 5.0)


def test_serial_chain():
    dfg = _dfg([("a", "k1", 2.0, 0.0, 0), ("b", "k2", 3.0, 0.0, 0)],
               [("a", "b")])
    result = simulate(dfg, 1)
    assert result.iteration_time == 5.0
    assert result.schedule == {"a": (0.0, 2.0), "b": (2.0, 5.0)}


def test_diamond_two_devices():
    dfg = _dfg([("a", "ka", 1.0, 0.0, 0), ("b", "kb", 2.0, 0.0, 0),
                ("c", "kc", 3.0, 0.0, 1), ("d", "kd", 1.0, 0.0, 0)],
               [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])
    result = simulate(dfg, 2)
    assert result.schedule["a"] == (0.0, 1.0)
    assert result.schedule["b"] == (1.0, 3.0)
    assert result.schedule["c"] == (1.0, 4.0)
    assert result.schedule["d"] == (4.0, 5.0)
    assert result.iteration_time == 5.0


def test_cycle_detected():
    dfg = _dfg([("a", "k", 1.0, 0.0, 0), ("b", "k", 1.0, 0.0, 0)],
               [("a", "b"), ("b", "a")])
    with pytest.raises(CycleDetected):
        simulate(dfg, 1)
    with pytest.raises(CycleDetected):
        dfg.validate()


def test_invalid_device():
    dfg = _dfg([("a", "k", 1.0, 0.0, 3)], [])
    with pytest.raises(InvalidDevice):
        simulate(dfg, 2)
    with pytest.raises(InvalidDevice):
        simulate(dfg, 0)


def test_single_device_work_conservation(rng):
    for _ in range(50):
        dfg, _ = rand_dag(rng, max_devices=1)
        for node in dfg.nodes:
            node.device = 0
        result = simulate(dfg, 1)
        expected = sum(n.duration for n in dfg.nodes) + \
            sum(n.gap for n in dfg.nodes)
        assert result.iteration_time == pytest.approx(expected, rel=1e-12)


def test_invariants_on_random_dags(rng):
    for _ in range(200):
        dfg, n_devices = rand_dag(rng)
        result = simulate(dfg, n_devices)
        nodes = {n.id: n for n in dfg.nodes}
        # dependency feasibility incl. the producer's gap
        for src, dst in dfg.edges:
            assert result.schedule[dst][0] >= \
                result.schedule[src][1] + nodes[src].gap - 1e-12
        # per-device non-overlap
        for d in range(n_devices):
            intervals = sorted((result.schedule[n.id][0],
                                result.schedule[n.id][1] + n.gap)
                               for n in dfg.nodes if n.device == d)
            for (s1, e1), (s2, e2) in zip(intervals, intervals[1:]):
                assert s2 >= e1 - 1e-12
        # lower bounds: per-device busy time and critical path
        for d in range(n_devices):
            busy = sum(n.duration + n.gap for n in dfg.nodes if n.device == d)
            assert result.iteration_time >= busy - 1e-12
        assert result.iteration_time >= _critical_path(dfg) - 1e-12


def _critical_path(dfg):
    nodes = {n.id: n for n in dfg.nodes}
    succ = dfg.successors()
    memo = {}

    def longest(nid):
        if nid not in memo:
            node = nodes[nid]
            tail = max((longest(s) for s in succ[nid]), default=0.0)
            memo[nid] = node.duration + node.gap + tail
        return memo[nid]

    return max(longest(n.id) for n in dfg.nodes)


def test_matches_bruteforce_oracle(rng):
    for _ in range(200):
        dfg, n_devices = rand_dag(rng)
        result = simulate(dfg, n_devices)
        nodes = [(n.id, n.duration, n.gap, n.device) for n in dfg.nodes]
        expected_time, expected_schedule = oracle_simulate(nodes, dfg.edges,
                                                           n_devices)
        assert result.iteration_time == expected_time
        assert result.schedule == expected_schedule


# ---------------------------------------------------------------------------
# expand_device_parallel
# ---------------------------------------------------------------------------

def test_expand_conv_example():
    dfg = _dfg([("pre", "io:load", 1.0, 0.0, 0),
                ("conv", "conv:3x3", 9.0, 0.0, 0),
                ("post", "io:store", 1.0, 0.0, 0)],
               [("pre", "conv"), ("conv", "post")])
    out = expand_device_parallel(dfg, {"conv": 3})
    by_id = {n.id: n for n in out.nodes}
    subs = [n for n in out.nodes if n.id.startswith("conv#")]
    assert len(subs) == 3
    assert all(n.duration == pytest.approx(3.0) for n in subs)
    assert sorted(n.device for n in subs) == [0, 1, 2]
    assert ("pre", "conv#2") in out.edges and ("conv#1", "post") in out.edges
    assert by_id["pre"].duration == 1.0
    # parallel sub-operators overlap across the expanded device set
    result = simulate(out, 3)
    assert result.iteration_time == pytest.approx(1.0 + 3.0 + 1.0)


def test_expand_empty_rules_identity():
    dfg = _dfg([("a", "k:x", 2.0, 0.5, 1)], [])
    out = expand_device_parallel(dfg, {})
    assert [(n.id, n.tir_key, n.duration, n.gap, n.device)
            for n in out.nodes] == \
        [(n.id, n.tir_key, n.duration, n.gap, n.device) for n in dfg.nodes]
    assert out.edges == dfg.edges


def test_expand_node_count_and_work(rng):
    dfg, _ = rand_dag(rng, max_nodes=10, max_devices=1)
    rules = {"k1": 3, "k4": 2}
    matched = sum(rules.get(n.op_class, 1) - 1 for n in dfg.nodes)
    out = expand_device_parallel(dfg, rules)
    assert len(out.nodes) == len(dfg.nodes) + matched
    assert sum(n.duration for n in out.nodes) == \
        pytest.approx(sum(n.duration for n in dfg.nodes), rel=1e-12)


# ---------------------------------------------------------------------------
# dedup_predict
# ---------------------------------------------------------------------------

def test_dedup_one_call_per_key():
    nodes = [(f"n{i}", "shared", 0.0, 0.0, 0) for i in range(10)]
    dfg = _dfg(nodes, [])
    calls = []

    def fake_predict(compact, device):
        calls.append(compact)
        return 0.125

    durations = dedup_predict(dfg, {"shared": "prog"}, None, None, None,
                              predictor=fake_predict)
    assert len(calls) == 1
    assert durations == {"shared": 0.125}
    assert all(n.duration == 0.125 for n in dfg.nodes)


def test_dedup_distinct_keys():
    nodes = [(f"n{i}", f"k{i}", 0.0, 0.0, 0) for i in range(5)]
    dfg = _dfg(nodes, [])
    calls = []

    def fake_predict(compact, device):
        calls.append(compact)
        return float(len(calls))

    programs = {f"k{i}": f"p{i}" for i in range(5)}
    dedup_predict(dfg, programs, None, None, None, predictor=fake_predict)
    assert len(calls) == 5


def test_dedup_key_hash_plumbing():
    nodes = [("a", "x", 0.0, 0.0, 0), ("b", "y", 0.0, 0.0, 0),
             ("c", "x", 0.0, 0.0, 0)]
    dfg = _dfg(nodes, [])
    table = {"x": 0.25, "y": 4.0}

    def keyed(compact, device):
        return table[compact]  # compact is the "program", here just a tag

    dedup_predict(dfg, {"x": "x", "y": "y"}, None, None, None,
                  predictor=keyed)
    for node in dfg.nodes:
        assert node.duration == table[node.tir_key]


def test_dedup_missing_program():
    dfg = _dfg([("a", "k", 0.0, 0.0, 0)], [])
    with pytest.raises(ValidationError):
        dedup_predict(dfg, {}, None, None, None, predictor=lambda c, d: 1.0)


# ---------------------------------------------------------------------------
# file I/O and replay_model
# ---------------------------------------------------------------------------

PROGRAMS_TEXT = """
program small { for i in 0..8 { compute k { fma=4 bytes_read=16 } } }
program wide {
  for i in 0..32 @parallel { compute k { fma=64 bytes_read=64 bytes_written=16 } }
}
"""


def _write_graph(path, nodes, edges):
    payload = {"nodes": nodes, "edges": edges}
    path.write_text(json.dumps(payload), encoding="utf-8")


def test_load_programs(tmp_path):
    path = tmp_path / "programs.ir"
    path.write_text(PROGRAMS_TEXT, encoding="utf-8")
    programs = load_programs(path)
    assert set(programs) == {"small", "wide"}
    assert programs["small"].n_leaf == 1


def test_load_graph_and_validation(tmp_path):
    graph = tmp_path / "g.json"
    _write_graph(graph,
                 [{"id": "a", "tir_key": "k1", "program_ref": "small"},
                  {"id": "b", "tir_key": "k2", "program_ref": "wide",
                   "gap_s": 0.5, "device": 1}],
                 [["a", "b"]])
    dfg, key_to_ref = load_graph(graph)
    assert key_to_ref == {"k1": "small", "k2": "wide"}
    assert dfg.nodes[1].gap == 0.5
    assert dfg.nodes[1].device == 1

    bad = tmp_path / "bad.json"
    _write_graph(bad, [{"id": "a", "tir_key": "k"}], [["a", "missing"]])
    with pytest.raises(ValidationError):
        load_graph(bad)


def test_replay_model_chain_with_injected_oracle(tmp_path):
    programs = tmp_path / "programs.ir"
    programs.write_text(PROGRAMS_TEXT, encoding="utf-8")
    graph = tmp_path / "g.json"
    _write_graph(graph,
                 [{"id": "n0", "tir_key": "a", "program_ref": "small"},
                  {"id": "n1", "tir_key": "b", "program_ref": "small"},
                  {"id": "n2", "tir_key": "c", "program_ref": "wide"}],
                 [["n0", "n1"], ["n1", "n2"]])
    durations = {"a": 0.001, "b": 0.002, "c": 0.003}
    seen = {}

    def fake(compact, device):
        key = [k for k, v in durations.items() if k not in seen]
        # predictor is called once per tir_key in node order
        value = durations[key[0]]
        seen[key[0]] = True
        return value

    result = replay_model(graph, programs, None, None, None, rules={},
                          predictor=fake)
    assert result.iteration_time == pytest.approx(0.006, rel=1e-12)

    seen.clear()

    def doubled(compact, device):
        return 2.0 * fake(compact, device)

    result2 = replay_model(graph, programs, None, None, None, rules={},
                           predictor=doubled)
    assert result2.iteration_time == pytest.approx(0.012, rel=1e-12)
