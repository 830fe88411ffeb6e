"""Smoke test for the dsmco extension module.

Build and run from the repository root:

    cargo build --release -p dsmco-python --features extension-module
    cp target/release/libdsmco.so python/dsmco.so
    python3 python/smoke_test.py
"""

import json
import math
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import dsmco  # noqa: E402

FIXTURE = pathlib.Path(__file__).resolve().parents[1] / "crates/core/tests/fixtures/three_node.json"


def naive_cost(case_doc, groups, rho=1.0):
    n = len(case_doc["nodes"])
    module = {node: m for node, m in groups.items()}
    sizes = {}
    for m in module.values():
        sizes[m] = sizes.get(m, 0) + 1
    intra = {}
    cross = 0.0
    for e in case_doc["edges"]:
        w = e["weight"]
        if module[e["source"]] == module[e["target"]]:
            intra[module[e["source"]]] = intra.get(module[e["source"]], 0.0) + w
        else:
            cross += w
    return sum(w * (sizes[m] / n) ** rho for m, w in intra.items()) + n * cross


def main():
    doc = json.loads(FIXTURE.read_text())
    case = dsmco.Case.from_json(FIXTURE.read_text())
    assert case.n == 3 and len(case) == 3, case
    assert case.node_ids == ["fuel", "engine", "ecu"]

    grouping = {"fuel": "a", "engine": "a", "ecu": "b"}
    cost = dsmco.total_cost(case, grouping)
    assert math.isclose(cost, naive_cost(doc, grouping), rel_tol=1e-12), cost
    assert 0.0 <= dsmco.clustering_efficiency(case, grouping) <= 1.0

    best, partition = dsmco.brute_force(case)
    assert len(set(partition.values())) >= 2
    sa_best, _ = dsmco.sa_reference(case, restarts=8, seed=1)
    assert math.isclose(sa_best, best), (sa_best, best)
    assert dsmco.gap_percent(best, best) == 0.0

    agg = dsmco.aggregate([1.0, 2.0, 3.0])
    assert agg["mean"] == 2.0 and agg["count"] == 3
    assert math.isclose(agg["std"], math.sqrt(2.0 / 3.0))

    system, user, labels = dsmco.render_prompt(case, k=1)
    assert "Engine Control Unit" in user and system
    reply = "{" + ", ".join(
        f'"{labels[node]}": "M{1 if node != "ecu" else 2}"' for node in case.node_ids
    ) + "}"
    parsed = dsmco.parse_response(case, reply, labels)
    assert parsed == {"fuel": 1, "engine": 1, "ecu": 2}, parsed
    try:
        dsmco.parse_response(case, "no json here", labels)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    big = dsmco.Case.random(8, 0.4, seed=3)
    optimum, _ = dsmco.brute_force(big)
    run = dsmco.run_mock(big, iterations=5, mode="oracle", seed=2)
    assert math.isclose(run["best_cost"], optimum), (run["best_cost"], optimum)
    assert len(run["best_so_far"]) == 6

    try:
        dsmco.Case.random(1, 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
