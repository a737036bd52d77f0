"""Smoke test for the usp_sim extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/usp_sim-*.whl
"""

import usp_sim


def main():
    q, k, v, d_out = usp_sim.seeded_inputs(1, 32, 8, 4, 8, 3)
    assert q.shape == (1, 32, 8, 8) and k.shape == (1, 32, 4, 8)

    mesh = usp_sim.ProcessMesh(4, 2)
    assert mesh.world_size == 8
    assert mesh.coords(5) == (1, 1)
    assert mesh.ulysses_group(5) == [4, 5, 6, 7]
    assert mesh.ring_group(5) == [1, 5]

    run = usp_sim.usp_attention(q, k, v, mesh, causal=True, d_out=d_out)
    ref = usp_sim.reference_attention(q, k, v, causal=True)
    err = run["output"].max_abs_diff(ref)
    assert err <= 1e-10, err
    a2a = [e for e in run["ledger"] if e["collective"] == "all_to_all" and e["rank"] == 0]
    assert len(a2a) == 8, len(a2a)

    zz = usp_sim.zigzag_partition(16, 4)
    assert usp_sim.causal_workload(zz, 16) == [34, 34, 34, 34]
    even = usp_sim.even_partition(16, 4)
    assert usp_sim.causal_workload(even, 16) == [10, 26, 42, 58]

    sim = usp_sim.simulate({
        "bs": 1, "seq_len": 64, "heads": 8, "kv_heads": 8, "head_size": 16,
        "ulysses": 4, "ring": 2, "causal": True, "precision": "fp64",
        "seed": 0, "check": True,
    })
    assert sim["check"]["passed"]

    model = {"seq_len": 65536, "hidden": 4096, "heads": 32, "kv_heads": 8,
             "batch": 1, "layers": 32}
    cluster = {"devices": 16, "devices_per_node": 8,
               "intra_node_bandwidth": 200e9, "inter_node_bandwidth": 25e9,
               "device_memory": 80e9}
    c1 = usp_sim.cost(model, {"ulysses": 8, "ring": 2, "zero_stage": 1})
    c3 = usp_sim.cost(model, {"ulysses": 8, "ring": 2, "zero_stage": 3}, cluster)
    assert c3["comm"]["param_elems"] / c1["comm"]["param_elems"] == 1.5
    assert c3["step_time"]["total"] > 0

    rows, text = usp_sim.cost_table(model, 8)
    assert len(rows["rows"]) == 9 and "SP-Unified+ZeRO3" in text

    verdict = usp_sim.check_feasibility({"ulysses": 16, "zero_stage": 1}, model, cluster)
    assert verdict["verdict"]["rule"] == "head-limit"
    plans = usp_sim.plan(model, cluster, {"pins": {"tp": 1}}, top=3)
    assert any(p["strategy"]["ulysses"] == 8 and p["strategy"]["ring"] == 2
               for p in plans["plans"])

    layout, coords = usp_sim.group_order({"tp": 2, "ulysses": 2, "ring": 2, "dp": 2})
    assert layout == "tp(2) < ulysses(2) < ring(2) < dp(2) < pp(1)"
    assert coords[5] == {"tp": 1, "ulysses": 0, "ring": 1, "dp": 0, "pp": 0}

    try:
        usp_sim.ProcessMesh(0, 2)
    except ValueError:
        pass
    else:
        raise AssertionError("empty mesh accepted")

    print("usp_sim smoke test passed")


if __name__ == "__main__":
    main()
