//! The eight acceptance criteria, one line each.
//!
//! Run with `cargo test -p usp-core --test acceptance -- --nocapture`.

use usp_core::costmodel::{comm_cost, ModelConfig, Strategy};
use usp_core::numerics::{reference_attention, reference_attention_grad, Precision, Tensor4};
use usp_core::planner::{
    check_feasibility, factorizations, group_order, rank_plans, enumerate_strategies,
    PlanOptions, Rule, Verdict,
};
use usp_core::costmodel::ClusterConfig;
use usp_core::report::RunReport;
use usp_core::simcomm::{spawn, Collective, CommError, ProcessMesh};
use usp_core::usp::{
    causal_workload, even_partition, run_usp, seeded_inputs, simulate, zigzag_partition,
    SimulateConfig,
};

const ORACLE_TOL: f64 = 1e-10;
const FD_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const RATIO_REL_TOL: f64 = 0.01;
const BALANCE_REL_TOL: f64 = 0.05;

type Outcome = Result<String, String>;

fn meshes(n: usize, kv: usize) -> Vec<(usize, usize)> {
    (1..=n)
        .filter(|u| n % u == 0 && *u <= kv)
        .map(|u| (u, n / u))
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for kv in [8, 4, 2] {
        let x = seeded_inputs::<f64>(2, 64, 8, kv, 16, 100 + kv as u64).map_err(|e| e.to_string())?;
        for (u, r) in meshes(8, kv) {
            for causal in [false, true] {
                let mesh = ProcessMesh::new(u, r).map_err(|e| e.to_string())?;
                let run = run_usp(mesh, &x.q, &x.k, &x.v, None, causal).map_err(|e| e.to_string())?;
                let want = reference_attention(&x.q, &x.k, &x.v, causal, None).map_err(|e| e.to_string())?;
                let err = run.output.max_abs_diff(&want).map_err(|e| e.to_string())?;
                if err > ORACLE_TOL {
                    return Err(format!("kv={kv} u={u} r={r} causal={causal}: error {err:e}"));
                }
                worst = worst.max(err);
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} configurations, max abs error {worst:.2e} <= {ORACLE_TOL:e}"))
}

fn loss(q: &Tensor4<f64>, k: &Tensor4<f64>, v: &Tensor4<f64>, d_o: &Tensor4<f64>, causal: bool) -> f64 {
    let o = reference_attention(q, k, v, causal, None).expect("valid shapes");
    o.data().iter().zip(d_o.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `Σ dO ⊙ attention(q, k, v)` for every element of `which`.
fn finite_difference(
    x: [&Tensor4<f64>; 4],
    which: usize,
    causal: bool,
) -> Tensor4<f64> {
    let mut inputs = [x[0].clone(), x[1].clone(), x[2].clone()];
    let mut grad = Tensor4::zeros(inputs[which].dims()).expect("non-empty");
    for idx in 0..inputs[which].data().len() {
        let orig = inputs[which].data()[idx];
        inputs[which].data_mut()[idx] = orig + FD_STEP;
        let up = loss(&inputs[0], &inputs[1], &inputs[2], x[3], causal);
        inputs[which].data_mut()[idx] = orig - FD_STEP;
        let down = loss(&inputs[0], &inputs[1], &inputs[2], x[3], causal);
        inputs[which].data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for kv in [8, 4, 2] {
        let x = seeded_inputs::<f64>(2, 16, 8, kv, 16, 200 + kv as u64).map_err(|e| e.to_string())?;
        for causal in [false, true] {
            let inputs = [&x.q, &x.k, &x.v, &x.d_out];
            let fd: Vec<Tensor4<f64>> = (0..3).map(|w| finite_difference(inputs, w, causal)).collect();
            let analytic = reference_attention_grad(&x.q, &x.k, &x.v, &x.d_out, causal, None)
                .map_err(|e| e.to_string())?;
            for (name, a, f) in [("dq", &analytic.dq, &fd[0]), ("dk", &analytic.dk, &fd[1]), ("dv", &analytic.dv, &fd[2])] {
                let rel = a.max_abs_diff(f).map_err(|e| e.to_string())? / f.max_abs();
                if rel > FD_REL_TOL {
                    return Err(format!("reference {name} kv={kv} causal={causal}: rel error {rel:e}"));
                }
            }
            for (u, r) in meshes(8, kv) {
                let mesh = ProcessMesh::new(u, r).map_err(|e| e.to_string())?;
                let run = run_usp(mesh, &x.q, &x.k, &x.v, Some(&x.d_out), causal).map_err(|e| e.to_string())?;
                let g = run.grads.ok_or("no gradients")?;
                for (name, a, f) in [("dq", &g.dq, &fd[0]), ("dk", &g.dk, &fd[1]), ("dv", &g.dv, &fd[2])] {
                    let rel = a.max_abs_diff(f).map_err(|e| e.to_string())? / f.max_abs();
                    if rel > FD_REL_TOL {
                        return Err(format!("{name} kv={kv} u={u} r={r} causal={causal}: rel error {rel:e}"));
                    }
                    worst = worst.max(rel);
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} configurations, max relative error {worst:.2e} <= {FD_REL_TOL:e}"))
}

fn load_balance() -> Outcome {
    let zz = causal_workload(&zigzag_partition(16, 4).map_err(|e| e.to_string())?, 16);
    let even = causal_workload(&even_partition(16, 4).map_err(|e| e.to_string())?, 16);
    if zz != [34, 34, 34, 34] {
        return Err(format!("zigzag counts {zz:?}"));
    }
    if even != [10, 26, 42, 58] {
        return Err(format!("contiguous counts {even:?}"));
    }
    let small = even[3] as f64 / even[0] as f64;
    if small != 5.8 {
        return Err(format!("contiguous last/first {small}"));
    }
    let big = causal_workload(&even_partition(4096, 4).map_err(|e| e.to_string())?, 4096);
    let ratio = big[3] as f64 / big[0] as f64;
    if ((ratio - 7.0) / 7.0).abs() > BALANCE_REL_TOL {
        return Err(format!("L=4096 contiguous ratio {ratio}"));
    }
    let big_zz = causal_workload(&zigzag_partition(4096, 4).map_err(|e| e.to_string())?, 4096);
    if big_zz.iter().any(|&w| w != big_zz[0]) {
        return Err(format!("L=4096 zigzag counts {big_zz:?}"));
    }
    Ok(format!("zigzag {zz:?}, contiguous {even:?} (5.8x), L=4096 contiguous {ratio:.3}x"))
}

fn comm_accounting() -> Outcome {
    let (heads, kv) = (8, 2);
    let x = seeded_inputs::<f64>(1, 32, heads, kv, 8, 5).map_err(|e| e.to_string())?;
    for (u, r) in [(2usize, 4usize), (2, 2), (1, 4)] {
        let mesh = ProcessMesh::new(u, r).map_err(|e| e.to_string())?;
        let n = mesh.world_size();
        let full = run_usp(mesh, &x.q, &x.k, &x.v, Some(&x.d_out), true).map_err(|e| e.to_string())?;
        let ledger = &full.ledger;
        for rank in 0..n {
            let calls = ledger.calls_on_rank(Collective::AllToAll, rank);
            if calls != 8 {
                return Err(format!("u={u} r={r} rank {rank}: {calls} all-to-all calls"));
            }
        }
        let groups = r;
        let events = ledger.events(Collective::AllToAll);
        if events != 8 * groups {
            return Err(format!("u={u} r={r}: {events} all-to-all events over {groups} groups"));
        }
        if u > 1 {
            let q = ledger.bytes_labeled("a2a:q");
            for label in ["a2a:k", "a2a:v"] {
                let b = ledger.bytes_labeled(label);
                if b != q * kv as f64 / heads as f64 {
                    return Err(format!("u={u} r={r}: {label} {b} bytes vs q {q}"));
                }
            }
        }
        let fwd = run_usp(mesh, &x.q, &x.k, &x.v, None, true).map_err(|e| e.to_string())?;
        for rank in 0..n {
            for label in ["ring:k", "ring:v"] {
                let shifts = fwd.ledger.calls_labeled(label, rank);
                if shifts != r - 1 {
                    return Err(format!("u={u} r={r} rank {rank}: {shifts} {label} shifts"));
                }
            }
        }
    }
    Ok("8 all-to-all per rank, K/V bytes = kv/hc x Q bytes, R-1 ring shifts per tensor".into())
}

fn cost_ratios() -> Outcome {
    let strategy = Strategy {
        ulysses: 8,
        zero_stage: 1,
        ..Strategy::default()
    };
    let mut got = Vec::new();
    for (seq, expected) in [(8192, 1.33), (32768, 5.33), (65536, 10.67)] {
        let m = ModelConfig::gpt(seq, 4096, 32, 32, 1, 1);
        let c = comm_cost(&strategy, &m).map_err(|e| e.to_string())?;
        let ratio = c.act_elems / c.param_elems;
        if ((ratio - expected) / expected).abs() > RATIO_REL_TOL {
            return Err(format!("L={seq}: ratio {ratio} vs {expected}"));
        }
        got.push(format!("{ratio:.2}"));
    }
    let m = ModelConfig::gpt(8192, 4096, 32, 32, 1, 1);
    let z = |zero_stage| Strategy {
        zero_stage,
        ..strategy
    };
    let r = comm_cost(&z(3), &m).map_err(|e| e.to_string())?.param_elems
        / comm_cost(&z(1), &m).map_err(|e| e.to_string())?.param_elems;
    if r != 1.5 {
        return Err(format!("ZeRO-3/ZeRO-1 ratio {r}"));
    }
    Ok(format!("act/param ratios [{}], ZeRO-3/ZeRO-1 = {r}", got.join(", ")))
}

fn collective_equivalence() -> Outcome {
    for n in 1..=8usize {
        let len = n * 6;
        let out = spawn(n, |rank| -> Result<bool, CommError> {
            let me = rank.rank() as u64;
            let x: Vec<f64> = (0..len as u64)
                .map(|i| ((i * 7919 + me * 104729) % 1000) as f64 / 7.0 + 1e-3 * me as f64)
                .collect();
            let g = rank.world_group();
            let reduced = rank.all_reduce(&g, &x)?;
            let scattered = rank.reduce_scatter(&g, &x)?;
            let composed = rank.all_gather(&g, &scattered)?;
            Ok(reduced.iter().zip(&composed).all(|(a, b)| a.to_bits() == b.to_bits()))
        })
        .map_err(|e| e.to_string())?;
        if !out.results.iter().all(|&ok| ok) {
            return Err(format!("world of {n}: results differ"));
        }
    }
    Ok("bitwise equal for world sizes 1..=8".into())
}

fn planner_conformance() -> Outcome {
    let model = ModelConfig::gpt(65536, 4096, 32, 8, 1, 32);
    let cluster = ClusterConfig {
        devices: 16,
        devices_per_node: 8,
        intra_node_bandwidth: 200e9,
        inter_node_bandwidth: 25e9,
        device_memory: 80e9,
        collective_latency: 0.0,
        overlap_budget: 0.0,
    };
    let ok = check_feasibility(
        &Strategy {
            ulysses: 8,
            ring: 2,
            zero_stage: 1,
            ..Strategy::default()
        },
        &model,
        &cluster,
    );
    if !ok.verdict.is_ok() {
        return Err(format!("u=8 r=2: {}", ok.verdict));
    }
    let bad = check_feasibility(
        &Strategy {
            ulysses: 16,
            zero_stage: 1,
            ..Strategy::default()
        },
        &model,
        &cluster,
    );
    match &bad.verdict {
        Verdict::Rejected { rule: Rule::HeadLimit, reason }
            if reason.contains("cannot exceed the number of attention heads") => {}
        v => return Err(format!("u=16: {v}")),
    }
    let ranked = rank_plans(&enumerate_strategies(&model, &cluster, &PlanOptions::default()).candidates);
    if !ranked.iter().any(|p| (p.strategy.tp, p.strategy.ulysses, p.strategy.ring) == (1, 8, 2)) {
        return Err("u=8 r=2 missing from ranked plans".into());
    }
    let mut layouts = 0;
    for n in 1..=32u64 {
        for [tp, ulysses, ring, dp, pp] in factorizations(n) {
            let l = group_order(&Strategy {
                tp,
                ulysses,
                ring,
                dp,
                pp,
                ..Strategy::default()
            });
            let mut seen = std::collections::HashSet::new();
            for rank in 0..n {
                let c = l.coords(rank);
                if l.rank(c) != rank || !seen.insert((c.tp, c.ulysses, c.ring, c.dp, c.pp)) {
                    return Err(format!("layout {l}: rank {rank} does not round-trip"));
                }
            }
            layouts += 1;
        }
    }
    Ok(format!("u=8 r=2 feasible, u=16 rejected on the head limit, {layouts} layouts round-trip"))
}

fn determinism() -> Outcome {
    let cfg = SimulateConfig {
        bs: 2,
        seq_len: 32,
        heads: 8,
        kv_heads: 4,
        head_size: 8,
        ulysses: 2,
        ring: 4,
        causal: true,
        precision: Precision::Fp64,
        seed: 42,
        check: true,
        tolerance: None,
    };
    let report = || -> Result<(String, String), String> {
        let r = simulate(&cfg).map_err(|e| e.to_string())?;
        let rep = RunReport::new(vec!["simulate".into()], &cfg, &r, 0).map_err(|e| e.to_string())?;
        Ok((serde_json::to_string(&rep).map_err(|e| e.to_string())?, r.ledger.to_csv()))
    };
    let first = report()?;
    for _ in 0..4 {
        if report()? != first {
            return Err("repeated simulate runs differ".into());
        }
    }
    let x = seeded_inputs::<f64>(1, 32, 4, 4, 8, 9).map_err(|e| e.to_string())?;
    let mesh = ProcessMesh::new(2, 2).map_err(|e| e.to_string())?;
    let a = run_usp(mesh, &x.q, &x.k, &x.v, Some(&x.d_out), true).map_err(|e| e.to_string())?;
    let b = run_usp(mesh, &x.q, &x.k, &x.v, Some(&x.d_out), true).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor4<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&a.output) != bits(&b.output) || a.ledger != b.ledger {
        return Err("repeated run_usp differs".into());
    }
    Ok("5 simulate reports and ledgers bitwise identical".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("load balance", load_balance),
        ("comm accounting", comm_accounting),
        ("cost-model ratios", cost_ratios),
        ("collective equivalence", collective_equivalence),
        ("planner conformance", planner_conformance),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
