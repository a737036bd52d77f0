use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use usp_core::costmodel::{
    cost_report, table2, ClusterConfig, CostReport, ModelConfig, RankLayout, Strategy,
};
use usp_core::numerics::Precision;
use usp_core::planner::{enumerate_strategies, rank_plans, PlanCandidate, PlanOptions, Rule};
use usp_core::report::RunReport;
use usp_core::usp::{
    causal_workload, even_partition, simulate, zigzag_partition, SimulateConfig, SimulateResult,
};

const EXIT_TOLERANCE: u8 = 1;
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "usp", version, about = "Unified sequence parallelism: simulator, cost model and planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run unified attention fwd + bwd on seeded inputs over simulated ranks.
    Simulate(SimulateArgs),
    /// Communication, memory and step time of one strategy.
    Cost(CostArgs),
    /// Enumerate, check and rank strategies for a cluster.
    Plan(PlanArgs),
    /// Causal workload per ring rank, zigzag vs contiguous.
    Balance(BalanceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    bs: usize,
    #[arg(long)]
    seqlen: usize,
    #[arg(long)]
    heads: usize,
    /// Defaults to `--heads`.
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_size: usize,
    #[arg(long, default_value_t = 1)]
    ulysses: usize,
    #[arg(long, default_value_t = 1)]
    ring: usize,
    #[arg(long)]
    causal: bool,
    #[arg(long, default_value = "fp64")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare with the single-device reference.
    #[arg(long)]
    check: bool,
    /// Defaults to 1e-10 (fp64, absolute) or 1e-3 (fp32, relative).
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    json: bool,
    /// Write the per-rank ledger as CSV.
    #[arg(long)]
    ledger_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct StrategyArgs {
    #[arg(long, default_value_t = 1)]
    tp: u64,
    #[arg(long, default_value_t = 1)]
    ulysses: u64,
    #[arg(long, default_value_t = 1)]
    ring: u64,
    #[arg(long, default_value_t = 1)]
    dp: u64,
    #[arg(long, default_value_t = 1)]
    pp: u64,
    #[arg(long, default_value_t = 0)]
    zero: u8,
    /// Sequence-optimized TP (allgather + reduce-scatter).
    #[arg(long)]
    tp_sp: bool,
}

impl StrategyArgs {
    fn strategy(&self) -> Strategy {
        Strategy {
            tp: self.tp,
            ulysses: self.ulysses,
            ring: self.ring,
            dp: self.dp,
            pp: self.pp,
            zero_stage: self.zero,
            tp_sp: self.tp_sp,
        }
    }
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    /// Adds the step-time estimate.
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Also print the reference strategy table for the same device count.
    #[arg(long)]
    table: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cluster: PathBuf,
    /// JSON with `pins`, `zero_stages` and `tp_sp_variants`.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    seqlen: usize,
    #[arg(long)]
    ring: usize,
    #[arg(long)]
    json: bool,
}

struct Outcome {
    report: RunReport,
    text: String,
    json: bool,
}

fn invalid(msg: impl std::fmt::Display) -> String {
    msg.to_string()
}

fn load<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {what} file {}: {e}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        format!(
            "invalid {what} file {}: at `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        )
    })
}

fn load_model(path: &Path) -> Result<ModelConfig, String> {
    let m: ModelConfig = load(path, "model")?;
    m.validate().map_err(invalid)?;
    Ok(m)
}

fn load_cluster(path: &Path) -> Result<ClusterConfig, String> {
    let c: ClusterConfig = load(path, "cluster")?;
    c.validate().map_err(invalid)?;
    Ok(c)
}

fn report<C: Serialize, R: Serialize>(config: &C, results: &R, exit_status: u8) -> Result<RunReport, String> {
    let command = std::env::args().skip(1).collect();
    RunReport::new(command, config, results, exit_status.into()).map_err(invalid)
}

fn render_simulation(cfg: &SimulateConfig, r: &SimulateResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "mesh ulysses={} ring={} ({} ranks), {}, {}",
        cfg.ulysses,
        cfg.ring,
        r.world_size,
        cfg.precision,
        if cfg.causal { "causal" } else { "full" }
    );
    for c in &r.collectives {
        let _ = writeln!(
            s,
            "  {:<15}{:>4} calls/rank {:>4} group events {:>14} bytes",
            c.collective.name(),
            c.calls_per_rank,
            c.events,
            c.bytes
        );
    }
    let _ = writeln!(s, "  total bytes {}", r.total_bytes);
    if let Some(c) = &r.check {
        for (name, e) in [("output", c.output), ("dq", c.dq), ("dk", c.dk), ("dv", c.dv)] {
            let _ = writeln!(s, "  {name:<7} max abs {:.3e}  max rel {:.3e}", e.max_abs, e.max_rel);
        }
        let _ = writeln!(
            s,
            "check {} (tolerance {:e})",
            if c.passed { "passed" } else { "FAILED" },
            c.tolerance
        );
    }
    s
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome, String> {
    let cfg = SimulateConfig {
        bs: a.bs,
        seq_len: a.seqlen,
        heads: a.heads,
        kv_heads: a.kv_heads.unwrap_or(a.heads),
        head_size: a.head_size,
        ulysses: a.ulysses,
        ring: a.ring,
        causal: a.causal,
        precision: a.precision,
        seed: a.seed,
        check: a.check,
        tolerance: a.tolerance,
    };
    let result = simulate(&cfg).map_err(invalid)?;
    if let Some(path) = &a.ledger_out {
        fs::write(path, result.ledger.to_csv())
            .map_err(|e| format!("cannot write ledger {}: {e}", path.display()))?;
    }
    let status = if result.passed() { 0 } else { EXIT_TOLERANCE };
    Ok(Outcome {
        report: report(&cfg, &result, status)?,
        text: render_simulation(&cfg, &result),
        json: a.json,
    })
}

fn render_cost(r: &CostReport) -> String {
    let mut s = String::new();
    let c = &r.comm;
    let m = &r.memory;
    let _ = writeln!(s, "strategy {}", r.strategy);
    let _ = writeln!(s, "layout   {}", RankLayout::new(r.strategy));
    let _ = writeln!(s, "per block communication");
    let _ = writeln!(s, "  param     {:<28} {:>16.0} bytes", c.param_collective, c.param_bytes);
    let _ = writeln!(s, "  act       {:<28} {:>16.0} bytes", c.act_collective, c.act_bytes);
    let _ = writeln!(s, "  ring p2p  {:<28} {:>16.0} bytes", "", c.ring_p2p_bytes);
    if let Some(note) = &c.overlap_note {
        let _ = writeln!(s, "  note: {note}");
    }
    let _ = writeln!(s, "per device memory");
    for (name, v) in [
        ("params", m.params_bytes),
        ("grads", m.grads_bytes),
        ("optimizer", m.optimizer_bytes),
        ("activations", m.activation_bytes),
        ("total", m.total()),
    ] {
        let _ = writeln!(s, "  {name:<12}{v:>18.0} bytes");
    }
    if let Some(t) = &r.step_time {
        let _ = writeln!(s, "step time {:.6} s", t.total);
        for (name, v) in [
            ("tp", t.tp),
            ("ulysses", t.ulysses),
            ("ring p2p", t.ring_p2p),
            ("param", t.param),
            ("latency", t.latency),
        ] {
            let _ = writeln!(s, "  {name:<10}{v:>12.6} s");
        }
    }
    s
}

fn cmd_cost(a: &CostArgs) -> Result<Outcome, String> {
    let model = load_model(&a.model)?;
    let cluster = a.cluster.as_deref().map(load_cluster).transpose()?;
    let strategy = a.strategy.strategy();
    let cost = cost_report(&strategy, &model, cluster.as_ref()).map_err(invalid)?;
    let mut text = render_cost(&cost);
    let table = if a.table {
        let n = cluster.as_ref().map_or(strategy.devices(), |c| c.devices);
        let t = table2(&model, n).map_err(invalid)?;
        let _ = write!(text, "\n{t}");
        Some(t)
    } else {
        None
    };
    let config = json!({ "model": model, "cluster": cluster, "strategy": strategy, "table": a.table });
    let results = json!({ "cost": cost, "table": table });
    Ok(Outcome {
        report: report(&config, &results, 0)?,
        text,
        json: a.json,
    })
}

fn render_plans(plans: &[PlanCandidate], tally: &std::collections::BTreeMap<Rule, usize>, total: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} candidates, {} feasible", total, total - tally.values().sum::<usize>());
    for (i, p) in plans.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>3}. {:<55} {:>12.6} s  [{}]",
            i + 1,
            p.strategy.to_string(),
            p.step_time().unwrap_or(f64::NAN),
            p.verdict
        );
        let _ = writeln!(s, "     order {}", p.rank_order);
        for n in &p.notes {
            let _ = writeln!(s, "     note: {}", n.text);
        }
    }
    if !tally.is_empty() {
        let _ = writeln!(s, "rejections:");
        for (rule, n) in tally {
            let _ = writeln!(s, "  {:<22}{n:>6}", rule.id());
        }
    }
    s
}

fn cmd_plan(a: &PlanArgs) -> Result<Outcome, String> {
    let model = load_model(&a.model)?;
    let cluster = load_cluster(&a.cluster)?;
    let options: PlanOptions = match &a.options {
        Some(p) => load(p, "options")?,
        None => PlanOptions::default(),
    };
    if let Some(z) = options.zero_stages.iter().find(|&&z| z > 3) {
        return Err(format!("invalid options: zero stage {z} is not one of 0..=3"));
    }
    let e = enumerate_strategies(&model, &cluster, &options);
    let tally = e.tally();
    let mut plans = rank_plans(&e.candidates);
    plans.truncate(a.top);
    let text = render_plans(&plans, &tally, e.candidates.len());
    let tally_json: std::collections::BTreeMap<&str, usize> =
        tally.iter().map(|(r, n)| (r.id(), *n)).collect();
    let config = json!({ "model": model, "cluster": cluster, "options": options, "top": a.top });
    let results = json!({
        "candidates": e.candidates.len(),
        "plans": plans,
        "rejections": tally_json,
    });
    Ok(Outcome {
        report: report(&config, &results, 0)?,
        text,
        json: a.json,
    })
}

fn ratio(w: &[u64]) -> f64 {
    let max = w.iter().copied().max().unwrap_or(0) as f64;
    let min = w.iter().copied().min().unwrap_or(0) as f64;
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn cmd_balance(a: &BalanceArgs) -> Result<Outcome, String> {
    let zigzag = zigzag_partition(a.seqlen, a.ring).map_err(invalid)?;
    let even = even_partition(a.seqlen, a.ring).map_err(invalid)?;
    let zw = causal_workload(&zigzag, a.seqlen);
    let ew = causal_workload(&even, a.seqlen);
    let chunk = a.seqlen / (2 * a.ring);
    let mut text = String::new();
    for (r, tokens) in zigzag.iter().enumerate() {
        let _ = writeln!(
            text,
            "ring rank {r}: chunks {} and {} (tokens {}..{} and {}..{}), zigzag pairs {}, contiguous pairs {}",
            r,
            2 * a.ring - 1 - r,
            tokens[0],
            tokens[0] + chunk,
            tokens[chunk],
            tokens[chunk] + chunk,
            zw[r],
            ew[r]
        );
    }
    let (zr, er) = (ratio(&zw), ratio(&ew));
    let _ = writeln!(text, "max/min: zigzag {zr:.4}, contiguous {er:.4}");
    let config = json!({ "seq_len": a.seqlen, "ring": a.ring });
    let results = json!({
        "zigzag": { "assignment": zigzag, "pairs": zw, "max_over_min": zr },
        "contiguous": { "pairs": ew, "max_over_min": er },
    });
    Ok(Outcome {
        report: report(&config, &results, 0)?,
        text,
        json: a.json,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Balance(a) => cmd_balance(a),
    };
    match outcome {
        Ok(o) => {
            if o.json {
                match serde_json::to_string_pretty(&o.report) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_INVALID);
                    }
                }
            } else {
                print!("{}", o.text);
            }
            ExitCode::from(o.report.exit_status as u8)
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
