//! Command implementations behind the `secmoe` binary.
//!
//! Every command renders its report into a `String`, so the binary, the
//! tests and the determinism checks all see the same bytes.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use secmoe::audit::{audit_sectional, audit_traditional, AuditReport};
use secmoe::blocks::{transformer_layer, AttnOptions, LayerParams, LinearParams};
use secmoe::cost::{
    derivative_scale, optimize_experts, reduction_factors, sweep, ModelDims, MAX_EXPERTS,
};
use secmoe::gradcheck::{
    grad_check, AttentionBlock, Block, CorruptedAdjoint, FfnBlock, GradCheckReport, LayerBlock,
    LinearBlock, Probe,
};
use secmoe::sectional::{
    init_params, param_count, sectional_forward, SectionalBlock, SectionalConfig, SectionalCounters,
};
use secmoe::traditional::{
    expert_capacity, gate, routing_stats, traditional_forward, RoutingStats, TraditionalParams,
};
use secmoe::{Category, CounterSnapshot, OpCounter, Tensor};

pub use config::RunConfig;

/// Finite-difference step used by `gradcheck`.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error in `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Offset mixed into the run seed for input tensors.
const INPUT_STREAM: u64 = 0x1e_9b7d;

#[derive(Debug, Parser)]
#[command(
    name = "secmoe",
    version,
    about = "Sectionalized mixture-of-experts laboratory"
)]
pub struct Cli {
    /// TOML run configuration; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Smallest expert count for `cost` and `opt`.
    #[arg(long, global = true)]
    pub emin: Option<u64>,
    /// Largest expert count for `cost` and `opt`.
    #[arg(long, global = true)]
    pub emax: Option<u64>,
    /// Write the CSV (or report) here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sweep the analytic cost model over an expert range and emit CSV.
    Cost,
    /// Find the cost-minimizing expert count.
    Opt,
    /// Compare measured MAC counts with the cost model.
    Audit,
    /// Finite-difference check of every block's adjoint.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Run dense, traditional MoE and sectional MoE on the same input.
    Compare,
    /// Routing statistics of the traditional gate on a random input.
    RouteStats,
}

/// What a command produced: text for stdout and whether its checks passed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub passed: bool,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            stdout,
            passed: true,
        }
    }
}

/// Exit status for an error: 1 when a numerical check failed, 2 for
/// configuration and I/O problems.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let check_failure = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<secmoe::Error>(),
            Some(secmoe::Error::Evaluation(_) | secmoe::Error::NonFinite(_))
        )
    });
    if check_failure {
        1
    } else {
        2
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let out = cli.out.clone().or_else(|| cfg.run.out.clone());
    match &cli.command {
        Command::Cost => {
            let (lo, hi) = cfg.e_range(cli.emin, cli.emax);
            emit(cost_csv(&cfg.model_dims()?, lo, hi)?, out.as_deref())
        }
        Command::Opt => {
            let (lo, hi) = cfg.e_range(cli.emin, cli.emax);
            opt_report(&cfg.model_dims()?, lo, hi)
        }
        Command::Audit => {
            let (report, passed) = audit_report(&cfg)?;
            if let Some(path) = out.as_deref() {
                write_file(path, &report.to_csv())?;
            }
            Ok(Outcome {
                stdout: report.render_text(),
                passed,
            })
        }
        Command::Gradcheck { corrupt_adjoint } => gradcheck_report(&cfg, *corrupt_adjoint),
        Command::Compare => emit(compare_report(&cfg)?, out.as_deref()),
        Command::RouteStats => emit(route_stats_report(&cfg)?, out.as_deref()),
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(text: String, out: Option<&Path>) -> anyhow::Result<Outcome> {
    match out {
        Some(path) => {
            write_file(path, &text)?;
            Ok(Outcome::ok(format!("wrote {}\n", path.display())))
        }
        None => Ok(Outcome::ok(text)),
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn check_range(lo: u64, hi: u64) -> anyhow::Result<()> {
    if lo < 1 || lo > hi || hi > MAX_EXPERTS {
        bail!("expert range [{lo}, {hi}] must satisfy 1 <= emin <= emax <= {MAX_EXPERTS}");
    }
    Ok(())
}

pub const COST_HEADER: &str = "E,a_pre,a_experts,a_total,r_pre,r_experts,r_total,overhead,s_total,\
rf_qkv_derived,rf_qkv_paper,rf_attn_derived,rf_attn_paper";

pub fn cost_csv(dims: &ModelDims, lo: u64, hi: u64) -> anyhow::Result<String> {
    check_range(lo, hi)?;
    let es: Vec<f64> = (lo..=hi).map(|e| e as f64).collect();
    let rows = sweep(dims, &es)?;
    let mut out = format!("{COST_HEADER}\n");
    for (e, b) in (lo..=hi).zip(&rows) {
        let rf = reduction_factors(&dims.with_e(b.e));
        let cols = [
            b.a_pre,
            b.a_experts,
            b.a_total,
            b.r_pre,
            b.r_experts,
            b.r_total,
            b.overhead,
            b.s_total,
            rf.qkv_derived,
            rf.qkv_paper,
            rf.attn_derived,
            rf.attn_paper,
        ];
        let _ = write!(out, "{e}");
        for c in cols {
            let _ = write!(out, ",{}", num(c));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn opt_report(dims: &ModelDims, lo: u64, hi: u64) -> anyhow::Result<Outcome> {
    check_range(lo, hi)?;
    let r = optimize_experts(dims, lo, hi)?;
    let tol = 1e-6 * derivative_scale(dims, r.e_opt_cont);
    let converged = !r.interior || r.derivative_at_opt.abs() < tol;
    let mut s = String::new();
    let _ = writeln!(s, "convention: {}", r.convention);
    let _ = writeln!(s, "range: [{lo}, {hi}]");
    let _ = writeln!(s, "e_opt_int: {}", r.e_opt_int);
    let _ = writeln!(s, "s_at_opt: {}", num(r.s_at_opt));
    let _ = writeln!(s, "e_opt_cont: {}", num(r.e_opt_cont));
    let _ = writeln!(
        s,
        "solution: {}",
        if r.interior { "interior" } else { "boundary" }
    );
    let _ = writeln!(s, "bracket: [{}, {}]", num(r.bracket.0), num(r.bracket.1));
    let _ = writeln!(s, "ds_de_at_opt: {}", num(r.derivative_at_opt));
    let _ = writeln!(s, "ds_de_tolerance: {}", num(tol));
    let _ = writeln!(
        s,
        "derivative_check: {}",
        if converged { "pass" } else { "fail" }
    );
    Ok(Outcome {
        stdout: s,
        passed: converged,
    })
}

/// Sectional and traditional audits merged into one report, rows prefixed
/// by architecture.
pub fn audit_report(cfg: &RunConfig) -> anyhow::Result<(AuditReport, bool)> {
    let dims = cfg.model_dims()?;
    let sectional = audit_sectional(&cfg.sectional()?, &dims)?;
    let traditional = audit_traditional(&dims, cfg.run.seed)?;
    let passed = sectional.passed() && traditional.passed();
    let mut rows = Vec::new();
    for (prefix, report) in [("sectional", &sectional), ("traditional", &traditional)] {
        for row in &report.rows {
            let mut row = row.clone();
            row.equation = format!("{prefix}/{}", row.equation);
            rows.push(row);
        }
    }
    let title = format!("{}\n{}", sectional.title, traditional.title);
    Ok((AuditReport { title, rows }, passed))
}

fn check_one<B: Block>(
    block: B,
    x: Tensor,
    params: B::Params,
    seed: u64,
    corrupt: bool,
) -> anyhow::Result<GradCheckReport> {
    let probe = Probe::random(block, x, params, seed)?;
    let theta = probe.theta();
    let report = if corrupt {
        grad_check(
            &CorruptedAdjoint(probe),
            &theta,
            GRADCHECK_STEP,
            GRADCHECK_TOL,
        )?
    } else {
        grad_check(&probe, &theta, GRADCHECK_STEP, GRADCHECK_TOL)?
    };
    Ok(report)
}

/// Gradient checks of each block type at the configured shapes and of the
/// whole sectional stack.
pub fn gradcheck_suite(
    cfg: &SectionalConfig,
    seed: u64,
    corrupt: bool,
) -> anyhow::Result<Vec<(String, GradCheckReport)>> {
    cfg.validate()?;
    let params = init_params(cfg)?;
    let x = Tensor::random_uniform(cfg.tokens(), cfg.d0, seed ^ INPUT_STREAM);
    let xe = Tensor::random_uniform(cfg.l_reduced(), cfg.expert_width(), seed ^ INPUT_STREAM ^ 1);
    let xa = Tensor::random_uniform(cfg.l_reduced(), cfg.d0, seed ^ INPUT_STREAM ^ 2);
    let pre: &LayerParams = &params.pre;
    let linear = LinearParams {
        w: pre.ffn.w1.clone(),
        b: Some(pre.ffn.b1.clone()),
    };
    let opts = AttnOptions::causal(cfg.causal);
    let layer = LayerBlock { causal: cfg.causal };
    Ok(vec![
        (
            "linear".into(),
            check_one(LinearBlock, x.clone(), linear, seed, corrupt)?,
        ),
        (
            "attention".into(),
            check_one(
                AttentionBlock(opts),
                x.clone(),
                pre.attn.clone(),
                seed,
                corrupt,
            )?,
        ),
        (
            "ffn".into(),
            check_one(FfnBlock, x.clone(), pre.ffn.clone(), seed, corrupt)?,
        ),
        (
            "pre_expert_layer".into(),
            check_one(layer, x.clone(), pre.clone(), seed, corrupt)?,
        ),
        (
            "expert_layer".into(),
            check_one(layer, xe, params.experts[0].clone(), seed, corrupt)?,
        ),
        (
            "aggregation_layer".into(),
            check_one(layer, xa, params.agg.clone(), seed, corrupt)?,
        ),
        (
            "sectional_stack".into(),
            check_one(SectionalBlock(*cfg), x, params, seed, corrupt)?,
        ),
    ])
}

pub fn gradcheck_report(cfg: &RunConfig, corrupt: bool) -> anyhow::Result<Outcome> {
    let results = gradcheck_suite(&cfg.sectional()?, cfg.run.seed, corrupt)?;
    let width = results.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut s = format!(
        "{:<width$}  {:>7}  {:>23}  status\n",
        "block", "checked", "max_rel_error"
    );
    let mut passed = true;
    for (name, r) in &results {
        let ok = r.max_rel_error < GRADCHECK_TOL && r.passed();
        passed &= ok;
        let _ = writeln!(
            s,
            "{name:<width$}  {:>7}  {:>23}  {}",
            r.checked,
            num(r.max_rel_error),
            if ok { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "tolerance: {}", num(GRADCHECK_TOL));
    let _ = writeln!(s, "overall: {}", if passed { "PASS" } else { "FAIL" });
    Ok(Outcome { stdout: s, passed })
}

fn macs_line(s: &mut String, snap: &CounterSnapshot) {
    let _ = write!(s, "  macs:");
    for (cat, n) in snap.iter() {
        let _ = write!(s, " {cat}={n}");
    }
    let _ = writeln!(s, " total={}", snap.total());
}

fn routing_lines(s: &mut String, stats: &RoutingStats) {
    let counts: Vec<String> = stats
        .tokens_per_expert
        .iter()
        .map(usize::to_string)
        .collect();
    let _ = writeln!(s, "  tokens_per_expert: {}", counts.join(","));
    let _ = writeln!(s, "  cv: {}", num(stats.coefficient_of_variation));
    let _ = writeln!(s, "  entropy: {}", num(stats.entropy));
    let _ = writeln!(s, "  overflow_count: {}", stats.overflow_count);
}

fn traditional_params(cfg: &RunConfig) -> anyhow::Result<TraditionalParams> {
    let d = &cfg.dims;
    Ok(TraditionalParams::init(
        d.d0,
        d.e,
        cfg.model.ffn_mult_exp * d.d0,
        cfg.run.seed,
    )?)
}

pub fn compare_report(cfg: &RunConfig) -> anyhow::Result<String> {
    let sc = cfg.sectional()?;
    let x = Tensor::random_uniform(sc.tokens(), sc.d0, cfg.run.seed ^ INPUT_STREAM);
    let mut s = format!("input: ({}, {})\n", x.rows(), x.cols());

    let dense = LayerParams::init(sc.pre_dims(), cfg.run.seed)?;
    let counter = OpCounter::new();
    let y = transformer_layer(&x, &dense, sc.causal, counter.meter())?;
    let _ = writeln!(s, "architecture: dense");
    let _ = writeln!(s, "  params: {}", sc.pre_dims().param_count());
    let _ = writeln!(s, "  output_shape: ({}, {})", y.rows(), y.cols());
    macs_line(&mut s, &counter.snapshot());

    let tp = traditional_params(cfg)?;
    let counter = OpCounter::new();
    let (y, stats) = traditional_forward(
        &x,
        &tp,
        cfg.model.k,
        cfg.model.capacity_factor,
        cfg.model.parallel,
        counter.meter(),
    )?;
    let _ = writeln!(s, "architecture: traditional");
    let _ = writeln!(s, "  params: {}", tp.param_count());
    let _ = writeln!(s, "  output_shape: ({}, {})", y.rows(), y.cols());
    macs_line(&mut s, &counter.snapshot());
    routing_lines(&mut s, &stats);

    let params = init_params(&sc)?;
    let counters = SectionalCounters::new();
    let y = sectional_forward(&x, &params, &sc, &counters)?;
    let _ = writeln!(s, "architecture: sectional");
    let _ = writeln!(s, "  params: {}", param_count(&sc)?.total());
    let _ = writeln!(s, "  output_shape: ({}, {})", y.rows(), y.cols());
    macs_line(&mut s, &counters.total());
    Ok(s)
}

pub fn route_stats_report(cfg: &RunConfig) -> anyhow::Result<String> {
    let (d, m) = (&cfg.dims, &cfg.model);
    let tokens = d.e * d.l;
    let x = Tensor::random_uniform(tokens, d.d0, cfg.run.seed ^ INPUT_STREAM);
    let tp = traditional_params(cfg)?;
    let counter = OpCounter::new();
    let assignment = gate(&x, &tp.gate, m.k, counter.meter())?;
    let capacity = expert_capacity(m.capacity_factor, m.k, tokens, d.e)?;
    let stats = routing_stats(&assignment.apply_capacity(capacity), d.e);
    let mut s = String::new();
    let _ = writeln!(s, "tokens: {tokens}");
    let _ = writeln!(s, "experts: {}", d.e);
    let _ = writeln!(s, "k: {}", m.k);
    let _ = writeln!(s, "capacity: {capacity}");
    let _ = writeln!(s, "router_macs: {}", counter.get(Category::Router));
    routing_lines(&mut s, &stats);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("secmoe").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn cost_single_row() {
        let dims = ModelDims::new(2, 1.0, 4, 1.0);
        let csv = cost_csv(&dims, 1, 1).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), COST_HEADER);
        let csv = cost_csv(&dims, 1, 2).unwrap();
        let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[0], "2");
        assert_eq!(row[8].parse::<f64>().unwrap(), 292.0);
        assert!(cost_csv(&dims, 3, 2).is_err());
    }

    #[test]
    fn num_round_trips() {
        for x in [0.1, 1.0 / 3.0, 292.0, 8.0 / 9.0, 1e-300] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn opt_examples() {
        let dims = ModelDims::new(2, 1.0, 4, 1.0);
        let out = opt_report(&dims, 1, 16).unwrap();
        assert!(out.passed);
        assert!(out.stdout.contains("e_opt_int: 1\n"));
        assert!(out.stdout.contains(&format!("s_at_opt: {}\n", num(257.0))));
        assert!(out.stdout.contains("convention: consistent"));
        let out = opt_report(&dims, 3, 3).unwrap();
        assert!(out.stdout.contains("e_opt_int: 3\n"));
    }

    #[test]
    fn default_audit_passes() {
        let out = run(&cli(&["audit"])).unwrap();
        assert!(out.passed, "{}", out.stdout);
    }

    #[test]
    fn off_model_audit_is_a_config_error() {
        let mut cfg = RunConfig::parse("[dims]\nL = 4\n[model]\nr = 2\n").unwrap();
        cfg.run.seed = 0;
        let err = audit_report(&cfg).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(format!("{err:#}").contains("off-model"));
    }

    #[test]
    fn gradcheck_toy_and_corrupted() {
        let cfg = RunConfig::default();
        let out = gradcheck_report(&cfg, false).unwrap();
        assert!(out.passed, "{}", out.stdout);
        for name in [
            "linear",
            "attention",
            "ffn",
            "expert_layer",
            "sectional_stack",
        ] {
            assert!(out.stdout.contains(name));
        }
        assert!(!gradcheck_report(&cfg, true).unwrap().passed);
    }

    #[test]
    fn compare_shapes() {
        let cfg = RunConfig::parse("[dims]\nL = 4\nE = 2\nd0 = 8\n").unwrap();
        let s = compare_report(&cfg).unwrap();
        let shapes: Vec<&str> = s.lines().filter(|l| l.contains("output_shape")).collect();
        assert_eq!(
            shapes,
            [
                "  output_shape: (8, 8)",
                "  output_shape: (8, 8)",
                "  output_shape: (2, 8)"
            ]
        );
        // Dense attention over all E·L tokens: 2·(E·L)²·d0.
        assert!(s.contains(&format!("attn_scores={}", 2 * 64 * 8)));
        assert!(s.contains("cv: ") && s.contains("entropy: "));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let eval = anyhow::Error::new(secmoe::Error::Evaluation("nan".into()));
        assert_eq!(exit_code(&eval), 1);
        let cfg = anyhow::Error::new(secmoe::Error::Config("bad".into())).context("loading");
        assert_eq!(exit_code(&cfg), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 2);
    }
}
