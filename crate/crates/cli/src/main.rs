use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use powerset_align::harness::{
    bench_scaling, correlation_sweep, gen_synthetic_batch, gradcheck, verify_bounds, BenchOptions,
    GradcheckOptions, SweepOptions, SyntheticSpec, VerifyOptions,
};
use powerset_align::io::{read_batch, write_batch};
use powerset_align::loss::{total_loss, triplet_loss, LossConfig};
use powerset_align::nla::{nla, s_bar, Activation, NlaConfig, Variant};
use powerset_align::oracle::{Oracle, DEFAULT_MASK_CAP};
use powerset_align::region::{gen_random_masks, load_masks, PatchGrid};
use powerset_align::similarity::{compute_s0, MiniBatch, SimilarityTensor};
use powerset_align::tree::NodeSetPolicy;

mod config;

use config::{MaskSource, Settings, VariantArg};

#[derive(Parser)]
#[command(name = "powerset-align", version, about = "Exact and approximate powerset alignment experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base seed for synthetic data and trials.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Settings file: a JSON object or `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one setting, e.g. `--set tau=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Batch JSONL to read. A synthetic batch is generated when absent.
    #[arg(long, global = true)]
    batch: Option<PathBuf>,
    /// Where region masks come from. Without it the batch keeps its own masks.
    #[arg(long, value_enum, global = true)]
    mask_source: Option<MaskSource>,
    /// Mask JSONL for `--mask-source file`.
    #[arg(long, global = true)]
    mask_file: Option<PathBuf>,
}

#[derive(Args, Default)]
struct AggArgs {
    #[arg(long)]
    act: Option<Activation>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic batch as JSONL.
    Gen,
    /// Exact region-to-text, text-to-region and summed similarity matrices.
    Exact,
    /// Approximated similarity matrix.
    Nla {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[command(flatten)]
        agg: AggArgs,
    },
    /// Triplet and total losses from the exact and approximated similarities.
    Loss {
        #[command(flatten)]
        agg: AggArgs,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Pearson correlation between exact and approximated triplet terms.
    Sweep {
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Check every bound and identity on random instances.
    Verify {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time and memory of the exact oracle and the approximation against M.
    Bench {
        /// Mask counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck {
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// Outcome of a command that ran to completion.
enum Status {
    Pass,
    Fail(Value),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail(failures)) => {
            eprintln!("{}", json!({ "failures": failures }));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn flag_settings(cli: &Cli) -> Settings {
    let c = &cli.common;
    let mut s = Settings {
        seed: c.seed,
        batch: c.batch.clone(),
        mask_source: c.mask_source,
        mask_file: c.mask_file.clone(),
        ..Settings::default()
    };
    let mut agg = |a: &AggArgs| {
        s.act = a.act;
        s.tau = a.tau;
        s.alpha = a.alpha;
    };
    match &cli.command {
        Command::Nla { variant, agg: a } => {
            agg(a);
            s.variant = *variant;
        }
        Command::Loss { agg: a, gamma, lambda } => {
            agg(a);
            s.gamma = *gamma;
            s.lambda = *lambda;
        }
        Command::Sweep { batches } => s.batches = *batches,
        Command::Verify { trials } | Command::Gradcheck { trials } => s.trials = *trials,
        Command::Bench { counts } => s.counts = counts.clone(),
        Command::Gen | Command::Exact => {}
    }
    s
}

fn settings(cli: &Cli) -> Result<Settings> {
    let base = match &cli.common.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    base.overlay(&Settings::from_pairs(cli.common.set.iter().map(String::as_str))?)?
        .overlay(&flag_settings(cli))
}

fn run(cli: &Cli) -> Result<Status> {
    let s = settings(cli)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Gen => {
            let batch = load_batch(&s)?;
            let mut w = sink(out)?;
            write_batch(&batch, &mut w)?;
            w.flush()?;
        }
        Command::Exact => {
            let (s0, spans) = prepare(&s)?;
            let res = Oracle::new(s.mask_cap.unwrap_or(DEFAULT_MASK_CAP)).aggregate(&s0, &spans)?;
            write_matrices(out, &[("r2t", &res.q_r2t), ("t2r", &res.q_t2r), ("q_bar", &res.q_bar)])?;
        }
        Command::Nla { .. } => {
            let (s0, spans) = prepare(&s)?;
            let (name, matrix) = match s.variant.unwrap_or(VariantArg::Sbar) {
                VariantArg::T1 => ("t1", nla(&s0, &spans, &aggregator(&s, Variant::T1, true)?)?.s3),
                VariantArg::T2 => ("t2", nla(&s0, &spans, &aggregator(&s, Variant::T2, true)?)?.s3),
                VariantArg::Sbar => ("sbar", approximate(&s, &s0, &spans)?),
            };
            write_matrices(out, &[(name, &matrix)])?;
        }
        Command::Loss { .. } => {
            let batch = load_batch(&s)?;
            let (s0, spans) = similarity(&batch)?;
            let cfg = loss_config(&s);
            cfg.validate()?;
            let exact = Oracle::new(s.mask_cap.unwrap_or(DEFAULT_MASK_CAP)).aggregate(&s0, &spans)?.q_bar;
            let approx = approximate(&s, &s0, &spans)?;
            let row = |quantity: &'static str, e: f64, a: f64| LossRow {
                quantity,
                exact: e,
                approx: a,
                difference: a - e,
            };
            write_rows(
                out,
                [
                    row(
                        "triplet",
                        triplet_loss(&exact.view(), cfg.gamma)?,
                        triplet_loss(&approx.view(), cfg.gamma)?,
                    ),
                    row(
                        "total",
                        total_loss(&batch, &exact.view(), &cfg)?,
                        total_loss(&batch, &approx.view(), &cfg)?,
                    ),
                ],
            )?;
        }
        Command::Sweep { .. } => return sweep(&s, out),
        Command::Verify { .. } => return verify(&s, out),
        Command::Bench { .. } => bench(&s, out)?,
        Command::Gradcheck { .. } => return grad(&s, out),
    }
    Ok(Status::Pass)
}

fn synthetic_spec(s: &Settings) -> SyntheticSpec {
    let d = SyntheticSpec::default();
    SyntheticSpec {
        batch_size: s.batch_size.unwrap_or(d.batch_size),
        grid: s.grid.unwrap_or(d.grid),
        tokens: s.tokens.unwrap_or(d.tokens),
        dim: s.dim.unwrap_or(d.dim),
        masks: s.masks.unwrap_or(d.masks),
        seed: s.seed.unwrap_or(d.seed),
        ..d
    }
}

/// Grid for a batch read from disk: the configured one, else square when
/// the patch count allows, else a single row.
fn infer_grid(s: &Settings, patches: usize) -> Result<PatchGrid> {
    let (h, w) = s.grid.unwrap_or_else(|| {
        let side = (patches as f64).sqrt().round() as usize;
        if side * side == patches {
            (side, side)
        } else {
            (1, patches)
        }
    });
    if h * w != patches {
        bail!("grid {h}x{w} has {} patches but the images have {patches}", h * w);
    }
    Ok(PatchGrid::new(h, w)?)
}

fn load_batch(s: &Settings) -> Result<MiniBatch> {
    let (batch, grid) = match &s.batch {
        Some(path) => {
            let batch = read_batch(path).with_context(|| format!("reading batch {}", path.display()))?;
            let grid = infer_grid(s, batch.image(0).patches.rows())?;
            (batch, grid)
        }
        None => {
            let spec = synthetic_spec(s);
            let grid = PatchGrid::new(spec.grid.0, spec.grid.1)?;
            let batch = gen_synthetic_batch(&spec)?;
            // Synthetic batches already carry random masks.
            if s.mask_source == Some(MaskSource::Random) {
                return Ok(batch);
            }
            (batch, grid)
        }
    };
    let sets = match s.mask_source {
        None => return Ok(batch),
        Some(MaskSource::Random) => {
            let count = s.masks.unwrap_or(SyntheticSpec::default().masks);
            let seed = s.seed.unwrap_or(0);
            (0..batch.len() as u64)
                .map(|i| gen_random_masks(grid, count, seed.wrapping_add(i)))
                .collect()
        }
        Some(MaskSource::File) => {
            let path = s.mask_file.as_ref().context("--mask-source file needs --mask-file")?;
            let sets = load_masks(path, grid).with_context(|| format!("reading masks {}", path.display()))?;
            if sets.len() != batch.len() {
                bail!("mask file has {} records for a batch of {}", sets.len(), batch.len());
            }
            sets
        }
    };
    Ok(batch.with_masks(sets)?)
}

type Spans = Vec<Vec<std::ops::Range<usize>>>;

fn similarity(batch: &MiniBatch) -> Result<(SimilarityTensor, Spans)> {
    Ok((compute_s0(batch)?, batch.node_spans(&NodeSetPolicy::all_nodes())))
}

fn prepare(s: &Settings) -> Result<(SimilarityTensor, Spans)> {
    similarity(&load_batch(s)?)
}

/// Library default for `variant` with the configured overrides. A strict
/// request rejects an activation from the other family; otherwise such an
/// activation is left to the aggregator it belongs to.
fn aggregator(s: &Settings, variant: Variant, strict: bool) -> Result<NlaConfig> {
    let mut cfg = match variant {
        Variant::T1 => NlaConfig::default_t1(),
        Variant::T2 => NlaConfig::default_t2(),
    };
    let family: &[Activation] = match variant {
        Variant::T1 => &Activation::T1,
        Variant::T2 => &Activation::T2,
    };
    if let Some(act) = s.act {
        if strict || family.contains(&act) {
            cfg.activation = act;
        }
    }
    if let Some(tau) = s.tau {
        cfg.tau = tau;
    }
    if let (Variant::T2, Some(alpha)) = (variant, s.alpha) {
        cfg.alpha = alpha;
    }
    if strict && variant == Variant::T1 && s.alpha.is_some() {
        bail!("--alpha applies to the t2 and sbar variants only");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn approximate(s: &Settings, s0: &SimilarityTensor, spans: &Spans) -> Result<Array2<f64>> {
    let t1 = aggregator(s, Variant::T1, false)?;
    let t2 = aggregator(s, Variant::T2, false)?;
    Ok(s_bar(s0, spans, &t1, &t2)?)
}

fn loss_config(s: &Settings) -> LossConfig {
    let d = LossConfig::default();
    LossConfig {
        gamma: s.gamma.unwrap_or(d.gamma),
        lambda: s.lambda.unwrap_or(d.lambda),
        clip_temperature: s.clip_temperature.unwrap_or(d.clip_temperature),
    }
}

fn sweep(s: &Settings, out: &Option<PathBuf>) -> Result<Status> {
    let d = SweepOptions::default();
    let opts = SweepOptions {
        taus: s.taus.clone().unwrap_or(d.taus.clone()),
        alphas: s.alphas.clone().unwrap_or(d.alphas.clone()),
        batches: s.batches.unwrap_or(d.batches),
        gamma: s.gamma.unwrap_or(d.gamma),
        ..d
    };
    let result = correlation_sweep(&synthetic_spec(s), &opts)?;
    write_rows(out, &result.rows)?;
    let Some(min) = s.min_pearson else {
        return Ok(Status::Pass);
    };
    let low: Vec<Value> = result
        .rows
        .iter()
        .filter(|r| r.pearson_r < min)
        .map(|r| json!({ "check": "min_pearson", "tau": r.tau, "alpha": r.alpha, "pearson_r": r.pearson_r }))
        .collect();
    Ok(if low.is_empty() { Status::Pass } else { Status::Fail(Value::Array(low)) })
}

fn verify(s: &Settings, out: &Option<PathBuf>) -> Result<Status> {
    let d = VerifyOptions::default();
    let opts = VerifyOptions {
        trials: s.trials.unwrap_or(d.trials),
        seed: s.seed.unwrap_or(d.seed),
        distribution: s.distribution.clone().unwrap_or(d.distribution.clone()),
        taus: s.taus.clone().unwrap_or(d.taus.clone()),
        alphas: s.alphas.clone().unwrap_or(d.alphas.clone()),
        ..d
    };
    let report = verify_bounds(&opts)?;
    write_rows(out, &report.checks)?;
    if report.passed() {
        return Ok(Status::Pass);
    }
    let mut failures: Vec<Value> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| json!({ "check": c.name, "failed_trials": c.failed_trials, "worst": c.worst }))
        .collect();
    for v in &report.violations {
        failures.push(serde_json::to_value(v)?);
    }
    Ok(Status::Fail(Value::Array(failures)))
}

fn bench(s: &Settings, out: &Option<PathBuf>) -> Result<()> {
    let d = BenchOptions::default();
    let opts = BenchOptions {
        batch_size: s.batch_size.unwrap_or(d.batch_size),
        tokens: s.tokens.unwrap_or(d.tokens),
        dim: s.dim.unwrap_or(d.dim),
        grid: s.grid.unwrap_or(d.grid),
        seed: s.seed.unwrap_or(d.seed),
        mask_cap: s.mask_cap.unwrap_or(d.mask_cap),
        min_secs: s.min_secs.unwrap_or(d.min_secs),
    };
    let counts = s.counts.clone().unwrap_or_else(|| vec![4, 6, 8, 10, 12, 14, 16, opts.mask_cap + 1]);
    write_rows(out, &bench_scaling(&counts, true, &opts)?)
}

#[derive(Serialize)]
struct LossRow {
    quantity: &'static str,
    exact: f64,
    approx: f64,
    difference: f64,
}

#[derive(Serialize)]
struct GradRow {
    trials: usize,
    entries: usize,
    max_rel_error: f64,
    seed: Option<u64>,
    i: Option<usize>,
    j: Option<usize>,
    m: Option<usize>,
    leaf: Option<usize>,
    analytic: f64,
    numeric: f64,
}

fn grad(s: &Settings, out: &Option<PathBuf>) -> Result<Status> {
    let d = GradcheckOptions::default();
    let aggregators = d
        .aggregators
        .iter()
        .map(|cfg| {
            let mut cfg = *cfg;
            cfg.tau = s.tau.unwrap_or(cfg.tau);
            if cfg.variant == Variant::T2 {
                cfg.alpha = s.alpha.unwrap_or(cfg.alpha);
            }
            cfg
        })
        .collect();
    let opts = GradcheckOptions {
        aggregators,
        loss: loss_config(s),
        step: s.step.unwrap_or(d.step),
        trials: s.trials.unwrap_or(d.trials),
        seed: s.seed.unwrap_or(d.seed),
        distribution: s.distribution.clone().unwrap_or(d.distribution.clone()),
    };
    let report = gradcheck(&opts)?;
    let at = report.location;
    write_rows(
        out,
        [GradRow {
            trials: report.trials,
            entries: report.entries,
            max_rel_error: report.max_rel_error,
            seed: at.map(|l| l.0),
            i: at.map(|l| l.1),
            j: at.map(|l| l.2),
            m: at.map(|l| l.3),
            leaf: at.map(|l| l.4),
            analytic: report.analytic,
            numeric: report.numeric,
        }],
    )?;
    let tolerance = s.tolerance.unwrap_or(1e-4);
    if report.max_rel_error < tolerance {
        return Ok(Status::Pass);
    }
    Ok(Status::Fail(json!([{
        "check": "gradcheck",
        "max_rel_error": report.max_rel_error,
        "tolerance": tolerance,
        "location": at,
    }])))
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_rows<T: Serialize>(out: &Option<PathBuf>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(out)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Entry<'a> {
    matrix: &'a str,
    i: usize,
    j: usize,
    value: f64,
}

/// Matrices in long form, one `(matrix, i, j, value)` row per entry.
fn write_matrices(out: &Option<PathBuf>, matrices: &[(&str, &Array2<f64>)]) -> Result<()> {
    write_rows(
        out,
        matrices.iter().flat_map(|&(matrix, x)| {
            x.indexed_iter().map(move |((i, j), &value)| Entry { matrix, i, j, value })
        }),
    )
}
