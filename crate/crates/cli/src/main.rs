//! `fingat` — train and evaluate hierarchical graph-attention stock
//! ranking models from OHLCV CSVs.
//!
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config error.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fingat_core::data::{
    build_instances, load_prices, load_sectors, read_cache, split_chronological, write_cache,
    CacheHeader, DatasetSplit, InstanceWindow, SectorCatalog, CACHE_MAGIC, CACHE_VERSION,
};
use fingat_core::eval::{evaluate, EvalReport, RankedList};
use fingat_core::model::{
    attention_summary, capture_attention, forward, ModelState, PredictionBatch, StockPrediction,
    Variant,
};
use fingat_core::train::{sweep, train, SweepGrid};
use fingat_core::{gradcheck, synth, Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "fingat", version, about = "Hierarchical graph-attention stock ranking")]
struct Cli {
    /// Run configuration JSON; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic momentum market (CSV fixture).
    Synth(SynthArgs),
    /// Parse price/sector CSVs, build windowed instances, write the cache.
    Ingest(IngestArgs),
    /// Train per seed; best checkpoint selected by validation MRR@5.
    Train(TrainArgs),
    /// Evaluate checkpoints on a chronological split.
    Evaluate(EvaluateArgs),
    /// Top-K recommendation for one prediction date.
    Recommend(RecommendArgs),
    /// Export attention weights for one prediction date.
    ExportAttention(ExportAttentionArgs),
    /// Grid sweep over training weeks, embedding size, and delta.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks over every layer and variant.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for prices.csv, sectors.csv, and a matching config.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    stocks: usize,
    #[arg(long, default_value_t = 3)]
    sectors: usize,
    #[arg(long, default_value_t = 40)]
    weeks: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    sectors: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model variant: full|nt|no_intra|no_inter|no_mtl|mse|mlp|gru|gru_att.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated seeds, overriding the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Search the published learning-rate grid {0.0005, 0.001, 0.005}.
    #[arg(long, default_value_t = false)]
    lr_search: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint path; repeat for multi-seed aggregation.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Vec<PathBuf>,
    /// Which chronological portion to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Harness self-test: predictions are the true returns.
    #[arg(long, default_value_t = false)]
    oracle: bool,
    /// Comma-separated K values, overriding the config's list.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prediction date (YYYY-MM-DD).
    #[arg(long)]
    date: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prediction date (YYYY-MM-DD).
    #[arg(long)]
    date: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    weeks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEED)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Evaluate(args) => cmd_evaluate(cfg, args),
        Command::Recommend(args) => cmd_recommend(cfg, args),
        Command::ExportAttention(args) => cmd_export_attention(cfg, args),
        Command::Sweep(args) => cmd_sweep(cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ── synth ────────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let synth_cfg = synth::SynthConfig {
        stocks: args.stocks,
        sectors: args.sectors,
        weeks: args.weeks,
        seed: args.seed,
    };
    let (bars, catalog) = synth::generate(&synth_cfg)?;
    let prices = args.out_dir.join("prices.csv");
    let sectors = args.out_dir.join("sectors.csv");
    synth::write_prices_csv(&prices, &bars)?;
    synth::write_sectors_csv(&sectors, &catalog)?;

    // A ready-to-run config pointing at the generated market.
    let run_cfg = RunConfig {
        prices_csv: PathBuf::from("prices.csv"),
        sectors_csv: PathBuf::from("sectors.csv"),
        cache_path: PathBuf::from("instances.cache.jsonl"),
        run_dir: PathBuf::from("run"),
        ..Default::default()
    };
    run_cfg.write_into(&args.out_dir)?;

    println!(
        "synthetic market: {} stocks, {} sectors, {} trading days (seed {})",
        args.stocks,
        args.sectors,
        args.weeks * 5,
        args.seed
    );
    println!("wrote {}", prices.display());
    println!("wrote {}", sectors.display());
    println!("wrote {}", args.out_dir.join("config.json").display());
    Ok(())
}

// ── ingest ───────────────────────────────────────────────────────────────

fn cmd_ingest(mut cfg: RunConfig, args: IngestArgs) -> Result<()> {
    if let Some(p) = args.prices {
        cfg.prices_csv = p;
    }
    if let Some(p) = args.sectors {
        cfg.sectors_csv = p;
    }
    if let Some(p) = args.cache {
        cfg.cache_path = p;
    }

    let bars = load_prices(&cfg.prices_csv)?;
    let catalog = load_sectors(&cfg.sectors_csv)?;
    let instances = build_instances(
        &bars,
        &catalog,
        cfg.model.weeks,
        cfg.model.days_per_week,
        &cfg.data,
    )?;
    let header = CacheHeader {
        magic: CACHE_MAGIC.to_string(),
        version: CACHE_VERSION,
        weeks: cfg.model.weeks,
        days_per_week: cfg.model.days_per_week,
        ma_literal: cfg.data.ma_literal,
        calendar_threshold: cfg.data.calendar_threshold,
        catalog: catalog.pairs(),
        n_instances: instances.len(),
    };
    write_cache(&cfg.cache_path, &header, &instances)?;

    let n_days = instances.len();
    let summary = format!(
        "ingested {} stocks, {} sectors, {} prediction days, {} instances -> {}",
        catalog.num_stocks(),
        catalog.sectors().len(),
        n_days,
        n_days,
        cfg.cache_path.display()
    );
    log::info!("{summary}");
    println!("{summary}");
    Ok(())
}

// ── shared loading ───────────────────────────────────────────────────────

fn load_split(cfg: &RunConfig) -> Result<(SectorCatalog, DatasetSplit)> {
    let (header, catalog, instances) = read_cache(&cfg.cache_path)?;
    if header.weeks != cfg.model.weeks || header.days_per_week != cfg.model.days_per_week {
        return Err(Error::Config(format!(
            "cache was built for {}x{} windows, config wants {}x{}; re-run ingest",
            header.weeks, header.days_per_week, cfg.model.weeks, cfg.model.days_per_week
        )));
    }
    let split = split_chronological(instances, cfg.split_ratios)?;
    Ok((catalog, split))
}

fn split_portion<'a>(split: &'a DatasetSplit, which: &str) -> Result<Vec<&'a InstanceWindow>> {
    let out: Vec<&InstanceWindow> = match which {
        "train" => split.train.iter().collect(),
        "validation" => split.validation.iter().collect(),
        "test" => split.test.iter().collect(),
        "all" => split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected train|validation|test|all"
            )))
        }
    };
    Ok(out)
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("bad date {s:?}, expected YYYY-MM-DD")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

const LR_GRID: [f64; 3] = [0.0005, 0.001, 0.005];

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(v) = &args.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(n) = args.max_epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(p) = args.patience {
        cfg.train.patience = p;
    }
    if let Some(dir) = args.run_dir {
        cfg.run_dir = dir;
    }

    let (catalog, split) = load_split(&cfg)?;
    cfg.write_into(&cfg.run_dir)?;

    let lrs: Vec<f64> = if args.lr_search {
        LR_GRID.to_vec()
    } else {
        vec![cfg.train.learning_rate]
    };

    #[derive(Serialize)]
    struct RunSummary {
        variant: String,
        seed: u64,
        learning_rate: f64,
        best_epoch: usize,
        best_val_mrr5: f64,
        epochs_run: usize,
        run_dir: PathBuf,
    }
    let mut summaries: Vec<RunSummary> = Vec::new();

    for &seed in &cfg.seeds {
        for &lr in &lrs {
            let mut train_cfg = cfg.resolved_train();
            train_cfg.seed = seed;
            train_cfg.learning_rate = lr;
            let dir_name = if args.lr_search {
                format!("{}_seed{}_lr{}", cfg.model.variant, seed, lr)
            } else {
                format!("{}_seed{}", cfg.model.variant, seed)
            };
            let run_dir = cfg.run_dir.join(dir_name);
            let (_, report) = train(&split, &catalog, &cfg.model, &train_cfg, Some(&run_dir))?;
            write_json(&run_dir.join("train_report.json"), &report)?;
            println!(
                "seed {seed} lr {lr}: best epoch {} val MRR@5 {:.4} ({} epochs, {:.1}s) -> {}",
                report.best_epoch,
                report.best_val_mrr5,
                report.epochs.len(),
                report.wall_clock_secs,
                run_dir.display()
            );
            summaries.push(RunSummary {
                variant: report.variant.clone(),
                seed,
                learning_rate: lr,
                best_epoch: report.best_epoch,
                best_val_mrr5: report.best_val_mrr5,
                epochs_run: report.epochs.len(),
                run_dir,
            });
        }
    }
    write_json(&cfg.run_dir.join("train_summary.json"), &summaries)?;

    if args.lr_search {
        let best = summaries
            .iter()
            .max_by(|a, b| a.best_val_mrr5.total_cmp(&b.best_val_mrr5))
            .expect("at least one run");
        println!(
            "lr search winner: lr {} (seed {}, val MRR@5 {:.4})",
            best.learning_rate, best.seed, best.best_val_mrr5
        );
    }
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────────

fn oracle_report(
    instances: &[&InstanceWindow],
    k_list: &[usize],
) -> Result<EvalReport> {
    use fingat_core::eval::metrics_over_days;
    let mut days = Vec::new();
    let mut detail_days = Vec::new();
    for inst in instances {
        let predictions: Vec<StockPrediction> = inst
            .stocks
            .iter()
            .map(|s| StockPrediction {
                stock_id: s.stock_id.clone(),
                pred_return: s.target_return,
                pred_move: if s.target_move { 1.0 } else { 0.0 },
                true_return: s.target_return,
                true_move: s.target_move,
            })
            .collect();
        let batch = PredictionBatch {
            prediction_date: inst.prediction_date,
            predictions,
            attention: Vec::new(),
        };
        let ranked = RankedList::from_batch(&batch);
        detail_days.push(ranked.clone());
        days.push(ranked);
    }
    let (per_k, acc) = metrics_over_days(&days, k_list)?;
    let mut detail = Vec::new();
    for day in &detail_days {
        for (i, e) in day.entries.iter().enumerate() {
            detail.push(fingat_core::eval::DayDetailRow {
                date: day.prediction_date,
                stock_id: e.stock_id.clone(),
                pred_return: e.pred_return,
                true_return: e.true_return,
                pred_move: e.pred_move,
                true_move: e.true_move,
                pred_rank: i + 1,
                true_rank: e.true_rank,
            });
        }
    }
    Ok(EvalReport { k: per_k, acc, n_days: days.len(), seeds: Vec::new(), detail })
}

/// The report JSON keeps the documented shape; detail rows go to the CSV.
fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut slim = report.clone();
    slim.detail = Vec::new();
    write_json(path, &slim)
}

fn write_detail_csv(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "date,stock_id,pred_return,true_return,pred_move,true_move,pred_rank,true_rank"
    )?;
    for r in &report.detail {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{}",
            r.date,
            r.stock_id,
            r.pred_return,
            r.true_return,
            r.pred_move,
            if r.true_move { 1 } else { 0 },
            r.pred_rank,
            r.true_rank
        )?;
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    for (k, m) in &report.k {
        println!("K={k:<3} MRR {:.4}  Precision {:.4}", m.mrr, m.precision);
    }
    println!("ACC {:.4} over {} days", report.acc, report.n_days);
}

fn cmd_evaluate(cfg: RunConfig, args: EvaluateArgs) -> Result<()> {
    let (catalog, split) = load_split(&cfg)?;
    let instances = split_portion(&split, &args.split)?;
    let k_list = if args.k.is_empty() { cfg.k_list.clone() } else { args.k.clone() };
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.run_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    if args.oracle {
        let report = oracle_report(&instances, &k_list)?;
        print_report(&report);
        write_report_json(&out_dir.join("eval_report.json"), &report)?;
        write_detail_csv(&out_dir.join("eval_detail.csv"), &report)?;
        return Ok(());
    }

    let owned: Vec<InstanceWindow> = instances.into_iter().cloned().collect();
    let mut reports = Vec::new();
    for ckpt in &args.checkpoint {
        let state = ModelState::load(ckpt)?;
        let report = evaluate(&state, &owned, &catalog, &k_list, true)?;
        reports.push(report);
    }

    if reports.len() == 1 {
        let report = &reports[0];
        print_report(report);
        write_report_json(&out_dir.join("eval_report.json"), report)?;
        write_detail_csv(&out_dir.join("eval_detail.csv"), report)?;
        return Ok(());
    }

    // Multi-seed aggregation: mean ± std over checkpoints.
    #[derive(Serialize)]
    struct AggK {
        mrr: f64,
        mrr_std: f64,
        precision: f64,
        precision_std: f64,
    }
    #[derive(Serialize)]
    struct Aggregate {
        k: BTreeMap<usize, AggK>,
        acc: f64,
        acc_std: f64,
        n_days: usize,
        seeds: Vec<u64>,
        runs: usize,
    }
    let mean_std = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut agg_k = BTreeMap::new();
    for k in reports[0].k.keys() {
        let mrrs: Vec<f64> = reports.iter().map(|r| r.k[k].mrr).collect();
        let precs: Vec<f64> = reports.iter().map(|r| r.k[k].precision).collect();
        let (mrr, mrr_std) = mean_std(&mrrs);
        let (precision, precision_std) = mean_std(&precs);
        agg_k.insert(*k, AggK { mrr, mrr_std, precision, precision_std });
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.acc).collect();
    let (acc, acc_std) = mean_std(&accs);
    let aggregate = Aggregate {
        k: agg_k,
        acc,
        acc_std,
        n_days: reports[0].n_days,
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
        runs: reports.len(),
    };
    for (k, m) in &aggregate.k {
        println!(
            "K={k:<3} MRR {:.4} ± {:.4}  Precision {:.4} ± {:.4}",
            m.mrr, m.mrr_std, m.precision, m.precision_std
        );
    }
    println!("ACC {:.4} ± {:.4} over {} runs", aggregate.acc, aggregate.acc_std, reports.len());
    write_json(&out_dir.join("eval_report.json"), &aggregate)?;
    for (i, report) in reports.iter().enumerate() {
        write_report_json(&out_dir.join(format!("eval_report_run{i}.json")), report)?;
        write_detail_csv(&out_dir.join(format!("eval_detail_run{i}.csv")), report)?;
    }
    Ok(())
}

// ── recommend / export-attention ─────────────────────────────────────────

fn batch_for_date(
    cfg: &RunConfig,
    checkpoint: &Path,
    date: NaiveDate,
) -> Result<(ModelState, PredictionBatch)> {
    let (catalog, split) = load_split(cfg)?;
    let all: Vec<&InstanceWindow> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .collect();
    let instance = all
        .iter()
        .find(|i| i.prediction_date == date)
        .copied()
        .ok_or_else(|| {
            let earliest = all
                .iter()
                .map(|i| i.prediction_date)
                .min()
                .map(|d| d.to_string())
                .unwrap_or_else(|| "none".into());
            Error::Domain {
                op: "recommend",
                details: format!(
                    "no complete instance window for {date}; earliest valid date is {earliest}"
                ),
            }
        })?;
    let state = ModelState::load(checkpoint)?;
    let batch = forward(&state, instance, &catalog)?;
    Ok((state, batch))
}

fn cmd_recommend(cfg: RunConfig, args: RecommendArgs) -> Result<()> {
    let date = parse_date(&args.date)?;
    let (_, batch) = batch_for_date(&cfg, &args.checkpoint, date)?;
    let ranked = RankedList::from_batch(&batch);
    if args.k == 0 || args.k > ranked.len() {
        return Err(Error::Domain {
            op: "recommend",
            details: format!("K = {} outside 1..={}", args.k, ranked.len()),
        });
    }

    std::fs::create_dir_all(&cfg.run_dir)?;
    let csv_path = cfg.run_dir.join(format!("recommend_{date}.csv"));
    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "rank,stock_id,pred_return")?;
    println!("top-{} for {date}:", args.k);
    for (i, e) in ranked.entries[..args.k].iter().enumerate() {
        println!("{:>3}. {}  {:+.6}", i + 1, e.stock_id, e.pred_return);
        writeln!(file, "{},{},{}", i + 1, e.stock_id, e.pred_return)?;
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_export_attention(cfg: RunConfig, args: ExportAttentionArgs) -> Result<()> {
    let date = parse_date(&args.date)?;
    let (_, batch) = batch_for_date(&cfg, &args.checkpoint, date)?;
    let rows = capture_attention(&batch);
    let summary = attention_summary(&rows);

    std::fs::create_dir_all(&cfg.run_dir)?;
    let csv_path = cfg.run_dir.join(format!("attention_{date}.csv"));
    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "date,level,context,from,to,weight")?;
    for r in &rows {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            r.date, r.level, r.context, r.from, r.to, r.weight
        )?;
    }
    let json_path = cfg.run_dir.join(format!("attention_summary_{date}.json"));
    write_json(&json_path, &summary)?;

    for (level, stats) in &summary {
        println!(
            "{level}: {} weights, mean {:.4}, variance {:.6}",
            stats.count, stats.mean, stats.variance
        );
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────────

fn cmd_sweep(mut cfg: RunConfig, args: SweepArgs) -> Result<()> {
    if let Some(n) = args.max_epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(p) = args.patience {
        cfg.train.patience = p;
    }
    let bars = load_prices(&cfg.prices_csv)?;
    let catalog = load_sectors(&cfg.sectors_csv)?;
    let grid = SweepGrid {
        weeks: args.weeks.clone(),
        hidden_dims: args.hidden.clone(),
        deltas: args.delta.clone(),
    };
    let rows = sweep(
        &bars,
        &catalog,
        &cfg.model,
        &cfg.resolved_train(),
        &grid,
        &cfg.data,
        cfg.split_ratios,
    )?;
    println!("weeks  hidden  delta    best_epoch  val_MRR@5  val_ACC");
    for r in &rows {
        println!(
            "{:<6} {:<7} {:<8} {:<11} {:<10.4} {:.4}",
            r.weeks, r.hidden_dim, r.delta, r.best_epoch, r.val_mrr5, r.val_acc
        );
    }
    let out = args.out.unwrap_or_else(|| cfg.run_dir.join("sweep.json"));
    write_json(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cases = gradcheck::run_all(args.seed)?;
    let mut failed: Option<&fingat_core::gradcheck::GradCheckCase> = None;
    for c in &cases {
        println!(
            "{:<34} {:>12.3e}  {}",
            c.name,
            c.max_rel_err,
            if c.passed() { "pass" } else { "FAIL" }
        );
        if !c.passed() && failed.is_none() {
            failed = Some(c);
        }
    }
    match failed {
        None => {
            println!("all {} checks pass (tolerance {:.0e})", cases.len(), gradcheck::TOLERANCE);
            Ok(())
        }
        Some(c) => Err(Error::Numeric {
            layer: c.name.clone(),
            details: format!(
                "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
                c.max_rel_err,
                gradcheck::TOLERANCE
            ),
        }),
    }
}
