//! The `smar` command-line surface.
//!
//! Commands: `gen-data`, `pretrain`, `finetune`, `eval`, `ablate`, `sweep`.
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
//! divergence. Outputs land under `--out`; existing non-empty output
//! directories are refused without `--force`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, FileConfig, Overrides, Resolved};
use crate::data::records::Corpus;
use crate::data::vocab::{build_vocab, Vocab};
use crate::data::{gen_desk_corpus, gen_synthetic_queries, CorpusSpec};
use crate::error::{Result, SmarError};
use crate::retrieval::harness::{
    ablation_run, ablation_table_csv, metrics_csv, split_rows, sweep_csv, weight_sweep,
    write_log, write_run_artifacts, HarnessConfig, WeightParam,
};
use crate::retrieval::evaluate::evaluate;
use crate::training::checkpoint::Checkpoint;
use crate::training::trainer::{finetune, pretrain, TrainRun};
use crate::variant::Variant;

#[derive(Parser)]
#[command(
    name = "smar",
    version,
    about = "Modality-asymmetric dense retrieval: corpus generation, training, and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic multimodal corpus (items, queries, clicks, qrels)
    GenData(GenDataArgs),
    /// Pre-train the four towers with the weighted contrastive objective
    Pretrain(TrainArgs),
    /// Fine-tune a pre-trained checkpoint on click pairs
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint: R@k / P@k / F1@k over the corpus qrels
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants
    Ablate(AblateArgs),
    /// Sweep one loss weight over a value grid
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct CommonOpts {
    /// JSON config file; flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Settings preset: desk | paper
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text-task loss weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Image-task loss weight
    #[arg(long)]
    pub beta: Option<f64>,
    /// Multimodal-task loss weight
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Model variant: dpsr | dpsr-i | smar-ni | smar-nt | smar-nm | smar-nc | smar
    #[arg(long)]
    pub variant: Option<String>,
    /// Evaluation cutoffs, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Scorer/index parallelism (training itself is single-threaded)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

impl CommonOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset.clone(),
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            finetune_epochs: self.finetune_epochs,
            seed: self.seed,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            variant: self.variant.clone(),
            ks: self.k.clone(),
            threads: self.threads,
        }
    }

    fn resolve_for(&self, corpus: &Corpus) -> Result<(Resolved, Vocab)> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let min_freq = file.min_freq.unwrap_or(1);
        let vocab = build_vocab(corpus.vocab_texts(), min_freq)?;
        let d_img = corpus
            .items
            .first()
            .and_then(|i| i.image_features.first())
            .map(|r| r.len())
            .ok_or_else(|| SmarError::Data("corpus has no items with image features".into()))?;
        let resolved = resolve(&file, &self.overrides(), vocab.size(), d_img)?;
        Ok((resolved, vocab))
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Catalog size
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    /// Evaluation query count
    #[arg(long, default_value_t = 500)]
    pub queries: usize,
    /// Training query count (default: 2x eval queries)
    #[arg(long)]
    pub train_queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of queries carrying a color word
    #[arg(long, default_value_t = 0.5)]
    pub color_fraction: f64,
    /// Share of fashion items with a latent image color
    #[arg(long, default_value_t = 1.0)]
    pub color_item_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub d_img: usize,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    /// Color-block magnitude in image features
    #[arg(long, default_value_t = 1.0)]
    pub color_signal: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    /// Synthetic pairs per true pair
    #[arg(long, default_value_t = 5.0)]
    pub synthetic_factor: f64,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub force: bool,
}

fn ensure_out(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = path
            .read_dir()
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return Err(SmarError::Config(format!(
                "output directory {} exists and is not empty; pass --force to overwrite",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path).map_err(|e| SmarError::io(path.display().to_string(), e))?;
    Ok(())
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| SmarError::io(path.display().to_string(), e))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    ensure_out(&args.out, args.force)?;
    let spec = CorpusSpec {
        n_items: args.items,
        n_train_queries: args.train_queries.unwrap_or(args.queries * 2),
        n_eval_queries: args.queries,
        color_query_fraction: args.color_fraction,
        color_item_fraction: args.color_item_fraction,
        d_img: args.d_img,
        n_regions: args.regions,
        signal: args.signal,
        color_signal: args.color_signal,
        noise_std: args.noise_std,
    };
    let mut corpus = gen_desk_corpus(&spec, args.seed)?;
    let n_true_pairs = corpus.pretrain_pairs().len();
    let synth = gen_synthetic_queries(
        &corpus.items,
        n_true_pairs,
        args.synthetic_factor,
        args.seed ^ 0x53594e51,
    )?;
    let n_synth = synth.queries.len();
    corpus.queries.extend(synth.queries);
    corpus.pairs.extend(synth.pairs);
    if let Some(meta) = corpus.meta.as_mut() {
        meta.n_synthetic_queries = n_synth;
        meta.single_token_titles_skipped = synth.skipped_single_token_items;
    }
    corpus.validate()?;
    corpus.save(&args.out)?;

    let vocab = build_vocab(corpus.vocab_texts(), args.min_freq)?;
    vocab.save(&args.out.join("vocab.json"))?;

    let meta = corpus.meta.as_ref().expect("generated corpus has meta");
    println!("corpus written to {}", args.out.display());
    println!(
        "  items: {} ({} with latent image color)",
        corpus.items.len(),
        meta.n_colored_items
    );
    println!(
        "  queries: {} train + {} eval + {} synthetic",
        spec.n_train_queries, spec.n_eval_queries, n_synth
    );
    println!("  pairs: {} (train split)", corpus.pretrain_pairs().len());
    println!("  qrels: {}", corpus.qrels.len());
    println!(
        "  color-dependent queries: {} train, {} eval{}",
        meta.n_color_queries_train,
        meta.n_color_queries_eval,
        if args.color_fraction == 0.0 {
            " (control corpus: text determines relevance)"
        } else {
            ""
        }
    );
    println!("  vocab: {} tokens, hash {}", vocab.size(), vocab.hash());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory produced by gen-data
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonOpts,
}

fn handle_divergence(run: &TrainRun, ckpt_path: &Path) -> Result<()> {
    if let Some(d) = run.diverged {
        eprintln!(
            "training diverged at step {} (loss {}); last good checkpoint kept at {}",
            d.step,
            d.loss,
            ckpt_path.display()
        );
        return Err(SmarError::Diverged {
            step: d.step,
            loss: d.loss,
        });
    }
    Ok(())
}

pub fn cmd_pretrain(args: &TrainArgs) -> Result<()> {
    ensure_out(&args.out, args.common.force)?;
    let corpus = Corpus::load(&args.corpus)?;
    let (cfg, vocab) = args.common.resolve_for(&corpus)?;
    let run = pretrain(&cfg.model, &cfg.pretrain, &corpus, &vocab)?;
    let ckpt_path = args.out.join("pretrained.ckpt");
    run.checkpoint.save(&ckpt_path)?;
    write_log(&args.out.join("train_log.jsonl"), &run.logs)?;
    handle_divergence(&run, &ckpt_path)?;
    let last = run.logs.last().map(|l| l.l_total).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps (final loss {last:.4}) -> {}",
        run.checkpoint.manifest.step,
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pre-trained checkpoint to start from
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    ensure_out(&args.out, args.common.force)?;
    let corpus = Corpus::load(&args.corpus)?;
    let (cfg, vocab) = args.common.resolve_for(&corpus)?;
    let init = Checkpoint::load(&args.ckpt)?;
    init.ensure_model_config(&cfg.model)?;
    let mut fine_cfg = cfg.finetune;
    fine_cfg.seed = cfg.pretrain.seed;
    let run = finetune(
        &fine_cfg,
        &corpus,
        &vocab,
        &init,
        cfg.variant.finetune_objective(),
    )?;
    let ckpt_path = args.out.join("finetuned.ckpt");
    run.checkpoint.save(&ckpt_path)?;
    write_log(&args.out.join("train_log.jsonl"), &run.logs)?;
    handle_divergence(&run, &ckpt_path)?;
    let acc = run.logs.iter().rev().find_map(|l| l.header_acc);
    println!(
        "finetuned {} steps{} -> {}",
        run.checkpoint.manifest.step,
        acc.map(|a| format!(" (last header acc {a:.3})")).unwrap_or_default(),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    ensure_out(&args.out, args.common.force)?;
    let corpus = Corpus::load(&args.corpus)?;
    let (cfg, vocab) = args.common.resolve_for(&corpus)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let outcome = evaluate(&ckpt, &corpus, &vocab, &cfg.ks, cfg.variant, cfg.threads)?;
    let rows = split_rows(&outcome, &corpus, cfg.variant.name(), ckpt.manifest.seed)?;

    write_text(&args.out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_text(
        &args.out.join("run.jsonl"),
        &crate::retrieval::harness::run_file_jsonl(&outcome)?,
    )?;
    let report = outcome.report()?;
    write_text(
        &args.out.join("report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;

    println!(
        "evaluated {} queries with variant {} (stage {})",
        outcome.per_query.len(),
        cfg.variant,
        ckpt.manifest.stage
    );
    for (mode, count) in outcome.routed_counts() {
        println!("  routed {count} -> {mode} index");
    }
    for row in &rows {
        println!(
            "  {:<12} k={:<3} R={:.4} P={:.4} F1={:.4}",
            row.split, row.k, row.recall, row.precision, row.f1
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant names (default: all seven)
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    ensure_out(&args.out, args.common.force)?;
    let corpus = Corpus::load(&args.corpus)?;
    let (cfg, vocab) = args.common.resolve_for(&corpus)?;
    let variants: Vec<Variant> = match &args.variants {
        Some(names) => names
            .iter()
            .map(|n| Variant::parse(n))
            .collect::<Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let harness = HarnessConfig {
        model: cfg.model.clone(),
        pretrain: cfg.pretrain,
        finetune: cfg.finetune,
        ks: cfg.ks.clone(),
        threads: cfg.threads,
    };
    let output = ablation_run(&corpus, &vocab, &harness, &variants, &args.seeds)?;
    write_text(&args.out.join("metrics.csv"), &metrics_csv(&output.rows))?;
    let table_k = *cfg.ks.iter().max().expect("validated ks");
    write_text(
        &args.out.join("ablation_table.csv"),
        &ablation_table_csv(&output.rows, table_k)?,
    )?;
    for run in &output.artifacts {
        write_run_artifacts(
            &args.out.join(format!("{}-seed{}", run.variant, run.seed)),
            run,
        )?;
    }
    println!(
        "ablation complete: {} variants x {} seeds -> {}",
        variants.len(),
        args.seeds.len(),
        args.out.display()
    );
    print!("{}", ablation_table_csv(&output.rows, table_k)?);
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which loss weight to vary: alpha | beta | gamma
    #[arg(long)]
    pub param: String,
    /// Comma-separated weight values
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    ensure_out(&args.out, args.common.force)?;
    let corpus = Corpus::load(&args.corpus)?;
    let (cfg, vocab) = args.common.resolve_for(&corpus)?;
    let param = WeightParam::parse(&args.param)?;
    let harness = HarnessConfig {
        model: cfg.model.clone(),
        pretrain: cfg.pretrain,
        finetune: cfg.finetune,
        ks: cfg.ks.clone(),
        threads: cfg.threads,
    };
    let rows = weight_sweep(&corpus, &vocab, &harness, param, &args.values, &args.seeds)?;
    write_text(&args.out.join("sweep.csv"), &sweep_csv(&rows))?;
    println!(
        "sweep over {} = {:?} x seeds {:?}: {} rows -> {}",
        param.name(),
        args.values,
        args.seeds,
        rows.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Finetune(args) => cmd_finetune(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Sweep(args) => cmd_sweep(args),
    }
}

/// 1 usage/config, 2 data, 3 divergence.
pub fn exit_code(err: &SmarError) -> i32 {
    match err {
        SmarError::Config(_) | SmarError::UnknownVariant(_) => 1,
        SmarError::Diverged { .. } => 3,
        _ => 2,
    }
}
