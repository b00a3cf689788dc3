//! Ablation matrix and loss-weight sweep.
//!
//! Each cell of the matrix is a full pipeline: pre-train with the variant's
//! task weights and fusion mode, fine-tune with its objective, evaluate under
//! its serving mode, and report overall/fashion/not-fashion splits.

use std::collections::BTreeMap;

use crate::data::records::Corpus;
use crate::data::vocab::Vocab;
use crate::encoders::ModelConfig;
use crate::error::{Result, SmarError};
use crate::objectives::LossWeights;
use crate::retrieval::evaluate::{evaluate, EvalOutcome};
use crate::training::checkpoint::Checkpoint;
use crate::training::trainer::{finetune, pretrain, StepLog, TrainConfig, TrainRun};
use crate::variant::Variant;

#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub ks: Vec<usize>,
    pub threads: usize,
}

pub struct RunArtifacts {
    pub variant: Variant,
    pub seed: u64,
    pub pretrained: Checkpoint,
    pub finetuned: Checkpoint,
    pub pretrain_logs: Vec<StepLog>,
    pub finetune_logs: Vec<StepLog>,
    pub outcome: EvalOutcome,
}

fn require_converged(run: &TrainRun, what: &str) -> Result<()> {
    if let Some(d) = run.diverged {
        return Err(SmarError::Diverged {
            step: d.step,
            loss: d.loss,
        }
        .into_context(what));
    }
    Ok(())
}

impl SmarError {
    fn into_context(self, what: &str) -> SmarError {
        match self {
            SmarError::Diverged { step, loss } => {
                SmarError::Data(format!("{what} diverged at step {step} (loss {loss})"))
            }
            other => other,
        }
    }
}

/// Full pipeline for one (variant, seed) cell.
pub fn run_variant(
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &HarnessConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunArtifacts> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.fusion = variant.fusion();

    let mut pre_cfg = cfg.pretrain;
    pre_cfg.weights = variant.weights();
    pre_cfg.seed = seed;
    let pre = pretrain(&model_cfg, &pre_cfg, corpus, vocab)?;
    require_converged(&pre, &format!("{variant} pretrain (seed {seed})"))?;

    let mut fine_cfg = cfg.finetune;
    fine_cfg.seed = seed;
    let fine = finetune(
        &fine_cfg,
        corpus,
        vocab,
        &pre.checkpoint,
        variant.finetune_objective(),
    )?;
    require_converged(&fine, &format!("{variant} finetune (seed {seed})"))?;

    let outcome = evaluate(&fine.checkpoint, corpus, vocab, &cfg.ks, variant, cfg.threads)?;
    Ok(RunArtifacts {
        variant,
        seed,
        pretrained: pre.checkpoint,
        finetuned: fine.checkpoint,
        pretrain_logs: pre.logs,
        finetune_logs: fine.logs,
        outcome,
    })
}

pub const SPLITS: [&str; 3] = ["overall", "fashion", "not-fashion"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub split: String,
    pub seed: u64,
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Per-split macro metrics rows for one evaluated run.
pub fn split_rows(
    outcome: &EvalOutcome,
    corpus: &Corpus,
    variant_name: &str,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let labels = corpus.query_fashion_labels();
    let mut rows = Vec::new();
    for split in SPLITS {
        let report = outcome.subset_report(|q| match split {
            "overall" => true,
            "fashion" => labels.get(&q.query_id).copied().unwrap_or(false),
            _ => !labels.get(&q.query_id).copied().unwrap_or(false),
        })?;
        for &k in &outcome.ks {
            let m = report.per_k[&k];
            rows.push(MetricsRow {
                variant: variant_name.to_string(),
                split: split.to_string(),
                seed,
                k,
                recall: m.recall,
                precision: m.precision,
                f1: m.f1,
            });
        }
    }
    Ok(rows)
}

pub struct AblationOutput {
    pub rows: Vec<MetricsRow>,
    pub artifacts: Vec<RunArtifacts>,
}

/// Trains and evaluates every requested variant for every seed.
pub fn ablation_run(
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &HarnessConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationOutput> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(SmarError::Empty("ablation needs variants and seeds".into()));
    }
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let run = run_variant(corpus, vocab, cfg, variant, seed)?;
            rows.extend(split_rows(&run.outcome, corpus, variant.name(), seed)?);
            artifacts.push(run);
        }
    }
    Ok(AblationOutput { rows, artifacts })
}

/// `variant,split,seed,k,recall,precision,f1` (the pinned metrics format).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,split,seed,k,recall,precision,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.split, r.seed, r.k, r.recall, r.precision, r.f1
        ));
    }
    out
}

/// Wide table at one k: a row per variant, nine metric columns
/// (recall/precision/f1 for each of the three splits), seed-averaged.
pub fn ablation_table_csv(rows: &[MetricsRow], k: usize) -> Result<String> {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = String::from(
        "variant,overall_recall,overall_precision,overall_f1,\
         fashion_recall,fashion_precision,fashion_f1,\
         notfashion_recall,notfashion_precision,notfashion_f1\n",
    );
    for variant in variants {
        let mut cells = Vec::new();
        for split in SPLITS {
            let matched: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.split == split && r.k == k)
                .collect();
            if matched.is_empty() {
                return Err(SmarError::Data(format!(
                    "no rows for variant {variant}, split {split}, k={k}"
                )));
            }
            let n = matched.len() as f64;
            cells.push(matched.iter().map(|r| r.recall).sum::<f64>() / n);
            cells.push(matched.iter().map(|r| r.precision).sum::<f64>() / n);
            cells.push(matched.iter().map(|r| r.f1).sum::<f64>() / n);
        }
        out.push_str(&format!(
            "{variant},{}\n",
            cells
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightParam {
    Alpha,
    Beta,
    Gamma,
}

impl WeightParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(WeightParam::Alpha),
            "beta" => Ok(WeightParam::Beta),
            "gamma" => Ok(WeightParam::Gamma),
            other => Err(SmarError::Config(format!(
                "unknown sweep parameter {other:?} (expected alpha|beta|gamma)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightParam::Alpha => "alpha",
            WeightParam::Beta => "beta",
            WeightParam::Gamma => "gamma",
        }
    }

    /// The swept weight set: the chosen parameter varies, the other two stay
    /// at 1.
    pub fn weights(&self, value: f64) -> LossWeights {
        let mut w = LossWeights::default();
        match self {
            WeightParam::Alpha => w.alpha = value,
            WeightParam::Beta => w.beta = value,
            WeightParam::Gamma => w.gamma = value,
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub split: String,
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Sweeps one loss weight over `values` (others pinned at 1), running the
/// full smar pipeline per (value, seed).
pub fn weight_sweep(
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &HarnessConfig,
    param: WeightParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(SmarError::Empty("sweep needs values and seeds".into()));
    }
    if values.iter().any(|&v| v <= 0.0) {
        return Err(SmarError::Contract(format!(
            "sweep values must be positive, got {values:?}"
        )));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut swept = cfg.clone();
            swept.pretrain.weights = param.weights(value);
            // run_variant overrides weights per variant; inline the pipeline
            // with the swept weights instead.
            let mut model_cfg = swept.model.clone();
            model_cfg.fusion = Variant::Smar.fusion();
            let mut pre_cfg = swept.pretrain;
            pre_cfg.seed = seed;
            let pre = pretrain(&model_cfg, &pre_cfg, corpus, vocab)?;
            require_converged(&pre, &format!("sweep {}={value} pretrain", param.name()))?;
            let mut fine_cfg = swept.finetune;
            fine_cfg.seed = seed;
            let fine = finetune(
                &fine_cfg,
                corpus,
                vocab,
                &pre.checkpoint,
                Variant::Smar.finetune_objective(),
            )?;
            require_converged(&fine, &format!("sweep {}={value} finetune", param.name()))?;
            let outcome = evaluate(
                &fine.checkpoint,
                corpus,
                vocab,
                &cfg.ks,
                Variant::Smar,
                cfg.threads,
            )?;
            for row in split_rows(&outcome, corpus, Variant::Smar.name(), seed)? {
                rows.push(SweepRow {
                    param: param.name().to_string(),
                    value,
                    seed,
                    split: row.split,
                    k: row.k,
                    recall: row.recall,
                    precision: row.precision,
                    f1: row.f1,
                });
            }
        }
    }
    Ok(rows)
}

/// `param,value,seed,split,k,recall,precision,f1`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,seed,split,k,recall,precision,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.param, r.value, r.seed, r.split, r.k, r.recall, r.precision, r.f1
        ));
    }
    out
}

/// Ranked-results run file content: one JSON object per query.
pub fn run_file_jsonl(outcome: &EvalOutcome) -> Result<String> {
    #[derive(serde::Serialize)]
    struct RunLine<'a> {
        query_id: &'a str,
        ranking: Vec<RunEntry<'a>>,
    }
    #[derive(serde::Serialize)]
    struct RunEntry<'a> {
        item_id: &'a str,
        score: f64,
    }
    let mut out = String::new();
    for q in &outcome.per_query {
        let line = RunLine {
            query_id: &q.query_id,
            ranking: q
                .ranking
                .iter()
                .map(|(id, s)| RunEntry {
                    item_id: id,
                    score: *s,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Per-variant-seed artifact dump used by the CLI commands.
pub fn write_run_artifacts(dir: &std::path::Path, run: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SmarError::io(dir.display().to_string(), e))?;
    run.pretrained.save(&dir.join("pretrained.ckpt"))?;
    run.finetuned.save(&dir.join("finetuned.ckpt"))?;
    write_log(&dir.join("pretrain_log.jsonl"), &run.pretrain_logs)?;
    write_log(&dir.join("finetune_log.jsonl"), &run.finetune_logs)?;
    let runs = run_file_jsonl(&run.outcome)?;
    std::fs::write(dir.join("run.jsonl"), runs)
        .map_err(|e| SmarError::io(dir.display().to_string(), e))?;
    Ok(())
}

pub fn write_log(path: &std::path::Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::new();
    for line in logs {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| SmarError::io(path.display().to_string(), e))?;
    Ok(())
}

fn mean(map: &BTreeMap<u64, f64>) -> f64 {
    map.values().sum::<f64>() / map.len() as f64
}

/// Seed-averaged recall at one (variant, split, k) cell.
pub fn seed_mean_recall(
    rows: &[MetricsRow],
    variant: &str,
    split: &str,
    k: usize,
) -> Option<f64> {
    let per_seed: BTreeMap<u64, f64> = rows
        .iter()
        .filter(|r| r.variant == variant && r.split == split && r.k == k)
        .map(|r| (r.seed, r.recall))
        .collect();
    if per_seed.is_empty() {
        None
    } else {
        Some(mean(&per_seed))
    }
}
