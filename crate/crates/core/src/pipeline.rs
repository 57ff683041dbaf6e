//! End-to-end experiment: corpus, training, baselines, evaluation and
//! ablations with all reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::BeamConfig;
use crate::eval::{
    bucket_report, evaluate, run_ablations, split_hash, AblationConfig, AblationTable,
    BeamCompleter, MetricsReport, SequenceCompleter, DEFAULT_BUCKET_EDGES,
};
use crate::grammar::{flatten, Grammar};
use crate::models::{ModelBundle, SequenceModel, SequenceVariant, Smoothing};
use crate::syntax::{gen_corpus, minilang, minilang_weights, Corpus, CorpusConfig, CorpusRecord, Example, Lexer};
use crate::training::{
    finetune_bundle, format_train_log, pretrain, synth_hole_dataset, train_baseline,
    validation_reward, BaselineConfig, EpochLog, FinetuneMode, PretrainConfig, RlConfig,
};
use crate::{par_map, Result};

/// Parses each record's target under `g` rooted at `root`.
pub fn parse_examples(records: &[CorpusRecord], g: &Grammar, root: &str) -> Result<Vec<Example>> {
    let lexer = Lexer::new(g);
    par_map(records, |_, r| Example::from_record(r, &lexer, g, root).map_err(Into::into))
        .into_iter()
        .collect()
}

/// Every knob of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub seed: u64,
    pub smoothing: Smoothing,
    pub learning_rate: f64,
    pub expansion_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub batches_per_epoch: Option<usize>,
    pub valid_limit: Option<usize>,
    pub beam_k: usize,
    pub beam_n: usize,
    pub max_steps: usize,
    pub p_hole: f64,
    pub taus: Vec<f64>,
    pub bucket_edges: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig {
                num_files: 6100,
                ..CorpusConfig::default()
            },
            seed: 1,
            smoothing: Smoothing::default(),
            learning_rate: 0.5,
            expansion_rate: 0.2,
            batch_size: 64,
            pretrain_epochs: 2,
            finetune_epochs: 20,
            patience: 5,
            batches_per_epoch: None,
            valid_limit: Some(400),
            beam_k: 5,
            beam_n: 1,
            max_steps: crate::engine::DEFAULT_MAX_STEPS,
            p_hole: 0.15,
            taus: AblationConfig::default().taus,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn rl(&self, epochs: usize) -> RlConfig {
        RlConfig {
            learning_rate: self.learning_rate,
            expansion_rate: self.expansion_rate,
            batch_size: self.batch_size,
            max_epochs: epochs,
            patience: self.patience,
            batches_per_epoch: self.batches_per_epoch,
            valid_limit: self.valid_limit,
            max_steps: self.max_steps,
            seed: self.seed,
            ..RlConfig::default()
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            k: self.beam_k,
            n: self.beam_n,
            m: usize::MAX,
            max_steps: self.max_steps,
        }
    }
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub corpus: Corpus,
    pub pretrained: ModelBundle,
    pub finetuned: ModelBundle,
    pub baselines: Vec<SequenceModel>,
    pub pretrain_log: Vec<EpochLog>,
    pub finetune_log: Vec<EpochLog>,
    pub pretrained_valid_reward: f64,
    pub finetuned_valid_reward: f64,
    pub metrics: MetricsReport,
    pub buckets: String,
    pub ablations: AblationTable,
}

pub const GRAMMFORMER: &str = "grammformer";
pub const PRETRAINED: &str = "grammformer_pretrained";

/// Generates the MiniLang corpus, trains and evaluates every model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let raw = minilang();
    let corpus = gen_corpus(&cfg.corpus, &raw, &minilang_weights(&raw))?;
    log::info!(
        "corpus: {} train, {} valid, {} test",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    run_on_corpus(cfg, &raw, corpus)
}

/// Trains and evaluates every model on an existing corpus.
pub fn run_on_corpus(cfg: &ExperimentConfig, raw: &Grammar, corpus: Corpus) -> Result<ExperimentOutput> {
    let g = flatten(raw)?;
    let root = raw.start().to_string();
    let train_ex = parse_examples(&corpus.train, &g, &root)?;
    let pcfg = PretrainConfig {
        root: root.clone(),
        context_len: cfg.corpus.context_len,
        smoothing: cfg.smoothing,
        seed: cfg.seed,
        selector: cfg.rl(cfg.pretrain_epochs),
    };
    let (pretrained, pretrain_log) = pretrain(&train_ex, &corpus.valid, &pcfg)?;
    log::info!("pretrained: validation reward {:?}", pretrained.snapshot.reward);

    let ft = cfg.rl(cfg.finetune_epochs);
    let (finetuned, finetune_log) =
        finetune_bundle(pretrained.clone(), &corpus.train, &corpus.valid, FinetuneMode::Full, &ft)?;
    let pretrained_valid_reward = validation_reward(&pretrained, &corpus.valid, &ft)?.0;
    let finetuned_valid_reward = validation_reward(&finetuned, &corpus.valid, &ft)?.0;
    log::info!("fine-tuned: validation reward {finetuned_valid_reward:.4}");

    let holes = synth_hole_dataset(&train_ex, cfg.p_hole, cfg.seed);
    let bcfg = BaselineConfig {
        rl: cfg.rl(cfg.finetune_epochs),
        ..BaselineConfig::default()
    };
    let mut baselines = Vec::new();
    for v in [SequenceVariant::Plain, SequenceVariant::Stop, SequenceVariant::Hole] {
        let (m, _) = train_baseline(v, &corpus.train, Some(&holes), &corpus.valid, &bcfg)?;
        log::info!("baseline {} trained", v.name());
        baselines.push(m);
    }

    let beam = cfg.beam();
    let mut models = vec![
        evaluate(GRAMMFORMER, &BeamCompleter::new(&finetuned, beam), &corpus.test)?,
        evaluate(PRETRAINED, &BeamCompleter::new(&pretrained, beam), &corpus.test)?,
    ];
    for m in &baselines {
        let c = SequenceCompleter {
            model: m,
            k: beam.k,
            max_len: cfg.max_steps,
        };
        models.push(evaluate(m.variant().name(), &c, &corpus.test)?);
    }
    let metrics = MetricsReport {
        split_hash: split_hash(&corpus.test),
        models,
    };
    let buckets = bucket_report(&metrics, &cfg.bucket_edges)?;
    log::info!("test set evaluated");

    let acfg = AblationConfig {
        beam,
        taus: cfg.taus.clone(),
        rl: ft,
        mode: FinetuneMode::Full,
    };
    let ablations = run_ablations(&pretrained, &finetuned, &corpus.train, &corpus.valid, &corpus.test, &acfg)?;
    Ok(ExperimentOutput {
        corpus,
        pretrained,
        finetuned,
        baselines,
        pretrain_log,
        finetune_log,
        pretrained_valid_reward,
        finetuned_valid_reward,
        metrics,
        buckets,
        ablations,
    })
}

impl ExperimentOutput {
    /// Writes the CSV reports, training logs and the fine-tuned model.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        std::fs::write(dir.join("buckets.csv"), &self.buckets)?;
        std::fs::write(dir.join("ablations.csv"), self.ablations.to_csv())?;
        std::fs::write(dir.join("pretrain_log.csv"), format_train_log(&self.pretrain_log))?;
        std::fs::write(dir.join("finetune_log.csv"), format_train_log(&self.finetune_log))?;
        crate::models::save_model(&self.finetuned, &dir.join("model.json"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_run_is_deterministic() {
        let cfg = ExperimentConfig {
            corpus: CorpusConfig {
                num_files: 30,
                ..CorpusConfig::default()
            },
            pretrain_epochs: 1,
            finetune_epochs: 1,
            batches_per_epoch: Some(2),
            batch_size: 8,
            valid_limit: Some(20),
            taus: vec![-2.0, -8.0],
            ..ExperimentConfig::default()
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(a.ablations.to_csv(), b.ablations.to_csv());
        assert_eq!(a.metrics.models.len(), 5);
        for m in &a.metrics.models {
            assert!(m.regex_acc_top5() >= m.regex_acc_top1());
        }
    }
}
