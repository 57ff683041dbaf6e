//! Browser bindings: score a sketch, train a small model on a generated
//! corpus, then complete and trace contexts with it.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sketchgen::engine::{format_trace, BeamConfig};
use sketchgen::grammar::flatten;
use sketchgen::metrics::{erase_holes, regex_acc, reward, rouge_f1, RougeVariant, Sketch, HOLE};
use sketchgen::models::ModelBundle;
use sketchgen::pipeline::parse_examples;
use sketchgen::syntax::{gen_corpus, minilang, minilang_weights, CorpusConfig, Lexer};
use sketchgen::training::{pretrain, PretrainConfig, RlConfig};
use sketchgen::Result;

/// Typed stand-in for the hole marker.
pub const HOLE_ALIAS: &str = "??";

#[derive(Debug, PartialEq, Serialize)]
pub struct Scores {
    pub regex_acc: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub reward: f64,
}

fn sketch_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|t| if t == HOLE_ALIAS { HOLE } else { t })
        .collect()
}

/// Scores a whitespace-separated sketch against a ground truth.
pub fn score_texts(sketch: &str, truth: &str) -> Result<Scores> {
    let pred = Sketch::from_tokens(&sketch_tokens(sketch));
    let gt: Vec<&str> = truth.split_whitespace().collect();
    let erased = erase_holes(&pred);
    Ok(Scores {
        regex_acc: regex_acc(&pred, &gt)?,
        rouge1: rouge_f1(&erased, &gt, RougeVariant::R1),
        rouge2: rouge_f1(&erased, &gt, RougeVariant::R2),
        rouge_l: rouge_f1(&erased, &gt, RougeVariant::RL),
        reward: reward(&pred, &gt)?,
    })
}

#[derive(Debug, Serialize)]
pub struct Completion {
    pub sketch: String,
    pub score: f64,
}

/// A MiniLang model trained in memory.
#[wasm_bindgen]
pub struct Demo {
    bundle: ModelBundle,
    lexer: Lexer,
    examples: usize,
}

impl Demo {
    pub fn train(files: usize, seed: u64) -> Result<Demo> {
        let raw = minilang();
        let flat = flatten(&raw)?;
        let corpus = gen_corpus(
            &CorpusConfig {
                num_files: files.max(10),
                seed,
                ..CorpusConfig::default()
            },
            &raw,
            &minilang_weights(&raw),
        )?;
        let examples = parse_examples(&corpus.train, &flat, raw.start())?;
        let cfg = PretrainConfig {
            root: raw.start().to_string(),
            context_len: CorpusConfig::default().context_len,
            smoothing: Default::default(),
            seed,
            selector: RlConfig {
                learning_rate: 0.5,
                batch_size: 16,
                max_epochs: 2,
                batches_per_epoch: Some(20),
                valid_limit: Some(50),
                seed,
                ..RlConfig::default()
            },
        };
        let (bundle, _) = pretrain(&examples, &corpus.valid, &cfg)?;
        Ok(Demo {
            bundle,
            lexer: Lexer::new(&flat),
            examples: examples.len(),
        })
    }

    fn context(&self, code: &str) -> Result<Vec<String>> {
        Ok(self.lexer.tokenize(code)?.into_iter().map(|t| t.text).collect())
    }

    pub fn completions(&self, code: &str, k: usize) -> Result<Vec<Completion>> {
        let beam = BeamConfig {
            k: k.max(1),
            n: 3,
            ..BeamConfig::default()
        };
        Ok(self
            .bundle
            .beam(&self.context(code)?, beam)?
            .into_iter()
            .map(|(s, score)| Completion {
                sketch: s.to_string(),
                score,
            })
            .collect())
    }

    pub fn trace_text(&self, code: &str) -> Result<String> {
        let (_, trace) = self.bundle.greedy(&self.context(code)?, BeamConfig::default().max_steps)?;
        Ok(format_trace(&trace))
    }
}

fn js_err(e: sketchgen::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Generates `files` synthetic files and trains on them.
    #[wasm_bindgen(constructor)]
    pub fn new(files: usize, seed: u64) -> Result<Demo, JsError> {
        Demo::train(files, seed).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn examples(&self) -> usize {
        self.examples
    }

    /// Top-k sketches as a JSON array of `{sketch, score}`.
    pub fn complete(&self, code: &str, k: usize) -> Result<String, JsError> {
        let c = self.completions(code, k).map_err(js_err)?;
        serde_json::to_string(&c).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Greedy generation, one state per line.
    pub fn trace(&self, code: &str) -> Result<String, JsError> {
        self.trace_text(code).map_err(js_err)
    }
}

/// Scores as JSON `{regex_acc, rouge1, rouge2, rouge_l, reward}`.
#[wasm_bindgen]
pub fn score(sketch: &str, truth: &str) -> Result<String, JsError> {
    let s = score_texts(sketch, truth).map_err(js_err)?;
    serde_json::to_string(&s).map_err(|e| JsError::new(&e.to_string()))
}
