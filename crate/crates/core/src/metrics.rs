//! Sketches and their scores: hole matching, RegexAcc, token-level ROUGE
//! and the training reward that averages the two.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token used for holes in token files and display output.
pub const HOLE: &str = "■";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("ground truth contains a hole")]
    HoleInGroundTruth,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SketchItem {
    Token(String),
    Hole,
}

impl SketchItem {
    pub fn is_hole(&self) -> bool {
        matches!(self, SketchItem::Hole)
    }
}

/// A completion: terminal tokens interleaved with holes, each hole
/// standing for one or more unknown tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sketch(pub Vec<SketchItem>);

impl Sketch {
    pub fn new(items: Vec<SketchItem>) -> Self {
        Sketch(items)
    }

    /// Reads a token list where [`HOLE`] marks holes.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        Sketch(
            tokens
                .iter()
                .map(|t| match t.as_ref() {
                    HOLE => SketchItem::Hole,
                    s => SketchItem::Token(s.to_string()),
                })
                .collect(),
        )
    }

    pub fn hole_free(tokens: &[String]) -> Self {
        Sketch(tokens.iter().cloned().map(SketchItem::Token).collect())
    }

    pub fn items(&self) -> &[SketchItem] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn holes(&self) -> usize {
        self.0.iter().filter(|i| i.is_hole()).count()
    }

    pub fn to_tokens(&self) -> Vec<String> {
        self.0
            .iter()
            .map(|i| match i {
                SketchItem::Token(t) => t.clone(),
                SketchItem::Hole => HOLE.to_string(),
            })
            .collect()
    }
}

impl fmt::Display for Sketch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, item) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            match item {
                SketchItem::Token(t) => f.write_str(t)?,
                SketchItem::Hole => f.write_str(HOLE)?,
            }
        }
        Ok(())
    }
}

/// Anchored pattern over token sequences: tokens match themselves and each
/// hole matches one or more whole tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMatcher {
    items: Vec<SketchItem>,
}

pub fn to_matcher(s: &Sketch) -> HoleMatcher {
    HoleMatcher {
        items: s.0.clone(),
    }
}

impl HoleMatcher {
    /// Full-match test by dynamic programming over (item, token) prefixes.
    pub fn is_match<S: AsRef<str>>(&self, gt: &[S]) -> bool {
        let m = gt.len();
        // reach[j]: items so far can consume exactly gt[..j].
        let mut reach = vec![false; m + 1];
        reach[0] = true;
        for item in &self.items {
            let mut next = vec![false; m + 1];
            match item {
                SketchItem::Token(t) => {
                    for j in 0..m {
                        next[j + 1] = reach[j] && gt[j].as_ref() == t;
                    }
                }
                SketchItem::Hole => {
                    let mut any = false;
                    for j in 0..m {
                        any |= reach[j];
                        next[j + 1] = any;
                    }
                }
            }
            reach = next;
        }
        reach[m]
    }
}

/// 1 if the matcher accepts `gt`, else 0.
pub fn matches<S: AsRef<str>>(m: &HoleMatcher, gt: &[S]) -> u8 {
    u8::from(m.is_match(gt))
}

pub fn n_tokens(s: &Sketch) -> usize {
    s.0.iter().filter(|i| !i.is_hole()).count()
}

fn check_gt<S: AsRef<str>>(gt: &[S]) -> Result<(), MetricError> {
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    if gt.iter().any(|t| t.as_ref() == HOLE) {
        return Err(MetricError::HoleInGroundTruth);
    }
    Ok(())
}

/// Match indicator times the fraction of ground-truth tokens the sketch
/// states concretely.
pub fn regex_acc<S: AsRef<str>>(pred: &Sketch, gt: &[S]) -> Result<f64, MetricError> {
    check_gt(gt)?;
    if !to_matcher(pred).is_match(gt) {
        return Ok(0.0);
    }
    Ok(n_tokens(pred) as f64 / gt.len() as f64)
}

pub fn erase_holes(s: &Sketch) -> Vec<String> {
    s.0.iter()
        .filter_map(|i| match i {
            SketchItem::Token(t) => Some(t.clone()),
            SketchItem::Hole => None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

fn f1(overlap: usize, n_pred: usize, n_gt: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_pred as f64;
    let r = overlap as f64 / n_gt as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.iter().map(|t| t.as_ref()).collect()).or_default() += 1;
        }
    }
    out
}

fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// Token-level ROUGE F1. Two sequences with no n-grams of the requested
/// order score 1 if equal and 0 otherwise.
pub fn rouge_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gt: &[T], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::RL => {
            if pred.is_empty() || gt.is_empty() {
                return if pred.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
            }
            f1(lcs_len(pred, gt), pred.len(), gt.len())
        }
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let cp = ngram_counts(pred, n);
            let cg = ngram_counts(gt, n);
            let np: usize = cp.values().sum();
            let ng: usize = cg.values().sum();
            if np == 0 || ng == 0 {
                let equal = pred.len() == gt.len()
                    && pred.iter().zip(gt).all(|(a, b)| a.as_ref() == b.as_ref());
                return if np == 0 && ng == 0 && equal { 1.0 } else { 0.0 };
            }
            let overlap: usize = cp
                .iter()
                .map(|(g, c)| (*c).min(cg.get(g).copied().unwrap_or(0)))
                .sum();
            f1(overlap, np, ng)
        }
    }
}

/// The training reward: mean of RegexAcc and ROUGE-L F1 of the hole-erased sketch.
pub fn reward<S: AsRef<str>>(pred: &Sketch, gt: &[S]) -> Result<f64, MetricError> {
    RewardKind::Mixed.score(pred, gt)
}

/// Which score drives policy-gradient training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    #[default]
    Mixed,
    RougeOnly,
    RegexAccOnly,
}

impl RewardKind {
    pub fn score<S: AsRef<str>>(self, pred: &Sketch, gt: &[S]) -> Result<f64, MetricError> {
        let acc = regex_acc(pred, gt)?;
        let rouge = || rouge_f1(&erase_holes(pred), gt, RougeVariant::RL);
        Ok(match self {
            RewardKind::Mixed => 0.5 * (acc + rouge()),
            RewardKind::RougeOnly => rouge(),
            RewardKind::RegexAccOnly => acc,
        })
    }
}
