//! Test-set scoring, length-bucketed reports and ablations.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::engine::{beam_search, BeamConfig, NoStop, Selector, ThresholdSelector, UniformSelector};
use crate::metrics::{
    erase_holes, matches, n_tokens, regex_acc, rouge_f1, to_matcher, RewardKind, RougeVariant, Sketch,
};
use crate::models::{ModelBundle, SequenceModel};
use crate::syntax::CorpusRecord;
use crate::training::{finetune_bundle, FinetuneMode, RlConfig};
use crate::{par_map, Error, Result};

/// Produces ranked candidate sketches for a context.
pub trait Completer: Sync {
    fn complete(&self, context: &[String]) -> Result<Vec<(Sketch, f64)>>;
}

/// Beam search with a bundle's expansion model and any selector.
pub struct BeamCompleter<'a, S: ?Sized> {
    pub bundle: &'a ModelBundle,
    pub selector: &'a S,
    pub beam: BeamConfig,
}

impl<S: Selector + ?Sized> Completer for BeamCompleter<'_, S> {
    fn complete(&self, context: &[String]) -> Result<Vec<(Sketch, f64)>> {
        let x0 = self.bundle.root_state(context);
        beam_search(self.selector, &self.bundle.expansion, x0, self.beam)
    }
}

impl<'a> BeamCompleter<'a, crate::models::SelectorModel> {
    pub fn new(bundle: &'a ModelBundle, beam: BeamConfig) -> Self {
        BeamCompleter {
            bundle,
            selector: &bundle.selector,
            beam,
        }
    }
}

/// Beam search over a left-to-right baseline.
pub struct SequenceCompleter<'a> {
    pub model: &'a SequenceModel,
    pub k: usize,
    pub max_len: usize,
}

impl Completer for SequenceCompleter<'_> {
    fn complete(&self, context: &[String]) -> Result<Vec<(Sketch, f64)>> {
        Ok(self.model.beam(context, self.k, self.max_len))
    }
}

/// Scores of one test example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    pub gt_len: usize,
    pub top1: f64,
    pub top5: f64,
    pub rouge: f64,
    pub length: usize,
    pub matched: bool,
}

/// Per-example scores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelReport {
    pub model: String,
    pub examples: Vec<ExampleScore>,
}

impl ModelReport {
    fn mean(&self, f: impl Fn(&ExampleScore) -> f64) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().map(f).sum::<f64>() / self.examples.len() as f64
    }

    pub fn regex_acc_top1(&self) -> f64 {
        self.mean(|e| e.top1)
    }

    pub fn regex_acc_top5(&self) -> f64 {
        self.mean(|e| e.top5)
    }

    pub fn rouge_f1(&self) -> f64 {
        self.mean(|e| e.rouge)
    }

    pub fn avg_sketch_length(&self) -> f64 {
        self.mean(|e| e.length as f64)
    }
}

/// Scores of several models on one test split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split_hash: String,
    pub models: Vec<ModelReport>,
}

pub const METRICS_HEADER: &str = "model,regex_acc_top1,regex_acc_top5,rouge_f1,avg_sketch_length,n";
pub const BUCKETS_HEADER: &str = "bucket,model,mean_len,pct_match,n";
pub const ABLATIONS_HEADER: &str = "variant,regex_acc_top1,regex_acc_top5,rouge_f1,avg_sketch_length,n";

/// Hex SHA-256 of the records' token arrays.
pub fn split_hash(test: &[CorpusRecord]) -> String {
    let mut h = Sha256::new();
    for r in test {
        for part in [&r.context, &r.target] {
            for t in part {
                h.update(t.as_bytes());
                h.update([0]);
            }
            h.update([1]);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores a completer on `test`: top-1 and best-of-top-5 RegexAcc, ROUGE-L
/// of the hole-erased top-1, and top-1 length.
pub fn evaluate(name: &str, model: &dyn Completer, test: &[CorpusRecord]) -> Result<ModelReport> {
    let scored = par_map(test, |_, r| -> Result<ExampleScore> {
        let cands = model.complete(&r.context)?;
        let empty = Sketch::new(Vec::new());
        let top = cands.first().map_or(&empty, |c| &c.0);
        let top1 = regex_acc(top, &r.target)?;
        let mut top5 = top1;
        for (s, _) in cands.iter().take(5) {
            top5 = top5.max(regex_acc(s, &r.target)?);
        }
        Ok(ExampleScore {
            gt_len: r.target.len(),
            top1,
            top5,
            rouge: rouge_f1(&erase_holes(top), &r.target, RougeVariant::RL),
            length: n_tokens(top),
            matched: matches(&to_matcher(top), &r.target) == 1,
        })
    });
    Ok(ModelReport {
        model: name.to_string(),
        examples: scored.into_iter().collect::<Result<_>>()?,
    })
}

fn table(header: &str, hash: &str, rows: &[ModelReport]) -> String {
    let mut out = format!("# split_sha256={hash}\n{header}\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.4},{}",
            m.model,
            m.regex_acc_top1(),
            m.regex_acc_top5(),
            m.rouge_f1(),
            m.avg_sketch_length(),
            m.examples.len()
        );
    }
    out
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        table(METRICS_HEADER, &self.split_hash, &self.models)
    }

    pub fn get(&self, model: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == model)
    }

    /// Fixed-width summary for terminals.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<28} {:>8} {:>8} {:>8} {:>8}\n",
            "model", "acc@1", "acc@5", "rouge", "length"
        );
        for m in &self.models {
            let _ = writeln!(
                out,
                "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>8.2}",
                m.model,
                m.regex_acc_top1(),
                m.regex_acc_top5(),
                m.rouge_f1(),
                m.avg_sketch_length()
            );
        }
        out
    }
}

/// Default ground-truth length edges for bucketed reports.
pub const DEFAULT_BUCKET_EDGES: [usize; 5] = [4, 8, 12, 16, 24];

/// Per-bucket mean top-1 length and percentage of matching top-1 sketches.
/// `edges` are ascending lower bounds of all but the first bucket.
pub fn bucket_report(report: &MetricsReport, edges: &[usize]) -> Result<String> {
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
        return Err(Error::Config("bucket edges must be positive and increasing".into()));
    }
    let bounds: Vec<(usize, Option<usize>)> = std::iter::once(0)
        .chain(edges.iter().copied())
        .zip(edges.iter().copied().map(Some).chain([None]))
        .collect();
    let mut out = format!("# split_sha256={}\n{BUCKETS_HEADER}\n", report.split_hash);
    for &(lo, hi) in &bounds {
        let label = match hi {
            Some(h) => format!("{lo}-{}", h - 1),
            None => format!("{lo}+"),
        };
        for m in &report.models {
            let inside: Vec<&ExampleScore> = m
                .examples
                .iter()
                .filter(|e| e.gt_len >= lo && hi.map_or(true, |h| e.gt_len < h))
                .collect();
            let n = inside.len();
            let (len, pct) = if n == 0 {
                (0.0, 0.0)
            } else {
                (
                    inside.iter().map(|e| e.length as f64).sum::<f64>() / n as f64,
                    100.0 * inside.iter().filter(|e| e.matched).count() as f64 / n as f64,
                )
            };
            let _ = writeln!(out, "{label},{},{len:.4},{pct:.4},{n}", m.model);
        }
    }
    Ok(out)
}

/// Settings for the ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub beam: BeamConfig,
    pub taus: Vec<f64>,
    pub rl: RlConfig,
    pub mode: FinetuneMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            beam: BeamConfig::default(),
            taus: vec![-0.5, -1.0, -2.0, -3.0, -4.0, -6.0, -8.0, -12.0, -16.0],
            rl: RlConfig::default(),
            mode: FinetuneMode::Full,
        }
    }
}

/// Ablation rows plus the threshold chosen on validation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub split_hash: String,
    pub tau: f64,
    pub rows: Vec<ModelReport>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = table(ABLATIONS_HEADER, &self.split_hash, &self.rows);
        out.insert_str(out.find('\n').map_or(0, |i| i), &format!(" tau={}", self.tau));
        out
    }

    pub fn get(&self, variant: &str) -> Option<&ModelReport> {
        self.rows.iter().find(|m| m.model == variant)
    }
}

fn mean_reward(c: &dyn Completer, recs: &[CorpusRecord]) -> Result<f64> {
    let r = evaluate("", c, recs)?;
    Ok(r.mean(|e| 0.5 * (e.top1 + e.rouge)))
}

/// Picks the threshold with the best mean validation reward of the top-1
/// sketch; ties go to the earlier entry of `taus`.
pub fn choose_tau(bundle: &ModelBundle, valid: &[CorpusRecord], taus: &[f64], beam: BeamConfig) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &tau in taus {
        let sel = ThresholdSelector { tau };
        let r = mean_reward(
            &BeamCompleter {
                bundle,
                selector: &sel,
                beam,
            },
            valid,
        )?;
        if best.map_or(true, |(_, b)| r > b) {
            best = Some((tau, r));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::Config("no thresholds to search".into()))
}

/// Table-3 style variants: uniform expansion without stop, uniform
/// expansion stopped at a validated threshold, single-score rewards, and
/// the trained selector with stop disabled. `pretrained` seeds the reward
/// variants; `trained` is the full model.
pub fn run_ablations(
    pretrained: &ModelBundle,
    trained: &ModelBundle,
    train: &[CorpusRecord],
    valid: &[CorpusRecord],
    test: &[CorpusRecord],
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    let beam = cfg.beam;
    let valid_subset = &valid[..cfg.rl.valid_limit.map_or(valid.len(), |n| n.min(valid.len()))];
    let tau = choose_tau(pretrained, valid_subset, &cfg.taus, beam)?;
    log::info!("threshold {tau} chosen on validation");
    let mut rows = Vec::new();
    rows.push(evaluate("grammformer", &BeamCompleter::new(trained, beam), test)?);
    let uniform = UniformSelector { allow_stop: false };
    rows.push(evaluate(
        "random_expansion_no_stop",
        &BeamCompleter {
            bundle: pretrained,
            selector: &uniform,
            beam,
        },
        test,
    )?);
    let threshold = ThresholdSelector { tau };
    rows.push(evaluate(
        "stop_at_fixed_threshold",
        &BeamCompleter {
            bundle: pretrained,
            selector: &threshold,
            beam,
        },
        test,
    )?);
    for (name, reward) in [
        ("reward_rouge_f1", RewardKind::RougeOnly),
        ("reward_regex_acc", RewardKind::RegexAccOnly),
    ] {
        let rl = RlConfig {
            reward,
            ..cfg.rl.clone()
        };
        let (b, _) = finetune_bundle(pretrained.clone(), train, valid, cfg.mode, &rl)?;
        rows.push(evaluate(name, &BeamCompleter::new(&b, beam), test)?);
    }
    let no_stop = NoStop(&trained.selector);
    rows.push(evaluate(
        "no_stop",
        &BeamCompleter {
            bundle: trained,
            selector: &no_stop,
            beam,
        },
        test,
    )?);
    Ok(AblationTable {
        split_hash: split_hash(test),
        tau,
        rows,
    })
}
