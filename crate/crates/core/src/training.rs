//! Pretraining data, count pretraining and self-critical fine-tuning.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{generate_with, Decode};
use crate::grammar::Symbol;
use crate::metrics::{n_tokens, RewardKind, Sketch, SketchItem};
use crate::models::{
    train_expansion_counts, window_at, Choice, Expansion, ExpansionRecord, Item, ModelBundle,
    ModelMeta, SelectorModel, SequenceModel, SequenceVariant, SketchState, Smoothing,
    SnapshotInfo, Window,
};
use crate::syntax::{CorpusRecord, Example, ParseTree};
use crate::{par_map, stream_rng, Error, Result};

/// A pending nonterminal and its ground-truth expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct Pending {
    pub position: usize,
    pub expansion: Vec<Item>,
    pub leaf: bool,
}

/// One state of a ground-truth derivation, every pending expansion, and
/// which one was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthStep {
    pub state: SketchState,
    pub pending: Vec<Pending>,
    pub chosen: usize,
}

/// The derivation of one target in a uniformly random expansion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionTrace {
    pub steps: Vec<GroundTruthStep>,
    pub final_state: SketchState,
}

impl ExpansionTrace {
    /// Terminal tokens of the fully expanded state.
    pub fn replay(&self) -> Vec<String> {
        let mut x = self.steps.first().map_or(self.final_state.clone(), |s| s.state.clone());
        for s in &self.steps {
            let p = &s.pending[s.chosen];
            x = x.expand(p.position, &p.expansion);
        }
        x.items.iter().map(|i| i.text().to_string()).collect()
    }

    /// Count-training records: every pending nonterminal at every step
    /// contributes its ground-truth expansion; each leaf contributes its
    /// lexeme once.
    pub fn records(&self) -> Vec<ExpansionRecord> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (k, p) in s.pending.iter().enumerate() {
                let kind: Arc<str> = Arc::from(s.state.items[p.position].text());
                if p.leaf {
                    if k == s.chosen {
                        out.push(ExpansionRecord::Lexeme {
                            class: kind,
                            text: Arc::from(p.expansion[0].text()),
                        });
                    }
                } else {
                    out.push(ExpansionRecord::Expand {
                        kind,
                        window: window_at(&s.state, p.position),
                        expansion: p.expansion.clone(),
                        weight: 1.0,
                    });
                }
            }
        }
        out
    }
}

struct Node {
    expansion: Vec<Item>,
    children: Vec<Option<usize>>,
    leaf: bool,
}

fn item_of(t: &ParseTree) -> Item {
    match &t.symbol {
        Symbol::Literal(l) => Item::tok(l),
        Symbol::Class(c) | Symbol::Nonterminal(c) => Item::nt(c),
    }
}

fn build_nodes(t: &ParseTree, arena: &mut Vec<Node>) -> Option<usize> {
    match &t.symbol {
        Symbol::Literal(_) => None,
        Symbol::Class(_) => {
            let text = t.token.as_ref().map_or("", |k| k.text.as_str());
            arena.push(Node {
                expansion: vec![Item::tok(text)],
                children: vec![None],
                leaf: true,
            });
            Some(arena.len() - 1)
        }
        Symbol::Nonterminal(_) => {
            let expansion = t.children.iter().map(item_of).collect();
            let children = t.children.iter().map(|c| build_nodes(c, arena)).collect();
            arena.push(Node {
                expansion,
                children,
                leaf: false,
            });
            Some(arena.len() - 1)
        }
    }
}

/// Derives `ex.target` from its root nonterminal, expanding a uniformly
/// chosen pending nonterminal at each step.
pub fn make_expansion_traces<R: Rng + ?Sized>(ex: &Example, rng: &mut R) -> ExpansionTrace {
    let mut arena = Vec::new();
    let root = build_nodes(&ex.target_tree, &mut arena);
    let mut x = SketchState::new(&ex.context, vec![item_of(&ex.target_tree)]);
    let mut ids: Vec<Option<usize>> = vec![root];
    let mut steps = Vec::new();
    loop {
        let pending: Vec<Pending> = ids
            .iter()
            .enumerate()
            .filter_map(|(p, id)| {
                id.map(|n| Pending {
                    position: p,
                    expansion: arena[n].expansion.clone(),
                    leaf: arena[n].leaf,
                })
            })
            .collect();
        if pending.is_empty() {
            break;
        }
        let chosen = rng.gen_range(0..pending.len());
        let p = &pending[chosen];
        let node = &arena[ids[p.position].expect("pending node")];
        let next = x.expand(p.position, &node.expansion);
        ids.splice(p.position..=p.position, node.children.iter().copied());
        steps.push(GroundTruthStep {
            state: std::mem::replace(&mut x, next),
            pending,
            chosen,
        });
    }
    ExpansionTrace {
        steps,
        final_state: x,
    }
}

/// Training records for every example, one trace each.
pub fn expansion_records(examples: &[Example], seed: u64) -> Vec<ExpansionRecord> {
    par_map(examples, |i, ex| {
        make_expansion_traces(ex, &mut stream_rng(seed, i as u64)).records()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Whether fine-tuning may also move the expansion counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    SelectorOnly,
    Full,
}

/// Self-critical training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub learning_rate: f64,
    pub expansion_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batches_per_epoch: Option<usize>,
    pub valid_limit: Option<usize>,
    pub reward: RewardKind,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            learning_rate: 0.05,
            expansion_rate: 0.2,
            batch_size: 64,
            max_epochs: 20,
            patience: 5,
            batches_per_epoch: None,
            valid_limit: None,
            reward: RewardKind::Mixed,
            max_steps: crate::engine::DEFAULT_MAX_STEPS,
            seed: 1,
        }
    }
}

/// A sampled completion with the gradient of its log-probability.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub sketch: Sketch,
    pub grad: Vec<f64>,
    pub expansions: Vec<(Arc<str>, Window, Expansion)>,
}

/// A trainable completion policy.
pub trait Policy: Clone + Send + Sync {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn rollout(&self, context: &[String], rng: &mut ChaCha8Rng, max_steps: usize) -> Result<Rollout>;
    fn greedy_sketch(&self, context: &[String], max_steps: usize) -> Result<Sketch>;
    /// Advantage-weighted count updates for policies with count tables.
    fn update_counts(&mut self, _updates: &[(f64, &Rollout)], _rate: f64) {}
}

impl Policy for ModelBundle {
    fn params(&self) -> &[f64] {
        self.selector.weights()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.selector.weights_mut()
    }

    fn rollout(&self, context: &[String], rng: &mut ChaCha8Rng, max_steps: usize) -> Result<Rollout> {
        let mut grad = vec![0.0; self.selector.num_features()];
        let trace = generate_with(
            &self.selector,
            &self.expansion,
            self.root_state(context),
            Decode::Sample(rng),
            max_steps,
            |d, c| {
                let _ = self.selector.accumulate_grad(d, c, 1.0, &mut grad);
            },
        )?;
        let expansions = trace
            .steps
            .iter()
            .filter_map(|s| match (s.choice, &s.expansion) {
                (Choice::Expand(i), Some(e)) => {
                    let kind = s.state.items[i].text();
                    (!self.expansion.is_leaf(kind))
                        .then(|| (Arc::from(kind), window_at(&s.state, i), e.clone()))
                }
                _ => None,
            })
            .collect();
        Ok(Rollout {
            sketch: trace.sketch,
            grad,
            expansions,
        })
    }

    fn greedy_sketch(&self, context: &[String], max_steps: usize) -> Result<Sketch> {
        Ok(self.greedy(context, max_steps)?.0)
    }

    fn update_counts(&mut self, updates: &[(f64, &Rollout)], rate: f64) {
        for (adv, r) in updates {
            if *adv == 0.0 {
                continue;
            }
            for (kind, w, e) in &r.expansions {
                self.expansion.add_fractional(kind, w, e, rate * adv);
            }
        }
    }
}

impl Policy for SequenceModel {
    fn params(&self) -> &[f64] {
        &self.head().weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.head_mut().weights
    }

    fn rollout(&self, context: &[String], rng: &mut ChaCha8Rng, max_steps: usize) -> Result<Rollout> {
        let mut grad = vec![0.0; self.params().len()];
        let sketch = self.sample(context, rng, max_steps, &mut grad);
        Ok(Rollout {
            sketch,
            grad,
            expansions: Vec::new(),
        })
    }

    fn greedy_sketch(&self, context: &[String], max_steps: usize) -> Result<Sketch> {
        Ok(self.greedy(context, max_steps))
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub snapshot_reward: f64,
    pub mean_sketch_length: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_reward,snapshot_reward,mean_sketch_length";

pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4}\n",
            r.epoch, r.mean_reward, r.snapshot_reward, r.mean_sketch_length
        ));
    }
    out
}

/// Current policy, best snapshot and bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState<P> {
    pub current: P,
    pub snapshot: P,
    pub snapshot_reward: f64,
    pub epoch: usize,
    pub steps: usize,
    pub log: Vec<EpochLog>,
    baselines: Vec<Option<f64>>,
}

fn limited<'a>(valid: &'a [CorpusRecord], cfg: &RlConfig) -> &'a [CorpusRecord] {
    &valid[..cfg.valid_limit.map_or(valid.len(), |n| n.min(valid.len()))]
}

/// Mean greedy reward and mean sketch length over the validation records.
pub fn validation_reward<P: Policy>(p: &P, valid: &[CorpusRecord], cfg: &RlConfig) -> Result<(f64, f64)> {
    let valid = limited(valid, cfg);
    if valid.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let scored = par_map(valid, |_, r| -> Result<(f64, usize)> {
        let s = p.greedy_sketch(&r.context, cfg.max_steps)?;
        Ok((cfg.reward.score(&s, &r.target)?, n_tokens(&s)))
    });
    let mut total = 0.0;
    let mut len = 0usize;
    for s in scored {
        let (r, n) = s?;
        total += r;
        len += n;
    }
    let n = valid.len() as f64;
    Ok((total / n, len as f64 / n))
}

impl<P: Policy> TrainState<P> {
    /// Starts from `policy`, which is also the initial snapshot.
    pub fn new(policy: P, snapshot_reward: f64) -> Self {
        TrainState {
            snapshot: policy.clone(),
            current: policy,
            snapshot_reward,
            epoch: 0,
            steps: 0,
            log: Vec::new(),
            baselines: Vec::new(),
        }
    }

    /// Starts from `policy`, scoring it on `valid` to seed the snapshot.
    pub fn evaluated(policy: P, valid: &[CorpusRecord], cfg: &RlConfig) -> Result<Self> {
        let (r, _) = validation_reward(&policy, valid, cfg)?;
        Ok(TrainState::new(policy, r))
    }

    /// Re-validates the current policy and takes a snapshot iff the mean
    /// reward strictly improves. Returns whether it did.
    pub fn validate(&mut self, valid: &[CorpusRecord], cfg: &RlConfig, mean_reward: f64) -> Result<bool> {
        let (r, len) = validation_reward(&self.current, valid, cfg)?;
        let improved = r > self.snapshot_reward;
        if improved {
            self.snapshot = self.current.clone();
            self.snapshot_reward = r;
            self.baselines.clear();
        }
        self.epoch += 1;
        self.log.push(EpochLog {
            epoch: self.epoch,
            mean_reward,
            snapshot_reward: self.snapshot_reward,
            mean_sketch_length: len,
        });
        Ok(improved)
    }
}

/// One policy-gradient update on `batch` (indices into `train`). Returns
/// the mean sampled reward.
pub fn self_critical_step<P: Policy>(
    batch: &[usize],
    train: &[CorpusRecord],
    ts: &mut TrainState<P>,
    mode: FinetuneMode,
    cfg: &RlConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    if ts.baselines.len() != train.len() {
        ts.baselines = vec![None; train.len()];
    }
    let step = ts.steps as u64;
    let cur = &ts.current;
    let snap = &ts.snapshot;
    let cached: Vec<Option<f64>> = batch.iter().map(|&i| ts.baselines[i]).collect();
    let results = par_map(batch, |k, &i| -> Result<(Rollout, f64, f64)> {
        let rec = &train[i];
        let mut rng = stream_rng(cfg.seed.wrapping_add(step.wrapping_mul(0x9E37_79B9)), i as u64);
        let roll = cur.rollout(&rec.context, &mut rng, cfg.max_steps)?;
        let r = cfg.reward.score(&roll.sketch, &rec.target)?;
        let base = match cached[k] {
            Some(b) => b,
            None => {
                let s = snap.greedy_sketch(&rec.context, cfg.max_steps)?;
                cfg.reward.score(&s, &rec.target)?
            }
        };
        Ok((roll, r, base))
    });
    let mut rollouts = Vec::with_capacity(batch.len());
    for (res, &i) in results.into_iter().zip(batch) {
        let (roll, r, base) = res?;
        ts.baselines[i] = Some(base);
        rollouts.push((r - base, r, roll));
    }
    let scale = cfg.learning_rate;
    let params = ts.current.params_mut();
    for (adv, _, roll) in &rollouts {
        if *adv == 0.0 {
            continue;
        }
        for (w, g) in params.iter_mut().zip(&roll.grad) {
            *w += scale * adv * g;
        }
    }
    if mode == FinetuneMode::Full {
        let updates: Vec<(f64, &Rollout)> = rollouts.iter().map(|(a, _, r)| (*a, r)).collect();
        ts.current.update_counts(&updates, cfg.expansion_rate);
    }
    ts.steps += 1;
    Ok(rollouts.iter().map(|r| r.1).sum::<f64>() / batch.len() as f64)
}

/// Epochs of self-critical training with validation after each; stops
/// after `patience` validations without improvement. The returned state's
/// snapshot is the best policy seen.
pub fn finetune<P: Policy>(
    mut ts: TrainState<P>,
    train: &[CorpusRecord],
    valid: &[CorpusRecord],
    mode: FinetuneMode,
    cfg: &RlConfig,
) -> Result<TrainState<P>> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, 1_000_000 + ts.epoch as u64));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size.max(1)).collect();
        if let Some(n) = cfg.batches_per_epoch {
            batches.truncate(n);
        }
        let mut total = 0.0;
        for b in &batches {
            total += self_critical_step(b, train, &mut ts, mode, cfg)?;
        }
        let mean = total / batches.len().max(1) as f64;
        let improved = ts.validate(valid, cfg, mean)?;
        log::info!(
            "epoch {}: sampled reward {:.4}, snapshot {:.4}",
            ts.epoch,
            mean,
            ts.snapshot_reward
        );
        stale = if improved { 0 } else { stale + 1 };
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(ts)
}

/// Settings for building a grammar bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub root: String,
    pub context_len: usize,
    pub smoothing: Smoothing,
    pub seed: u64,
    pub selector: RlConfig,
}

fn records_of(examples: &[Example]) -> Vec<CorpusRecord> {
    examples
        .iter()
        .map(|e| CorpusRecord {
            context: e.context.clone(),
            target: e.target.clone(),
            file_id: 0,
        })
        .collect()
}

/// Counts the expansion model from uniform-order traces, then trains the
/// selector by self-critical updates with the expansion model frozen.
pub fn pretrain(
    examples: &[Example],
    valid: &[CorpusRecord],
    cfg: &PretrainConfig,
) -> Result<(ModelBundle, Vec<EpochLog>)> {
    if examples.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let expansion = train_expansion_counts(expansion_records(examples, cfg.seed), cfg.smoothing)?;
    let selector = SelectorModel::new(&expansion);
    let bundle = ModelBundle {
        meta: ModelMeta {
            root: cfg.root.clone(),
            context_len: cfg.context_len,
            smoothing: cfg.smoothing,
            seed: cfg.seed,
        },
        selector,
        expansion,
        snapshot: SnapshotInfo::default(),
    };
    let ts = TrainState::evaluated(bundle, valid, &cfg.selector)?;
    let ts = finetune(
        ts,
        &records_of(examples),
        valid,
        FinetuneMode::SelectorOnly,
        &cfg.selector,
    )?;
    Ok(finish_bundle(ts))
}

/// Continues training a bundle with self-critical updates.
pub fn finetune_bundle(
    bundle: ModelBundle,
    train: &[CorpusRecord],
    valid: &[CorpusRecord],
    mode: FinetuneMode,
    cfg: &RlConfig,
) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let ts = TrainState::evaluated(bundle, valid, cfg)?;
    Ok(finish_bundle(finetune(ts, train, valid, mode, cfg)?))
}

fn finish_bundle(ts: TrainState<ModelBundle>) -> (ModelBundle, Vec<EpochLog>) {
    let best_epoch = ts
        .log
        .iter()
        .rev()
        .find(|l| l.snapshot_reward == ts.snapshot_reward && l.mean_reward.is_finite())
        .map_or(0, |l| l.epoch);
    let mut b = ts.snapshot;
    b.snapshot = SnapshotInfo {
        reward: Some(ts.snapshot_reward),
        epoch: best_epoch,
    };
    (b, ts.log)
}

/// Replaces random subtrees of each target by holes, top-down, so that a
/// holed node's descendants are never holed separately.
pub fn synth_hole_dataset(examples: &[Example], p_hole: f64, seed: u64) -> Vec<(Vec<String>, Sketch)> {
    fn walk<R: Rng>(t: &ParseTree, p: f64, rng: &mut R, out: &mut Vec<SketchItem>) {
        match &t.symbol {
            Symbol::Literal(l) => out.push(SketchItem::Token(l.clone())),
            _ if rng.gen::<f64>() < p => out.push(SketchItem::Hole),
            Symbol::Class(_) => {
                let text = t.token.as_ref().map_or(String::new(), |k| k.text.clone());
                out.push(SketchItem::Token(text));
            }
            Symbol::Nonterminal(_) => {
                for c in &t.children {
                    walk(c, p, rng, out);
                }
            }
        }
    }
    par_map(examples, |i, ex| {
        let mut rng = stream_rng(seed, i as u64);
        let mut items = Vec::new();
        walk(&ex.target_tree, p_hole, &mut rng, &mut items);
        (ex.context.clone(), Sketch::new(items))
    })
}

/// Settings for the left-to-right baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub discount: f64,
    pub alpha: f64,
    pub rl: RlConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            discount: 0.5,
            alpha: 0.1,
            rl: RlConfig::default(),
        }
    }
}

/// Trains one baseline: counts on targets (or on hole sketches for the
/// hole variant), then self-critical tuning of the stop or hole head.
pub fn train_baseline(
    variant: SequenceVariant,
    train: &[CorpusRecord],
    holes: Option<&[(Vec<String>, Sketch)]>,
    valid: &[CorpusRecord],
    cfg: &BaselineConfig,
) -> Result<(SequenceModel, Vec<EpochLog>)> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = match variant {
        SequenceVariant::Hole => holes
            .ok_or_else(|| Error::Config("the hole baseline needs a hole dataset".into()))?
            .iter()
            .map(|(c, s)| (c.clone(), s.to_tokens()))
            .collect(),
        _ => train.iter().map(|r| (r.context.clone(), r.target.clone())).collect(),
    };
    let model = SequenceModel::train(&pairs, variant, cfg.discount, cfg.alpha)?;
    if variant == SequenceVariant::Plain {
        return Ok((model, Vec::new()));
    }
    let ts = TrainState::evaluated(model, valid, &cfg.rl)?;
    let ts = finetune(ts, train, valid, FinetuneMode::SelectorOnly, &cfg.rl)?;
    Ok((ts.snapshot, ts.log))
}

/// Trains every requested baseline variant.
pub fn train_baselines(
    variants: &[SequenceVariant],
    train: &[CorpusRecord],
    holes: Option<&[(Vec<String>, Sketch)]>,
    valid: &[CorpusRecord],
    cfg: &BaselineConfig,
) -> Result<Vec<(SequenceModel, Vec<EpochLog>)>> {
    variants
        .iter()
        .map(|&v| train_baseline(v, train, holes, valid, cfg))
        .collect()
}
