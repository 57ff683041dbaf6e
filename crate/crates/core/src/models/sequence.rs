use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::check_normalized;
use super::counts::{Counts, Row};
use crate::metrics::{Sketch, SketchItem, HOLE};
use crate::{Error, Result};

const NO_TOKEN: u32 = u32::MAX;
const UNKNOWN: u32 = u32::MAX - 1;
const LENGTH_EDGES: [usize; 4] = [1, 3, 6, 10];
const MAXPROB_EDGES: [f64; 4] = [0.1, 0.25, 0.5, 0.8];
const HOLEPROB_EDGES: [f64; 4] = [0.02, 0.05, 0.1, 0.2];
const HEAD_FEATURES: usize = 16;

/// Which left-to-right baseline a sequence model implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SequenceVariant {
    #[serde(rename = "ltr")]
    Plain,
    #[serde(rename = "ltr_stop")]
    Stop,
    #[serde(rename = "ltr_hole")]
    Hole,
}

impl SequenceVariant {
    pub fn name(self) -> &'static str {
        match self {
            SequenceVariant::Plain => "ltr",
            SequenceVariant::Stop => "ltr_stop",
            SequenceVariant::Hole => "ltr_hole",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ltr" => Some(SequenceVariant::Plain),
            "ltr_stop" => Some(SequenceVariant::Stop),
            "ltr_hole" => Some(SequenceVariant::Hole),
            _ => None,
        }
    }
}

/// Logistic head deciding stop (or hole emission) at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopHead {
    pub weights: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bucket<T: PartialOrd>(v: T, edges: &[T]) -> usize {
    edges.iter().take_while(|e| v >= **e).count()
}

/// Decoding state: generated token ids and the two-token history.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SeqState {
    pub tokens: Vec<u32>,
    pub history: (u32, u32),
}

/// A decoding action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqChoice {
    Stop,
    Token(u32),
}

/// Head decision probabilities and features at one step.
#[derive(Clone, Debug)]
pub struct HeadStep {
    pub features: [usize; 4],
    /// Probability that the head fires (stop or hole).
    pub fire: f64,
    /// Base-model probability of the hole token, when the head reweights it.
    pub base_hole: Option<f64>,
}

/// Trigram token model over completions with an optional stop or hole head.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    variant: SequenceVariant,
    discount: f64,
    alpha: f64,
    vocab: Vec<Arc<str>>,
    unigram: Row,
    by_prev: Counts<u32>,
    by_pair: Counts<(u32, u32)>,
    ranked: Vec<u32>,
    cumulative: Vec<f64>,
    prev_ranked: HashMap<u32, Vec<(u32, f64)>>,
    pair_ranked: HashMap<(u32, u32), Vec<(u32, f64)>>,
    head: StopHead,
}

/// Discounted in-row probabilities of a row's entries, largest first.
fn ranked_row(r: &Row, discount: f64) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f64)> = r
        .entries()
        .iter()
        .map(|&(id, c)| (id, (c - discount).max(0.0) / r.total()))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

impl SequenceModel {
    /// Trains counts on `(context, target)` pairs. For the hole variant the
    /// targets are sketches spelled with the hole marker.
    pub fn train(
        pairs: &[(Vec<String>, Vec<String>)],
        variant: SequenceVariant,
        discount: f64,
        alpha: f64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Model("empty training corpus".into()));
        }
        let vocab: BTreeSet<&str> = pairs
            .iter()
            .flat_map(|p| p.1.iter().map(String::as_str))
            .collect();
        let vocab: Vec<Arc<str>> = vocab.into_iter().map(Arc::from).collect();
        let mut m = SequenceModel {
            variant,
            discount,
            alpha,
            vocab,
            unigram: Row::default(),
            by_prev: Counts::with_discount(discount),
            by_pair: Counts::with_discount(discount),
            ranked: Vec::new(),
            cumulative: Vec::new(),
            prev_ranked: HashMap::new(),
            pair_ranked: HashMap::new(),
            head: StopHead {
                weights: initial_head(variant),
            },
        };
        for (ctx, target) in pairs {
            let mut h = m.start_history(ctx);
            let ids: Vec<u32> = target
                .iter()
                .map(|t| m.id_of(t).expect("vocab covers targets"))
                .chain([m.eos()])
                .collect();
            for id in ids {
                m.unigram.add(id, 1.0);
                m.by_prev.add(&h.1, id, 1.0);
                m.by_pair.add(&h, id, 1.0);
                h = (h.1, id);
            }
        }
        m.finish();
        Ok(m)
    }

    fn finish(&mut self) {
        let mut ranked: Vec<u32> = (0..=self.eos()).collect();
        ranked.sort_by(|&a, &b| {
            self.unigram
                .get(b)
                .total_cmp(&self.unigram.get(a))
                .then(a.cmp(&b))
        });
        self.ranked = ranked;
        let d = self.discount;
        self.prev_ranked = self
            .by_prev
            .sorted()
            .into_iter()
            .filter(|(_, r)| r.is_live())
            .map(|(k, r)| (*k, ranked_row(r, d)))
            .collect();
        self.pair_ranked = self
            .by_pair
            .sorted()
            .into_iter()
            .filter(|(_, r)| r.is_live())
            .map(|(k, r)| (*k, ranked_row(r, d)))
            .collect();
        let mut acc = 0.0;
        self.cumulative = (0..=self.eos())
            .map(|id| {
                acc += self.unigram.get(id);
                acc
            })
            .collect();
    }

    pub fn variant(&self) -> SequenceVariant {
        self.variant
    }

    pub fn head(&self) -> &StopHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut StopHead {
        &mut self.head
    }

    pub fn vocab(&self) -> &[Arc<str>] {
        &self.vocab
    }

    pub fn eos(&self) -> u32 {
        self.vocab.len() as u32
    }

    fn id_of(&self, t: &str) -> Option<u32> {
        self.vocab
            .binary_search_by(|v| (**v).cmp(t))
            .ok()
            .map(|k| k as u32)
    }

    fn hole_id(&self) -> Option<u32> {
        match self.variant {
            SequenceVariant::Hole => self.id_of(HOLE),
            _ => None,
        }
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn start_history(&self, context: &[String]) -> (u32, u32) {
        let n = context.len();
        let id = |k: Option<usize>| match k {
            None => NO_TOKEN,
            Some(k) => self.id_of(&context[k]).unwrap_or(UNKNOWN),
        };
        (id(n.checked_sub(2)), id(n.checked_sub(1)))
    }

    pub fn start(&self, context: &[String]) -> SeqState {
        SeqState {
            tokens: Vec::new(),
            history: self.start_history(context),
        }
    }

    pub fn advance(&self, s: &SeqState, id: u32) -> SeqState {
        let mut tokens = s.tokens.clone();
        tokens.push(id);
        SeqState {
            tokens,
            history: (s.history.1, id),
        }
    }

    fn unigram_prob(&self, id: u32) -> f64 {
        let v = (self.vocab.len() + 1) as f64;
        (self.unigram.get(id) + self.alpha) / (self.unigram.total() + self.alpha * v)
    }

    /// Base-model probability of the next token.
    pub fn prob(&self, h: (u32, u32), id: u32) -> f64 {
        let mut p = self.unigram_prob(id);
        if let Some(r) = self.by_prev.row(&h.1) {
            p = r.interpolate(id, self.discount, p);
        }
        if let Some(r) = self.by_pair.row(&h) {
            p = r.interpolate(id, self.discount, p);
        }
        p
    }

    /// The `n` most probable next tokens under the base model, ties by id.
    pub fn top_tokens(&self, h: (u32, u32), n: usize) -> Vec<(u32, f64)> {
        let pair = self.by_pair.row(&h).and(self.pair_ranked.get(&h));
        let prev = self.by_prev.row(&h.1).and(self.prev_ranked.get(&h.1));
        let g_pair = self.by_pair.row(&h).map_or(1.0, |r| r.backoff_weight(self.discount));
        let g_prev = self.by_prev.row(&h.1).map_or(1.0, |r| r.backoff_weight(self.discount));
        let at = |v: Option<&Vec<(u32, f64)>>, m: usize| v.and_then(|v| v.get(m)).map_or(0.0, |e| e.1);
        let mut m = n + 4;
        loop {
            let mut ids: BTreeSet<u32> = BTreeSet::new();
            for v in [pair, prev].into_iter().flatten() {
                ids.extend(v.iter().take(m).map(|e| e.0));
            }
            ids.extend(self.ranked.iter().take(m));
            let mut v: Vec<(u32, f64)> = ids.into_iter().map(|id| (id, self.prob(h, id))).collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let exhausted = m >= self.ranked.len()
                && pair.map_or(true, |p| m >= p.len())
                && prev.map_or(true, |p| m >= p.len());
            let bound = at(pair, m)
                + g_pair
                    * (at(prev, m)
                        + g_prev * self.ranked.get(m).map_or(0.0, |&id| self.unigram_prob(id)));
            if exhausted || v.get(n.saturating_sub(1)).is_some_and(|e| e.1 > bound) {
                v.truncate(n);
                return v;
            }
            m *= 2;
        }
    }

    /// Exact sample from the interpolated distribution.
    pub fn sample_token<R: Rng + ?Sized>(&self, h: (u32, u32), rng: &mut R) -> u32 {
        for r in [self.by_pair.row(&h), self.by_prev.row(&h.1)].into_iter().flatten() {
            let kept = 1.0 - r.backoff_weight(self.discount);
            let mut u = rng.gen::<f64>();
            if u < kept {
                u *= r.total();
                for &(id, c) in r.entries() {
                    u -= (c - self.discount).max(0.0);
                    if u < 0.0 {
                        return id;
                    }
                }
                return r.entries().last().expect("live row").0;
            }
        }
        let v = self.vocab.len() + 1;
        let t = self.unigram.total();
        let u = rng.gen::<f64>() * (t + self.alpha * v as f64);
        if u < t {
            let k = self.cumulative.partition_point(|&c| c <= u);
            k.min(v - 1) as u32
        } else {
            rng.gen_range(0..v as u32)
        }
    }

    pub fn head_step(&self, s: &SeqState) -> Option<HeadStep> {
        if self.variant == SequenceVariant::Plain {
            return None;
        }
        let top = self.top_tokens(s.history, 1);
        let maxp = top.first().map_or(0.0, |t| t.1);
        let base_hole = self.hole_id().map(|id| self.prob(s.history, id));
        let features = [
            0,
            1 + bucket(s.tokens.len(), &LENGTH_EDGES),
            6 + bucket(maxp, &MAXPROB_EDGES),
            11 + bucket(base_hole.unwrap_or(0.0), &HOLEPROB_EDGES),
        ];
        let mut z: f64 = features.iter().map(|&k| self.head.weights[k]).sum();
        if let Some(p) = base_hole {
            z += (p / (1.0 - p)).ln();
        }
        Some(HeadStep {
            features,
            fire: sigmoid(z),
            base_hole,
        })
    }

    /// Log-probability of `choice` and its candidates' ordering, given the
    /// head step at this state.
    pub fn choice_logprob(&self, s: &SeqState, head: Option<&HeadStep>, choice: SeqChoice) -> f64 {
        let hole = self.hole_id();
        match (head, choice) {
            (Some(h), SeqChoice::Stop) if self.variant == SequenceVariant::Stop => h.fire.ln(),
            (_, SeqChoice::Stop) => f64::NEG_INFINITY,
            (Some(h), SeqChoice::Token(id)) if self.variant == SequenceVariant::Stop => {
                (1.0 - h.fire).ln() + self.prob(s.history, id).ln()
            }
            (Some(h), SeqChoice::Token(id)) if Some(id) == hole => h.fire.ln(),
            (Some(h), SeqChoice::Token(id)) => {
                let b = h.base_hole.unwrap_or(0.0);
                ((1.0 - h.fire) / (1.0 - b)).ln() + self.prob(s.history, id).ln()
            }
            (None, SeqChoice::Token(id)) => self.prob(s.history, id).ln(),
        }
    }

    /// Top actions at a state with their log-probabilities.
    pub fn top_choices(&self, s: &SeqState, n: usize) -> Vec<(SeqChoice, f64)> {
        let head = self.head_step(s);
        let mut out: Vec<(SeqChoice, f64)> = Vec::new();
        if self.variant == SequenceVariant::Stop {
            out.push((SeqChoice::Stop, self.choice_logprob(s, head.as_ref(), SeqChoice::Stop)));
        }
        let hole = self.hole_id();
        let mut toks = self.top_tokens(s.history, n + 1);
        if let Some(h) = hole {
            if !toks.iter().any(|t| t.0 == h) {
                toks.push((h, 0.0));
            }
        }
        for (id, _) in toks {
            let c = SeqChoice::Token(id);
            out.push((c, self.choice_logprob(s, head.as_ref(), c)));
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(rank(a.0).cmp(&rank(b.0))));
        out.truncate(n);
        out
    }

    /// Samples an action and accumulates `∇ log P(action)` into `grad`.
    pub fn sample_choice<R: Rng + ?Sized>(
        &self,
        s: &SeqState,
        rng: &mut R,
        grad: &mut [f64],
    ) -> (SeqChoice, f64) {
        let head = self.head_step(s);
        let Some(h) = head else {
            let id = self.sample_token(s.history, rng);
            let c = SeqChoice::Token(id);
            return (c, self.choice_logprob(s, None, c));
        };
        let fired = rng.gen::<f64>() < h.fire;
        let choice = match (fired, self.variant) {
            (true, SequenceVariant::Stop) => SeqChoice::Stop,
            (true, _) => SeqChoice::Token(self.hole_id().expect("hole variant")),
            (false, _) => {
                let hole = self.hole_id();
                let mut id = self.sample_token(s.history, rng);
                while Some(id) == hole {
                    id = self.sample_token(s.history, rng);
                }
                SeqChoice::Token(id)
            }
        };
        let coef = if fired { 1.0 - h.fire } else { -h.fire };
        for &k in &h.features {
            grad[k] += coef;
        }
        (choice, self.choice_logprob(s, Some(&h), choice))
    }

    pub fn is_terminal(&self, c: SeqChoice) -> bool {
        match c {
            SeqChoice::Stop => true,
            SeqChoice::Token(id) => id == self.eos(),
        }
    }

    /// Renders generated ids (and a final stop) as a sketch.
    pub fn to_sketch(&self, ids: &[u32], stopped: bool) -> Sketch {
        let mut items: Vec<SketchItem> = ids
            .iter()
            .filter(|&&id| id != self.eos())
            .map(|&id| match self.token(id) {
                HOLE => SketchItem::Hole,
                t => SketchItem::Token(t.to_string()),
            })
            .collect();
        if stopped {
            items.push(SketchItem::Hole);
        }
        Sketch::new(items)
    }

    /// Follows the most probable action until end, stop or `max_len`.
    pub fn greedy(&self, context: &[String], max_len: usize) -> Sketch {
        let mut s = self.start(context);
        for _ in 0..max_len {
            let Some(&(c, _)) = self.top_choices(&s, 1).first() else {
                break;
            };
            match c {
                SeqChoice::Stop => return self.to_sketch(&s.tokens, true),
                SeqChoice::Token(id) if id == self.eos() => break,
                SeqChoice::Token(id) => s = self.advance(&s, id),
            }
        }
        self.to_sketch(&s.tokens, false)
    }

    /// Samples a completion, accumulating the head's log-probability
    /// gradient into `grad`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        context: &[String],
        rng: &mut R,
        max_len: usize,
        grad: &mut [f64],
    ) -> Sketch {
        let mut s = self.start(context);
        for _ in 0..max_len {
            match self.sample_choice(&s, rng, grad).0 {
                SeqChoice::Stop => return self.to_sketch(&s.tokens, true),
                SeqChoice::Token(id) if id == self.eos() => break,
                SeqChoice::Token(id) => s = self.advance(&s, id),
            }
        }
        self.to_sketch(&s.tokens, false)
    }

    /// Beam search over actions; distinct sketches, best first.
    pub fn beam(&self, context: &[String], k: usize, max_len: usize) -> Vec<(Sketch, f64)> {
        struct Hyp {
            state: SeqState,
            score: f64,
            done: bool,
            stopped: bool,
        }
        let order = |a: &Hyp, b: &Hyp| {
            b.score
                .total_cmp(&a.score)
                .then(a.state.tokens.len().cmp(&b.state.tokens.len()))
                .then_with(|| a.state.tokens.cmp(&b.state.tokens))
                .then(a.stopped.cmp(&b.stopped))
        };
        let mut beam = vec![Hyp {
            state: self.start(context),
            score: 0.0,
            done: false,
            stopped: false,
        }];
        let mut rounds = 0;
        while beam.iter().any(|h| !h.done) && rounds < max_len {
            rounds += 1;
            let mut next = Vec::new();
            for h in beam {
                if h.done {
                    next.push(h);
                    continue;
                }
                for (c, lp) in self.top_choices(&h.state, k) {
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    let score = h.score + lp;
                    next.push(match c {
                        SeqChoice::Stop => Hyp {
                            state: h.state.clone(),
                            score,
                            done: true,
                            stopped: true,
                        },
                        SeqChoice::Token(id) if id == self.eos() => Hyp {
                            state: h.state.clone(),
                            score,
                            done: true,
                            stopped: false,
                        },
                        SeqChoice::Token(id) => Hyp {
                            state: self.advance(&h.state, id),
                            score,
                            done: false,
                            stopped: false,
                        },
                    });
                }
            }
            next.sort_by(order);
            next.truncate(k);
            beam = next;
        }
        beam.sort_by(order);
        let mut out: Vec<(Sketch, f64)> = Vec::new();
        for h in beam {
            let sk = self.to_sketch(&h.state.tokens, h.stopped);
            if !out.iter().any(|o| o.0 == sk) {
                out.push((sk, h.score));
            }
        }
        out
    }

    pub(crate) fn export(&self) -> ExportedSequence {
        let mut rows = vec![SeqRow {
            context: Vec::new(),
            counts: self.unigram.entries().to_vec(),
        }];
        for (k, r) in self.by_prev.sorted() {
            rows.push(SeqRow {
                context: vec![*k],
                counts: r.entries().to_vec(),
            });
        }
        for (k, r) in self.by_pair.sorted() {
            rows.push(SeqRow {
                context: vec![k.0, k.1],
                counts: r.entries().to_vec(),
            });
        }
        ExportedSequence {
            variant: self.variant,
            discount: self.discount,
            alpha: self.alpha,
            vocab: self.vocab.iter().map(|v| v.to_string()).collect(),
            rows,
            head: self.head.clone(),
        }
    }

    pub(crate) fn import(e: &ExportedSequence) -> Result<Self> {
        let vocab: Vec<Arc<str>> = e.vocab.iter().map(|v| Arc::from(v.as_str())).collect();
        if vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Model("vocabulary is not sorted".into()));
        }
        if e.head.weights.len() != HEAD_FEATURES {
            return Err(Error::Model("bad head weights".into()));
        }
        let mut m = SequenceModel {
            variant: e.variant,
            discount: e.discount,
            alpha: e.alpha,
            vocab,
            unigram: Row::default(),
            by_prev: Counts::with_discount(e.discount),
            by_pair: Counts::with_discount(e.discount),
            ranked: Vec::new(),
            cumulative: Vec::new(),
            prev_ranked: HashMap::new(),
            pair_ranked: HashMap::new(),
            head: e.head.clone(),
        };
        let limit = m.eos();
        for row in &e.rows {
            for &(id, c) in &row.counts {
                if id > limit || c < 0.0 {
                    return Err(Error::Model("bad sequence count".into()));
                }
                match row.context.as_slice() {
                    [] => m.unigram.add(id, c),
                    [a] => m.by_prev.add(a, id, c),
                    [a, b] => m.by_pair.add(&(*a, *b), id, c),
                    _ => return Err(Error::Model("bad sequence context".into())),
                }
            }
        }
        if !m.unigram.is_live() {
            return Err(Error::Model("empty training corpus".into()));
        }
        m.finish();
        Ok(m)
    }

    /// Debug check that the base distribution at `h` sums to one.
    pub fn check_history(&self, h: (u32, u32)) {
        let total: f64 = (0..=self.eos()).map(|id| self.prob(h, id)).sum();
        check_normalized(total, "sequence");
    }
}

fn rank(c: SeqChoice) -> (u8, u32) {
    match c {
        SeqChoice::Stop => (0, 0),
        SeqChoice::Token(id) => (1, id),
    }
}

fn initial_head(variant: SequenceVariant) -> Vec<f64> {
    let mut w = vec![0.0; HEAD_FEATURES];
    if variant == SequenceVariant::Stop {
        w[0] = -3.0;
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct ExportedSequence {
    pub variant: SequenceVariant,
    pub discount: f64,
    pub alpha: f64,
    pub vocab: Vec<String>,
    pub rows: Vec<SeqRow>,
    pub head: StopHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct SeqRow {
    pub context: Vec<u32>,
    pub counts: Vec<(u32, f64)>,
}
