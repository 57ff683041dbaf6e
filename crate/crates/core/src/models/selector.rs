use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_normalized, ExpansionDist, ExpansionModel, Expander, SketchState};
use crate::{Error, Result};

const ENTROPY_EDGES: [f64; 4] = [0.05, 0.5, 1.0, 2.0];
const COUNT_EDGES: [usize; 4] = [2, 3, 4, 6];
const STEP_EDGES: [usize; 4] = [1, 3, 6, 11];
const POSITION_BUCKETS: usize = 4;
const BUCKETS: usize = 5;

/// A selector action: expand the nonterminal at a position, or stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Choice {
    Expand(usize),
    Stop,
}

/// Generation-time facts the selector may condition on beyond the state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub expansion_logprob: f64,
}

/// One entry of a selector distribution.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub choice: Choice,
    pub prob: f64,
    pub features: Vec<u32>,
    pub expansions: Option<ExpansionDist>,
}

/// Distribution over the expandable positions of a state plus stop.
#[derive(Clone, Debug)]
pub struct SelectorDist {
    pub candidates: Vec<Candidate>,
}

impl SelectorDist {
    pub fn prob(&self, c: Choice) -> f64 {
        self.candidates
            .iter()
            .find(|k| k.choice == c)
            .map_or(0.0, |k| k.prob)
    }

    pub fn get(&self, c: Choice) -> Option<&Candidate> {
        self.candidates.iter().find(|k| k.choice == c)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Candidate {
        let mut u = rng.gen::<f64>();
        for c in &self.candidates {
            u -= c.prob;
            if u < 0.0 {
                return c;
            }
        }
        self.candidates.last().expect("stop is always present")
    }

    /// Candidates in decreasing probability; stop sorts after positions on
    /// ties, positions by index.
    pub fn ranked(&self) -> Vec<&Candidate> {
        let mut v: Vec<&Candidate> = self.candidates.iter().collect();
        v.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.choice.cmp(&b.choice)));
        v
    }

    pub(crate) fn from_scores(mut candidates: Vec<Candidate>, scores: &[f64]) -> SelectorDist {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in candidates.iter_mut().zip(&exps) {
            c.prob = e / z;
        }
        check_normalized(candidates.iter().map(|c| c.prob).sum(), "selector");
        SelectorDist { candidates }
    }
}

/// Nonterminal positions of `x` whose expansion has an emittable option,
/// with their expansion distributions.
pub fn expandable(x: &SketchState, exp: &dyn Expander) -> Result<Vec<(usize, ExpansionDist)>> {
    let mut out = Vec::new();
    for i in x.nonterminal_positions() {
        let d = exp.expansion_dist(x, i)?;
        if d.is_emittable() {
            out.push((i, d));
        }
    }
    Ok(out)
}

fn bucket<T: PartialOrd>(v: T, edges: &[T]) -> usize {
    edges.iter().take_while(|e| v >= **e).count()
}

/// Linear softmax selector over binary features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    kinds: Vec<Arc<str>>,
    weights: Vec<f64>,
}

impl SelectorModel {
    /// Zero-weight selector over the kinds known to `exp`.
    pub fn new(exp: &ExpansionModel) -> Self {
        let kinds = exp.kinds();
        let n = kinds.len() + BUCKETS + POSITION_BUCKETS + 1 + 2 * BUCKETS;
        SelectorModel {
            kinds,
            weights: vec![0.0; n],
        }
    }

    pub fn from_parts(kinds: Vec<Arc<str>>, weights: Vec<f64>) -> Result<Self> {
        let n = kinds.len() + BUCKETS + POSITION_BUCKETS + 1 + 2 * BUCKETS;
        if weights.len() != n {
            return Err(Error::Model(format!(
                "selector expects {n} weights, found {}",
                weights.len()
            )));
        }
        Ok(SelectorModel { kinds, weights })
    }

    pub fn kinds(&self) -> &[Arc<str>] {
        &self.kinds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    /// Index of the kind feature for `kind`, if known.
    pub fn kind_feature(&self, kind: &str) -> Option<usize> {
        self.kinds.binary_search_by(|k| (**k).cmp(kind)).ok()
    }

    pub fn stop_feature(&self) -> usize {
        self.kinds.len() + BUCKETS + POSITION_BUCKETS
    }

    fn entropy_base(&self) -> usize {
        self.kinds.len()
    }

    fn position_base(&self) -> usize {
        self.kinds.len() + BUCKETS
    }

    fn stop_count_base(&self) -> usize {
        self.stop_feature() + 1
    }

    fn stop_step_base(&self) -> usize {
        self.stop_count_base() + BUCKETS
    }

    /// Feature ids of every option in N(x) ∪ {stop}, paired with the
    /// expansion distribution of each position. Positions whose expansion
    /// has no emittable option are left out.
    pub fn candidates(&self, x: &SketchState, exp: &dyn Expander) -> Result<Vec<Candidate>> {
        let positions = x.nonterminal_positions();
        let len = x.items.len().max(1);
        let mut out = Vec::with_capacity(positions.len() + 1);
        for (i, d) in expandable(x, exp)? {
            let kind = x.items[i].text();
            let mut f = Vec::with_capacity(3);
            if let Some(k) = self.kind_feature(kind) {
                f.push(k as u32);
            }
            f.push((self.entropy_base() + bucket(d.entropy, &ENTROPY_EDGES)) as u32);
            let pb = (i * POSITION_BUCKETS / len).min(POSITION_BUCKETS - 1);
            f.push((self.position_base() + pb) as u32);
            out.push(Candidate {
                choice: Choice::Expand(i),
                prob: 0.0,
                features: f,
                expansions: Some(d),
            });
        }
        let stop = vec![
            self.stop_feature() as u32,
            (self.stop_count_base() + bucket(positions.len(), &COUNT_EDGES)) as u32,
            (self.stop_step_base() + bucket(x.step, &STEP_EDGES)) as u32,
        ];
        out.push(Candidate {
            choice: Choice::Stop,
            prob: 0.0,
            features: stop,
            expansions: None,
        });
        Ok(out)
    }

    fn score(&self, f: &[u32]) -> f64 {
        f.iter().map(|&k| self.weights[k as usize]).sum()
    }

    /// P_s over N(x) ∪ {stop}. Without expandable positions this is a
    /// point mass on stop.
    pub fn selector_dist(&self, x: &SketchState, exp: &dyn Expander) -> Result<SelectorDist> {
        let cands = self.candidates(x, exp)?;
        if cands.len() == 1 {
            let mut cands = cands;
            cands[0].prob = 1.0;
            return Ok(SelectorDist { candidates: cands });
        }
        let scores: Vec<f64> = cands.iter().map(|c| self.score(&c.features)).collect();
        Ok(SelectorDist::from_scores(cands, &scores))
    }

    /// Gradient of log P_s(chosen | x) with respect to the weights.
    pub fn selector_grad(
        &self,
        x: &SketchState,
        exp: &dyn Expander,
        chosen: Choice,
    ) -> Result<Vec<f64>> {
        let d = self.selector_dist(x, exp)?;
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_grad(&d, chosen, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale · ∇ log P(chosen)` for an already computed distribution.
    pub fn accumulate_grad(
        &self,
        d: &SelectorDist,
        chosen: Choice,
        scale: f64,
        g: &mut [f64],
    ) -> Result<()> {
        let c = d
            .get(chosen)
            .ok_or_else(|| Error::Model(format!("{chosen:?} is not in the support")))?;
        if d.candidates.len() == 1 {
            return Ok(());
        }
        for &k in &c.features {
            g[k as usize] += scale;
        }
        for other in &d.candidates {
            for &k in &other.features {
                g[k as usize] -= scale * other.prob;
            }
        }
        Ok(())
    }
}
