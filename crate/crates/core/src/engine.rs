//! Sampling and beam-search decoding over partial derivations.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;

use crate::metrics::{Sketch, SketchItem};
use crate::models::{
    expandable, Candidate, Choice, Expander, Expansion, Item, ModelBundle, SelectorDist,
    SelectorModel, SketchState, StepInfo,
};
use crate::Result;

pub const DEFAULT_MAX_STEPS: usize = 64;

/// Anything that yields a distribution over N(x) ∪ {stop}.
pub trait Selector: Sync {
    fn dist(&self, x: &SketchState, exp: &dyn Expander, info: &StepInfo) -> Result<SelectorDist>;
}

impl Selector for SelectorModel {
    fn dist(&self, x: &SketchState, exp: &dyn Expander, _: &StepInfo) -> Result<SelectorDist> {
        self.selector_dist(x, exp)
    }
}

fn point_stop() -> Candidate {
    Candidate {
        choice: Choice::Stop,
        prob: 1.0,
        features: Vec::new(),
        expansions: None,
    }
}

fn uniform_over(x: &SketchState, exp: &dyn Expander, with_stop: bool) -> Result<SelectorDist> {
    let mut cands: Vec<Candidate> = expandable(x, exp)?
        .into_iter()
        .map(|(i, d)| Candidate {
            choice: Choice::Expand(i),
            prob: 0.0,
            features: Vec::new(),
            expansions: Some(d),
        })
        .collect();
    if with_stop || cands.is_empty() {
        cands.push(point_stop());
    }
    let p = 1.0 / cands.len() as f64;
    for c in &mut cands {
        c.prob = p;
    }
    Ok(SelectorDist { candidates: cands })
}

/// Uniform choice among positions, optionally including stop.
#[derive(Clone, Copy, Debug)]
pub struct UniformSelector {
    pub allow_stop: bool,
}

impl Selector for UniformSelector {
    fn dist(&self, x: &SketchState, exp: &dyn Expander, _: &StepInfo) -> Result<SelectorDist> {
        uniform_over(x, exp, self.allow_stop)
    }
}

/// Uniform choice among positions until the accumulated expansion
/// log-probability drops below `tau`, then stop.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdSelector {
    pub tau: f64,
}

impl Selector for ThresholdSelector {
    fn dist(&self, x: &SketchState, exp: &dyn Expander, info: &StepInfo) -> Result<SelectorDist> {
        if info.expansion_logprob < self.tau {
            return Ok(SelectorDist {
                candidates: vec![point_stop()],
            });
        }
        uniform_over(x, exp, false)
    }
}

/// Wraps a selector and removes stop from its support while positions remain.
#[derive(Clone, Copy, Debug)]
pub struct NoStop<'a, S: ?Sized>(pub &'a S);

impl<S: Selector + ?Sized> Selector for NoStop<'_, S> {
    fn dist(&self, x: &SketchState, exp: &dyn Expander, info: &StepInfo) -> Result<SelectorDist> {
        let mut d = self.0.dist(x, exp, info)?;
        let keep: f64 = d
            .candidates
            .iter()
            .filter(|c| c.choice != Choice::Stop)
            .map(|c| c.prob)
            .sum();
        if keep <= 0.0 {
            if d.candidates.iter().any(|c| c.choice != Choice::Stop) {
                return uniform_over(x, exp, false);
            }
            return Ok(SelectorDist {
                candidates: vec![point_stop()],
            });
        }
        d.candidates.retain(|c| c.choice != Choice::Stop);
        for c in &mut d.candidates {
            c.prob /= keep;
        }
        Ok(d)
    }
}

/// Replaces every remaining nonterminal by a hole.
pub fn nonterminals_to_holes(x: &SketchState) -> Sketch {
    Sketch::new(
        x.items
            .iter()
            .map(|it| match it {
                Item::Tok(t) => SketchItem::Token(t.to_string()),
                Item::Nt(_) => SketchItem::Hole,
            })
            .collect(),
    )
}

/// One selector decision and, unless it was stop, the expansion applied.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub state: SketchState,
    pub choice: Choice,
    pub expansion: Option<Expansion>,
    pub selector_logprob: f64,
    pub expansion_logprob: f64,
}

/// The full record of one generation.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
    pub final_state: SketchState,
    pub sketch: Sketch,
}

impl GenerationTrace {
    pub fn logprob(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.selector_logprob + s.expansion_logprob)
            .sum()
    }

    /// Checks that each state is its predecessor with exactly the chosen
    /// nonterminal rewritten.
    pub fn is_consistent(&self) -> bool {
        let mut states: Vec<&SketchState> = self.steps.iter().map(|s| &s.state).collect();
        states.push(&self.final_state);
        for (k, step) in self.steps.iter().enumerate() {
            let next = states[k + 1];
            let ok = match (step.choice, &step.expansion) {
                (Choice::Stop, None) => next.items == step.state.items,
                (Choice::Expand(i), Some(e)) => {
                    step.state.items.get(i).is_some_and(Item::is_nt)
                        && next.items == step.state.expand(i, e).items
                }
                _ => false,
            };
            if !ok {
                return false;
            }
        }
        self.sketch == nonterminals_to_holes(&self.final_state)
    }
}

/// How a generation picks its choices.
pub enum Decode<'r, R: Rng + ?Sized> {
    Sample(&'r mut R),
    Greedy,
}

/// Runs the generative loop: choose a position or stop, expand, repeat.
/// `on_step` sees every selector distribution together with the choice made.
pub fn generate_with<S, R, F>(
    sel: &S,
    exp: &dyn Expander,
    x0: SketchState,
    mut decode: Decode<'_, R>,
    max_steps: usize,
    mut on_step: F,
) -> Result<GenerationTrace>
where
    S: Selector + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&SelectorDist, Choice),
{
    let mut x = x0;
    let mut steps = Vec::new();
    let mut info = StepInfo::default();
    for _ in 0..max_steps {
        let dist = sel.dist(&x, exp, &info)?;
        let cand = match &mut decode {
            Decode::Sample(rng) => dist.sample(*rng),
            Decode::Greedy => dist.ranked()[0],
        };
        on_step(&dist, cand.choice);
        let ps = cand.prob.ln();
        match cand.choice {
            Choice::Stop => {
                steps.push(TraceStep {
                    state: x.clone(),
                    choice: Choice::Stop,
                    expansion: None,
                    selector_logprob: ps,
                    expansion_logprob: 0.0,
                });
                break;
            }
            Choice::Expand(i) => {
                let owned;
                let d = match &cand.expansions {
                    Some(d) => d,
                    None => {
                        owned = exp.expansion_dist(&x, i)?;
                        &owned
                    }
                };
                let k = match &mut decode {
                    Decode::Sample(rng) => d.sample(*rng),
                    Decode::Greedy => (!d.options.is_empty()).then_some(0),
                };
                let Some(k) = k else {
                    break;
                };
                let (e, pe) = d.options[k].clone();
                let next = x.expand(i, &e);
                info.expansion_logprob += pe.ln();
                steps.push(TraceStep {
                    state: std::mem::replace(&mut x, next),
                    choice: cand.choice,
                    expansion: Some(e),
                    selector_logprob: ps,
                    expansion_logprob: pe.ln(),
                });
            }
        }
    }
    let sketch = nonterminals_to_holes(&x);
    Ok(GenerationTrace {
        steps,
        final_state: x,
        sketch,
    })
}

/// Samples one generation.
pub fn generate<S, R>(
    sel: &S,
    exp: &dyn Expander,
    x0: SketchState,
    rng: &mut R,
    max_steps: usize,
) -> Result<(Sketch, GenerationTrace)>
where
    S: Selector + ?Sized,
    R: Rng + ?Sized,
{
    let t = generate_with(sel, exp, x0, Decode::Sample(rng), max_steps, |_, _| {})?;
    Ok((t.sketch.clone(), t))
}

/// Follows the most probable choice at every step.
pub fn greedy<S: Selector + ?Sized>(
    sel: &S,
    exp: &dyn Expander,
    x0: SketchState,
    max_steps: usize,
) -> Result<(Sketch, GenerationTrace)> {
    let t = generate_with::<S, rand::rngs::mock::StepRng, _>(
        sel,
        exp,
        x0,
        Decode::Greedy,
        max_steps,
        |_, _| {},
    )?;
    Ok((t.sketch.clone(), t))
}

/// Beam width, expansions per position, positions per state, step cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub max_steps: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            k: 5,
            n: 1,
            m: usize::MAX,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    state: SketchState,
    score: f64,
    expansion_logprob: f64,
    done: bool,
}

fn sketch_tokens(x: &SketchState) -> Vec<String> {
    nonterminals_to_holes(x).to_tokens()
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.state.step.cmp(&b.state.step))
        .then_with(|| sketch_tokens(&a.state).cmp(&sketch_tokens(&b.state)))
}

/// Two-step beam search: the top `m` selector choices of each hypothesis,
/// the top `n` expansions of each chosen position, pruned to `k` per round.
/// Returns distinct sketches, best first.
pub fn beam_search<S: Selector + ?Sized>(
    sel: &S,
    exp: &dyn Expander,
    x0: SketchState,
    cfg: BeamConfig,
) -> Result<Vec<(Sketch, f64)>> {
    let mut beam = vec![Hypothesis {
        state: x0,
        score: 0.0,
        expansion_logprob: 0.0,
        done: false,
    }];
    let mut rounds = 0;
    while beam.iter().any(|h| !h.done) && rounds < cfg.max_steps {
        rounds += 1;
        let mut next = Vec::new();
        for h in beam {
            if h.done {
                next.push(h);
                continue;
            }
            let info = StepInfo {
                expansion_logprob: h.expansion_logprob,
            };
            let dist = sel.dist(&h.state, exp, &info)?;
            for cand in dist.ranked().into_iter().take(cfg.m) {
                if cand.prob <= 0.0 {
                    continue;
                }
                let ps = cand.prob.ln();
                let Choice::Expand(i) = cand.choice else {
                    next.push(Hypothesis {
                        state: h.state.clone(),
                        score: h.score + ps,
                        expansion_logprob: h.expansion_logprob,
                        done: true,
                    });
                    continue;
                };
                let owned;
                let d = match &cand.expansions {
                    Some(d) => d,
                    None => {
                        owned = exp.expansion_dist(&h.state, i)?;
                        &owned
                    }
                };
                for (e, pe) in d.top(cfg.n) {
                    if *pe <= 0.0 {
                        continue;
                    }
                    next.push(Hypothesis {
                        state: h.state.expand(i, e),
                        score: h.score + ps + pe.ln(),
                        expansion_logprob: h.expansion_logprob + pe.ln(),
                        done: false,
                    });
                }
            }
        }
        next.sort_by(rank);
        next.truncate(cfg.k);
        beam = next;
    }
    beam.sort_by(rank);
    let mut out: Vec<(Sketch, f64)> = Vec::with_capacity(beam.len());
    for h in beam {
        let s = nonterminals_to_holes(&h.state);
        if !out.iter().any(|o| o.0 == s) {
            out.push((s, h.score));
        }
    }
    Ok(out)
}

impl ModelBundle {
    pub fn root_state(&self, context: &[String]) -> SketchState {
        let start = context.len().saturating_sub(self.meta.context_len);
        SketchState::root(&context[start..], &self.meta.root)
    }

    pub fn beam(&self, context: &[String], cfg: BeamConfig) -> Result<Vec<(Sketch, f64)>> {
        beam_search(&self.selector, &self.expansion, self.root_state(context), cfg)
    }

    pub fn greedy(&self, context: &[String], max_steps: usize) -> Result<(Sketch, GenerationTrace)> {
        greedy(&self.selector, &self.expansion, self.root_state(context), max_steps)
    }
}

/// Renders a trace one state per line, the chosen nonterminal in brackets
/// followed by its expansion, then the final sketch.
pub fn format_trace(t: &GenerationTrace) -> String {
    let mut out = String::new();
    for (k, step) in t.steps.iter().enumerate() {
        let mut line = format!("x({k}):");
        for (j, it) in step.state.items.iter().enumerate() {
            if step.choice == Choice::Expand(j) {
                let _ = write!(line, " [{it}]");
            } else {
                let _ = write!(line, " {it}");
            }
        }
        match (&step.choice, &step.expansion) {
            (Choice::Expand(i), Some(e)) => {
                let body: Vec<String> = e.iter().map(|x| x.to_string()).collect();
                let _ = write!(
                    line,
                    "    i={i} -> {}    logp={:.4}",
                    body.join(" "),
                    step.selector_logprob + step.expansion_logprob
                );
            }
            _ => {
                let _ = write!(line, "    i=stop    logp={:.4}", step.selector_logprob);
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    let _ = writeln!(out, "sketch: {}", t.sketch);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ExpansionDist, SelectorDist};
    use std::sync::Arc;

    /// Selector and expander that replay a fixed script indexed by step.
    struct Script {
        choices: Vec<Choice>,
        expansions: Vec<Vec<Item>>,
    }

    impl Expander for Script {
        fn expansion_dist(&self, x: &SketchState, _: usize) -> Result<ExpansionDist> {
            let e = self.expansions.get(x.step).cloned().unwrap_or_else(|| vec![Item::tok("?")]);
            Ok(ExpansionDist::new(vec![(Arc::from(e), 1.0)], 0.0))
        }
    }

    impl Selector for Script {
        fn dist(&self, x: &SketchState, exp: &dyn Expander, _: &StepInfo) -> Result<SelectorDist> {
            let c = self.choices.get(x.step).copied().unwrap_or(Choice::Stop);
            let expansions = match c {
                Choice::Expand(i) => Some(exp.expansion_dist(x, i)?),
                Choice::Stop => None,
            };
            Ok(SelectorDist {
                candidates: vec![Candidate {
                    choice: c,
                    prob: 1.0,
                    features: Vec::new(),
                    expansions,
                }],
            })
        }
    }

    fn items(s: &str) -> Vec<Item> {
        s.split_whitespace()
            .map(|w| match w.strip_prefix('<').and_then(|w| w.strip_suffix('>')) {
                Some(n) => Item::nt(n),
                None => Item::tok(w),
            })
            .collect()
    }

    /// The worked example: `r = <Expr>` derived to `r = x * ( ■ - foo ( args ) )`.
    fn worked_example() -> (Script, SketchState) {
        let choices = [0, 2, 3, 5, 5, 7, 7, 0, 0]
            .iter()
            .map(|&i| Choice::Expand(i))
            .chain([Choice::Stop])
            .collect();
        let expansions = [
            "<Expr> * <ParenthesizedExpr>",
            "( <Expr> )",
            "<Expr> - <Expr>",
            "<Identifier> ( <ArgList> )",
            "foo",
            "<Identifier>",
            "args",
            "<Identifier>",
            "x",
        ]
        .iter()
        .map(|s| items(s))
        .collect();
        let x0 = SketchState::new(&["r".into(), "=".into()], items("<Expr>"));
        (
            Script {
                choices,
                expansions,
            },
            x0,
        )
    }

    #[test]
    fn worked_example_replays() {
        let (script, x0) = worked_example();
        let (sketch, trace) = greedy(&script, &script, x0, DEFAULT_MAX_STEPS).unwrap();
        assert_eq!(sketch.to_string(), "x * ( ■ - foo ( args ) )");
        assert_eq!(trace.steps.len(), 10);
        assert!(trace.is_consistent());
        let text = format_trace(&trace);
        assert_eq!(text.lines().count(), 11);
        assert!(text.lines().next().unwrap().starts_with("x(0): [<Expr>]"));
        assert!(text.lines().nth(9).unwrap().contains("i=stop"));
        assert_eq!(text.lines().last().unwrap(), "sketch: x * ( ■ - foo ( args ) )");
    }

    #[test]
    fn immediate_stop() {
        let script = Script {
            choices: vec![Choice::Stop],
            expansions: Vec::new(),
        };
        let x0 = SketchState::new(&[], items("<S> ;"));
        let (sketch, trace) = greedy(&script, &script, x0.clone(), 5).unwrap();
        assert_eq!(sketch, nonterminals_to_holes(&x0));
        assert_eq!(format_trace(&trace).lines().count(), 2);
    }

    #[test]
    fn holes_from_nonterminals() {
        let x = SketchState::new(&[], items("a <E> b"));
        assert_eq!(nonterminals_to_holes(&x).to_string(), "a ■ b");
        let y = SketchState::new(&[], items("a b"));
        assert_eq!(nonterminals_to_holes(&y).holes(), 0);
    }

    #[test]
    fn max_steps_bounds_generation() {
        let script = Script {
            choices: vec![Choice::Expand(0); 100],
            expansions: vec![items("<A> <A>"); 100],
        };
        let x0 = SketchState::new(&[], items("<A>"));
        let (sketch, trace) = greedy(&script, &script, x0, 7).unwrap();
        assert_eq!(trace.steps.len(), 7);
        assert_eq!(sketch.len(), 8);
    }
}
