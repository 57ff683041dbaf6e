use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::counts::{Counts, Row};
use super::{check_normalized, Expander, Item, SketchState};
use crate::{Error, Result};

/// Smoothing constants of the expansion model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Smoothing {
    pub discount: f64,
    pub alpha: f64,
    pub lambda_unk: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            discount: 0.5,
            alpha: 0.1,
            lambda_unk: 0.05,
        }
    }
}

/// Neighbors of the expanded position: two before, one after.
pub type Window = (Option<Item>, Option<Item>, Option<Item>);

pub fn window_at(x: &SketchState, i: usize) -> Window {
    (x.before(i, 2), x.before(i, 1), x.after(i))
}

/// One supervised observation for count training.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpansionRecord {
    Expand {
        kind: Arc<str>,
        window: Window,
        expansion: Vec<Item>,
        weight: f64,
    },
    Lexeme {
        class: Arc<str>,
        text: Arc<str>,
    },
}

pub type Expansion = Arc<[Item]>;

/// A distribution over replacement sequences for one nonterminal.
/// `options` is sorted by decreasing probability; `unknown` is the mass
/// assigned to lexemes that cannot be emitted.
#[derive(Clone, Debug)]
pub struct ExpansionDist {
    pub options: Arc<[(Expansion, f64)]>,
    pub unknown: f64,
    pub entropy: f64,
}

impl ExpansionDist {
    pub fn new(mut options: Vec<(Expansion, f64)>, unknown: f64) -> Self {
        options.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        check_normalized(options.iter().map(|o| o.1).sum::<f64>() + unknown, "expansion");
        let entropy = entropy(options.iter().map(|o| o.1).chain([unknown]));
        ExpansionDist {
            options: options.into(),
            unknown,
            entropy,
        }
    }

    pub fn is_emittable(&self) -> bool {
        !self.options.is_empty()
    }

    pub fn top(&self, n: usize) -> &[(Expansion, f64)] {
        &self.options[..n.min(self.options.len())]
    }

    pub fn prob_of(&self, e: &[Item]) -> f64 {
        self.options
            .iter()
            .find(|o| &*o.0 == e)
            .map_or(0.0, |o| o.1)
    }

    /// Samples among the emittable options, renormalized.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let known = 1.0 - self.unknown;
        if self.options.is_empty() || known <= 0.0 {
            return None;
        }
        let mut u = rng.gen::<f64>() * known;
        for (k, o) in self.options.iter().enumerate() {
            u -= o.1;
            if u < 0.0 {
                return Some(k);
            }
        }
        Some(self.options.len() - 1)
    }
}

pub(crate) fn entropy(ps: impl IntoIterator<Item = f64>) -> f64 {
    ps.into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[derive(Clone, Debug)]
struct KindTable {
    inventory: Vec<Expansion>,
    unigram: Row,
    by_prev: Counts<Option<Item>>,
    by_window: Counts<Window>,
}

impl KindTable {
    fn new(inventory: Vec<Expansion>, discount: f64) -> Self {
        KindTable {
            inventory,
            unigram: Row::default(),
            by_prev: Counts::with_discount(discount),
            by_window: Counts::with_discount(discount),
        }
    }

    fn index_of(&self, e: &[Item]) -> Option<u32> {
        self.inventory
            .binary_search_by(|x| (**x).cmp(e))
            .ok()
            .map(|k| k as u32)
    }
}

#[derive(Clone, Debug, Default)]
struct LexemeTable {
    counts: BTreeMap<Arc<str>, f64>,
    dist: Option<ExpansionDist>,
}

impl LexemeTable {
    fn rebuild(&mut self, lambda_unk: f64) {
        let total: f64 = self.counts.values().sum();
        let options = self
            .counts
            .iter()
            .filter(|(_, &c)| c > 0.0)
            .map(|(t, &c)| {
                let e: Expansion = Arc::from(vec![Item::Tok(t.clone())]);
                (e, (1.0 - lambda_unk) * c / total)
            })
            .collect();
        self.dist = Some(ExpansionDist::new(options, lambda_unk));
    }
}

/// Count-based expansion model with context backoff and per-class lexeme
/// unigrams.
#[derive(Clone, Debug)]
pub struct ExpansionModel {
    smoothing: Smoothing,
    kinds: BTreeMap<Arc<str>, KindTable>,
    leaves: BTreeMap<Arc<str>, LexemeTable>,
}

impl ExpansionModel {
    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    /// All kinds (nonterminals and leaf classes) in sorted order.
    pub fn kinds(&self) -> Vec<Arc<str>> {
        let mut v: Vec<_> = self.kinds.keys().chain(self.leaves.keys()).cloned().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn is_leaf(&self, kind: &str) -> bool {
        self.leaves.contains_key(kind)
    }

    pub fn inventory(&self, kind: &str) -> Option<&[Expansion]> {
        self.kinds.get(kind).map(|t| t.inventory.as_slice())
    }

    pub fn expansion_dist(&self, x: &SketchState, i: usize) -> Result<ExpansionDist> {
        let Item::Nt(kind) = &x.items[i] else {
            return Err(Error::Model(format!("position {i} is not a nonterminal")));
        };
        if let Some(leaf) = self.leaves.get(kind) {
            return Ok(leaf.dist.clone().expect("lexeme table built"));
        }
        let table = self
            .kinds
            .get(kind)
            .ok_or_else(|| Error::Model(format!("unknown nonterminal {kind}")))?;
        let window = window_at(x, i);
        Ok(self.dist_for(table, &window))
    }

    fn dist_for(&self, t: &KindTable, w: &Window) -> ExpansionDist {
        let Smoothing {
            discount, alpha, ..
        } = self.smoothing;
        let v = t.inventory.len();
        let norm = t.unigram.total() + alpha * v as f64;
        let mut dist: Vec<f64> = (0..v as u32)
            .map(|id| (t.unigram.get(id) + alpha) / norm)
            .collect();
        if let Some(row) = t.by_prev.row(&w.1) {
            row.interpolate_dense(discount, &mut dist);
        }
        if let Some(row) = t.by_window.row(w) {
            row.interpolate_dense(discount, &mut dist);
        }
        let options = t.inventory.iter().cloned().zip(dist).collect();
        ExpansionDist::new(options, 0.0)
    }

    /// Moves `step` of each row's mass onto `expansion` at every order
    /// (off it when negative), keeping row totals. Rows never observed are
    /// left alone, as are the leaf lexeme tables.
    pub fn add_fractional(&mut self, kind: &str, window: &Window, expansion: &[Item], step: f64) {
        let Some(t) = self.kinds.get_mut(kind) else {
            return;
        };
        let Some(id) = t.index_of(expansion) else {
            return;
        };
        t.unigram.shift(id, step);
        t.by_prev.shift(&window.1, id, step);
        t.by_window.shift(window, id, step);
    }

    pub(crate) fn export(&self) -> ExportedCounts {
        let mut expansions = Vec::new();
        for (kind, t) in &self.kinds {
            let inv: Vec<Vec<Item>> = t.inventory.iter().map(|e| e.to_vec()).collect();
            let mut rows = vec![CountRow {
                order: 0,
                context: Vec::new(),
                counts: t.unigram.entries().to_vec(),
            }];
            for (k, r) in t.by_prev.sorted() {
                rows.push(CountRow {
                    order: 1,
                    context: vec![k.clone()],
                    counts: r.entries().to_vec(),
                });
            }
            for (k, r) in t.by_window.sorted() {
                rows.push(CountRow {
                    order: 2,
                    context: vec![k.0.clone(), k.1.clone(), k.2.clone()],
                    counts: r.entries().to_vec(),
                });
            }
            expansions.push(KindCounts {
                kind: kind.to_string(),
                inventory: inv,
                rows,
            });
        }
        let lexemes = self
            .leaves
            .iter()
            .map(|(c, t)| {
                let v = t.counts.iter().map(|(s, &n)| (s.to_string(), n)).collect();
                (c.to_string(), v)
            })
            .collect();
        ExportedCounts {
            expansions,
            lexemes,
        }
    }

    pub(crate) fn import(smoothing: Smoothing, data: &ExportedCounts) -> Result<Self> {
        let mut kinds = BTreeMap::new();
        for kc in &data.expansions {
            let mut t = KindTable::new(
                kc.inventory.iter().map(|e| Arc::from(e.as_slice())).collect(),
                smoothing.discount,
            );
            if t.inventory.windows(2).any(|w| w[0] >= w[1]) || t.inventory.iter().any(|e| e.is_empty())
            {
                return Err(Error::Model(format!("bad inventory for {}", kc.kind)));
            }
            for row in &kc.rows {
                for &(id, c) in &row.counts {
                    if id as usize >= t.inventory.len() || c < 0.0 {
                        return Err(Error::Model(format!("bad count row for {}", kc.kind)));
                    }
                    match (row.order, row.context.as_slice()) {
                        (0, []) => t.unigram.add(id, c),
                        (1, [p]) => t.by_prev.add(p, id, c),
                        (2, [a, b, n]) => t.by_window.add(&(a.clone(), b.clone(), n.clone()), id, c),
                        _ => return Err(Error::Model(format!("bad count row for {}", kc.kind))),
                    }
                }
            }
            kinds.insert(Arc::from(kc.kind.as_str()), t);
        }
        let mut leaves = BTreeMap::new();
        for (class, lex) in &data.lexemes {
            let mut t = LexemeTable::default();
            for (s, n) in lex {
                *t.counts.entry(Arc::from(s.as_str())).or_default() += n;
            }
            t.rebuild(smoothing.lambda_unk);
            leaves.insert(Arc::from(class.as_str()), t);
        }
        if kinds.is_empty() {
            return Err(Error::Model("empty training corpus".into()));
        }
        Ok(ExpansionModel {
            smoothing,
            kinds,
            leaves,
        })
    }
}

impl Expander for ExpansionModel {
    fn expansion_dist(&self, x: &SketchState, i: usize) -> Result<ExpansionDist> {
        ExpansionModel::expansion_dist(self, x, i)
    }
}

/// Serialized form of the count tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct ExportedCounts {
    pub expansions: Vec<KindCounts>,
    pub lexemes: BTreeMap<String, Vec<(String, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct KindCounts {
    pub kind: String,
    pub inventory: Vec<Vec<Item>>,
    pub rows: Vec<CountRow>,
}

/// Counts of one conditioning context: order 0 has no context, order 1 the
/// preceding symbol, order 2 the full window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct CountRow {
    pub order: u8,
    pub context: Vec<Option<Item>>,
    pub counts: Vec<(u32, f64)>,
}

/// Builds an expansion model from supervised records. Counting commutes,
/// so the result does not depend on record order.
pub fn train_expansion_counts<I>(records: I, smoothing: Smoothing) -> Result<ExpansionModel>
where
    I: IntoIterator<Item = ExpansionRecord>,
{
    let mut observed: BTreeMap<Arc<str>, Vec<(Window, Vec<Item>, f64)>> = BTreeMap::new();
    let mut lexemes: BTreeMap<Arc<str>, BTreeMap<Arc<str>, f64>> = BTreeMap::new();
    for r in records {
        match r {
            ExpansionRecord::Expand {
                kind,
                window,
                expansion,
                weight,
            } => {
                if expansion.is_empty() {
                    return Err(Error::Model(format!("empty expansion for {kind}")));
                }
                observed.entry(kind).or_default().push((window, expansion, weight));
            }
            ExpansionRecord::Lexeme { class, text } => {
                *lexemes.entry(class).or_default().entry(text).or_default() += 1.0;
            }
        }
    }
    let mut kinds = BTreeMap::new();
    for (kind, obs) in observed {
        let mut inventory: Vec<Expansion> = obs.iter().map(|o| Arc::from(o.1.as_slice())).collect();
        inventory.sort();
        inventory.dedup();
        let index: HashMap<Expansion, u32> = inventory
            .iter()
            .enumerate()
            .map(|(k, e)| (e.clone(), k as u32))
            .collect();
        let mut t = KindTable::new(inventory, smoothing.discount);
        for (window, e, w) in &obs {
            let id = index[e.as_slice()];
            t.unigram.add(id, *w);
            t.by_prev.add(&window.1, id, *w);
            t.by_window.add(window, id, *w);
        }
        kinds.insert(kind, t);
    }
    let leaves = lexemes
        .into_iter()
        .map(|(c, counts)| {
            let mut t = LexemeTable { counts, dist: None };
            t.rebuild(smoothing.lambda_unk);
            (c, t)
        })
        .collect();
    if kinds.is_empty() {
        return Err(Error::Model("empty training corpus".into()));
    }
    Ok(ExpansionModel {
        smoothing,
        kinds,
        leaves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: &str, prev: Option<&str>, e: &[Item]) -> ExpansionRecord {
        ExpansionRecord::Expand {
            kind: Arc::from(kind),
            window: (None, prev.map(Item::tok), None),
            expansion: e.to_vec(),
            weight: 1.0,
        }
    }

    fn state(prev: &str, kind: &str) -> SketchState {
        SketchState::new(&[prev.to_string()], vec![Item::nt(kind)])
    }

    #[test]
    fn single_expansion_is_certain() {
        let m = train_expansion_counts([rec("A", None, &[Item::tok("a")])], Smoothing::default())
            .unwrap();
        let d = m.expansion_dist(&state(";", "A"), 0).unwrap();
        assert_eq!(d.options.len(), 1);
        assert!((d.options[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_lower_bound() {
        let s = Smoothing::default();
        let recs = vec![
            rec("A", None, &[Item::tok("a")]),
            rec("A", None, &[Item::tok("a")]),
            rec("A", None, &[Item::tok("a")]),
            rec("A", None, &[Item::tok("b")]),
            rec("A", None, &[Item::tok("c")]),
        ];
        let m = train_expansion_counts(recs, s).unwrap();
        let d = m.expansion_dist(&state("zz", "A"), 0).unwrap();
        let norm = 5.0 + s.alpha * 3.0;
        let pa = d.prob_of(&[Item::tok("a")]);
        assert!((pa - (3.0 + s.alpha) / norm).abs() < 1e-12);
        assert!(pa >= 1.0 - s.alpha * 2.0 / norm - 2.0 / norm);
    }

    #[test]
    fn backoff_removal_reproduces_lower_order() {
        let recs = vec![
            rec("A", Some("="), &[Item::tok("a")]),
            rec("A", Some("="), &[Item::tok("b")]),
            rec("A", Some("("), &[Item::tok("b")]),
        ];
        let m = train_expansion_counts(recs, Smoothing::default()).unwrap();
        let seen = m.expansion_dist(&state("=", "A"), 0).unwrap();
        let unseen = m.expansion_dist(&state("+", "A"), 0).unwrap();
        assert_ne!(seen.prob_of(&[Item::tok("a")]), unseen.prob_of(&[Item::tok("a")]));
        let t = &m.kinds["A"];
        let norm = 3.0 + 0.1 * 2.0;
        assert!((unseen.prob_of(&[Item::tok("a")]) - (t.unigram.get(0) + 0.1) / norm).abs() < 1e-12);
    }

    #[test]
    fn lexemes_keep_unknown_mass() {
        let recs = vec![
            rec("S", None, &[Item::nt("IDENT")]),
            ExpansionRecord::Lexeme {
                class: Arc::from("IDENT"),
                text: Arc::from("x"),
            },
        ];
        let m = train_expansion_counts(recs, Smoothing::default()).unwrap();
        let d = m.expansion_dist(&state(";", "IDENT"), 0).unwrap();
        assert!((d.options[0].1 - 0.95).abs() < 1e-12);
        assert!((d.unknown - 0.05).abs() < 1e-12);
        assert!(m.is_leaf("IDENT"));
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(train_expansion_counts(Vec::new(), Smoothing::default()).is_err());
    }

    #[test]
    fn unknown_kind_is_error() {
        let m = train_expansion_counts([rec("A", None, &[Item::tok("a")])], Smoothing::default())
            .unwrap();
        let err = m.expansion_dist(&state(";", "B"), 0).unwrap_err();
        assert!(err.to_string().contains("unknown nonterminal"));
    }

    #[test]
    fn fractional_updates_clip() {
        let mut m =
            train_expansion_counts([rec("A", None, &[Item::tok("a")]), rec("A", None, &[Item::tok("b")])], Smoothing::default())
                .unwrap();
        let w = (None, None, None);
        m.add_fractional("A", &w, &[Item::tok("a")], -10.0);
        let d = m.expansion_dist(&state(";", "A"), 0).unwrap();
        let total: f64 = d.options.iter().map(|o| o.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.prob_of(&[Item::tok("b")]) > 0.9);
    }
}
