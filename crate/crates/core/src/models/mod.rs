//! Selector and expansion models, the sequence-model substrate for the
//! left-to-right baselines, and their versioned JSON serialization.

mod bundle;
mod counts;
mod expansion;
mod selector;
mod sequence;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bundle::{
    load_any, load_model, parse_model, save_model, save_sequence, sequence_to_json, ModelBundle,
    ModelMeta, SavedModel, SnapshotInfo, MODEL_VERSION,
};
pub use counts::Counts;
pub use expansion::{
    train_expansion_counts, window_at, Expansion, ExpansionDist, ExpansionModel,
    ExpansionRecord, Smoothing, Window,
};
pub use selector::{expandable, Candidate, Choice, SelectorDist, SelectorModel, StepInfo};
pub use sequence::{HeadStep, SeqChoice, SeqState, SequenceModel, SequenceVariant, StopHead};

/// Source of expansion distributions for nonterminal positions.
pub trait Expander: Sync {
    fn expansion_dist(&self, x: &SketchState, i: usize) -> crate::Result<ExpansionDist>;
}

/// One symbol of a partial derivation: a concrete token or an unexpanded
/// nonterminal (token classes count as nonterminals until a lexeme is chosen).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Item {
    #[serde(rename = "t")]
    Tok(Arc<str>),
    #[serde(rename = "n")]
    Nt(Arc<str>),
}

impl Item {
    pub fn tok(s: &str) -> Item {
        Item::Tok(Arc::from(s))
    }

    pub fn nt(s: &str) -> Item {
        Item::Nt(Arc::from(s))
    }

    pub fn is_nt(&self) -> bool {
        matches!(self, Item::Nt(_))
    }

    pub fn text(&self) -> &str {
        match self {
            Item::Tok(s) | Item::Nt(s) => s,
        }
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Item::Tok(s) => f.write_str(s),
            Item::Nt(s) => write!(f, "<{s}>"),
        }
    }
}

/// A partial derivation of the completion, plus the (read-only) context
/// tokens it continues.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SketchState {
    pub context: Arc<[Arc<str>]>,
    pub items: Vec<Item>,
    pub step: usize,
}

impl SketchState {
    pub fn new(context: &[String], items: Vec<Item>) -> Self {
        SketchState {
            context: context.iter().map(|s| Arc::from(s.as_str())).collect(),
            items,
            step: 0,
        }
    }

    /// Initial state: the context followed by a single `root` nonterminal.
    pub fn root(context: &[String], root: &str) -> Self {
        SketchState::new(context, vec![Item::nt(root)])
    }

    pub fn nonterminal_positions(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.is_nt())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_nonterminals(&self) -> bool {
        self.items.iter().any(Item::is_nt)
    }

    /// The symbol `back` places before position `i`, looking into the
    /// context once the items run out.
    pub fn before(&self, i: usize, back: usize) -> Option<Item> {
        if back <= i {
            Some(self.items[i - back].clone())
        } else {
            let k = back - i;
            self.context
                .len()
                .checked_sub(k)
                .map(|j| Item::Tok(self.context[j].clone()))
        }
    }

    pub fn after(&self, i: usize) -> Option<Item> {
        self.items.get(i + 1).cloned()
    }

    /// Replaces the nonterminal at `i` by `expansion`.
    pub fn expand(&self, i: usize, expansion: &[Item]) -> SketchState {
        let mut items = Vec::with_capacity(self.items.len() + expansion.len());
        items.extend_from_slice(&self.items[..i]);
        items.extend_from_slice(expansion);
        items.extend_from_slice(&self.items[i + 1..]);
        SketchState {
            context: self.context.clone(),
            items,
            step: self.step + 1,
        }
    }
}

impl fmt::Display for SketchState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, it) in self.items.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{it}")?;
        }
        Ok(())
    }
}

pub(crate) fn check_normalized(total: f64, what: &str) {
    debug_assert!(
        (total - 1.0).abs() < 1e-9,
        "{what} distribution sums to {total}"
    );
}
