use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::expansion::ExportedCounts;
use super::sequence::ExportedSequence;
use super::{ExpansionModel, SelectorModel, SequenceModel, Smoothing};
use crate::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

/// Settings a bundle was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub root: String,
    pub context_len: usize,
    pub smoothing: Smoothing,
    pub seed: u64,
}

/// Validation reward of the best snapshot; a saved bundle is its own
/// best snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub reward: Option<f64>,
    pub epoch: usize,
}

/// Selector and expansion model with their metadata.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub meta: ModelMeta,
    pub selector: SelectorModel,
    pub expansion: ExpansionModel,
    pub snapshot: SnapshotInfo,
}

#[derive(Serialize, Deserialize)]
struct SelectorSection {
    kinds: Vec<String>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleDoc {
    version: u32,
    meta: ModelMeta,
    selector_weights: SelectorSection,
    expansion_counts: Vec<super::expansion::KindCounts>,
    lexeme_counts: std::collections::BTreeMap<String, Vec<(String, f64)>>,
    snapshot: SnapshotInfo,
}

#[derive(Serialize, Deserialize)]
struct SequenceDoc {
    version: u32,
    sequence: ExportedSequence,
}

/// A model file of either family.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Bundle(ModelBundle),
    Sequence(SequenceModel),
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        let counts = self.expansion.export();
        let doc = BundleDoc {
            version: MODEL_VERSION,
            meta: self.meta.clone(),
            selector_weights: SelectorSection {
                kinds: self.selector.kinds().iter().map(|k| k.to_string()).collect(),
                weights: self.selector.weights().to_vec(),
            },
            expansion_counts: counts.expansions,
            lexeme_counts: counts.lexemes,
            snapshot: self.snapshot.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    fn from_doc(doc: BundleDoc) -> Result<Self> {
        let counts = ExportedCounts {
            expansions: doc.expansion_counts,
            lexemes: doc.lexeme_counts,
        };
        let expansion = ExpansionModel::import(doc.meta.smoothing, &counts)?;
        let kinds = doc
            .selector_weights
            .kinds
            .iter()
            .map(|k| Arc::from(k.as_str()))
            .collect();
        let selector = SelectorModel::from_parts(kinds, doc.selector_weights.weights)?;
        Ok(ModelBundle {
            meta: doc.meta,
            selector,
            expansion,
            snapshot: doc.snapshot,
        })
    }
}

fn check_version(v: &Value) -> Result<()> {
    let found = v
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Model("model file has no version".into()))?;
    if found != u64::from(MODEL_VERSION) {
        return Err(Error::Model(format!(
            "unsupported model version {found} (expected {MODEL_VERSION})"
        )));
    }
    Ok(())
}

pub fn parse_model(text: &str) -> Result<SavedModel> {
    let v: Value = serde_json::from_str(text)?;
    check_version(&v)?;
    if v.get("sequence").is_some() {
        let doc: SequenceDoc = serde_json::from_value(v)?;
        Ok(SavedModel::Sequence(SequenceModel::import(&doc.sequence)?))
    } else {
        let doc: BundleDoc = serde_json::from_value(v)?;
        Ok(SavedModel::Bundle(ModelBundle::from_doc(doc)?))
    }
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_json()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    match load_any(path)? {
        SavedModel::Bundle(b) => Ok(b),
        SavedModel::Sequence(_) => Err(Error::Model(format!(
            "{} holds a sequence baseline, not a grammar bundle",
            path.display()
        ))),
    }
}

pub fn sequence_to_json(m: &SequenceModel) -> Result<String> {
    let doc = SequenceDoc {
        version: MODEL_VERSION,
        sequence: m.export(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn save_sequence(m: &SequenceModel, path: &Path) -> Result<()> {
    fs::write(path, sequence_to_json(m)?)?;
    Ok(())
}

pub fn load_any(path: &Path) -> Result<SavedModel> {
    parse_model(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        train_expansion_counts, ExpansionRecord, Item, SequenceVariant, SketchState,
    };

    fn bundle() -> ModelBundle {
        let recs = vec![
            ExpansionRecord::Expand {
                kind: Arc::from("S"),
                window: (None, Some(Item::tok(";")), None),
                expansion: vec![Item::nt("IDENT"), Item::tok("=")],
                weight: 1.0,
            },
            ExpansionRecord::Expand {
                kind: Arc::from("S"),
                window: (Some(Item::tok("a")), Some(Item::tok(";")), Some(Item::tok("x"))),
                expansion: vec![Item::tok("f")],
                weight: 1.0,
            },
            ExpansionRecord::Lexeme {
                class: Arc::from("IDENT"),
                text: Arc::from("x"),
            },
        ];
        let smoothing = Smoothing::default();
        let mut expansion = train_expansion_counts(recs, smoothing).unwrap();
        expansion.add_fractional("S", &(None, Some(Item::tok(";")), None), &[Item::tok("f")], 0.37);
        let mut selector = SelectorModel::new(&expansion);
        selector.weights_mut()[1] = 0.1 + 0.2;
        ModelBundle {
            meta: ModelMeta {
                root: "S".into(),
                context_len: 200,
                smoothing,
                seed: 3,
            },
            selector,
            expansion,
            snapshot: SnapshotInfo {
                reward: Some(0.25),
                epoch: 2,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bundle();
        let text = b.to_json().unwrap();
        let SavedModel::Bundle(c) = parse_model(&text).unwrap() else {
            panic!()
        };
        assert_eq!(c.to_json().unwrap(), text);
        assert_eq!(c.selector, b.selector);
        let x = SketchState::new(&["a".into(), ";".into()], vec![Item::nt("S")]);
        let d1 = b.expansion.expansion_dist(&x, 0).unwrap();
        let d2 = c.expansion.expansion_dist(&x, 0).unwrap();
        for (p, q) in d1.options.iter().zip(d2.options.iter()) {
            assert_eq!(p.0, q.0);
            assert_eq!(p.1.to_bits(), q.1.to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = bundle().to_json().unwrap().replacen("\"version\":1", "\"version\":0", 1);
        let err = parse_model(&text).unwrap_err();
        assert!(err.to_string().contains("unsupported model version 0"));
    }

    #[test]
    fn corrupt_file_is_rejected() {
        assert!(parse_model("{\"version\":1,").is_err());
        assert!(parse_model("{\"version\":1}").is_err());
    }

    #[test]
    fn sequence_round_trip() {
        let pairs = vec![(vec!["a".to_string()], vec!["x".to_string(), "y".to_string()])];
        let m = SequenceModel::train(&pairs, SequenceVariant::Stop, 0.5, 0.1).unwrap();
        let text = sequence_to_json(&m).unwrap();
        let SavedModel::Sequence(n) = parse_model(&text).unwrap() else {
            panic!()
        };
        assert_eq!(sequence_to_json(&n).unwrap(), text);
    }
}
