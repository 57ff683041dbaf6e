//! Synthetic MiniLang corpus. Each file is a run of sampled statements;
//! identifier and string leaves come either from a per-file pool (with
//! probability `p_local`) or from a Zipf-skewed global pool.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_examples, parse, Lexer, DEFAULT_CONTEXT_LEN};
use crate::grammar::{
    flatten, parse_grammar_quiet, sample_tokens, Grammar, LexemePools, ProductionWeights,
    DEFAULT_DEPTH_CAP,
};
use crate::Error;

pub const MINILANG_SOURCE: &str = include_str!("../../assets/minilang.g");
/// File-level nonterminal of MiniLang (unreachable from `Statement`).
pub const MINILANG_FILE_ROOT: &str = "Program";

const ZIPF_EXPONENT: f64 = 1.2;

const GLOBAL_IDENTS: &[&str] = &[
    "self", "x", "i", "data", "result", "args", "value", "config", "name", "path", "y", "items",
    "count", "options", "node", "key", "index", "parser", "logger", "response", "request", "client",
    "buffer", "size", "total", "os", "sys", "np", "ap", "model", "state", "item", "line", "text",
    "output", "input", "cache", "target", "source", "status", "append", "get", "add_argument",
    "format", "join", "split", "update", "run", "load", "save", "info", "len", "str", "int",
    "print", "range", "open", "read", "write", "close",
];

const GLOBAL_STRINGS: &[&str] = &[
    "\"\"", "\"utf-8\"", "\"r\"", "\"w\"", "\"name\"", "\"id\"", "\"--verbose\"", "\"store_true\"",
    "\"data\"", "\"path\"", "\"error\"", "\"ok\"", "\"value\"", "\"type\"", "\"default\"",
    "\"config.json\"", "\"--output\"", "\"help\"", "\"key\"", "\"a\"",
];

const GLOBAL_NUMBERS: &[&str] = &[
    "0", "1", "2", "10", "3", "100", "5", "4", "8", "16", "255", "1000", "6", "7", "9", "32",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "zu", "te", "po", "ni", "sha", "vo", "de", "gu", "fi", "bo", "ye",
    "xa", "qu", "je", "wi", "ho", "mar", "tel", "dro", "sun", "vek",
];

/// Sampling weights for MiniLang productions, keyed by display form.
const MINILANG_WEIGHTS: &[(&str, f64)] = &[
    ("Statement -> Assignment", 0.6),
    ("Statement -> AugAssignment", 0.05),
    ("Statement -> ExprStatement", 0.35),
    ("AugOp -> \"+=\"", 0.8),
    ("AugOp -> \"-=\"", 0.2),
    ("Target -> IDENT", 0.75),
    ("Target -> Primary \".\" IDENT", 0.2),
    ("Target -> Primary \"[\" Expr \"]\"", 0.05),
    ("Expr -> Expr AddOp Term", 0.1),
    ("Expr -> Term", 0.9),
    ("AddOp -> \"+\"", 0.75),
    ("AddOp -> \"-\"", 0.25),
    ("Term -> Term MulOp Factor", 0.05),
    ("Term -> Factor", 0.95),
    ("MulOp -> \"*\"", 0.7),
    ("MulOp -> \"/\"", 0.3),
    ("Factor -> Primary", 0.7),
    ("Factor -> NUMBER", 0.12),
    ("Factor -> STRING", 0.15),
    ("Factor -> ParenExpr", 0.03),
    ("Primary -> IDENT", 0.55),
    ("Primary -> Call", 0.3),
    ("Primary -> Primary \".\" IDENT", 0.13),
    ("Primary -> Primary \"[\" Expr \"]\"", 0.02),
    ("Call -> Primary \"(\" ArgList \")\"", 0.7),
    ("Call -> Primary \"(\" \")\"", 0.3),
    ("ArgList -> Arg", 0.7),
    ("ArgList -> Arg \",\" ArgList", 0.3),
    ("Arg -> Expr", 0.85),
    ("Arg -> KeywordArg", 0.15),
];

/// The built-in MiniLang grammar, unflattened. Its file-level `Program`
/// is deliberately unreachable from `Statement`.
pub fn minilang() -> Grammar {
    parse_grammar_quiet(MINILANG_SOURCE).expect("built-in grammar parses")
}

pub fn minilang_weights(g: &Grammar) -> ProductionWeights {
    ProductionWeights::from_pairs(g, MINILANG_WEIGHTS).unwrap_or_else(|_| ProductionWeights::uniform(g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_files: usize,
    pub statements_min: usize,
    pub statements_max: usize,
    pub seed: u64,
    /// Probability that an IDENT/STRING leaf is drawn from the file-local pool.
    pub p_local: f64,
    pub context_len: usize,
    pub depth_cap: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_files: 1000,
            statements_min: 8,
            statements_max: 12,
            seed: 1,
            p_local: 0.3,
            context_len: DEFAULT_CONTEXT_LEN,
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub context: Vec<String>,
    pub target: Vec<String>,
    pub file_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<CorpusRecord>,
    pub valid: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Valid,
    Test,
}

/// 70-10-20 split on file ids.
fn split_of(file_id: usize) -> Split {
    match file_id % 10 {
        0..=6 => Split::Train,
        7 => Split::Valid,
        _ => Split::Test,
    }
}

fn zipf(n: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-ZIPF_EXPONENT)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn local_name(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for _ in 0..3 {
        s.push_str(SYLLABLES.choose(rng).unwrap());
    }
    s.push_str(&rng.gen_range(10..100).to_string());
    s
}

fn mixture(global: &[&str], local: &[String], p_local: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if p_local < 1.0 {
        for (lex, z) in global.iter().zip(zipf(global.len())) {
            out.push((lex.to_string(), (1.0 - p_local) * z));
        }
    }
    if p_local > 0.0 {
        for lex in local {
            out.push((lex.clone(), p_local / local.len() as f64));
        }
    }
    out
}

struct FileGen<'a> {
    cfg: &'a CorpusConfig,
    raw: &'a Grammar,
    flat: Grammar,
    lexer: Lexer,
    weights: &'a ProductionWeights,
}

impl FileGen<'_> {
    fn records(&self, file_id: usize) -> Result<Vec<CorpusRecord>, Error> {
        let cfg = self.cfg;
        let mut rng = crate::stream_rng(cfg.seed, file_id as u64);
        let n = rng.gen_range(cfg.statements_min..=cfg.statements_max);
        let idents: Vec<String> = (0..rng.gen_range(4..=8)).map(|_| local_name(&mut rng)).collect();
        let strings: Vec<String> = (0..rng.gen_range(2..=4))
            .map(|_| format!("\"{}\"", local_name(&mut rng)))
            .collect();
        let mut pools = LexemePools::new();
        pools.insert("IDENT", mixture(GLOBAL_IDENTS, &idents, cfg.p_local))?;
        pools.insert("STRING", mixture(GLOBAL_STRINGS, &strings, cfg.p_local))?;
        pools.insert("NUMBER", mixture(GLOBAL_NUMBERS, &[], 0.0))?;

        let mut tokens: Vec<String> = Vec::new();
        for _ in 0..n {
            tokens.extend(sample_tokens(self.raw, self.weights, &pools, &mut rng, cfg.depth_cap)?);
            tokens.push(";".to_string());
        }
        let text = super::detokenize(&tokens);
        let lexed = self.lexer.tokenize(&text)?;
        let tree = parse(&lexed, &self.flat, MINILANG_FILE_ROOT)?;
        let examples = extract_examples(&tree, self.raw.start(), cfg.context_len);
        let mut recs: Vec<CorpusRecord> = examples
            .into_iter()
            .map(|e| CorpusRecord {
                context: e.context,
                target: e.target,
                file_id,
            })
            .collect();
        if split_of(file_id) == Split::Test && !recs.is_empty() {
            let pick = rng.gen_range(0..recs.len());
            recs = vec![recs.swap_remove(pick)];
        }
        Ok(recs)
    }
}

/// Generates a corpus from the (unflattened) grammar `g`. Files are parsed
/// with the flattened grammar under [`MINILANG_FILE_ROOT`], and one record
/// is emitted per start-symbol node; test files contribute one sampled
/// statement each.
pub fn gen_corpus(cfg: &CorpusConfig, g: &Grammar, weights: &ProductionWeights) -> Result<Corpus, Error> {
    if !(0.0..=1.0).contains(&cfg.p_local) {
        return Err(Error::Config(format!("p_local {} outside [0, 1]", cfg.p_local)));
    }
    if cfg.statements_min == 0 || cfg.statements_min > cfg.statements_max {
        return Err(Error::Config("bad statements-per-file range".into()));
    }
    let flat = flatten(g)?;
    let gen = FileGen {
        cfg,
        raw: g,
        lexer: Lexer::new(&flat),
        flat,
        weights,
    };
    let ids: Vec<usize> = (0..cfg.num_files).collect();
    let per_file = crate::par_map(&ids, |_, &i| gen.records(i));
    let mut corpus = Corpus::default();
    for (file_id, recs) in per_file.into_iter().enumerate() {
        let dest = match split_of(file_id) {
            Split::Train => &mut corpus.train,
            Split::Valid => &mut corpus.valid,
            Split::Test => &mut corpus.test,
        };
        dest.extend(recs?);
    }
    Ok(corpus)
}

fn write_jsonl(path: &Path, recs: &[CorpusRecord]) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&dir.join("valid.jsonl"), &corpus.valid)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>, Error> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_cover_productions() {
        let g = minilang();
        let w = ProductionWeights::from_pairs(&g, MINILANG_WEIGHTS);
        assert!(w.is_ok(), "{w:?}");
    }

    #[test]
    fn splits_are_70_10_20() {
        let counts = (0..1000).fold([0usize; 3], |mut acc, i| {
            acc[match split_of(i) {
                Split::Train => 0,
                Split::Valid => 1,
                Split::Test => 2,
            }] += 1;
            acc
        });
        assert_eq!(counts, [700, 100, 200]);
    }

    #[test]
    fn local_names_are_not_global() {
        let mut rng = crate::stream_rng(0, 0);
        for _ in 0..100 {
            let n = local_name(&mut rng);
            assert!(!GLOBAL_IDENTS.contains(&n.as_str()));
        }
    }
}
