//! Context-free grammars: the text format, structural flattening and
//! weighted random derivations used to build synthetic corpora.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use indexmap::{IndexMap, IndexSet};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on derivation-tree depth for [`sample_derivation`].
pub const DEFAULT_DEPTH_CAP: usize = 24;
const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("undefined nonterminal {0}")]
    UndefinedNonterminal(String),
    #[error("duplicate token class {0}")]
    DuplicateTokenClass(String),
    #[error("invalid pattern for token class {class}: {msg}")]
    BadPattern { class: String, msg: String },
    #[error("missing start declaration")]
    MissingStart,
    #[error("flattening cycle through {0}")]
    FlatteningCycle(String),
    #[error("derivation too deep")]
    DerivationTooDeep,
    #[error("no lexemes for token class {0}")]
    EmptyPool(String),
    #[error("bad weights: {0}")]
    BadWeights(String),
}

/// A grammar symbol. Terminals are either quoted literals or token classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Literal(String),
    Class(String),
    Nonterminal(String),
}

impl Symbol {
    pub fn name(&self) -> &str {
        match self {
            Symbol::Literal(s) | Symbol::Class(s) | Symbol::Nonterminal(s) => s,
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, Symbol::Nonterminal(_))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Literal(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
            Symbol::Class(s) | Symbol::Nonterminal(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Production {
    pub lhs: String,
    pub rhs: Vec<Symbol>,
}

impl fmt::Display for Production {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ->", self.lhs)?;
        for s in &self.rhs {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

/// A context-free grammar `(terminals, nonterminals, start, productions)`
/// plus the lexing patterns of its token classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    token_classes: IndexMap<String, String>,
    start: String,
    nonterminals: IndexSet<String>,
    productions: Vec<Production>,
}

fn is_nonterminal_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn syntax(line: usize, msg: impl Into<String>) -> GrammarError {
    GrammarError::Syntax {
        line,
        msg: msg.into(),
    }
}

/// Splits a production body into raw symbol strings, keeping quoted literals intact.
fn split_symbols(body: &str, line: usize) -> Result<Vec<RawSym>, GrammarError> {
    let mut out = Vec::new();
    let mut chars = body.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut lit = String::new();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some(e) => lit.push(e),
                        None => return Err(syntax(line, "dangling escape in literal")),
                    },
                    '"' => {
                        closed = true;
                        break;
                    }
                    _ => lit.push(c),
                }
            }
            if !closed {
                return Err(syntax(line, "unterminated literal"));
            }
            if lit.is_empty() {
                return Err(syntax(line, "empty literal"));
            }
            out.push(RawSym::Literal(lit));
        } else if c == '|' {
            chars.next();
            out.push(RawSym::Bar);
        } else {
            let mut name = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() || c == '|' || c == '"' {
                    break;
                }
                name.push(c);
                chars.next();
            }
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(syntax(line, format!("bad symbol {name:?}")));
            }
            out.push(RawSym::Name(name));
        }
    }
    Ok(out)
}

enum RawSym {
    Literal(String),
    Name(String),
    Bar,
}

impl Grammar {
    /// Builds and validates a grammar from its parts.
    pub fn new(
        token_classes: IndexMap<String, String>,
        start: impl Into<String>,
        productions: Vec<Production>,
    ) -> Result<Grammar, GrammarError> {
        let start = start.into();
        let mut nonterminals = IndexSet::new();
        for p in &productions {
            if !is_nonterminal_name(&p.lhs) || token_classes.contains_key(&p.lhs) {
                return Err(GrammarError::Syntax {
                    line: 0,
                    msg: format!("bad nonterminal name {}", p.lhs),
                });
            }
            if p.rhs.is_empty() {
                return Err(GrammarError::Syntax {
                    line: 0,
                    msg: format!("empty production for {}", p.lhs),
                });
            }
            nonterminals.insert(p.lhs.clone());
        }
        if !nonterminals.contains(&start) {
            return Err(GrammarError::UndefinedNonterminal(start));
        }
        for p in &productions {
            for s in &p.rhs {
                match s {
                    Symbol::Nonterminal(n) if !nonterminals.contains(n) => {
                        return Err(GrammarError::UndefinedNonterminal(n.clone()))
                    }
                    Symbol::Class(c) if !token_classes.contains_key(c) => {
                        return Err(GrammarError::UndefinedNonterminal(c.clone()))
                    }
                    _ => {}
                }
            }
        }
        Ok(Grammar {
            token_classes,
            start,
            nonterminals,
            productions,
        })
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    pub fn productions(&self) -> &[Production] {
        &self.productions
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.nonterminals.iter().map(String::as_str)
    }

    pub fn is_nonterminal(&self, name: &str) -> bool {
        self.nonterminals.contains(name)
    }

    pub fn token_classes(&self) -> &IndexMap<String, String> {
        &self.token_classes
    }

    pub fn is_class(&self, name: &str) -> bool {
        self.token_classes.contains_key(name)
    }

    /// All terminal symbols occurring in some production, in first-use order.
    pub fn terminals(&self) -> Vec<Symbol> {
        let mut seen = IndexSet::new();
        for p in &self.productions {
            for s in &p.rhs {
                if s.is_terminal() {
                    seen.insert(s.clone());
                }
            }
        }
        seen.into_iter().collect()
    }

    /// Literal terminals, deduplicated.
    pub fn literals(&self) -> Vec<String> {
        self.terminals()
            .into_iter()
            .filter_map(|s| match s {
                Symbol::Literal(l) => Some(l),
                _ => None,
            })
            .collect()
    }

    /// Indices of the productions whose left-hand side is `nt`.
    pub fn productions_of<'a>(&'a self, nt: &'a str) -> impl Iterator<Item = (usize, &'a Production)> + 'a {
        self.productions
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.lhs == nt)
    }

    /// Nonterminals not reachable from the start symbol. These are legal
    /// (e.g. a file-level root used only for parsing) but worth a warning.
    pub fn unreachable(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.start.as_str()];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            for (_, p) in self.productions_of(n) {
                for s in &p.rhs {
                    if let Symbol::Nonterminal(m) = s {
                        stack.push(m);
                    }
                }
            }
        }
        self.nonterminals
            .iter()
            .filter(|n| !seen.contains(n.as_str()))
            .cloned()
            .collect()
    }

    /// The same grammar with a different start symbol.
    pub fn with_start(&self, start: &str) -> Result<Grammar, GrammarError> {
        Grammar::new(self.token_classes.clone(), start, self.productions.clone())
    }
}

/// Normalized serialization: token classes, start, then one line per
/// nonterminal with its alternatives in production order.
impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, pat) in &self.token_classes {
            writeln!(f, "token {name} /{pat}/")?;
        }
        writeln!(f, "start {}", self.start)?;
        for nt in &self.nonterminals {
            write!(f, "{nt} ->")?;
            for (k, (_, p)) in self.productions_of(nt).enumerate() {
                if k > 0 {
                    write!(f, " |")?;
                }
                for s in &p.rhs {
                    write!(f, " {s}")?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Parses the line-oriented grammar format. Nonterminals unreachable from
/// the start symbol are logged as warnings.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let g = parse_grammar_quiet(text)?;
    for n in g.unreachable() {
        log::warn!("nonterminal {n} is unreachable from start {}", g.start());
    }
    Ok(g)
}

pub(crate) fn parse_grammar_quiet(text: &str) -> Result<Grammar, GrammarError> {
    let mut classes: IndexMap<String, String> = IndexMap::new();
    let mut start: Option<(String, usize)> = None;
    // (lhs, raw body symbols, line)
    let mut raw: Vec<(String, Vec<RawSym>, usize)> = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("token ") {
            let rest = rest.trim();
            let (name, pat) = rest
                .split_once(char::is_whitespace)
                .ok_or_else(|| syntax(lineno, "expected `token NAME /pattern/`"))?;
            let pat = pat.trim();
            if pat.len() < 2 || !pat.starts_with('/') || !pat.ends_with('/') {
                return Err(syntax(lineno, "pattern must be delimited by slashes"));
            }
            if !name.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
                || !name.starts_with(|c: char| c.is_ascii_uppercase())
            {
                return Err(syntax(lineno, format!("token class {name} must be ALL-CAPS")));
            }
            let pattern = pat[1..pat.len() - 1].to_string();
            regex::Regex::new(&pattern).map_err(|e| GrammarError::BadPattern {
                class: name.to_string(),
                msg: e.to_string(),
            })?;
            if classes.insert(name.to_string(), pattern).is_some() {
                return Err(GrammarError::DuplicateTokenClass(name.to_string()));
            }
        } else if let Some(rest) = trimmed.strip_prefix("start ") {
            let name = rest.trim();
            if !is_nonterminal_name(name) {
                return Err(syntax(lineno, format!("bad start symbol {name:?}")));
            }
            if start.is_some() {
                return Err(syntax(lineno, "start declared twice"));
            }
            start = Some((name.to_string(), lineno));
        } else if let Some(rest) = trimmed.strip_prefix('|') {
            let Some(last) = raw.last() else {
                return Err(syntax(lineno, "continuation line without a production"));
            };
            let lhs = last.0.clone();
            let mut body = vec![RawSym::Bar];
            body.extend(split_symbols(rest, lineno)?);
            raw.push((lhs, body, lineno));
        } else if let Some((lhs, body)) = trimmed.split_once("->") {
            let lhs = lhs.trim();
            if !is_nonterminal_name(lhs) {
                return Err(syntax(lineno, format!("bad nonterminal name {lhs:?}")));
            }
            raw.push((lhs.to_string(), split_symbols(body, lineno)?, lineno));
        } else {
            return Err(syntax(lineno, format!("unrecognized line {trimmed:?}")));
        }
    }

    let (start, _) = start.ok_or(GrammarError::MissingStart)?;
    let defined: HashSet<&str> = raw.iter().map(|(l, _, _)| l.as_str()).collect();

    let mut productions = Vec::new();
    for (lhs, body, lineno) in &raw {
        if classes.contains_key(lhs) {
            return Err(syntax(*lineno, format!("{lhs} is a token class")));
        }
        let mut alts: Vec<Vec<Symbol>> = vec![Vec::new()];
        let mut leading_bar = matches!(body.first(), Some(RawSym::Bar));
        for s in body {
            match s {
                RawSym::Bar => {
                    if leading_bar {
                        leading_bar = false;
                        continue;
                    }
                    alts.push(Vec::new());
                }
                RawSym::Literal(l) => alts.last_mut().unwrap().push(Symbol::Literal(l.clone())),
                RawSym::Name(n) => {
                    let sym = if classes.contains_key(n) {
                        Symbol::Class(n.clone())
                    } else if defined.contains(n.as_str()) {
                        Symbol::Nonterminal(n.clone())
                    } else {
                        return Err(GrammarError::UndefinedNonterminal(n.clone()));
                    };
                    alts.last_mut().unwrap().push(sym);
                }
            }
        }
        for rhs in alts {
            if rhs.is_empty() {
                return Err(syntax(*lineno, format!("empty alternative for {lhs}")));
            }
            productions.push(Production {
                lhs: lhs.clone(),
                rhs,
            });
        }
    }
    if !defined.contains(start.as_str()) {
        return Err(GrammarError::UndefinedNonterminal(start));
    }
    Grammar::new(classes, start, productions)
}

/// Inlines every non-start nonterminal that has exactly one production,
/// repeating until no such nonterminal remains. Duplicate productions that
/// arise from inlining are dropped.
pub fn flatten(g: &Grammar) -> Result<Grammar, GrammarError> {
    let mut prods: Vec<Production> = g.productions.clone();
    loop {
        let mut counts: IndexMap<&str, usize> = IndexMap::new();
        for p in &prods {
            *counts.entry(p.lhs.as_str()).or_default() += 1;
        }
        let mut cyclic = None;
        let mut target = None;
        for (nt, &c) in &counts {
            if c != 1 || *nt == g.start {
                continue;
            }
            let p = prods.iter().find(|p| p.lhs == *nt).unwrap();
            if p.rhs.iter().any(|s| matches!(s, Symbol::Nonterminal(n) if n == nt)) {
                cyclic.get_or_insert_with(|| nt.to_string());
                continue;
            }
            target = Some(nt.to_string());
            break;
        }
        let Some(nt) = target else {
            if let Some(nt) = cyclic {
                return Err(GrammarError::FlatteningCycle(nt));
            }
            break;
        };
        let pos = prods.iter().position(|p| p.lhs == nt).unwrap();
        let body = prods.remove(pos).rhs;
        let mut next: Vec<Production> = Vec::with_capacity(prods.len());
        let mut seen: HashSet<Production> = HashSet::new();
        for p in prods {
            let rhs: Vec<Symbol> = p
                .rhs
                .into_iter()
                .flat_map(|s| match s {
                    Symbol::Nonterminal(ref n) if *n == nt => body.clone(),
                    other => vec![other],
                })
                .collect();
            let np = Production { lhs: p.lhs, rhs };
            if seen.insert(np.clone()) {
                next.push(np);
            }
        }
        prods = next;
    }
    Grammar::new(g.token_classes.clone(), g.start.clone(), prods)
}

/// Per-production sampling weights, indexed like `Grammar::productions`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductionWeights(Vec<f64>);

impl ProductionWeights {
    pub fn uniform(g: &Grammar) -> Self {
        ProductionWeights(vec![1.0; g.productions.len()])
    }

    /// Weights given by production display strings (`Expr -> Expr "+" Term`);
    /// unlisted productions get weight 1.
    pub fn from_pairs(g: &Grammar, pairs: &[(&str, f64)]) -> Result<Self, GrammarError> {
        let index: HashMap<String, usize> = g
            .productions
            .iter()
            .enumerate()
            .map(|(i, p)| (p.to_string(), i))
            .collect();
        let mut w = vec![1.0; g.productions.len()];
        for (key, weight) in pairs {
            let i = index
                .get(*key)
                .ok_or_else(|| GrammarError::BadWeights(format!("no production `{key}`")))?;
            w[*i] = *weight;
        }
        ProductionWeights::new(g, w)
    }

    pub fn new(g: &Grammar, w: Vec<f64>) -> Result<Self, GrammarError> {
        if w.len() != g.productions.len() {
            return Err(GrammarError::BadWeights(format!(
                "expected {} weights, got {}",
                g.productions.len(),
                w.len()
            )));
        }
        if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(GrammarError::BadWeights(format!("weight {x} is not positive")));
        }
        Ok(ProductionWeights(w))
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// Weighted lexeme lists per token class.
#[derive(Clone, Debug, Default)]
pub struct LexemePools {
    pools: HashMap<String, (Vec<String>, WeightedIndex<f64>)>,
}

impl LexemePools {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: &str, entries: Vec<(String, f64)>) -> Result<(), GrammarError> {
        if entries.is_empty() {
            return Err(GrammarError::EmptyPool(class.to_string()));
        }
        let (lex, w): (Vec<String>, Vec<f64>) = entries.into_iter().unzip();
        let dist = WeightedIndex::new(w).map_err(|e| GrammarError::BadWeights(e.to_string()))?;
        self.pools.insert(class.to_string(), (lex, dist));
        Ok(())
    }

    pub fn contains(&self, class: &str) -> bool {
        self.pools.contains_key(class)
    }

    fn sample<R: Rng + ?Sized>(&self, class: &str, rng: &mut R) -> Result<&str, GrammarError> {
        let (lex, dist) = self
            .pools
            .get(class)
            .ok_or_else(|| GrammarError::EmptyPool(class.to_string()))?;
        Ok(&lex[dist.sample(rng)])
    }
}

/// What a derivation step rewrote a position with.
#[derive(Clone, Debug, PartialEq)]
pub enum DerivationChoice {
    Production(usize),
    Lexeme(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivationStep {
    /// Sentential form before the step; class symbols stand for not-yet-chosen lexemes.
    pub state: Vec<Symbol>,
    pub position: usize,
    pub choice: DerivationChoice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    pub tokens: Vec<String>,
    pub trace: Vec<DerivationStep>,
}

impl Derivation {
    /// Re-applies the trace from the start symbol and returns the final terminal string.
    pub fn replay(&self, g: &Grammar) -> Vec<String> {
        let mut state = vec![Symbol::Nonterminal(g.start.clone())];
        for step in &self.trace {
            let repl = match &step.choice {
                DerivationChoice::Production(i) => g.productions[*i].rhs.clone(),
                DerivationChoice::Lexeme(l) => vec![Symbol::Literal(l.clone())],
            };
            state.splice(step.position..=step.position, repl);
        }
        state.into_iter().map(|s| s.name().to_string()).collect()
    }
}

/// Samples a leftmost derivation from the start symbol. Class leaves are
/// filled from `pools`. Derivations deeper than `depth_cap` are resampled up
/// to 50 times.
pub fn sample_derivation<R: Rng + ?Sized>(
    g: &Grammar,
    weights: &ProductionWeights,
    pools: &LexemePools,
    rng: &mut R,
    depth_cap: usize,
) -> Result<Derivation, GrammarError> {
    sample_inner(g, weights, pools, rng, depth_cap, true)
}

/// Like [`sample_derivation`] but without recording the trace.
pub fn sample_tokens<R: Rng + ?Sized>(
    g: &Grammar,
    weights: &ProductionWeights,
    pools: &LexemePools,
    rng: &mut R,
    depth_cap: usize,
) -> Result<Vec<String>, GrammarError> {
    sample_inner(g, weights, pools, rng, depth_cap, false).map(|d| d.tokens)
}

fn sample_inner<R: Rng + ?Sized>(
    g: &Grammar,
    weights: &ProductionWeights,
    pools: &LexemePools,
    rng: &mut R,
    depth_cap: usize,
    record: bool,
) -> Result<Derivation, GrammarError> {
    let by_lhs: HashMap<&str, Vec<usize>> = {
        let mut m: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, p) in g.productions.iter().enumerate() {
            m.entry(p.lhs.as_str()).or_default().push(i);
        }
        m
    };
    for c in g.token_classes.keys() {
        if !pools.contains(c) && g.terminals().contains(&Symbol::Class(c.clone())) {
            return Err(GrammarError::EmptyPool(c.clone()));
        }
    }
    'attempt: for _ in 0..MAX_RESAMPLES {
        // (symbol, depth); the leftmost unresolved symbol is found by scanning.
        let mut state: Vec<(Symbol, usize)> = vec![(Symbol::Nonterminal(g.start.clone()), 0)];
        let mut trace = Vec::new();
        let mut pos = 0;
        while pos < state.len() {
            let (sym, depth) = state[pos].clone();
            match sym {
                Symbol::Literal(_) => pos += 1,
                Symbol::Class(ref c) => {
                    let lex = pools.sample(c, rng)?.to_string();
                    if record {
                        trace.push(DerivationStep {
                            state: state.iter().map(|(s, _)| s.clone()).collect(),
                            position: pos,
                            choice: DerivationChoice::Lexeme(lex.clone()),
                        });
                    }
                    state[pos] = (Symbol::Literal(lex), depth);
                    pos += 1;
                }
                Symbol::Nonterminal(ref n) => {
                    if depth >= depth_cap {
                        continue 'attempt;
                    }
                    let options = &by_lhs[n.as_str()];
                    let dist = WeightedIndex::new(options.iter().map(|&i| weights.get(i)))
                        .map_err(|e| GrammarError::BadWeights(e.to_string()))?;
                    let pi = options[dist.sample(rng)];
                    if record {
                        trace.push(DerivationStep {
                            state: state.iter().map(|(s, _)| s.clone()).collect(),
                            position: pos,
                            choice: DerivationChoice::Production(pi),
                        });
                    }
                    let rhs = g.productions[pi].rhs.iter().map(|s| (s.clone(), depth + 1));
                    state.splice(pos..=pos, rhs);
                }
            }
        }
        let tokens = state.into_iter().map(|(s, _)| s.name().to_string()).collect();
        return Ok(Derivation { tokens, trace });
    }
    Err(GrammarError::DerivationTooDeep)
}

/// Every terminal string of length at most `max_len` derivable from the
/// start symbol, with class terminals left as their class names. Intended
/// for small test grammars.
pub fn enumerate_language(g: &Grammar, max_len: usize) -> BTreeSet<Vec<String>> {
    let mut out = BTreeSet::new();
    let mut seen: HashSet<Vec<Symbol>> = HashSet::new();
    let mut stack = vec![vec![Symbol::Nonterminal(g.start.clone())]];
    while let Some(form) = stack.pop() {
        // ε-free: every symbol yields at least one terminal.
        if form.len() > max_len || !seen.insert(form.clone()) {
            continue;
        }
        match form.iter().position(|s| !s.is_terminal()) {
            None => {
                out.insert(form.iter().map(|s| s.name().to_string()).collect());
            }
            Some(i) => {
                for (_, p) in g.productions_of(form[i].name()) {
                    let mut next = form[..i].to_vec();
                    next.extend(p.rhs.iter().cloned());
                    next.extend(form[i + 1..].iter().cloned());
                    stack.push(next);
                }
            }
        }
    }
    out
}
