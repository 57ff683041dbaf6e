//! Earley recognizer with deterministic parse-tree extraction.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::lexer::{Token, TokenClass};
use super::SyntaxError;
use crate::grammar::{Grammar, Symbol};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseTree {
    pub symbol: Symbol,
    /// Production used at an internal node.
    pub production: Option<usize>,
    pub children: Vec<ParseTree>,
    /// Set on terminal leaves only.
    pub token: Option<Token>,
}

impl ParseTree {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Leaf tokens, left to right.
    pub fn leaves(&self) -> Vec<&Token> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Token>) {
        if let Some(t) = &self.token {
            out.push(t);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }

    pub fn leaf_texts(&self) -> Vec<String> {
        self.leaves().into_iter().map(|t| t.text.clone()).collect()
    }

    /// Number of leaves, without allocating.
    pub fn width(&self) -> usize {
        if self.token.is_some() {
            1
        } else {
            self.children.iter().map(ParseTree::width).sum()
        }
    }

    /// Checks that every internal node matches its production and every
    /// leaf token matches its terminal.
    pub fn is_valid(&self, g: &Grammar) -> bool {
        match (&self.symbol, &self.token) {
            (Symbol::Literal(l), Some(t)) => t.text == *l && self.children.is_empty(),
            (Symbol::Class(c), Some(t)) => {
                t.class == TokenClass::Class(c.clone()) && self.children.is_empty()
            }
            (Symbol::Nonterminal(n), None) => {
                let Some(p) = self.production.and_then(|i| g.productions().get(i)) else {
                    return false;
                };
                p.lhs == *n
                    && p.rhs.len() == self.children.len()
                    && p.rhs.iter().zip(&self.children).all(|(s, c)| *s == c.symbol)
                    && self.children.iter().all(|c| c.is_valid(g))
            }
            _ => false,
        }
    }
}

type Item = (u32, u32, u32); // (production, dot, origin)

struct Chart<'g> {
    tokens: &'g [Token],
    rhs: Vec<&'g [Symbol]>,
    sets: Vec<HashSet<Item>>,
    /// (lhs, origin) -> completed productions, per end position.
    completed: Vec<HashMap<(&'g str, u32), Vec<u32>>>,
}

fn term_matches(sym: &Symbol, tok: &Token) -> bool {
    match sym {
        Symbol::Literal(l) => tok.class == TokenClass::Literal && tok.text == *l,
        Symbol::Class(c) => matches!(&tok.class, TokenClass::Class(k) if k == c),
        Symbol::Nonterminal(_) => false,
    }
}

impl<'g> Chart<'g> {
    fn recognize(g: &'g Grammar, tokens: &'g [Token], root: &str) -> Result<Self, SyntaxError> {
        let n = tokens.len();
        let rhs: Vec<&[Symbol]> = g.productions().iter().map(|p| p.rhs.as_slice()).collect();
        let mut by_lhs: HashMap<&str, Vec<u32>> = HashMap::new();
        for (i, p) in g.productions().iter().enumerate() {
            by_lhs.entry(p.lhs.as_str()).or_default().push(i as u32);
        }
        let mut sets: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
        let mut completed: Vec<HashMap<(&str, u32), Vec<u32>>> = vec![HashMap::new(); n + 1];

        // Items waiting on a nonterminal, per set.
        let mut waiting: Vec<HashMap<&str, Vec<Item>>> = vec![HashMap::new(); n + 1];
        let mut agenda: Vec<Item> = by_lhs
            .get(root)
            .map(|ps| ps.iter().map(|&p| (p, 0, 0)).collect())
            .unwrap_or_default();
        for k in 0..=n {
            let mut queue: Vec<Item> = std::mem::take(&mut agenda);
            let mut qi = 0;
            let mut order: Vec<Item> = Vec::new();
            while qi < queue.len() {
                let item = queue[qi];
                qi += 1;
                if !sets[k].insert(item) {
                    continue;
                }
                order.push(item);
                let (p, dot, origin) = item;
                let body = rhs[p as usize];
                if (dot as usize) < body.len() {
                    if let Symbol::Nonterminal(nt) = &body[dot as usize] {
                        waiting[k].entry(nt.as_str()).or_default().push(item);
                        for &q in by_lhs.get(nt.as_str()).into_iter().flatten() {
                            queue.push((q, 0, k as u32));
                        }
                    }
                } else {
                    // ε-free grammars never complete an item that started at k.
                    let lhs = g.productions()[p as usize].lhs.as_str();
                    completed[k].entry((lhs, origin)).or_default().push(p);
                    if let Some(parents) = waiting[origin as usize].get(lhs) {
                        queue.extend(parents.iter().map(|&(pp, pd, po)| (pp, pd + 1, po)));
                    }
                }
            }
            if k < n {
                for &(p, dot, origin) in &order {
                    let body = rhs[p as usize];
                    if (dot as usize) < body.len() && term_matches(&body[dot as usize], &tokens[k]) {
                        agenda.push((p, dot + 1, origin));
                    }
                }
                if agenda.is_empty() {
                    return Err(SyntaxError::Unparseable { index: k });
                }
            }
        }
        let chart = Chart {
            tokens,
            rhs,
            sets,
            completed,
        };
        if chart.derives_nt(root, 0, n) {
            Ok(chart)
        } else {
            Err(SyntaxError::Unparseable { index: n })
        }
    }

    fn derives_nt(&self, nt: &str, i: usize, j: usize) -> bool {
        self.completed[j].contains_key(&(nt, i as u32))
    }

    fn derives(&self, sym: &Symbol, i: usize, j: usize) -> bool {
        match sym {
            Symbol::Nonterminal(nt) => self.derives_nt(nt, i, j),
            t => j == i + 1 && term_matches(t, &self.tokens[i]),
        }
    }

    fn build(&self, nt: &str, i: usize, j: usize, stack: &mut Vec<(String, usize, usize)>) -> Option<ParseTree> {
        let key = (nt.to_string(), i, j);
        if stack.contains(&key) {
            return None;
        }
        stack.push(key);
        let mut prods: Vec<u32> = self.completed[j]
            .get(&(nt, i as u32))
            .cloned()
            .unwrap_or_default();
        prods.sort_unstable();
        prods.dedup();
        let mut result = None;
        for p in prods {
            if let Some(children) = self.build_children(p, i, j, stack) {
                result = Some(ParseTree {
                    symbol: Symbol::Nonterminal(nt.to_string()),
                    production: Some(p as usize),
                    children,
                    token: None,
                });
                break;
            }
        }
        stack.pop();
        result
    }

    fn build_children(
        &self,
        p: u32,
        i: usize,
        j: usize,
        stack: &mut Vec<(String, usize, usize)>,
    ) -> Option<Vec<ParseTree>> {
        let body = self.rhs[p as usize];
        let k = body.len();
        // reach[d]: end positions e of the prefix X1..Xd from which the rest
        // of the body can still derive up to j.
        let mut reach: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
        reach[k].push(j);
        for d in (1..k).rev() {
            let mut r = Vec::new();
            for e in (i + d)..j {
                if self.sets[e].contains(&(p, d as u32, i as u32))
                    && reach[d + 1].iter().any(|&e2| self.derives(&body[d], e, e2))
                {
                    r.push(e);
                }
            }
            reach[d] = r;
        }
        let mut children = Vec::with_capacity(k);
        if self.assign(body, 0, i, &reach, &mut children, stack) {
            Some(children)
        } else {
            None
        }
    }

    fn assign(
        &self,
        body: &[Symbol],
        d: usize,
        start: usize,
        reach: &[Vec<usize>],
        out: &mut Vec<ParseTree>,
        stack: &mut Vec<(String, usize, usize)>,
    ) -> bool {
        if d == body.len() {
            return true;
        }
        for &end in &reach[d + 1] {
            if end <= start || !self.derives(&body[d], start, end) {
                continue;
            }
            let child = match &body[d] {
                Symbol::Nonterminal(nt) => match self.build(nt, start, end, stack) {
                    Some(t) => t,
                    None => continue,
                },
                t => ParseTree {
                    symbol: t.clone(),
                    production: None,
                    children: Vec::new(),
                    token: Some(self.tokens[start].clone()),
                },
            };
            out.push(child);
            if self.assign(body, d + 1, end, reach, out, stack) {
                return true;
            }
            out.pop();
        }
        false
    }
}

/// Parses `tokens` as a `root`. Ambiguities resolve to the lowest-indexed
/// production, choosing left-to-right and top-down.
pub fn parse(tokens: &[Token], g: &Grammar, root: &str) -> Result<ParseTree, SyntaxError> {
    if !g.is_nonterminal(root) {
        return Err(SyntaxError::UnknownRoot(root.to_string()));
    }
    if tokens.is_empty() {
        return Err(SyntaxError::Unparseable { index: 0 });
    }
    let chart = Chart::recognize(g, tokens, root)?;
    chart
        .build(root, 0, tokens.len(), &mut Vec::new())
        .ok_or(SyntaxError::Unparseable { index: tokens.len() })
}
