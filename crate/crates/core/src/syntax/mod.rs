//! Tokenizing and parsing corpus text, extracting statement examples, and
//! generating the synthetic corpus.

mod corpus;
mod earley;
mod lexer;

use thiserror::Error;

pub use corpus::{
    gen_corpus, minilang, minilang_weights, read_jsonl, write_corpus, Corpus, CorpusConfig,
    CorpusRecord, MINILANG_FILE_ROOT, MINILANG_SOURCE,
};
pub use earley::{parse, ParseTree};
pub use lexer::{detokenize, tokenize, Lexer, Token, TokenClass};

use crate::grammar::{Grammar, Symbol};

/// Default number of preceding tokens kept as completion context.
pub const DEFAULT_CONTEXT_LEN: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntaxError {
    #[error("unlexable character at offset {offset}")]
    Unlexable { offset: usize },
    #[error("unparseable at token {index}")]
    Unparseable { index: usize },
    #[error("unknown root nonterminal {0}")]
    UnknownRoot(String),
}

/// A completion example: the tokens before a statement and the statement itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: Vec<String>,
    pub target: Vec<String>,
    pub target_tree: ParseTree,
}

impl Example {
    /// Re-parses a corpus record's target under `g` rooted at `root`.
    pub fn from_record(
        rec: &CorpusRecord,
        lexer: &Lexer,
        g: &Grammar,
        root: &str,
    ) -> Result<Example, SyntaxError> {
        let tokens = lexer.classify(&rec.target)?;
        let tree = parse(&tokens, g, root)?;
        Ok(Example {
            context: rec.context.clone(),
            target: rec.target.clone(),
            target_tree: tree,
        })
    }
}

/// One example per `target_nt` node in `tree`, with up to `context_len`
/// preceding tokens as context.
pub fn extract_examples(tree: &ParseTree, target_nt: &str, context_len: usize) -> Vec<Example> {
    let leaves: Vec<String> = tree.leaf_texts();
    let mut out = Vec::new();
    walk(tree, target_nt, context_len, &leaves, &mut 0, &mut out);
    out
}

fn walk(
    node: &ParseTree,
    target_nt: &str,
    context_len: usize,
    leaves: &[String],
    pos: &mut usize,
    out: &mut Vec<Example>,
) {
    if node.token.is_some() {
        *pos += 1;
        return;
    }
    if matches!(&node.symbol, Symbol::Nonterminal(n) if n == target_nt) {
        let start = *pos;
        let end = start + node.width();
        out.push(Example {
            context: leaves[start.saturating_sub(context_len)..start].to_vec(),
            target: leaves[start..end].to_vec(),
            target_tree: node.clone(),
        });
    }
    for c in &node.children {
        walk(c, target_nt, context_len, leaves, pos, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{flatten, parse_grammar};

    fn mini() -> Grammar {
        flatten(&minilang()).unwrap()
    }

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_assignment() {
        let toks = tokenize("r = x", &mini()).unwrap();
        assert_eq!(texts(&toks), ["r", "=", "x"]);
        assert_eq!(toks[0].class, TokenClass::Class("IDENT".into()));
        assert_eq!(toks[1].class, TokenClass::Literal);
        assert_eq!(toks.iter().map(|t| t.offset).collect::<Vec<_>>(), [0, 2, 4]);
    }

    #[test]
    fn tokenize_call() {
        let toks = tokenize("foo(args)", &mini()).unwrap();
        assert_eq!(texts(&toks), ["foo", "(", "args", ")"]);
    }

    #[test]
    fn tokenize_maximal_munch() {
        let toks = tokenize("a+=1", &mini()).unwrap();
        assert_eq!(texts(&toks), ["a", "+=", "1"]);
    }

    #[test]
    fn tokenize_error_offset() {
        assert_eq!(
            tokenize("@", &mini()).unwrap_err(),
            SyntaxError::Unlexable { offset: 0 }
        );
        assert_eq!(
            tokenize("x = @", &mini()).unwrap_err(),
            SyntaxError::Unlexable { offset: 4 }
        );
    }

    #[test]
    fn literal_beats_class_on_tie() {
        let g = parse_grammar("token ID /[a-z]+/\nstart S\nS -> \"if\" ID | ID").unwrap();
        let toks = tokenize("if iffy", &g).unwrap();
        assert_eq!(toks[0].class, TokenClass::Literal);
        assert_eq!(toks[1].class, TokenClass::Class("ID".into()));
    }

    #[test]
    fn parse_minimal() {
        let g = parse_grammar("start S\nS -> \"a\"").unwrap();
        let toks = tokenize("a", &g).unwrap();
        let t = parse(&toks, &g, "S").unwrap();
        assert_eq!(t.production, Some(0));
        assert_eq!(t.leaf_texts(), ["a"]);
        assert!(t.is_valid(&g));
    }

    #[test]
    fn parse_running_example() {
        let g = mini();
        let toks = tokenize("r = x * ( y - foo ( args ) )", &g).unwrap();
        let t = parse(&toks, &g, "Statement").unwrap();
        assert_eq!(t.leaf_texts(), texts(&toks));
        assert!(t.is_valid(&g));
    }

    #[test]
    fn parse_failure_index() {
        let g = mini();
        let toks = tokenize("= x", &g).unwrap();
        assert_eq!(
            parse(&toks, &g, "Statement").unwrap_err(),
            SyntaxError::Unparseable { index: 0 }
        );
        let toks = tokenize("x = ", &g).unwrap();
        assert_eq!(
            parse(&toks, &g, "Statement").unwrap_err(),
            SyntaxError::Unparseable { index: 2 }
        );
    }

    #[test]
    fn ambiguity_prefers_lowest_production() {
        let g = parse_grammar("start S\nS -> A | B\nA -> \"x\"\nB -> \"x\"").unwrap();
        let toks = tokenize("x", &g).unwrap();
        let t = parse(&toks, &g, "S").unwrap();
        assert_eq!(t.children[0].symbol, Symbol::Nonterminal("A".into()));

        let g = parse_grammar("start E\nE -> E \"+\" E | \"n\"").unwrap();
        let toks = tokenize("n + n + n", &g).unwrap();
        let a = parse(&toks, &g, "E").unwrap();
        let b = parse(&toks, &g, "E").unwrap();
        assert_eq!(a, b);
        assert!(a.is_valid(&g));
    }

    #[test]
    fn unit_cycle_terminates() {
        let g = parse_grammar("start S\nS -> A | \"y\"\nA -> S | \"x\"").unwrap();
        let toks = tokenize("x", &g).unwrap();
        let t = parse(&toks, &g, "S").unwrap();
        assert_eq!(t.leaf_texts(), ["x"]);
        assert!(t.is_valid(&g));
    }

    fn file_tree(src: &str) -> ParseTree {
        let g = mini();
        let toks = tokenize(src, &g).unwrap();
        parse(&toks, &g, MINILANG_FILE_ROOT).unwrap()
    }

    #[test]
    fn extract_short_context() {
        let ex = extract_examples(&file_tree("a = 1 ; b = a ;"), "Statement", 200);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].context, ["a", "=", "1", ";"]);
        assert_eq!(ex[0].context.len(), 0);
        assert_eq!(ex[1].target, ["b", "=", "a"]);
    }

    #[test]
    fn extract_caps_context() {
        // 5 + 5 + 60 * 4 = 250 tokens precede the final statement.
        let mut src = String::from("f ( x ) ; g ( y ) ;");
        for i in 0..60 {
            src.push_str(&format!(" v{i} = 1 ;"));
        }
        src.push_str(" z = 2 ;");
        let tree = file_tree(&src);
        assert_eq!(tree.width(), 254);
        let ex = extract_examples(&tree, "Statement", 200);
        let last = ex.last().unwrap();
        assert_eq!(last.target, ["z", "=", "2"]);
        assert_eq!(last.context.len(), 200);
        assert_eq!(last.context.last().unwrap(), ";");
    }

    #[test]
    fn extract_reconstructs_file() {
        let src = "a = f ( x ) ; b . c = a * 2 ;";
        let tree = file_tree(src);
        let all = tree.leaf_texts();
        let ex = extract_examples(&tree, "Statement", 200);
        assert_eq!(ex.len(), 2);
        for e in &ex {
            let mut joined = e.context.clone();
            joined.extend(e.target.iter().cloned());
            assert_eq!(joined[..], all[..joined.len()]);
            assert_eq!(e.target_tree.leaf_texts(), e.target);
        }
    }
}
