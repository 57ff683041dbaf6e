use proptest::prelude::*;

use sketchgen::grammar::{
    flatten, parse_grammar, sample_derivation, LexemePools, ProductionWeights, DEFAULT_DEPTH_CAP,
};
use sketchgen::stream_rng;
use sketchgen::syntax::{detokenize, minilang, minilang_weights, parse, tokenize, Lexer, MINILANG_SOURCE};

fn pools() -> LexemePools {
    let mut p = LexemePools::new();
    let words = |ws: &[&str]| ws.iter().map(|w| (w.to_string(), 1.0)).collect();
    p.insert("IDENT", words(&["x", "total", "args", "foo", "self"])).unwrap();
    p.insert("NUMBER", words(&["0", "1", "42"])).unwrap();
    p.insert("STRING", words(&["\"a\"", "\"--verbose\""])).unwrap();
    p
}

#[test]
fn grammar_text_round_trips() {
    for text in [
        MINILANG_SOURCE,
        "start S\nS -> \"a\"",
        "token IDENT /[a-z]+/\nstart E\nE -> E \"+\" T | T\nT -> IDENT | \"(\" E \")\"\n",
    ] {
        let g = parse_grammar(text).unwrap();
        let normal = g.to_string();
        let again = parse_grammar(&normal).unwrap();
        assert_eq!(again, g);
        assert_eq!(again.to_string(), normal);
    }
}

#[test]
fn flattened_minilang_has_no_forced_nonterminals() {
    let g = flatten(&minilang()).unwrap();
    for nt in g.nonterminals() {
        if nt != g.start() {
            assert!(g.productions_of(nt).count() > 1, "{nt}");
        }
    }
    assert_eq!(flatten(&g).unwrap(), g);
}

#[test]
fn weighted_choice_follows_weights() {
    let g = parse_grammar("start S\nS -> \"a\" | \"b\"").unwrap();
    let w = ProductionWeights::new(&g, vec![1000.0, 1.0]).unwrap();
    let mut rng = stream_rng(4, 0);
    let a = (0..10_000)
        .filter(|_| sample_derivation(&g, &w, &pools(), &mut rng, DEFAULT_DEPTH_CAP).unwrap().tokens == ["a"])
        .count();
    let freq = a as f64 / 10_000.0;
    assert!((0.998..=1.0).contains(&freq), "{freq}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_statements_replay_lex_and_parse(seed in any::<u64>()) {
        let g = minilang();
        let d = sample_derivation(&g, &minilang_weights(&g), &pools(), &mut stream_rng(seed, 0), DEFAULT_DEPTH_CAP).unwrap();
        prop_assert_eq!(d.replay(&g), d.tokens.clone());

        let text = detokenize(&d.tokens);
        let toks = tokenize(&text, &g).unwrap();
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        prop_assert_eq!(&texts, &d.tokens);

        let flat = flatten(&g).unwrap();
        for grammar in [&g, &flat] {
            let tree = parse(&toks, grammar, "Statement").unwrap();
            prop_assert!(tree.is_valid(grammar));
            prop_assert_eq!(tree.leaf_texts(), d.tokens.clone());
        }
    }

    #[test]
    fn same_seed_same_derivation(seed in any::<u64>()) {
        let g = minilang();
        let w = minilang_weights(&g);
        let a = sample_derivation(&g, &w, &pools(), &mut stream_rng(seed, 3), DEFAULT_DEPTH_CAP).unwrap();
        let b = sample_derivation(&g, &w, &pools(), &mut stream_rng(seed, 3), DEFAULT_DEPTH_CAP).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn token_soup_parses_only_when_well_formed(words in prop::collection::vec(
        prop::sample::select(vec!["x", "=", "1", "(", ")", "+", ".", "y", ",", "\"s\""]), 1..8)
    ) {
        let g = minilang();
        let lexer = Lexer::new(&g);
        let words: Vec<String> = words.into_iter().map(String::from).collect();
        let toks = lexer.classify(&words).unwrap();
        if let Ok(tree) = parse(&toks, &g, "Statement") {
            prop_assert!(tree.is_valid(&g));
            prop_assert_eq!(tree.leaf_texts(), words);
        }
    }
}
