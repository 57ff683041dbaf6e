//! Acceptance checks. Prints one line per criterion and exits non-zero if
//! any fails. Run with `cargo test -p sketchgen --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sketchgen::engine::{beam_search, generate, nonterminals_to_holes, BeamConfig};
use sketchgen::eval::MetricsReport;
use sketchgen::grammar::{flatten, parse_grammar, Grammar, Symbol};
use sketchgen::metrics::{matches, regex_acc, rouge_f1, to_matcher, RougeVariant, Sketch, HOLE};
use sketchgen::models::{Choice, ModelBundle, Smoothing};
use sketchgen::pipeline::{parse_examples, run_experiment, ExperimentConfig, ExperimentOutput};
use sketchgen::stream_rng;
use sketchgen::syntax::{
    gen_corpus, minilang, minilang_weights, tokenize, CorpusConfig, CorpusRecord, Example, Lexer,
};
use sketchgen::training::{
    pretrain, self_critical_step, EpochLog, FinetuneMode, PretrainConfig, RlConfig, TrainState,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 1: published RegexAcc scores ----

/// Tokenizes MiniLang text in which `■` marks holes.
fn sketch_tokens(text: &str, g: &Grammar) -> Vec<String> {
    let mut out = Vec::new();
    for (k, part) in text.split(HOLE).enumerate() {
        if k > 0 {
            out.push(HOLE.to_string());
        }
        out.extend(tokenize(part, g).expect("lexable").into_iter().map(|t| t.text));
    }
    out
}

fn regex_acc_examples() -> Outcome {
    let g = minilang();
    let truth = sketch_tokens(r#"ap.add_argument("--experimental", action="store_true")"#, &g);
    let cases = [
        (r#"ap.add_argument(■, action="store_true")"#, 0.9),
        ("ap.add_argument(■, action=■)", 0.8),
        ("ap.add_argument(■, ■)", 0.6),
        (r#"ap.add_argument(■, action="store_false")"#, 0.0),
        ("ap.add_argument(■, required=■)", 0.0),
    ];
    let got: Vec<f64> = cases
        .iter()
        .map(|(s, _)| regex_acc(&Sketch::from_tokens(&sketch_tokens(s, &g)), &truth).unwrap())
        .collect();
    let ok = cases.iter().zip(&got).all(|((_, want), have)| want == have);
    check(ok, format!("scores {got:?}, tolerance 0"))
}

// ---- 2: hole matcher against segmentation enumeration ----

/// Whether `gt` splits into segments matching `sketch`, where `None` is a
/// hole taking one or more tokens.
fn segments_match(sketch: &[Option<u8>], gt: &[u8]) -> bool {
    match sketch.split_first() {
        None => gt.is_empty(),
        Some((Some(t), rest)) => gt.first() == Some(t) && segments_match(rest, &gt[1..]),
        Some((None, rest)) => (1..=gt.len()).any(|k| segments_match(rest, &gt[k..])),
    }
}

const NAMES: [&str; 5] = ["a", "b", "c", "d", "e"];

fn sketch_of(s: &[Option<u8>]) -> Sketch {
    let toks: Vec<&str> = s
        .iter()
        .map(|t| t.map_or(HOLE, |t| NAMES[t as usize]))
        .collect();
    Sketch::from_tokens(&toks)
}

/// Sketches up to `max_len` with at most `max_holes` holes whose tokens
/// first appear in alphabet order. Matching is invariant under renaming
/// tokens, so these cover every sketch over the alphabet.
fn canonical_sketches(alphabet: u8, max_len: usize, max_holes: usize) -> Vec<Vec<Option<u8>>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![(Vec::<Option<u8>>::new(), 0u8, 0usize)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (s, used, holes) in frontier {
            if holes < max_holes {
                let mut t = s.clone();
                t.push(None);
                next.push((t, used, holes + 1));
            }
            for tok in 0..(used + 1).min(alphabet) {
                let mut t = s.clone();
                t.push(Some(tok));
                next.push((t, used.max(tok + 1), holes));
            }
        }
        out.extend(next.iter().map(|n| n.0.clone()));
        frontier = next;
    }
    out
}

fn matcher_oracle() -> Outcome {
    const MAX_GT: usize = 12;
    const MAX_SKETCH: usize = 4;
    let sketches = canonical_sketches(3, MAX_SKETCH, 3);
    let matchers: Vec<_> = sketches.iter().map(|s| to_matcher(&sketch_of(s))).collect();
    let mut pairs = 0u64;
    let mut disagreements = 0u64;
    let mut gt: Vec<u8> = Vec::new();
    loop {
        let names: Vec<&str> = gt.iter().map(|&t| NAMES[t as usize]).collect();
        for (s, m) in sketches.iter().zip(&matchers) {
            pairs += 1;
            if (matches(m, &names) == 1) != segments_match(s, &gt) {
                disagreements += 1;
            }
        }
        // next ground truth in length-then-lexicographic order
        match gt.iter().rposition(|&t| t < 2) {
            Some(i) => {
                gt[i] += 1;
                gt[i + 1..].fill(0);
            }
            None if gt.len() < MAX_GT => gt = vec![0; gt.len() + 1],
            None => break,
        }
    }

    let mut rng = stream_rng(2, 0);
    let mut random_matches = 0;
    for case in 0..10_000 {
        let len = rng.gen_range(1..=8);
        let mut s: Vec<Option<u8>> = (0..len).map(|_| Some(rng.gen_range(0..5))).collect();
        for _ in 0..rng.gen_range(0..=3usize.min(len)) {
            let i = rng.gen_range(0..len);
            s[i] = None;
        }
        let mut gt: Vec<u8> = if case % 2 == 0 {
            s.iter()
                .flat_map(|t| match t {
                    Some(t) => vec![*t],
                    None => (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..5)).collect(),
                })
                .collect()
        } else {
            (0..rng.gen_range(0..=16)).map(|_| rng.gen_range(0..5)).collect()
        };
        if case % 4 == 2 && !gt.is_empty() {
            let i = rng.gen_range(0..gt.len());
            gt[i] = rng.gen_range(0..5);
        }
        let names: Vec<&str> = gt.iter().map(|&t| NAMES[t as usize]).collect();
        let expected = segments_match(&s, &gt);
        random_matches += usize::from(expected);
        pairs += 1;
        if (matches(&to_matcher(&sketch_of(&s)), &names) == 1) != expected {
            disagreements += 1;
        }
    }
    check(
        disagreements == 0,
        format!(
            "{} canonical sketches x all {}-token-alphabet truths up to length {MAX_GT} plus 10000 random ({random_matches} matching); {pairs} pairs, {disagreements} disagreements",
            sketches.len(),
            3
        ),
    )
}

// ---- 3: ROUGE against brute force ----

fn ngrams(t: &[&str], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n)
        .map(|i| t[i..i + n].iter().map(|s| s.to_string()).collect())
        .collect()
}

fn clipped_overlap(a: &[Vec<String>], b: &[Vec<String>]) -> usize {
    let mut used = vec![false; b.len()];
    let mut overlap = 0;
    for g in a {
        if let Some(j) = (0..b.len()).find(|&j| !used[j] && &b[j] == g) {
            used[j] = true;
            overlap += 1;
        }
    }
    overlap
}

fn is_subsequence(sub: &[&str], of: &[&str]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|t| t == s))
}

/// Longest common subsequence by trying every subsequence of `a`.
fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
    (0u32..1 << a.len())
        .filter(|mask| {
            let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&sub, b)
        })
        .map(u32::count_ones)
        .max()
        .unwrap_or(0) as usize
}

fn f_measure(overlap: usize, n_pred: usize, n_gt: usize) -> f64 {
    if overlap == 0 {
        0.0
    } else {
        2.0 * overlap as f64 / (n_pred + n_gt) as f64
    }
}

fn rouge_brute(pred: &[&str], gt: &[&str], v: RougeVariant) -> f64 {
    match v {
        RougeVariant::RL => match (pred.is_empty(), gt.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => f_measure(lcs_brute(pred, gt), pred.len(), gt.len()),
        },
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if v == RougeVariant::R1 { 1 } else { 2 };
            let (a, b) = (ngrams(pred, n), ngrams(gt, n));
            if a.is_empty() || b.is_empty() {
                return if a.is_empty() && b.is_empty() && pred == gt { 1.0 } else { 0.0 };
            }
            f_measure(clipped_overlap(&a, &b), a.len(), b.len())
        }
    }
}

fn rouge_oracle() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = stream_rng(3, 0);
    let mut worst = 0.0f64;
    let mut asymmetric = 0;
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            (0..rng.gen_range(0..=12)).map(|_| NAMES[rng.gen_range(0..4)]).collect()
        };
        let pred = draw(&mut rng);
        let gt = draw(&mut rng);
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            let got = rouge_f1(&pred, &gt, v);
            worst = worst.max((got - rouge_brute(&pred, &gt, v)).abs());
            if got != rouge_f1(&gt, &pred, v) {
                asymmetric += 1;
            }
        }
    }
    check(
        worst <= TOL && asymmetric == 0,
        format!("200 cases x R1/R2/RL, max abs error {worst:.2e} (tolerance {TOL:.0e}), {asymmetric} asymmetric"),
    )
}

// ---- 4: flattening preserves the language ----

/// Terminal strings of length at most `max_len`, by breadth-first leftmost
/// derivation over sentential forms.
fn language(g: &Grammar, max_len: usize) -> BTreeSet<Vec<String>> {
    let mut rules: HashMap<&str, Vec<&[Symbol]>> = HashMap::new();
    for p in g.productions() {
        rules.entry(p.lhs.as_str()).or_default().push(&p.rhs);
    }
    let mut seen = BTreeSet::new();
    let mut out = BTreeSet::new();
    let mut queue = vec![vec![Symbol::Nonterminal(g.start().to_string())]];
    while let Some(form) = queue.pop() {
        if form.len() > max_len || !seen.insert(form.clone()) {
            continue;
        }
        let Some(i) = form.iter().position(|s| matches!(s, Symbol::Nonterminal(_))) else {
            out.insert(form.iter().map(|s| s.name().to_string()).collect());
            continue;
        };
        for rhs in &rules[form[i].name()] {
            let mut next = form[..i].to_vec();
            next.extend_from_slice(rhs);
            next.extend_from_slice(&form[i + 1..]);
            queue.push(next);
        }
    }
    out
}

const TOY_GRAMMARS: [&str; 3] = [
    "start S\nS -> A B\nA -> \"x\" C\nC -> \"y\"\nB -> \"u\" | \"v\"\n",
    "token IDENT /[a-z]+/\nstart E\nE -> E Op T | T\nOp -> Plus\nPlus -> \"+\"\nT -> P\nP -> \"(\" E \")\" | \"n\" | Id\nId -> IDENT\n",
    "start S\nS -> L \"=\" R | R\nL -> \"*\" R | Id\nR -> L\nId -> Name\nName -> \"a\" | \"b\"\n",
];

fn flatten_equivalence() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, text) in TOY_GRAMMARS.iter().enumerate() {
        let g = parse_grammar(text).unwrap();
        let f = flatten(&g).unwrap();
        let ff = flatten(&f).unwrap();
        let (before, after) = (language(&g, 8), language(&f, 8));
        let nts = g.nonterminals().count();
        let single = f
            .nonterminals()
            .filter(|n| *n != f.start() && f.productions_of(n).count() == 1)
            .count();
        let same = before == after;
        let idempotent = ff == f && ff.to_string() == f.to_string();
        ok &= same && idempotent && single == 0 && nts <= 6 && !before.is_empty();
        notes.push(format!(
            "g{}: {nts} nonterminals, {} strings, equal={same}, idempotent={idempotent}",
            k + 1,
            before.len()
        ));
    }
    let chain = flatten(&parse_grammar(TOY_GRAMMARS[0]).unwrap()).unwrap();
    let s_rhs: Vec<String> = chain.productions_of("S").flat_map(|(_, p)| p.rhs.iter().map(|s| s.to_string())).collect();
    let chain_ok = s_rhs == ["\"x\"", "\"y\"", "B"];
    notes.push(format!("S -> {}", s_rhs.join(" ")));
    check(ok && chain_ok, notes.join("; "))
}

// ---- 5: beam search against exhaustive enumeration ----

fn records(rows: &[(&str, &str)]) -> Vec<CorpusRecord> {
    rows.iter()
        .map(|(ctx, target)| CorpusRecord {
            context: ctx.split_whitespace().map(String::from).collect(),
            target: target.split_whitespace().map(String::from).collect(),
            file_id: 0,
        })
        .collect()
}

fn untrained_bundle(g: &Grammar, recs: &[CorpusRecord]) -> ModelBundle {
    let lexer = Lexer::new(g);
    let ex: Vec<Example> = recs
        .iter()
        .map(|r| Example::from_record(r, &lexer, g, g.start()).unwrap())
        .collect();
    let cfg = PretrainConfig {
        root: g.start().to_string(),
        context_len: 200,
        smoothing: Smoothing::default(),
        seed: 1,
        selector: RlConfig {
            max_epochs: 0,
            ..RlConfig::default()
        },
    };
    pretrain(&ex, recs, &cfg).unwrap().0
}

fn randomize(b: &mut ModelBundle, rng: &mut ChaCha8Rng, scale: f64) {
    for w in b.selector.weights_mut() {
        *w = rng.gen_range(-scale..scale);
    }
}

/// Every (stop | expand-with-any-option)* path from `x`, keeping the best
/// score per final sketch. Returns the number of paths.
fn enumerate_outcomes(
    b: &ModelBundle,
    x: &sketchgen::models::SketchState,
    score: f64,
    steps_left: usize,
    out: &mut BTreeMap<Vec<String>, f64>,
) -> usize {
    fn record(out: &mut BTreeMap<Vec<String>, f64>, x: &sketchgen::models::SketchState, s: f64) -> usize {
        let e = out.entry(nonterminals_to_holes(x).to_tokens()).or_insert(f64::NEG_INFINITY);
        *e = e.max(s);
        1
    }
    if steps_left == 0 {
        return record(out, x, score);
    }
    let d = b.selector.selector_dist(x, &b.expansion).unwrap();
    let mut paths = 0;
    for c in &d.candidates {
        let ps = c.prob.ln();
        match c.choice {
            Choice::Stop => paths += record(out, x, score + ps),
            Choice::Expand(i) => {
                for (e, pe) in c.expansions.as_ref().unwrap().options.iter() {
                    paths += enumerate_outcomes(b, &x.expand(i, e), score + ps + pe.ln(), steps_left - 1, out);
                }
            }
        }
    }
    paths
}

fn minilang_bundle(files: usize) -> (ModelBundle, Vec<CorpusRecord>) {
    let raw = minilang();
    let g = flatten(&raw).unwrap();
    let corpus = gen_corpus(
        &CorpusConfig {
            num_files: files,
            ..CorpusConfig::default()
        },
        &raw,
        &minilang_weights(&raw),
    )
    .unwrap();
    let ex = parse_examples(&corpus.train, &g, raw.start()).unwrap();
    let cfg = PretrainConfig {
        root: raw.start().to_string(),
        context_len: 200,
        smoothing: Smoothing::default(),
        seed: 1,
        selector: RlConfig {
            learning_rate: 0.5,
            batch_size: 16,
            max_epochs: 1,
            batches_per_epoch: Some(8),
            valid_limit: Some(50),
            ..RlConfig::default()
        },
    };
    (pretrain(&ex, &corpus.valid, &cfg).unwrap().0, corpus.train)
}

fn beam_oracle() -> Outcome {
    const TOL: f64 = 1e-9;
    const MAX_OUTCOMES: usize = 500;
    let g = parse_grammar("start S\nS -> A \"=\" B | B\nA -> \"x\" | \"y\"\nB -> A \"+\" A | \"1\"\n").unwrap();
    let recs = records(&[("", "x = 1"), ("", "y = x + y"), ("", "x + x"), ("", "1"), ("", "y = 1")]);
    let mut bundle = untrained_bundle(&g, &recs);
    let mut rng = stream_rng(5, 0);
    let wide = BeamConfig {
        k: MAX_OUTCOMES,
        n: usize::MAX,
        m: usize::MAX,
        max_steps: 64,
    };
    let mut worst = 0.0f64;
    let mut most_paths = 0;
    let mut set_mismatch = 0;
    for _ in 0..10 {
        randomize(&mut bundle, &mut rng, 2.0);
        let x0 = bundle.root_state(&[]);
        let mut expected = BTreeMap::new();
        let paths = enumerate_outcomes(&bundle, &x0, 0.0, wide.max_steps, &mut expected);
        most_paths = most_paths.max(paths);
        let got: BTreeMap<Vec<String>, f64> = beam_search(&bundle.selector, &bundle.expansion, x0, wide)
            .unwrap()
            .into_iter()
            .map(|(s, p)| (s.to_tokens(), p))
            .collect();
        if got.keys().ne(expected.keys()) {
            set_mismatch += 1;
            continue;
        }
        for (k, p) in &got {
            worst = worst.max((p - expected[k]).abs());
        }
    }

    let (trained, contexts_pool) = minilang_bundle(60);
    let mut random = trained.clone();
    randomize(&mut random, &mut rng, 1.5);
    let narrow = BeamConfig {
        k: 1,
        n: 1,
        m: 1,
        max_steps: 64,
    };
    let mut greedy_mismatch = 0;
    let mut contexts = 0;
    for rec in contexts_pool.iter().take(100) {
        contexts += 1;
        for b in [&trained, &random] {
            let (sketch, trace) = b.greedy(&rec.context, narrow.max_steps).unwrap();
            let beam = b.beam(&rec.context, narrow).unwrap();
            let same = beam.len() == 1 && beam[0].0 == sketch && (beam[0].1 - trace.logprob()).abs() <= TOL;
            greedy_mismatch += usize::from(!same);
        }
    }
    check(
        set_mismatch == 0 && worst <= TOL && most_paths <= MAX_OUTCOMES && contexts == 100 && greedy_mismatch == 0,
        format!(
            "10 weight draws, up to {most_paths} outcomes, {set_mismatch} set mismatches, max score error {worst:.2e} (tolerance {TOL:.0e}); k=n=m=1 vs greedy on {contexts} contexts x 2 weightings: {greedy_mismatch} mismatches"
        ),
    )
}

// ---- 6: selector gradient against finite differences ----

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let (mut bundle, pool) = minilang_bundle(40);
    let mut rng = stream_rng(6, 0);
    randomize(&mut bundle, &mut rng, 1.0);
    let mut worst = 0.0f64;
    let mut states = 0;
    let mut attempts = 0;
    while states < 100 && attempts < 10_000 {
        attempts += 1;
        let rec = pool.choose(&mut rng).unwrap();
        let x0 = bundle.root_state(&rec.context);
        let (_, trace) = generate(&bundle.selector, &bundle.expansion, x0, &mut rng, 64).unwrap();
        let x = trace.steps.choose(&mut rng).map_or(trace.final_state.clone(), |s| s.state.clone());
        let d = bundle.selector.selector_dist(&x, &bundle.expansion).unwrap();
        if d.candidates.len() < 2 {
            continue;
        }
        let chosen = d.candidates.choose(&mut rng).unwrap().choice;
        let analytic = bundle.selector.selector_grad(&x, &bundle.expansion, chosen).unwrap();
        let logp = |w: &[f64]| {
            let mut s = bundle.selector.clone();
            s.weights_mut().copy_from_slice(w);
            s.selector_dist(&x, &bundle.expansion).unwrap().prob(chosen).ln()
        };
        let w = bundle.selector.weights().to_vec();
        let numeric: Vec<f64> = (0..w.len())
            .map(|j| {
                let (mut up, mut down) = (w.clone(), w.clone());
                up[j] += H;
                down[j] -= H;
                (logp(&up) - logp(&down)) / (2.0 * H)
            })
            .collect();
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(if scale > 0.0 { err / scale } else { 0.0 });
        states += 1;
    }
    check(
        states == 100 && worst <= TOL,
        format!("{states} states, h={H:.0e}, max relative error {worst:.2e} (tolerance {TOL:.0e})"),
    )
}

// ---- 7: self-critical training on a two-choice problem ----

fn non_decreasing(start: f64, log: &[EpochLog]) -> bool {
    let mut prev = start;
    log.iter().all(|e| {
        let ok = e.snapshot_reward >= prev;
        prev = e.snapshot_reward;
        ok
    })
}

fn bandit(runs: &[&ExperimentOutput]) -> Outcome {
    const STEPS: usize = 500;
    const TARGET: f64 = 0.95;
    let g = parse_grammar("start S\nS -> \"a\"").unwrap();
    let recs = records(&[("x", "a")]);
    let bundle = untrained_bundle(&g, &recs);
    let cfg = RlConfig {
        batch_size: 1,
        ..RlConfig::default()
    };
    let p_expand = |b: &ModelBundle| {
        let x = b.root_state(&recs[0].context);
        b.selector.selector_dist(&x, &b.expansion).unwrap().prob(Choice::Expand(0))
    };
    let mut ts = TrainState::evaluated(bundle, &recs, &cfg).unwrap();
    let start = ts.snapshot_reward;
    let mut reached = None;
    for step in 1..=STEPS {
        let r = self_critical_step(&[0], &recs, &mut ts, FinetuneMode::SelectorOnly, &cfg).unwrap();
        ts.validate(&recs, &cfg, r).unwrap();
        if reached.is_none() && p_expand(&ts.current) > TARGET {
            reached = Some(step);
        }
    }
    let mut monotone = non_decreasing(start, &ts.log);
    for out in runs {
        monotone &= non_decreasing(f64::NEG_INFINITY, &out.pretrain_log);
        monotone &= non_decreasing(out.pretrained.snapshot.reward.unwrap_or(f64::NEG_INFINITY), &out.finetune_log);
    }
    check(
        reached.is_some() && monotone,
        format!(
            "P(rewarded choice) > {TARGET} after {} of {STEPS} steps (final {:.4}); snapshot rewards non-decreasing in bandit and experiment runs: {monotone}",
            reached.map_or("none".to_string(), |s| s.to_string()),
            p_expand(&ts.current)
        ),
    )
}

// ---- 8-10: the full MiniLang experiment ----

fn headline(out: &ExperimentOutput, elapsed: Duration) -> Outcome {
    const RATIO: f64 = 1.10;
    let examples = out.corpus.len();
    let top1 = |m: &str| out.metrics.get(m).map(|r| r.regex_acc_top1()).unwrap_or(f64::NAN);
    let (gf, ltr) = (top1("grammformer"), top1("ltr"));
    let (pre, fine) = (out.pretrained_valid_reward, out.finetuned_valid_reward);
    check(
        gf >= RATIO * ltr && fine > pre && (45_000..=55_000).contains(&examples) && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{examples} examples; RegexAcc@1 grammformer {gf:.4} vs ltr {ltr:.4} (need >= {RATIO} x); validation reward pretrained {pre:.4} -> fine-tuned {fine:.4}; {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_orderings(out: &ExperimentOutput) -> Outcome {
    let row = |v: &str| out.ablations.get(v).expect("ablation row");
    let len = |v: &str| row(v).avg_sketch_length();
    let acc = |v: &str| row(v).regex_acc_top1();
    let threshold = len("stop_at_fixed_threshold") < len("random_expansion_no_stop");
    let reward = len("reward_regex_acc") < len("reward_rouge_f1") && acc("reward_regex_acc") > acc("reward_rouge_f1");
    let stop = len("no_stop") > len("grammformer");
    check(
        threshold && reward && stop,
        format!(
            "length threshold {:.3} < no-stop random {:.3}: {threshold}; RegexAcc-only {:.4}/{:.3} vs ROUGE-only {:.4}/{:.3}: {reward}; no-stop {:.3} > grammformer {:.3}: {stop}",
            len("stop_at_fixed_threshold"),
            len("random_expansion_no_stop"),
            acc("reward_regex_acc"),
            len("reward_regex_acc"),
            acc("reward_rouge_f1"),
            len("reward_rouge_f1"),
            len("no_stop"),
            len("grammformer"),
        ),
    )
}

fn determinism(a: &ExperimentOutput, b: &ExperimentOutput) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    a.write(dirs[0].path()).unwrap();
    b.write(dirs[1].path()).unwrap();
    let mut identical = Vec::new();
    let mut ok = true;
    for f in ["metrics.csv", "buckets.csv", "ablations.csv", "model.json"] {
        let same = std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap();
        ok &= same;
        identical.push(format!("{f} {}", if same { "identical" } else { "differs" }));
    }
    check(ok, identical.join(", "))
}

fn metrics_summary(m: &MetricsReport) -> String {
    m.models
        .iter()
        .map(|r| format!("{} {:.4}", r.model, r.regex_acc_top1()))
        .collect::<Vec<_>>()
        .join(", ")
}

struct Runner {
    failed: Vec<u32>,
}

impl Runner {
    fn run(&mut self, n: u32, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!("{d}; over time budget {budget:?}")),
            r => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n}: {status} ({detail}) [{:.2} s]", elapsed.as_secs_f64());
        if result.is_err() {
            self.failed.push(n);
        }
    }
}

fn main() {
    let mut r = Runner { failed: Vec::new() };
    r.run(1, Duration::from_secs(1), regex_acc_examples);
    r.run(2, Duration::from_secs(60), matcher_oracle);
    r.run(3, Duration::from_secs(10), rouge_oracle);
    r.run(4, Duration::from_secs(60), flatten_equivalence);
    r.run(5, Duration::from_secs(120), beam_oracle);
    r.run(6, Duration::from_secs(10), gradient_check);

    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let first = catch_unwind(|| run_experiment(&cfg).unwrap()).ok();
    let elapsed = start.elapsed();
    let second = first.as_ref().and_then(|_| catch_unwind(|| run_experiment(&cfg).unwrap()).ok());
    if let Some(out) = &first {
        println!("experiment: {} in {:.0} s", metrics_summary(&out.metrics), elapsed.as_secs_f64());
    }
    let runs: Vec<&ExperimentOutput> = first.iter().chain(&second).collect();
    let missing = || Err::<String, _>("experiment run failed".to_string());

    r.run(7, Duration::from_secs(60), || bandit(&runs));
    r.run(8, Duration::from_secs(60), || first.as_ref().map_or_else(missing, |o| headline(o, elapsed)));
    r.run(9, Duration::from_secs(1), || first.as_ref().map_or_else(missing, ablation_orderings));
    r.run(10, Duration::from_secs(60), || match (&first, &second) {
        (Some(a), Some(b)) => determinism(a, b),
        _ => missing(),
    });
    if !r.failed.is_empty() {
        println!("failed criteria: {:?}", r.failed);
        std::process::exit(1);
    }
}
