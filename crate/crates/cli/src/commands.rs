use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sketchgen::engine::{format_trace, BeamConfig};
use sketchgen::eval::{
    bucket_report, evaluate, run_ablations, split_hash, AblationConfig, BeamCompleter, Completer,
    MetricsReport, SequenceCompleter,
};
use sketchgen::grammar::{flatten, parse_grammar, Grammar};
use sketchgen::metrics::{regex_acc, reward, rouge_f1, RougeVariant, Sketch};
use sketchgen::models::{
    load_any, load_model, save_model, save_sequence, ModelBundle, SavedModel, SequenceVariant,
};
use sketchgen::pipeline::{parse_examples, ExperimentConfig};
use sketchgen::syntax::{gen_corpus, minilang, minilang_weights, read_jsonl, write_corpus, CorpusRecord, Lexer};
use sketchgen::training::{
    finetune_bundle, format_train_log, pretrain, synth_hole_dataset, train_baseline, BaselineConfig,
    EpochLog, FinetuneMode, PretrainConfig,
};

use crate::args::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
    }
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(cfg, a),
        Command::Pretrain(a) => pretrain_cmd(cfg, a),
        Command::Finetune(a) => finetune_cmd(cfg, a),
        Command::TrainBaseline(a) => baseline_cmd(cfg, a),
        Command::Complete(a) => complete_cmd(cfg, a),
        Command::Score(a) => score_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(cfg, a),
        Command::Ablate(a) => ablate_cmd(cfg, a),
        Command::Trace(a) => trace_cmd(cfg, a),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}

fn load_grammar(arg: &GrammarArg) -> Result<Grammar> {
    match &arg.grammar {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::at(path)(e.into()))?;
            Ok(parse_grammar(&text).map_err(sketchgen::Error::from)?)
        }
        None => Ok(minilang()),
    }
}

fn read_split(path: &Path) -> Result<Vec<CorpusRecord>> {
    let recs = read_jsonl(path).map_err(CliError::at(path))?;
    if recs.is_empty() {
        return Err(CliError::Data(sketchgen::Error::Model(format!(
            "{} holds no examples",
            path.display()
        ))));
    }
    Ok(recs)
}

fn write_log(path: Option<&PathBuf>, log: &[EpochLog]) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, format_train_log(log)).map_err(|e| CliError::at(p)(e.into()))?;
    }
    Ok(())
}

fn apply_train_args(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.expansion_rate {
        cfg.expansion_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.valid_limit {
        cfg.valid_limit = Some(v);
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if cfg.batch_size == 0 || cfg.patience == 0 || cfg.max_steps == 0 {
        return Err(CliError::Usage(
            "batch size, patience and max steps must be at least 1".into(),
        ));
    }
    if !(cfg.learning_rate > 0.0 && cfg.expansion_rate >= 0.0) {
        return Err(CliError::Usage("learning rates must be positive".into()));
    }
    Ok(())
}

fn beam_config(cfg: &ExperimentConfig, a: &BeamArgs) -> Result<BeamConfig> {
    let beam = BeamConfig {
        k: a.k.unwrap_or(cfg.beam_k),
        n: a.n.unwrap_or(cfg.beam_n),
        m: a.m.unwrap_or(usize::MAX),
        max_steps: a.max_steps.unwrap_or(cfg.max_steps),
    };
    if beam.k == 0 || beam.n == 0 || beam.m == 0 || beam.max_steps == 0 {
        return Err(CliError::Usage("k, n, m and max steps must be at least 1".into()));
    }
    Ok(beam)
}

fn gen_corpus_cmd(mut cfg: ExperimentConfig, a: GenCorpusArgs) -> Result<()> {
    if let Some(v) = a.files {
        cfg.corpus.num_files = v;
    }
    if let Some(v) = a.p_local {
        cfg.corpus.p_local = v;
    }
    if let Some(v) = a.context_len {
        cfg.corpus.context_len = v;
    }
    let g = load_grammar(&a.grammar)?;
    let corpus = gen_corpus(&cfg.corpus, &g, &minilang_weights(&g))?;
    write_corpus(&a.out, &corpus).map_err(CliError::at(&a.out))?;
    println!(
        "wrote {} train, {} valid, {} test examples to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn pretrain_cmd(mut cfg: ExperimentConfig, a: PretrainArgs) -> Result<()> {
    apply_train_args(&mut cfg, &a.train)?;
    let raw = load_grammar(&a.grammar)?;
    let flat = flatten(&raw).map_err(sketchgen::Error::from)?;
    let train = read_split(&a.train.train)?;
    let valid = read_split(&a.train.valid)?;
    let examples = parse_examples(&train, &flat, raw.start())?;
    let pcfg = PretrainConfig {
        root: raw.start().to_string(),
        context_len: a.context_len.unwrap_or(cfg.corpus.context_len),
        smoothing: cfg.smoothing,
        seed: cfg.seed,
        selector: cfg.rl(a.train.epochs.unwrap_or(cfg.pretrain_epochs)),
    };
    let (bundle, log) = pretrain(&examples, &valid, &pcfg)?;
    save_model(&bundle, &a.train.out).map_err(CliError::at(&a.train.out))?;
    write_log(a.train.log.as_ref(), &log)?;
    print_snapshot(&bundle);
    Ok(())
}

fn print_snapshot(b: &ModelBundle) {
    if let Some(r) = b.snapshot.reward {
        println!("validation reward {r:.6} (epoch {})", b.snapshot.epoch);
    }
}

fn finetune_cmd(mut cfg: ExperimentConfig, a: FinetuneArgs) -> Result<()> {
    apply_train_args(&mut cfg, &a.train)?;
    let bundle = load_model(&a.model).map_err(CliError::at(&a.model))?;
    let train = read_split(&a.train.train)?;
    let valid = read_split(&a.train.valid)?;
    let mode = match a.mode {
        Mode::Selector => FinetuneMode::SelectorOnly,
        Mode::Full => FinetuneMode::Full,
    };
    let rl = cfg.rl(a.train.epochs.unwrap_or(cfg.finetune_epochs));
    let (bundle, log) = finetune_bundle(bundle, &train, &valid, mode, &rl)?;
    save_model(&bundle, &a.train.out).map_err(CliError::at(&a.train.out))?;
    write_log(a.train.log.as_ref(), &log)?;
    print_snapshot(&bundle);
    Ok(())
}

fn baseline_cmd(mut cfg: ExperimentConfig, a: BaselineArgs) -> Result<()> {
    apply_train_args(&mut cfg, &a.train)?;
    let train = read_split(&a.train.train)?;
    let valid = read_split(&a.train.valid)?;
    let variant = match a.variant {
        Variant::Ltr => SequenceVariant::Plain,
        Variant::LtrStop => SequenceVariant::Stop,
        Variant::LtrHole => SequenceVariant::Hole,
    };
    let holes = if variant == SequenceVariant::Hole {
        let p_hole = a.p_hole.unwrap_or(cfg.p_hole);
        if !(p_hole > 0.0 && p_hole < 1.0) {
            return Err(CliError::Usage(format!("--p-hole {p_hole} outside (0, 1)")));
        }
        let raw = load_grammar(&a.grammar)?;
        let flat = flatten(&raw).map_err(sketchgen::Error::from)?;
        let examples = parse_examples(&train, &flat, raw.start())?;
        Some(synth_hole_dataset(&examples, p_hole, cfg.seed))
    } else {
        None
    };
    let bcfg = BaselineConfig {
        discount: cfg.smoothing.discount,
        alpha: cfg.smoothing.alpha,
        rl: cfg.rl(a.train.epochs.unwrap_or(cfg.finetune_epochs)),
    };
    let (model, log) = train_baseline(variant, &train, holes.as_deref(), &valid, &bcfg)?;
    save_sequence(&model, &a.train.out).map_err(CliError::at(&a.train.out))?;
    write_log(a.train.log.as_ref(), &log)?;
    if let Some(last) = log.last() {
        println!("validation reward {:.6}", last.snapshot_reward);
    }
    Ok(())
}

fn read_context(a: &ContextArgs) -> Result<Vec<String>> {
    let text = match (&a.context, &a.context_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p).map_err(|e| CliError::at(p)(e.into()))?,
        (None, None) => return Err(CliError::Usage("give --context or --context-file".into())),
    };
    let g = flatten(&load_grammar(&a.grammar)?).map_err(sketchgen::Error::from)?;
    let tokens = Lexer::new(&g)
        .tokenize(&text)
        .map_err(sketchgen::Error::from)?;
    Ok(tokens.into_iter().map(|t| t.text).collect())
}

fn complete_cmd(cfg: ExperimentConfig, a: CompleteArgs) -> Result<()> {
    let beam = beam_config(&cfg, &a.beam)?;
    let context = read_context(&a.input)?;
    let model = load_any(&a.input.model).map_err(CliError::at(&a.input.model))?;
    let results = match &model {
        SavedModel::Bundle(b) => b.beam(&context, beam)?,
        SavedModel::Sequence(m) => m.beam(&context, beam.k, beam.max_steps),
    };
    for (sketch, score) in results {
        println!("{score:.6}\t{sketch}");
    }
    if a.trace {
        match &model {
            SavedModel::Bundle(b) => print!("{}", format_trace(&b.greedy(&context, beam.max_steps)?.1)),
            SavedModel::Sequence(_) => {
                return Err(CliError::Usage("--trace needs a grammar model".into()));
            }
        }
    }
    Ok(())
}

fn trace_cmd(cfg: ExperimentConfig, a: TraceArgs) -> Result<()> {
    let context = read_context(&a.input)?;
    let bundle = load_model(&a.input.model).map_err(CliError::at(&a.input.model))?;
    let (_, trace) = bundle.greedy(&context, a.max_steps.unwrap_or(cfg.max_steps))?;
    print!("{}", format_trace(&trace));
    Ok(())
}

/// Reads one token list per line: a JSON array, or an object holding the
/// array under one of `keys`.
fn read_token_lines(path: &Path, keys: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::at(path)(e.into()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)?;
        let arr = match &v {
            Value::Array(_) => Some(&v),
            Value::Object(o) => keys.iter().find_map(|k| o.get(*k)),
            _ => None,
        };
        let tokens: Option<Vec<String>> = arr.and_then(Value::as_array).and_then(|a| {
            a.iter().map(|t| t.as_str().map(String::from)).collect()
        });
        match tokens {
            Some(t) => out.push(t),
            None => {
                return Err(CliError::Data(sketchgen::Error::Model(format!(
                    "{}:{}: expected an array of token strings",
                    path.display(),
                    n + 1
                ))))
            }
        }
    }
    Ok(out)
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let preds = read_token_lines(&a.pred, &["sketch", "prediction", "target"])?;
    let golds = read_token_lines(&a.gold, &["target"])?;
    if preds.len() != golds.len() {
        return Err(CliError::Data(sketchgen::Error::Model(format!(
            "{} predictions but {} ground truths",
            preds.len(),
            golds.len()
        ))));
    }
    let mut csv = String::from("index,regex_acc,rouge1_f1,rouge2_f1,rougeL_f1,reward\n");
    let mut sums = [0.0; 5];
    for (i, (p, g)) in preds.iter().zip(&golds).enumerate() {
        let sketch = Sketch::from_tokens(p);
        let erased = sketchgen::metrics::erase_holes(&sketch);
        let row = [
            regex_acc(&sketch, g).map_err(sketchgen::Error::from)?,
            rouge_f1(&erased, g, RougeVariant::R1),
            rouge_f1(&erased, g, RougeVariant::R2),
            rouge_f1(&erased, g, RougeVariant::RL),
            reward(&sketch, g).map_err(sketchgen::Error::from)?,
        ];
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row[0], row[1], row[2], row[3], row[4]
        ));
    }
    let n = preds.len().max(1) as f64;
    csv.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n
    ));
    match a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn evaluate_cmd(cfg: ExperimentConfig, a: EvaluateArgs) -> Result<()> {
    let beam = beam_config(&cfg, &a.beam)?;
    let test = read_split(&a.test)?;
    let mut models = Vec::new();
    for path in &a.models {
        let name = model_name(path);
        let report = match load_any(path).map_err(CliError::at(path))? {
            SavedModel::Bundle(b) => evaluate(&name, &BeamCompleter::new(&b, beam), &test)?,
            SavedModel::Sequence(m) => {
                let c = SequenceCompleter {
                    model: &m,
                    k: beam.k,
                    max_len: beam.max_steps,
                };
                evaluate(&name, &c as &dyn Completer, &test)?
            }
        };
        models.push(report);
    }
    let metrics = MetricsReport {
        split_hash: split_hash(&test),
        models,
    };
    let edges = a.bucket_edges.unwrap_or(cfg.bucket_edges);
    let buckets = bucket_report(&metrics, &edges)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("metrics.csv"), metrics.to_csv())?;
    fs::write(a.out.join("buckets.csv"), buckets)?;
    println!("{}", metrics.summary());
    Ok(())
}

fn ablate_cmd(cfg: ExperimentConfig, a: AblateArgs) -> Result<()> {
    let beam = beam_config(&cfg, &a.beam)?;
    let pretrained = load_model(&a.pretrained).map_err(CliError::at(&a.pretrained))?;
    let trained = load_model(&a.model).map_err(CliError::at(&a.model))?;
    let train = read_split(&a.train)?;
    let valid = read_split(&a.valid)?;
    let test = read_split(&a.test)?;
    let acfg = AblationConfig {
        beam,
        taus: a.taus.unwrap_or_else(|| cfg.taus.clone()),
        rl: cfg.rl(a.epochs.unwrap_or(cfg.finetune_epochs)),
        mode: FinetuneMode::Full,
    };
    if acfg.taus.is_empty() {
        return Err(CliError::Usage("--taus needs at least one value".into()));
    }
    let table = run_ablations(&pretrained, &trained, &train, &valid, &test, &acfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablations.csv"), table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}
