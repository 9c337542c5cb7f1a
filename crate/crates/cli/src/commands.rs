//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use tunegen::abc::AbcVocab;
use tunegen::bpe::{train_bpe as learn_bpe, BpeVocab};
use tunegen::data::{load_pairs, save_pairs, synth_corpus, TextTunePair};
use tunegen::metrics::{evaluate_pairs, MetricReport, TokenUnit, METRIC_NAMES};
use tunegen::model::{
    init_encoder_from, param_schema, Checkpoint, ParamStore, Part, Seq2SeqModel,
};
use tunegen::pretrain::{pretrain as run_pretrain, Objective};
use tunegen::sampler::{generate_with_rng, Generation, SamplerConfig};
use tunegen::train::{encode_pairs, fit_with_progress, split_dataset};
use tunegen::{Model32, Rng};

use crate::config::RunConfig;
use crate::{NumericFailure, RunFlags, UsageError};

const BPE_FILE: &str = "bpe.vocab";
const CONFIG_FILE: &str = "config.txt";
const VAL_FILE: &str = "val.jsonl";
const PRETRAINED_FILE: &str = "pretrained.ttmc";

fn parse_arg<T: FromStr<Err = tunegen::Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: tunegen::Error| UsageError(e.to_string()).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(flags.config.as_deref(), &flags.set)?;
    if let Some(v) = flags.seed {
        cfg.set("seed", v)?;
    }
    if let Some(v) = flags.epochs {
        cfg.set("epochs", v)?;
    }
    if let Some(v) = flags.lr {
        cfg.set("lr", v)?;
    }
    if let Some(v) = flags.batch_size {
        cfg.set("batch_size", v)?;
    }
    if let Some(v) = &flags.model {
        cfg.set("model", v)?;
    }
    Ok(cfg)
}

/// Loads a dataset file, reporting skipped lines on stderr.
fn read_pairs(path: &Path) -> Result<Vec<TextTunePair>> {
    let loaded = load_pairs(path, false).with_context(|| format!("loading {}", path.display()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {}:{}: {}", path.display(), w.line, w.reason);
    }
    Ok(loaded.pairs)
}

fn read_documents(path: &Path, plain: bool, use_tunes: bool) -> Result<Vec<String>> {
    let docs: Vec<String> = if plain {
        fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        read_pairs(path)?
            .into_iter()
            .map(|p| if use_tunes { p.abc } else { p.text })
            .collect()
    };
    if docs.is_empty() {
        bail!(tunegen::Error::Empty(format!("no documents in {}", path.display())));
    }
    Ok(docs)
}

fn load_bpe(path: &Path) -> Result<BpeVocab> {
    BpeVocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// A checkpoint file, or the checkpoint a run directory marks as best.
fn resolve_ckpt(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let marker = path.join("best");
    let name = fs::read_to_string(&marker)
        .with_context(|| format!("run directory {} has no best marker", path.display()))?;
    Ok(path.join(name.trim()))
}

/// An explicit vocabulary, else the one stored beside the checkpoint.
fn resolve_bpe(explicit: Option<&Path>, ckpt: &Path) -> Result<BpeVocab> {
    match explicit {
        Some(p) => load_bpe(p),
        None => {
            let beside = ckpt.parent().unwrap_or(Path::new(".")).join(BPE_FILE);
            if !beside.exists() {
                bail!(UsageError(format!(
                    "no {BPE_FILE} next to {}; pass --bpe",
                    ckpt.display()
                )));
            }
            load_bpe(&beside)
        }
    }
}

fn load_model(path: &Path) -> Result<Model32> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.into_model()?)
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

pub fn synth_data(n: usize, seed: u64, format_mix: f64, out: &Path) -> Result<()> {
    let pairs = synth_corpus(n, seed, format_mix).map_err(|e| UsageError(e.to_string()))?;
    save_pairs(out, &pairs)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

pub fn train_bpe(corpus: &Path, plain: bool, min_freq: usize, out: &Path) -> Result<()> {
    let docs = read_documents(corpus, plain, false)?;
    let vocab = learn_bpe(&docs, min_freq)?;
    vocab.save(out)?;
    eprintln!(
        "learned {} merges ({} ids) from {} documents",
        vocab.merges().len(),
        vocab.len(),
        docs.len()
    );
    Ok(())
}

pub fn init(preset: &str, part: &str, src_vocab: usize, seed: u64, out: &Path) -> Result<()> {
    let config = tunegen::model::ModelConfig::preset(preset, src_vocab)
        .map_err(|e| UsageError(e.to_string()))?;
    let part: Part = parse_arg(part)?;
    let ckpt = if part == Part::All {
        Checkpoint::from_model(&Seq2SeqModel::<f32>::new(config, seed)?)
    } else {
        let specs: Vec<_> = param_schema(&config)
            .into_iter()
            .filter(|s| s.name.starts_with(part.prefix()))
            .collect();
        let store = ParamStore::<f32>::from_specs(&specs, &mut Rng::new(seed));
        Checkpoint::from_params(&config, &store, |_| true)
    };
    ckpt.save(out)?;
    eprintln!("wrote {} parameters to {}", millions(ckpt.num_values()), out.display());
    Ok(())
}

pub fn pretrain(
    objective: &str,
    part: &str,
    corpus: &Path,
    plain: bool,
    bpe: Option<&Path>,
    out: &Path,
    flags: &RunFlags,
) -> Result<()> {
    let objective: Objective = parse_arg(objective)?;
    let part: Part = parse_arg(part)?;
    tunegen::pretrain::check_compatible(part, objective).map_err(|e| UsageError(e.to_string()))?;
    let cfg = run_config(flags)?;
    let pcfg = cfg.pretrain_config()?;
    let docs = read_documents(corpus, plain, part == Part::Decoder)?;
    let vocab = match bpe {
        Some(p) => load_bpe(p)?,
        None => learn_bpe(&docs, cfg.get("bpe_min_freq")?)?,
    };
    let model_config = cfg.model_config(vocab.len())?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    vocab.save(out.join(BPE_FILE))?;
    let outcome = run_pretrain::<f32>(
        &model_config,
        part,
        &docs,
        objective,
        &vocab,
        &AbcVocab::standard(),
        &pcfg,
    )?;
    let mut log = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
        eprintln!("epoch {i}: loss {l:.4}");
    }
    fs::write(out.join("pretrain_log.csv"), log)?;
    let path = out.join(PRETRAINED_FILE);
    outcome.checkpoint.save(&path)?;
    eprintln!(
        "wrote {} {} tensors to {}",
        outcome.checkpoint.entries.len(),
        objective.name(),
        path.display()
    );
    Ok(())
}

pub fn train(
    data: &Path,
    init_encoder: Option<&Path>,
    init_full: Option<&Path>,
    bpe: Option<&Path>,
    out: &Path,
    flags: &RunFlags,
) -> Result<()> {
    let cfg = run_config(flags)?;
    let tcfg = cfg.train_config()?;
    let seed = cfg.seed()?;
    let abc = AbcVocab::standard();

    let pairs = read_pairs(data)?;
    let filtered = tunegen::data::filter_pairs(pairs, &abc);
    for (pair, reason) in &filtered.rejected {
        let head: String = pair.text.chars().take(40).collect();
        eprintln!("skipping pair ({}): {head:?}", reason.as_str());
    }
    let val_fraction: f64 = cfg.get("val_fraction")?;
    let (train_pairs, val_pairs) = if val_fraction == 0.0 {
        (filtered.kept, Vec::new())
    } else {
        split_dataset(&filtered.kept, val_fraction, seed)?
    };
    if train_pairs.is_empty() {
        bail!(tunegen::Error::Empty("no training pairs".into()));
    }

    let init_dir = init_full.or(init_encoder);
    let vocab = match (bpe, init_dir) {
        (Some(p), _) => load_bpe(p)?,
        (None, Some(ckpt)) if ckpt.with_file_name(BPE_FILE).exists() => {
            load_bpe(&ckpt.with_file_name(BPE_FILE))?
        }
        _ => {
            let texts: Vec<&str> = train_pairs.iter().map(|p| p.text.as_str()).collect();
            learn_bpe(&texts, cfg.get("bpe_min_freq")?)?
        }
    };

    let mut model: Model32 = match init_full {
        Some(path) => load_model(path)?,
        None => Seq2SeqModel::new(cfg.model_config(vocab.len())?, seed)?,
    };
    if let Some(path) = init_encoder {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let report = init_encoder_from(&mut model, &ckpt, false)?;
        eprintln!(
            "initialized {} encoder tensors from {} ({} left as initialized)",
            report.loaded,
            path.display(),
            report.skipped.len()
        );
    }

    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    vocab.save(out.join(BPE_FILE))?;
    save_pairs(out.join(VAL_FILE), &val_pairs)?;

    let train_ex = encode_pairs(&train_pairs, &vocab, &abc, model.config(), &tcfg)?;
    let val_ex = encode_pairs(&val_pairs, &vocab, &abc, model.config(), &tcfg)?;
    eprintln!(
        "training on {} pairs, validating on {}; {} parameters",
        train_ex.len(),
        val_ex.len(),
        millions(model.params().num_values())
    );
    let outcome = fit_with_progress(&mut model, &train_ex, &val_ex, &tcfg, Some(out), |r| {
        eprintln!(
            "epoch {} step {}: train {:.4} val {:.4} ({:.1}s)",
            r.epoch,
            r.step,
            r.train_loss,
            r.val_loss,
            r.elapsed.as_secs_f64()
        );
    })?;
    if let Some((step, value)) = outcome.diverged {
        bail!(NumericFailure(format!(
            "training diverged at step {step} (value {value}); {} holds the best checkpoint so far",
            out.display()
        )));
    }
    if let Some(best) = outcome.log.best_epoch {
        eprintln!(
            "best epoch {best} (val {:.4}) in {}",
            outcome.log.val_losses[best],
            out.display()
        );
    }
    Ok(())
}

fn sampler(top_p: f64, seed: u64, max_len: usize) -> Result<SamplerConfig> {
    let cfg = SamplerConfig {
        top_p,
        max_len,
        seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn report_generation(g: &Generation, index: Option<usize>) {
    let at = index.map(|i| format!(" (line {})", i + 1)).unwrap_or_default();
    if g.input_truncated {
        eprintln!("warning{at}: description truncated to the encoder length");
    }
    if g.hit_max_len {
        eprintln!("warning{at}: stopped at the length cap without an end token");
    }
    if let Some(unit) = &g.degenerate {
        eprintln!("warning{at}: degenerate output repeating {unit:?}");
    }
}

pub fn generate(
    ckpt: &Path,
    text: Option<&str>,
    stdin: bool,
    bpe: Option<&Path>,
    top_p: f64,
    seed: u64,
    max_len: usize,
) -> Result<()> {
    let scfg = sampler(top_p, seed, max_len)?;
    let path = resolve_ckpt(ckpt)?;
    let model = load_model(&path)?;
    let vocab = resolve_bpe(bpe, &path)?;
    let abc = AbcVocab::standard();
    let mut out = io::stdout().lock();
    if let Some(text) = text {
        let g = generate_with_rng(&model, text, &vocab, &abc, &scfg, &mut Rng::new(seed))?;
        report_generation(&g, None);
        writeln!(out, "{}", g.abc.trim_end_matches('\n'))?;
    } else if stdin {
        let lines: Vec<String> = io::stdin().lock().lines().collect::<io::Result<_>>()?;
        let mut first = true;
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rng = Rng::derive(seed, i as u64);
            let g = generate_with_rng(&model, line, &vocab, &abc, &scfg, &mut rng)?;
            report_generation(&g, Some(i));
            if !first {
                writeln!(out)?;
            }
            first = false;
            writeln!(out, "{}", g.abc.trim_end_matches('\n'))?;
        }
    }
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub ckpt: &'a Path,
    pub data: Option<&'a Path>,
    pub bpe: Option<&'a Path>,
    pub top_p: f64,
    pub seed: u64,
    pub max_len: usize,
    pub unit: &'a str,
    pub label: &'a str,
    pub baseline: Option<&'a Path>,
    pub out: &'a Path,
}

fn comparison(report: &MetricReport, baseline: &MetricReport) -> Result<String> {
    let mut s = String::from("\nWelch's t-test against the baseline\nmetric        t       df        p\n");
    for name in METRIC_NAMES {
        match report.compare(baseline, name) {
            Ok(r) => {
                let _ = writeln!(s, "{name:<8} {:>8.4} {:>8.2} {:>8.4}", r.t, r.df, r.p);
            }
            Err(e) => {
                let _ = writeln!(s, "{name:<8} n/a ({e})");
            }
        }
    }
    Ok(s)
}

pub fn evaluate(a: EvaluateArgs<'_>) -> Result<()> {
    let unit: TokenUnit = parse_arg(a.unit)?;
    let scfg = sampler(a.top_p, a.seed, a.max_len)?;
    let path = resolve_ckpt(a.ckpt)?;
    let data = match a.data {
        Some(d) => d.to_path_buf(),
        None if a.ckpt.is_dir() => a.ckpt.join(VAL_FILE),
        None => bail!(UsageError("--data is required unless --ckpt is a run directory".into())),
    };
    let pairs = read_pairs(&data)?;
    if pairs.is_empty() {
        bail!(tunegen::Error::Empty(format!("no pairs in {}", data.display())));
    }
    let baseline = match a.baseline {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(MetricReport::from_json(&text)?)
        }
        None => None,
    };
    let model = load_model(&path)?;
    let vocab = resolve_bpe(a.bpe, &path)?;
    let abc = AbcVocab::standard();

    let mut candidates = Vec::with_capacity(pairs.len());
    let mut lines = String::new();
    let (mut degenerate, mut capped) = (0, 0);
    for (i, p) in pairs.iter().enumerate() {
        let mut rng = Rng::derive(a.seed, i as u64);
        let g = generate_with_rng(&model, &p.text, &vocab, &abc, &scfg, &mut rng)?;
        degenerate += usize::from(g.degenerate.is_some());
        capped += usize::from(g.hit_max_len);
        let record = serde_json::json!({ "text": p.text, "abc": g.abc, "reference": p.abc });
        lines.push_str(&record.to_string());
        lines.push('\n');
        candidates.push(g.abc);
    }
    let references: Vec<String> = pairs.into_iter().map(|p| p.abc).collect();
    let report = evaluate_pairs(&candidates, &references, &abc, unit)?;

    let mut text = report.to_table(a.label);
    let _ = writeln!(
        text,
        "\n{} samples from {}; {degenerate} degenerate, {capped} stopped at the length cap",
        report.n(),
        path.display()
    );
    if let Some(b) = &baseline {
        text.push_str(&comparison(&report, b)?);
    }
    create_dir(a.out)?;
    fs::write(a.out.join("generations.jsonl"), lines)?;
    fs::write(a.out.join("report.json"), report.to_json()?)?;
    fs::write(a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn metrics(candidates: &Path, references: &Path, unit: &str, out: Option<&Path>) -> Result<()> {
    let unit: TokenUnit = parse_arg(unit)?;
    let cands: Vec<String> = read_pairs(candidates)?.into_iter().map(|p| p.abc).collect();
    let refs: Vec<String> = read_pairs(references)?.into_iter().map(|p| p.abc).collect();
    let report = evaluate_pairs(&cands, &refs, &AbcVocab::standard(), unit)?;
    let table = report.to_table("candidates");
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("report.json"), report.to_json()?)?;
        fs::write(dir.join("report.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

pub fn inspect_ckpt(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let c = &ckpt.config;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {}", path.display());
    let _ = writeln!(
        s,
        "config: enc_layers={} dec_layers={} hidden={} heads={} ffn={} src_vocab={} tgt_vocab={} max_src_len={} max_tgt_len={} dropout={}",
        c.enc_layers, c.dec_layers, c.hidden, c.heads, c.ffn, c.src_vocab, c.tgt_vocab, c.max_src_len, c.max_tgt_len, c.dropout
    );
    for (k, v) in &ckpt.meta {
        let _ = writeln!(s, "meta: {k} = {v}");
    }
    let _ = writeln!(s, "tensors:");
    let (mut enc, mut dec, mut other) = (0, 0, 0);
    for e in &ckpt.entries {
        let _ = writeln!(s, "  {:<40} {:?} {}", e.name, e.shape, e.dtype);
        let n = e.numel();
        if e.name.starts_with(Part::Encoder.prefix()) {
            enc += n;
        } else if e.name.starts_with(Part::Decoder.prefix()) {
            dec += n;
        } else {
            other += n;
        }
    }
    let _ = writeln!(s, "parameters:");
    for (name, n) in [("encoder", enc), ("decoder", dec), ("other", other), ("total", enc + dec + other)] {
        let _ = writeln!(s, "  {name:<8} {n:>12} ({})", millions(n));
    }
    print!("{s}");
    Ok(())
}
