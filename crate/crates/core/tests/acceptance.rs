//! End-to-end acceptance checks, one line per criterion.
//!
//! Run all with `cargo test --test acceptance`, or a subset by passing ids:
//! `cargo test --test acceptance -- ac9 ac10`.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tunegen::abc::{detect_degeneration, extract_meta, parse_headers, AbcVocab, ABC_VOCAB_SIZE};
use tunegen::bpe::train_bpe;
use tunegen::data::{described_meta, synth_corpus, TextTunePair};
use tunegen::metrics::{bleu_n, dist_n, eds, evaluate_pairs, levenshtein, welch_t_test, TokenUnit, METRIC_NAMES};
use tunegen::model::{count_params, init_encoder_from, init_model, Checkpoint, ModelConfig, Part};
use tunegen::pretrain::{pretrain, Objective, PretrainConfig};
use tunegen::sampler::{generate, generate_with_rng, nucleus_filter, sample_token, SamplerConfig};
use tunegen::train::{encode_pairs, fit, lr_at, split_indices, validation_size, TrainConfig};
use tunegen::{Model32, Rng};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_secs,
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_string(rng: &mut Rng, max_len: usize, alphabet: &[u8]) -> String {
    let n = rng.below(max_len + 1);
    (0..n).map(|_| *rng.choose(alphabet) as char).collect()
}

fn ac1() -> Check {
    let t = Instant::now();
    let mut rng = Rng::new(1);
    for i in 0..1000 {
        let alphabet: &[u8] = if i % 2 == 0 { b"ab" } else { b"abcdefghij" };
        let a = random_string(&mut rng, 64, alphabet);
        let b = random_string(&mut rng, 64, alphabet);
        let want = lev_oracle(a.as_bytes(), b.as_bytes());
        ensure(levenshtein(&a, &b) == want, format!("levenshtein({a:?}, {b:?}) != {want}"))?;
        let longer = a.len().max(b.len());
        let want_eds = if longer == 0 { 100.0 } else { 100.0 * (1.0 - want as f64 / longer as f64) };
        ensure((eds(&a, &b) - want_eds).abs() < 1e-9, format!("eds({a:?}, {b:?})"))?;
    }
    ensure(levenshtein("kitten", "sitting") == 3, "kitten/sitting distance")?;
    let k = eds("kitten", "sitting");
    ensure((k - 100.0 * (1.0 - 3.0 / 7.0)).abs() < 1e-9, format!("kitten eds {k}"))?;
    ensure((k - 57.142857).abs() < 1e-6, format!("kitten eds {k}"))?;
    within(t.elapsed(), 10.0)?;
    Ok(format!("1000 pairs agree with the DP oracle; kitten eds {k:.6}"))
}

fn ac2() -> Check {
    let t = Instant::now();
    let close = |got: f64, want: f64, what: &str| ensure((got - want).abs() < 1e-6, format!("{what}: {got} vs {want}"));
    let bp = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
    close(bleu_n(&['a', 'b', 'c', 'd'], &['a', 'b', 'c', 'd', 'e'], 2).map_err(err)?, bp, "brevity case")?;
    close(bleu_n(&['a', 'b'], &['b', 'a'], 2).map_err(err)?, 0.0, "no shared bigram")?;
    close(bleu_n(&[1, 2, 3], &[1, 2, 3], 3).map_err(err)?, 100.0, "identity")?;
    close(dist_n(&['a', 'b', 'c'], 1), 100.0, "dist distinct")?;
    close(dist_n(&['a', 'a', 'a', 'a'], 1), 25.0, "dist repeated")?;
    close(dist_n(&['a', 'b', 'a', 'b'], 2), 200.0 / 3.0, "dist bigrams")?;
    let mut rng = Rng::new(2);
    for _ in 0..100 {
        let len = 1 + rng.below(50);
        let x: Vec<usize> = (0..len).map(|_| rng.below(8)).collect();
        for n in 1..=len.min(4) {
            ensure(bleu_n(&x, &x, n).map_err(err)? == 100.0, format!("bleu(x, x, {n}) on {x:?}"))?;
        }
    }
    within(t.elapsed(), 5.0)?;
    Ok(format!("hand cases match; brevity case {bp:.3}; 100 self-BLEU scores are 100"))
}

fn ac3() -> Check {
    let a = [2.0, 4.0, 6.0, 8.0];
    let b = [1.0, 3.0, 5.0, 7.0];
    let ab = welch_t_test(&a, &b).map_err(err)?;
    let oracle = 1.0 / (20.0f64 / 3.0 / 4.0 * 2.0).sqrt();
    ensure((ab.t - 0.5477).abs() < 1e-3, format!("t = {}", ab.t))?;
    ensure((ab.t - oracle).abs() < 1e-12, format!("t = {} vs formula {oracle}", ab.t))?;
    let same = welch_t_test(&a, &a).map_err(err)?;
    ensure(same.t == 0.0 && (same.p - 1.0).abs() < 1e-12, format!("identical samples: {same:?}"))?;
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..2 + rng.below(20)).map(|_| rng.normal(0.0, 1.0)).collect();
        let y: Vec<f64> = (0..2 + rng.below(20)).map(|_| rng.normal(0.3, 2.0)).collect();
        let (xy, yx) = (welch_t_test(&x, &y).map_err(err)?, welch_t_test(&y, &x).map_err(err)?);
        ensure((xy.t + yx.t).abs() < 1e-10, "t not antisymmetric")?;
        ensure((xy.p - yx.p).abs() < 1e-10, "p not swap-invariant")?;
    }
    let far: Vec<f64> = b.iter().map(|v| v + 1e3).collect();
    let sep = welch_t_test(&far, &b).map_err(err)?;
    ensure(sep.p < 1e-6, format!("separated samples p = {}", sep.p))?;
    Ok(format!("t = {:.4}, df = {:.3}, p = {:.4}; swap antisymmetry over 1000 pairs", ab.t, ab.df, ab.p))
}

fn ac4() -> Check {
    let t = Instant::now();
    let results = common::gradcheck_suite(0..100);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let summary: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    for (name, e) in &results {
        ensure(*e < 1e-5, format!("{name}: max relative error {e:e}"))?;
    }
    within(t.elapsed(), 60.0)?;
    Ok(format!("100 seeds, worst {worst:.1e} ({})", summary.join(", ")))
}

/// Parameters of one pre-norm layer, written out by hand.
fn tiny_counts(src_vocab: usize) -> (usize, usize) {
    let (h, f, v_tgt) = (128, 512, ABC_VOCAB_SIZE);
    let attn = 4 * (h * h + h);
    let norm = 2 * h;
    let ffn = (h * f + f) + (f * h + h);
    let enc = src_vocab * h + 256 * h + 2 * (attn + norm + ffn + norm);
    let dec = v_tgt * h + 512 * h + 2 * (attn + norm + attn + norm + ffn + norm) + norm + (h * v_tgt + v_tgt);
    (enc, dec)
}

fn ac5() -> Check {
    let t = Instant::now();
    let rnd = count_params(&ModelConfig::rnd(), Part::Encoder);
    let bert = count_params(&ModelConfig::bert(), Part::Encoder);
    ensure((rnd as f64 / 91e6 - 1.0).abs() < 0.03, format!("RND encoder {rnd}"))?;
    ensure((bert as f64 / 109e6 - 1.0).abs() < 0.03, format!("BERT-like encoder {bert}"))?;
    for v in [260, 452, 1000] {
        let c = ModelConfig::tiny(v);
        let (enc, dec) = tiny_counts(v);
        ensure(count_params(&c, Part::Encoder) == enc, format!("tiny({v}) encoder"))?;
        ensure(count_params(&c, Part::Decoder) == dec, format!("tiny({v}) decoder"))?;
        ensure(count_params(&c, Part::All) == enc + dec, format!("tiny({v}) total"))?;
    }
    within(t.elapsed(), 1.0)?;
    Ok(format!("RND encoder {:.2}M, BERT-like encoder {:.2}M; tiny counts exact", rnd as f64 / 1e6, bert as f64 / 1e6))
}

fn ac6() -> Check {
    let cfg = TrainConfig {
        lr: 1e-4,
        warmup_steps: 1000,
        ..TrainConfig::default()
    };
    let total = 35_360;
    let at = |s| lr_at(s, total, &cfg).map_err(err);
    ensure(at(1000)? == 1e-4, format!("lr_at(1000) = {}", at(1000)?))?;
    ensure(at(0)? == 0.0, "lr_at(0)")?;
    ensure(at(total)? == 0.0, "lr_at(total)")?;
    for s in (1..total).step_by(7) {
        let want = if s <= 1000 {
            1e-4 * s as f64 / 1000.0
        } else {
            1e-4 * (total - s) as f64 / (total - 1000) as f64
        };
        ensure((at(s)? - want).abs() <= 1e-15, format!("lr_at({s}) = {} vs {want}", at(s)?))?;
    }
    ensure(lr_at(5, 10, &TrainConfig { warmup_steps: 20, ..cfg.clone() }).is_err(), "total < warmup accepted")?;
    Ok(format!("endpoints exact; {} grid points on the two segments", (1..total).step_by(7).count()))
}

fn ac7() -> Check {
    let vocab = AbcVocab::standard();
    ensure(vocab.len() == 164, format!("vocabulary size {}", vocab.len()))?;
    let corpus = synth_corpus(10_000, 7, 0.5).map_err(err)?;
    for p in &corpus {
        let ids = vocab.tokenize(&p.abc).map_err(err)?;
        ensure(vocab.detokenize(&ids).map_err(err)? == p.abc, format!("round trip of {:?}", p.abc))?;
    }
    let docs: Vec<String> = synth_corpus(1000, 8, 0.5).map_err(err)?.into_iter().map(|p| p.text).collect();
    let bpe = train_bpe(&docs, 2).map_err(err)?;
    for d in &docs {
        let enc = bpe.encode(d, usize::MAX);
        ensure(!enc.truncated, "unexpected truncation")?;
        ensure(bpe.decode(&enc.ids).map_err(err)? == *d, format!("BPE round trip of {d:?}"))?;
    }
    Ok(format!("10000 tunes and 1000 documents ({} BPE ids) round-trip", bpe.len()))
}

fn ac8() -> Check {
    let logits: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|p| p.ln()).collect();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = Rng::new(8);
    for _ in 0..n {
        counts[sample_token(&logits, 0.9, &mut rng).map_err(err)?] += 1;
    }
    ensure(counts[2] == 0, format!("excluded token drawn {} times", counts[2]))?;
    for (i, want) in [2.0 / 3.0, 1.0 / 3.0].into_iter().enumerate() {
        let sigma = (want * (1.0 - want) / n as f64).sqrt();
        let got = counts[i] as f64 / n as f64;
        ensure((got - want).abs() < 3.0 * sigma, format!("token {i}: frequency {got} vs {want}"))?;
    }
    for _ in 0..2000 {
        let k = 1 + rng.below(30);
        let w: Vec<f64> = (0..k).map(|_| rng.uniform().powi(3)).collect();
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            continue;
        }
        let d: Vec<f64> = w.iter().map(|v| v / s).collect();
        let (a, b) = (rng.uniform(), rng.uniform());
        let (lo, hi) = (a.min(b).max(1e-9), a.max(b).max(1e-9));
        let small: HashSet<usize> = nucleus_filter(&d, lo).kept.into_iter().collect();
        let large: HashSet<usize> = nucleus_filter(&d, hi).kept.into_iter().collect();
        ensure(small.is_subset(&large), format!("nucleus not monotone for {d:?} at {lo}, {hi}"))?;
    }
    Ok(format!(
        "frequencies {:.4}/{:.4}/0 over {n} draws; monotone on 2000 distributions",
        counts[0] as f64 / n as f64,
        counts[1] as f64 / n as f64
    ))
}

fn train_texts(pairs: &[TextTunePair]) -> Vec<&str> {
    pairs.iter().map(|p| p.text.as_str()).collect()
}

fn ac9() -> Check {
    let t = Instant::now();
    let pairs = synth_corpus(32, 9, 0.5).map_err(err)?;
    let bpe = train_bpe(&train_texts(&pairs), 2).map_err(err)?;
    let abc = AbcVocab::standard();
    let mc = ModelConfig::tiny(bpe.len());
    let cfg = TrainConfig {
        lr: 2e-3,
        warmup_steps: 50,
        epochs: 125,
        batch_size: 8,
        weight_decay: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let examples = encode_pairs(&pairs, &bpe, &abc, &mc, &cfg).map_err(err)?;
    let mut model: Model32 = init_model(&mc, 3).map_err(err)?;
    let outcome = fit(&mut model, &examples, &[], &cfg, None).map_err(err)?;
    let steps = outcome.log.step_losses.len();
    ensure(steps <= 500, format!("{steps} steps"))?;
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let last_epoch = &outcome.log.step_losses[steps - per_epoch..];
    let final_loss = last_epoch.iter().sum::<f64>() / per_epoch as f64;
    ensure(final_loss < 0.1, format!("final training loss {final_loss:.4}"))?;

    let target = &pairs[0];
    let mut exact = 0;
    for seed in 0..100 {
        let scfg = SamplerConfig {
            top_p: 0.5,
            max_len: 1024,
            seed,
        };
        exact += usize::from(generate(&model, &target.text, &bpe, &abc, &scfg).map_err(err)?.abc == target.abc);
    }
    ensure(exact >= 90, format!("exact reproduction in {exact}/100 seeds"))?;
    within(t.elapsed(), 300.0)?;
    Ok(format!("loss {final_loss:.4} after {steps} steps; exact reproduction {exact}/100 seeds"))
}

fn ac10() -> Check {
    let t = Instant::now();
    let pairs = synth_corpus(5000, 10, 1.0).map_err(err)?;
    let held = synth_corpus(200, 1010, 1.0).map_err(err)?;
    let bpe = train_bpe(&train_texts(&pairs), 2).map_err(err)?;
    let abc = AbcVocab::standard();
    let mc = ModelConfig::tiny(bpe.len());
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_steps: 200,
        epochs: 5,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let examples = encode_pairs(&pairs, &bpe, &abc, &mc, &cfg).map_err(err)?;
    let mut model: Model32 = init_model(&mc, 3).map_err(err)?;
    fit(&mut model, &examples, &[], &cfg, None).map_err(err)?;
    let mut hits = 0;
    for (i, p) in held.iter().enumerate() {
        let (key, meter) = described_meta(&p.text);
        ensure(key.is_some() && meter.is_some(), format!("description without key or meter: {:?}", p.text))?;
        let scfg = SamplerConfig {
            top_p: 0.5,
            max_len: 1024,
            seed: 0,
        };
        let g = generate_with_rng(&model, &p.text, &bpe, &abc, &scfg, &mut Rng::derive(0, i as u64)).map_err(err)?;
        let meta = extract_meta(&parse_headers(&g.abc));
        hits += usize::from(meta.key.as_deref() == key && meta.meter.as_deref() == meter);
    }
    ensure(hits >= 180, format!("key and meter followed in {hits}/200"))?;
    within(t.elapsed(), 1800.0)?;
    Ok(format!("key and meter followed in {hits}/200 held-out descriptions"))
}

fn ac11() -> Check {
    let t = Instant::now();
    let abc = AbcVocab::standard();
    let docs: Vec<String> = synth_corpus(2000, 110, 0.5).map_err(err)?.into_iter().map(|p| p.text).collect();
    let pairs = synth_corpus(450, 111, 0.5).map_err(err)?;
    let (train, test) = pairs.split_at(400);
    let bpe = train_bpe(&docs, 2).map_err(err)?;
    let mc = ModelConfig::tiny(bpe.len());

    let pcfg = PretrainConfig {
        train: TrainConfig {
            lr: 1e-3,
            warmup_steps: 50,
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        },
        ..PretrainConfig::default()
    };
    let pre = pretrain::<f32>(&mc, Part::Encoder, &docs, Objective::Mlm, &bpe, &abc, &pcfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mlm.ttmc");
    pre.checkpoint.save(&path).map_err(err)?;
    let ckpt = Checkpoint::load(&path).map_err(err)?;

    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_steps: 50,
        epochs: 4,
        batch_size: 8,
        seed: 6,
        ..TrainConfig::default()
    };
    let train_ex = encode_pairs(train, &bpe, &abc, &mc, &cfg).map_err(err)?;
    let refs: Vec<String> = test.iter().map(|p| p.abc.clone()).collect();
    let mut reports = Vec::new();
    let mut loaded_note = String::new();
    for init_pretrained in [true, false] {
        let mut model: Model32 = init_model(&mc, 7).map_err(err)?;
        if init_pretrained {
            let encoder_tensors = model.params().names().iter().filter(|n| n.starts_with("encoder.")).count();
            let report = init_encoder_from(&mut model, &ckpt, true).map_err(err)?;
            ensure(
                report.loaded == encoder_tensors && report.skipped.is_empty(),
                format!("loaded {} of {encoder_tensors} encoder tensors", report.loaded),
            )?;
            loaded_note = format!("{}/{encoder_tensors} encoder tensors loaded", report.loaded);
        }
        let outcome = fit(&mut model, &train_ex, &[], &cfg, None).map_err(err)?;
        ensure(outcome.diverged.is_none(), "fine-tuning diverged")?;
        let mut cands = Vec::new();
        for (i, p) in test.iter().enumerate() {
            let scfg = SamplerConfig {
                top_p: 0.9,
                max_len: 1024,
                seed: 0,
            };
            let g = generate_with_rng(&model, &p.text, &bpe, &abc, &scfg, &mut Rng::derive(0, i as u64)).map_err(err)?;
            cands.push(g.abc);
        }
        reports.push(evaluate_pairs(&cands, &refs, &abc, TokenUnit::Abc).map_err(err)?);
    }
    let (pretrained, random) = (&reports[0], &reports[1]);
    for r in &reports {
        ensure(r.n() == test.len(), "report sample count")?;
        ensure(r.metrics.len() == METRIC_NAMES.len(), "report columns")?;
        let table = r.to_table("run");
        ensure(METRIC_NAMES.iter().all(|m| table.contains(m)), "table header")?;
    }
    let tt = pretrained.compare(random, "EDS").map_err(err)?;
    ensure(tt.t.is_finite() && (0.0..=1.0).contains(&tt.p), format!("t-test {tt:?}"))?;
    let eds_pre = pretrained.metric("EDS").unwrap().mean;
    let eds_rnd = random.metric("EDS").unwrap().mean;
    let direction = if eds_pre > eds_rnd { "pretrained ahead" } else { "random init ahead" };
    println!("{}", pretrained.to_table("mlm-init").trim_end());
    println!("{}", random.to_table("random-init").lines().nth(1).unwrap_or(""));
    Ok(format!(
        "{loaded_note}; EDS {eds_pre:.2} vs {eds_rnd:.2} ({direction}), Welch t = {:.3}, p = {:.3} [{:.0}s]",
        tt.t,
        tt.p,
        t.elapsed().as_secs_f64()
    ))
}

fn ac12() -> Check {
    let unit = detect_degeneration("z8|z8|z8|z8", 3);
    ensure(unit.as_deref() == Some("z8"), format!("rest bars detected as {unit:?}"))?;
    let notes = ["A", "B", "c", "d", "e", "f", "g", "a"];
    let mut rng = Rng::new(12);
    let mut checked = 0;
    while checked < 200 {
        let bars: Vec<String> = (0..16)
            .map(|_| (0..4).map(|_| *rng.choose(&notes)).collect::<String>())
            .collect();
        if bars.iter().collect::<HashSet<_>>().len() < 16 {
            continue;
        }
        let body = format!("{}|]", bars.join("|"));
        for k in 2..=4 {
            ensure(detect_degeneration(&body, k).is_none(), format!("flagged distinct tune {body}"))?;
        }
        checked += 1;
    }
    Ok("rest bars flagged; 200 all-distinct 16-bar tunes never flagged".into())
}

fn ac13() -> Check {
    let n = 282_870;
    let size = validation_size(n, 0.01);
    ensure(size == 2829, format!("validation size {size}"))?;
    let (train, val) = split_indices(n, 0.01, 13).map_err(err)?;
    ensure(val.len() == size && train.len() == n - size, "split sizes")?;
    let mut seen = vec![false; n];
    for &i in train.iter().chain(&val) {
        ensure(!seen[i], format!("index {i} appears twice"))?;
        seen[i] = true;
    }
    ensure(seen.iter().all(|&s| s), "split is not exhaustive")?;
    ensure(split_indices(n, 0.01, 13).map_err(err)? == (train, val.clone()), "same seed, different split")?;
    ensure(split_indices(n, 0.01, 14).map_err(err)?.1 != val, "seed has no effect")?;
    Ok(format!("{size} validation pairs (round half to even); disjoint, exhaustive, reproducible"))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Check); 13] = [
        ("ac1", "metric oracles", ac1),
        ("ac2", "BLEU/DIST hand cases", ac2),
        ("ac3", "Welch t-test", ac3),
        ("ac4", "gradient checks", ac4),
        ("ac5", "parameter counts", ac5),
        ("ac6", "learning-rate schedule", ac6),
        ("ac7", "tokenizer round trips", ac7),
        ("ac8", "sampling statistics", ac8),
        ("ac9", "memorization probe", ac9),
        ("ac10", "meta-following probe", ac10),
        ("ac11", "pretraining pipeline", ac11),
        ("ac12", "degeneration detector", ac12),
        ("ac13", "dataset split", ac13),
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{:<5} PASS  {name}: {detail} ({secs:.1}s)", id.to_uppercase()),
            Err(detail) => {
                failed += 1;
                println!("{:<5} FAIL  {name}: {detail} ({secs:.1}s)", id.to_uppercase());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
