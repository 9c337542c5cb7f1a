use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::abc::{self, AbcVocab};
use crate::bpe::{self, BpeVocab};
use crate::data::TextTunePair;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Example, Gradients, ModelConfig, Seq2SeqModel, IGNORE_ID};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{adamw_step, lr_at, AdamWState, TrainConfig};

/// Teacher-forcing example: BPE source, `[BOS, tune..]` decoder input and
/// `[tune.., EOS]` targets, each cut to its maximum length.
pub fn encode_pair(
    pair: &TextTunePair,
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
    max_src_len: usize,
    max_tgt_len: usize,
) -> Result<Example> {
    let src = bpe.encode(&pair.text, max_src_len).ids;
    let ids = abc_vocab.tokenize(&pair.abc)?;
    let mut tgt_in = Vec::with_capacity(ids.len() + 1);
    tgt_in.push(abc::BOS);
    tgt_in.extend_from_slice(&ids);
    let mut tgt_out = ids;
    tgt_out.push(abc::EOS);
    tgt_in.truncate(max_tgt_len);
    tgt_out.truncate(max_tgt_len);
    Ok(Example {
        src,
        src_pad: Vec::new(),
        tgt_in,
        tgt_out,
    })
}

/// Encodes every pair with lengths capped by both the model and `cfg`.
pub fn encode_pairs(
    pairs: &[TextTunePair],
    bpe: &BpeVocab,
    abc_vocab: &AbcVocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    if bpe.len() > model.src_vocab {
        return Err(Error::Config(format!(
            "BPE vocabulary of {} exceeds the model's source vocabulary of {}",
            bpe.len(),
            model.src_vocab
        )));
    }
    let max_src = cfg.max_src_len.min(model.max_src_len);
    let max_tgt = cfg.max_tgt_len.min(model.max_tgt_len);
    pairs
        .iter()
        .map(|p| encode_pair(p, bpe, abc_vocab, max_src, max_tgt))
        .collect()
}

/// Pads every example to the longest source and target in the batch. Source
/// padding is recorded in `src_pad`; padded targets are ignored by the loss.
pub fn pad_batch(batch: &[&Example]) -> Vec<Example> {
    let src_len = batch.iter().map(|e| e.src.len()).max().unwrap_or(0);
    let tgt_len = batch.iter().map(|e| e.tgt_in.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|e| {
            let mut src = e.src.clone();
            let mut src_pad = if e.src_pad.is_empty() {
                vec![false; e.src.len()]
            } else {
                e.src_pad.clone()
            };
            src.resize(src_len, bpe::PAD);
            src_pad.resize(src_len, true);
            let mut tgt_in = e.tgt_in.clone();
            let mut tgt_out = e.tgt_out.clone();
            tgt_in.resize(tgt_len, abc::PAD);
            tgt_out.resize(tgt_len, IGNORE_ID);
            Example {
                src,
                src_pad,
                tgt_in,
                tgt_out,
            }
        })
        .collect()
}

/// Token-mean loss over all counted targets, without dropout.
pub fn validation_loss<T: Scalar>(model: &Seq2SeqModel<T>, examples: &[Example]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in examples {
        let (s, c) = model.example_loss(ex, T::one(), None, None)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::Empty("no validation targets".into()));
    }
    Ok(sum / count as f64)
}

/// Per-step training losses and per-epoch validation losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 0-based index of the lowest validation loss.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    fn record_epoch(&mut self, val: f64) {
        self.val_losses.push(val);
        let last = self.val_losses.len() - 1;
        match self.best_epoch {
            Some(b) if self.val_losses[b] <= val => {}
            _ => self.best_epoch = Some(last),
        }
    }

    /// `step,loss` rows, a blank line, then `epoch,val_loss` rows; steps and
    /// epochs are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l}", i + 1);
        }
        out.push_str("\nepoch,val_loss\n");
        for (i, l) in self.val_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l}", i + 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the epoch with the lowest validation loss, or the
    /// initial parameters if no epoch completed.
    pub best: Checkpoint,
    pub log: TrainLog,
    /// Step and loss at which training stopped on a non-finite value.
    pub diverged: Option<(usize, f64)>,
}

pub fn fit<T: Scalar>(
    model: &mut Seq2SeqModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<FitOutcome> {
    fit_with_progress(model, train, val, cfg, run_dir, |_| {})
}

fn grad_norm<T: Scalar>(g: &Gradients<T>) -> f64 {
    g.bufs
        .iter()
        .flatten()
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn write_run_files(dir: &Path, log: &TrainLog, best_name: Option<&str>) -> Result<()> {
    let path = dir.join("train_log.csv");
    fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
    if let Some(name) = best_name {
        let path = dir.join("best");
        fs::write(&path, format!("{name}\n")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ttmc")
}

/// Mini-batch AdamW over shuffled `train` for `cfg.epochs` epochs, with the
/// scheduled learning rate. Each batch loss is the token mean over its
/// non-ignored targets. Validation loss is the token mean over `val`; when
/// `val` is empty the epoch's training loss stands in. With a run directory,
/// every epoch's checkpoint, a `best` marker naming the best one and
/// `train_log.csv` are written there.
///
/// A non-finite loss or gradient stops training: the model is restored to the
/// best parameters so far and the outcome records where it happened.
pub fn fit_with_progress<T: Scalar>(
    model: &mut Seq2SeqModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let total = cfg.total_steps(train.len());
    lr_at(0, total, cfg)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let hp = cfg.adamw();
    let mut state = AdamWState::new(model.params());
    let mut grads = model.zero_grads();
    let mut dropout_rng = Rng::derive(cfg.seed, u64::MAX);
    let mut log = TrainLog::default();
    let mut best = Checkpoint::from_model(model);
    let mut best_name: Option<String> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let tokens: usize = batch
                .iter()
                .map(|&i| train[i].tgt_out.iter().filter(|&&t| t != IGNORE_ID).count())
                .sum();
            if tokens == 0 {
                continue;
            }
            let scale = T::from_f64_lossy(1.0 / tokens as f64);
            grads.zero();
            let mut sum = 0.0;
            for &i in batch {
                sum += model.example_loss(&train[i], scale, Some(&mut grads), Some(&mut dropout_rng))?.0;
            }
            let loss = sum / tokens as f64;
            let gnorm = grad_norm(&grads);
            if !loss.is_finite() || !gnorm.is_finite() {
                model.load_state(&best)?;
                log.step_losses.push(loss);
                if let Some(dir) = run_dir {
                    write_run_files(dir, &log, best_name.as_deref())?;
                }
                return Ok(FitOutcome {
                    best,
                    log,
                    diverged: Some((step, if loss.is_finite() { gnorm } else { loss })),
                });
            }
            if let Some(clip) = cfg.grad_clip {
                if gnorm > clip {
                    grads.scale(T::from_f64_lossy(clip / gnorm));
                }
            }
            adamw_step(model.params_mut(), &grads, &mut state, lr_at(step, total, cfg)?, &hp)?;
            log.step_losses.push(loss);
            epoch_sum += sum;
            epoch_count += tokens;
        }

        let train_loss = epoch_sum / epoch_count.max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(model, val)?
        };
        log.record_epoch(val_loss);
        let mut ckpt = Checkpoint::from_model(model);
        ckpt.meta.insert("epoch".into(), epoch.to_string());
        ckpt.meta.insert("step".into(), step.to_string());
        ckpt.meta.insert("val_loss".into(), val_loss.to_string());
        let is_best = log.best_epoch == Some(epoch - 1);
        if let Some(dir) = run_dir {
            let name = checkpoint_file_name(epoch);
            ckpt.save(dir.join(&name))?;
            if is_best {
                best_name = Some(name);
            }
            write_run_files(dir, &log, best_name.as_deref())?;
        }
        if is_best {
            best = ckpt;
        }
        on_epoch(&EpochReport {
            epoch,
            step,
            train_loss,
            val_loss,
            elapsed: start.elapsed(),
        });
    }
    Ok(FitOutcome {
        best,
        log,
        diverged: None,
    })
}
