//! Pre-norm encoder-decoder transformer with learned positions.

use crate::error::{Error, Result};
use crate::nn::ops::{cross_entropy_sum_into, gelu_grad_scalar, gelu_scalar, LayerNormCache};
use crate::nn::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::layers::{dropout_backward, AttnCache, Attention, Dropout, Linear, Mask, Norm};
use super::params::{param_schema, Gradients, ParamStore};

/// Ignore marker for cross-entropy targets.
pub const IGNORE_ID: usize = usize::MAX;

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    pub attn: Attention,
    pub attn_norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayer {
    pub self_attn: Attention,
    pub self_norm: Norm,
    pub cross_attn: Attention,
    pub cross_norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc_tok: usize,
    pub enc_pos: usize,
    pub enc: Vec<EncLayer>,
    pub dec_tok: usize,
    pub dec_pos: usize,
    pub dec: Vec<DecLayer>,
    pub final_norm: Norm,
    pub out: Linear,
}

impl Layout {
    fn new<T: Scalar>(p: &ParamStore<T>, c: &ModelConfig) -> Self {
        let enc = (0..c.enc_layers)
            .map(|i| {
                let pre = format!("encoder.layer.{i}");
                EncLayer {
                    attn: Attention::lookup(p, &format!("{pre}.self_attn")),
                    attn_norm: Norm::lookup(p, &format!("{pre}.self_attn_norm")),
                    fc1: Linear::lookup(p, &format!("{pre}.ffn.fc1")),
                    fc2: Linear::lookup(p, &format!("{pre}.ffn.fc2")),
                    ffn_norm: Norm::lookup(p, &format!("{pre}.ffn_norm")),
                }
            })
            .collect();
        let dec = (0..c.dec_layers)
            .map(|i| {
                let pre = format!("decoder.layer.{i}");
                DecLayer {
                    self_attn: Attention::lookup(p, &format!("{pre}.self_attn")),
                    self_norm: Norm::lookup(p, &format!("{pre}.self_attn_norm")),
                    cross_attn: Attention::lookup(p, &format!("{pre}.cross_attn")),
                    cross_norm: Norm::lookup(p, &format!("{pre}.cross_attn_norm")),
                    fc1: Linear::lookup(p, &format!("{pre}.ffn.fc1")),
                    fc2: Linear::lookup(p, &format!("{pre}.ffn.fc2")),
                    ffn_norm: Norm::lookup(p, &format!("{pre}.ffn_norm")),
                }
            })
            .collect();
        let id = |n: &str| p.id(n).expect("schema tensor");
        Layout {
            enc_tok: id("encoder.embed_tokens.weight"),
            enc_pos: id("encoder.embed_positions.weight"),
            enc,
            dec_tok: id("decoder.embed_tokens.weight"),
            dec_pos: id("decoder.embed_positions.weight"),
            dec,
            final_norm: Norm::lookup(p, "decoder.final_norm"),
            out: Linear::lookup(p, "decoder.output"),
        }
    }
}

/// The text-to-tune encoder-decoder transformer.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> PartialEq for Seq2SeqModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    /// True where `src` is padding; empty means no padding.
    pub src_pad: Vec<bool>,
    /// Decoder input, starting with BOS.
    pub tgt_in: Vec<usize>,
    /// Next-token targets aligned with `tgt_in`; [`IGNORE_ID`] skips a position.
    pub tgt_out: Vec<usize>,
}

/// Normal(0, 0.02²) weights, zero biases and betas, unit gammas.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Seq2SeqModel<T>> {
    Seq2SeqModel::new(config.clone(), seed)
}

#[derive(Debug, Clone)]
struct EncLayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    attn: AttnCache<T>,
    m1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    b: Vec<T>,
    f1: Vec<T>,
    act: Vec<T>,
    m2: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncCache<T> {
    ids: Vec<usize>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<EncLayerCache<T>>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    self_attn: AttnCache<T>,
    m1: Option<Vec<T>>,
    cross: Option<(LayerNormCache<T>, Vec<T>, AttnCache<T>, Option<Vec<T>>)>,
    ln3: LayerNormCache<T>,
    b: Vec<T>,
    f1: Vec<T>,
    act: Vec<T>,
    m3: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecCache<T> {
    ids: Vec<usize>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<DecLayerCache<T>>,
}

/// Encoder output handed to the decoder's cross-attention.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Memory<'a, T> {
    pub states: &'a [T],
    pub len: usize,
    pub valid: &'a [bool],
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let params = ParamStore::from_specs(&param_schema(&config), &mut rng);
        let layout = Layout::new(&params, &config);
        Ok(Seq2SeqModel {
            config,
            params,
            layout,
        })
    }

    /// Builds a model from a complete store; every schema tensor must be
    /// present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let schema = param_schema(&config);
        let mut missing = Vec::new();
        for spec in &schema {
            match params.by_name(&spec.name) {
                None => missing.push(spec.name.clone()),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "{}: expected {:?}, found {:?}",
                        spec.name,
                        spec.shape,
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        // Re-order into canonical schema order.
        let mut ordered = ParamStore::new();
        for spec in &schema {
            ordered.push(spec.name.clone(), params.by_name(&spec.name).expect("checked").clone());
        }
        let layout = Layout::new(&ordered, &config);
        Ok(Seq2SeqModel {
            config,
            params: ordered,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients::zeros_like(&self.params)
    }

    fn check_ids(ids: &[usize], vocab: usize, max_len: usize) -> Result<()> {
        if ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: max_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, size: vocab });
        }
        Ok(())
    }

    fn embed(&self, tok: usize, pos: usize, ids: &[usize]) -> Vec<T> {
        let h = self.config.hidden;
        let te = self.params.data(tok);
        let pe = self.params.data(pos);
        let mut x = vec![T::zero(); ids.len() * h];
        for (t, &id) in ids.iter().enumerate() {
            let row = &mut x[t * h..(t + 1) * h];
            for i in 0..h {
                row[i] = te[id * h + i] + pe[t * h + i];
            }
        }
        x
    }

    fn embed_backward(&self, tok: usize, pos: usize, ids: &[usize], dx: &[T], g: &mut Gradients<T>) {
        let h = self.config.hidden;
        for (t, &id) in ids.iter().enumerate() {
            let d = &dx[t * h..(t + 1) * h];
            for (gv, &dv) in g.bufs[tok][id * h..(id + 1) * h].iter_mut().zip(d) {
                *gv += dv;
            }
            for (gv, &dv) in g.bufs[pos][t * h..(t + 1) * h].iter_mut().zip(d) {
                *gv += dv;
            }
        }
    }

    /// Encoder forward. `valid[j] == false` masks key `j`; `causal` restricts
    /// each position to itself and earlier positions.
    pub(crate) fn encode_fwd(
        &self,
        ids: &[usize],
        valid: &[bool],
        causal: bool,
        drop: &mut Dropout<'_>,
    ) -> Result<(Vec<T>, EncCache<T>)> {
        Self::check_ids(ids, self.config.src_vocab, self.config.max_src_len)?;
        if valid.len() != ids.len() {
            return Err(Error::Shape(format!(
                "padding mask of length {} for {} tokens",
                valid.len(),
                ids.len()
            )));
        }
        let p = &self.params;
        let heads = self.config.heads;
        let len = ids.len();
        let mut x = self.embed(self.layout.enc_tok, self.layout.enc_pos, ids);
        let emb_mask = drop.apply(&mut x);
        let mask = Mask {
            key_valid: Some(valid),
            causal_offset: causal.then_some(0),
        };
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (a, ln1) = l.attn_norm.forward(p, &x);
            let (mut att, attn) = l.attn.forward(p, heads, &a, len, &a, len, mask);
            let m1 = drop.apply(&mut att);
            for (xv, av) in x.iter_mut().zip(&att) {
                *xv += *av;
            }
            let (b, ln2) = l.ffn_norm.forward(p, &x);
            let f1 = l.fc1.forward(p, &b, len);
            let act: Vec<T> = f1.iter().map(|&v| gelu_scalar(v)).collect();
            let mut f2 = l.fc2.forward(p, &act, len);
            let m2 = drop.apply(&mut f2);
            for (xv, fv) in x.iter_mut().zip(&f2) {
                *xv += *fv;
            }
            layers.push(EncLayerCache {
                ln1,
                a,
                attn,
                m1,
                ln2,
                b,
                f1,
                act,
                m2,
            });
        }
        Ok((
            x,
            EncCache {
                ids: ids.to_vec(),
                emb_mask,
                layers,
            },
        ))
    }

    pub(crate) fn encode_bwd(&self, cache: &EncCache<T>, d_out: Vec<T>, g: &mut Gradients<T>) {
        let p = &self.params;
        let heads = self.config.heads;
        let len = cache.ids.len();
        let mut dx = d_out;
        for (l, c) in self.layout.enc.iter().zip(&cache.layers).rev() {
            // FFN sublayer.
            let df2 = dropout_backward(&c.m2, &dx);
            let mut dact = vec![T::zero(); c.act.len()];
            l.fc2.backward(p, g, &c.act, len, &df2, Some(&mut dact), false);
            for (d, &f) in dact.iter_mut().zip(&c.f1) {
                *d *= gelu_grad_scalar(f);
            }
            let mut db = vec![T::zero(); c.b.len()];
            l.fc1.backward(p, g, &c.b, len, &dact, Some(&mut db), false);
            l.ffn_norm.backward_add(p, g, &c.ln2, &db, &mut dx);
            // Attention sublayer.
            let datt = dropout_backward(&c.m1, &dx);
            let (dq, dkv) = l.attn.backward(p, g, heads, &c.attn, &c.a, &c.a, &datt);
            let da: Vec<T> = dq.iter().zip(&dkv).map(|(&a, &b)| a + b).collect();
            l.attn_norm.backward_add(p, g, &c.ln1, &da, &mut dx);
        }
        let dx = dropout_backward(&cache.emb_mask, &dx);
        self.embed_backward(self.layout.enc_tok, self.layout.enc_pos, &cache.ids, &dx, g);
    }

    /// Decoder stack forward (without the final norm and projection). With no
    /// memory the cross-attention sublayers are skipped.
    pub(crate) fn decode_fwd(
        &self,
        ids: &[usize],
        memory: Option<Memory<'_, T>>,
        drop: &mut Dropout<'_>,
    ) -> Result<(Vec<T>, DecCache<T>)> {
        Self::check_ids(ids, self.config.tgt_vocab, self.config.max_tgt_len)?;
        let p = &self.params;
        let heads = self.config.heads;
        let len = ids.len();
        let mut x = self.embed(self.layout.dec_tok, self.layout.dec_pos, ids);
        let emb_mask = drop.apply(&mut x);
        let causal = Mask {
            key_valid: None,
            causal_offset: Some(0),
        };
        let mut layers = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (a, ln1) = l.self_norm.forward(p, &x);
            let (mut att, self_attn) = l.self_attn.forward(p, heads, &a, len, &a, len, causal);
            let m1 = drop.apply(&mut att);
            for (xv, av) in x.iter_mut().zip(&att) {
                *xv += *av;
            }
            let cross = match memory {
                Some(mem) => {
                    let (c, ln2) = l.cross_norm.forward(p, &x);
                    let mask = Mask {
                        key_valid: Some(mem.valid),
                        causal_offset: None,
                    };
                    let (mut catt, cache) =
                        l.cross_attn.forward(p, heads, &c, len, mem.states, mem.len, mask);
                    let m2 = drop.apply(&mut catt);
                    for (xv, av) in x.iter_mut().zip(&catt) {
                        *xv += *av;
                    }
                    Some((ln2, c, cache, m2))
                }
                None => None,
            };
            let (b, ln3) = l.ffn_norm.forward(p, &x);
            let f1 = l.fc1.forward(p, &b, len);
            let act: Vec<T> = f1.iter().map(|&v| gelu_scalar(v)).collect();
            let mut f2 = l.fc2.forward(p, &act, len);
            let m3 = drop.apply(&mut f2);
            for (xv, fv) in x.iter_mut().zip(&f2) {
                *xv += *fv;
            }
            layers.push(DecLayerCache {
                ln1,
                a,
                self_attn,
                m1,
                cross,
                ln3,
                b,
                f1,
                act,
                m3,
            });
        }
        Ok((
            x,
            DecCache {
                ids: ids.to_vec(),
                emb_mask,
                layers,
            },
        ))
    }

    /// Returns the gradient with respect to the memory states, if any.
    pub(crate) fn decode_bwd(
        &self,
        cache: &DecCache<T>,
        d_out: Vec<T>,
        memory: Option<Memory<'_, T>>,
        g: &mut Gradients<T>,
    ) -> Option<Vec<T>> {
        let p = &self.params;
        let heads = self.config.heads;
        let len = cache.ids.len();
        let mut d_mem = memory.map(|m| vec![T::zero(); m.states.len()]);
        let mut dx = d_out;
        for (l, c) in self.layout.dec.iter().zip(&cache.layers).rev() {
            let df2 = dropout_backward(&c.m3, &dx);
            let mut dact = vec![T::zero(); c.act.len()];
            l.fc2.backward(p, g, &c.act, len, &df2, Some(&mut dact), false);
            for (d, &f) in dact.iter_mut().zip(&c.f1) {
                *d *= gelu_grad_scalar(f);
            }
            let mut db = vec![T::zero(); c.b.len()];
            l.fc1.backward(p, g, &c.b, len, &dact, Some(&mut db), false);
            l.ffn_norm.backward_add(p, g, &c.ln3, &db, &mut dx);

            if let (Some((ln2, cin, acache, m2)), Some(mem)) = (&c.cross, memory) {
                let datt = dropout_backward(m2, &dx);
                let (dq, dkv) = l.cross_attn.backward(p, g, heads, acache, cin, mem.states, &datt);
                if let Some(dm) = d_mem.as_mut() {
                    for (d, v) in dm.iter_mut().zip(dkv) {
                        *d += v;
                    }
                }
                l.cross_norm.backward_add(p, g, ln2, &dq, &mut dx);
            }

            let datt = dropout_backward(&c.m1, &dx);
            let (dq, dkv) = l.self_attn.backward(p, g, heads, &c.self_attn, &c.a, &c.a, &datt);
            let da: Vec<T> = dq.iter().zip(&dkv).map(|(&a, &b)| a + b).collect();
            l.self_norm.backward_add(p, g, &c.ln1, &da, &mut dx);
        }
        let dx = dropout_backward(&cache.emb_mask, &dx);
        self.embed_backward(self.layout.dec_tok, self.layout.dec_pos, &cache.ids, &dx, g);
        d_mem
    }

    /// Final norm and output projection.
    pub(crate) fn head_fwd(&self, hidden: &[T], len: usize) -> (Vec<T>, Vec<T>, LayerNormCache<T>) {
        let (normed, ln) = self.layout.final_norm.forward(&self.params, hidden);
        let logits = self.layout.out.forward(&self.params, &normed, len);
        (logits, normed, ln)
    }

    pub(crate) fn head_bwd(
        &self,
        normed: &[T],
        ln: &LayerNormCache<T>,
        len: usize,
        dlogits: &[T],
        g: &mut Gradients<T>,
    ) -> Vec<T> {
        let mut dnormed = vec![T::zero(); normed.len()];
        self.layout
            .out
            .backward(&self.params, g, normed, len, dlogits, Some(&mut dnormed), false);
        let mut dh = vec![T::zero(); normed.len()];
        self.layout
            .final_norm
            .backward_add(&self.params, g, ln, &dnormed, &mut dh);
        dh
    }

    /// Logits `[|tgt_ids|, tgt_vocab]` without dropout. `src_pad_mask[j]` is
    /// true where source position `j` is padding.
    pub fn forward(&self, src_ids: &[usize], src_pad_mask: &[bool], tgt_ids: &[usize]) -> Result<Tensor<T>> {
        let valid: Vec<bool> = src_pad_mask.iter().map(|&pad| !pad).collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::Empty("source has no unpadded positions".into()));
        }
        let mut drop = Dropout::off();
        let (mem, _) = self.encode_fwd(src_ids, &valid, false, &mut drop)?;
        let memory = Memory {
            states: &mem,
            len: src_ids.len(),
            valid: &valid,
        };
        let (hidden, _) = self.decode_fwd(tgt_ids, Some(memory), &mut drop)?;
        let (logits, _, _) = self.head_fwd(&hidden, tgt_ids.len());
        Tensor::new(vec![tgt_ids.len(), self.config.tgt_vocab], logits)
    }

    /// Summed token loss of one example and the number of counted targets.
    /// Gradients of `scale · sum` are accumulated into `grads` when given.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn example_loss(
        &self,
        ex: &Example,
        scale: T,
        grads: Option<&mut Gradients<T>>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize)> {
        if ex.tgt_in.len() != ex.tgt_out.len() {
            return Err(Error::Shape(format!(
                "decoder input length {} but {} targets",
                ex.tgt_in.len(),
                ex.tgt_out.len()
            )));
        }
        let valid: Vec<bool> = if ex.src_pad.is_empty() {
            vec![true; ex.src.len()]
        } else if ex.src_pad.len() != ex.src.len() {
            return Err(Error::Shape(format!(
                "padding mask of length {} for {} source tokens",
                ex.src_pad.len(),
                ex.src.len()
            )));
        } else {
            ex.src_pad.iter().map(|&pad| !pad).collect()
        };
        if !valid.iter().any(|&v| v) {
            return Err(Error::Empty("source has no unpadded positions".into()));
        }
        let mut drop = Dropout::new(self.config.dropout, dropout_rng);
        let (mem, enc_cache) = self.encode_fwd(&ex.src, &valid, false, &mut drop)?;
        let memory = Memory {
            states: &mem,
            len: ex.src.len(),
            valid: &valid,
        };
        let (hidden, dec_cache) = self.decode_fwd(&ex.tgt_in, Some(memory), &mut drop)?;
        let len = ex.tgt_in.len();
        let (logits, normed, ln) = self.head_fwd(&hidden, len);
        let mut dlogits = vec![T::zero(); logits.len()];
        let (sum, count) = cross_entropy_sum_into(
            &logits,
            self.config.tgt_vocab,
            &ex.tgt_out,
            IGNORE_ID,
            scale,
            &mut dlogits,
        )?;
        if let Some(g) = grads {
            let dh = self.head_bwd(&normed, &ln, len, &dlogits, g);
            let d_mem = self
                .decode_bwd(&dec_cache, dh, Some(memory), g)
                .expect("memory gradient");
            self.encode_bwd(&enc_cache, d_mem, g);
        }
        Ok((sum, count))
    }
}
