//! Token-at-a-time decoding with cached keys and values.

use crate::error::{Error, Result};
use crate::nn::ops::gelu_scalar;
use crate::scalar::Scalar;

use super::layers::{attend, Dropout, Mask};
use super::transformer::Seq2SeqModel;

/// Per-sequence decoding state: cross-attention projections of the encoded
/// source plus the self-attention keys/values of every emitted position.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
    src_valid: Vec<bool>,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    pos: usize,
}

impl<T> DecoderState<T> {
    /// Number of decoder positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Encodes the source once and prepares cross-attention caches.
    pub fn start_decoding(&self, src_ids: &[usize], src_pad_mask: &[bool]) -> Result<DecoderState<T>> {
        let valid: Vec<bool> = src_pad_mask.iter().map(|&p| !p).collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::Empty("source has no unpadded positions".into()));
        }
        let (mem, _) = self.encode_fwd(src_ids, &valid, false, &mut Dropout::off())?;
        let p = self.params();
        let n = src_ids.len();
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in &self.layout.dec {
            cross_k.push(l.cross_attn.k.forward(p, &mem, n));
            cross_v.push(l.cross_attn.v.forward(p, &mem, n));
        }
        let layers = self.layout.dec.len();
        Ok(DecoderState {
            cross_k,
            cross_v,
            src_valid: valid,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            pos: 0,
        })
    }

    /// Feeds one token and returns next-token logits.
    pub fn decode_step(&self, state: &mut DecoderState<T>, token: usize) -> Result<Vec<T>> {
        let c = self.config();
        if state.pos >= c.max_tgt_len {
            return Err(Error::SequenceTooLong {
                len: state.pos + 1,
                max: c.max_tgt_len,
            });
        }
        if token >= c.tgt_vocab {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: c.tgt_vocab,
            });
        }
        let p = self.params();
        let h = c.hidden;
        let heads = c.heads;
        let te = &p.data(self.layout.dec_tok)[token * h..(token + 1) * h];
        let pe = &p.data(self.layout.dec_pos)[state.pos * h..(state.pos + 1) * h];
        let mut x: Vec<T> = te.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        let kv_len = state.pos + 1;
        let src_len = state.src_valid.len();

        for (i, l) in self.layout.dec.iter().enumerate() {
            let (a, _) = l.self_norm.forward(p, &x);
            let q = l.self_attn.q.forward(p, &a, 1);
            state.self_k[i].extend(l.self_attn.k.forward(p, &a, 1));
            state.self_v[i].extend(l.self_attn.v.forward(p, &a, 1));
            let (ctx, _) = attend(&q, &state.self_k[i], &state.self_v[i], 1, kv_len, heads, Mask::NONE);
            let out = l.self_attn.o.forward(p, &ctx, 1);
            x.iter_mut().zip(&out).for_each(|(xv, &o)| *xv += o);

            let (cin, _) = l.cross_norm.forward(p, &x);
            let q = l.cross_attn.q.forward(p, &cin, 1);
            let mask = Mask {
                key_valid: Some(&state.src_valid),
                causal_offset: None,
            };
            let (ctx, _) = attend(&q, &state.cross_k[i], &state.cross_v[i], 1, src_len, heads, mask);
            let out = l.cross_attn.o.forward(p, &ctx, 1);
            x.iter_mut().zip(&out).for_each(|(xv, &o)| *xv += o);

            let (b, _) = l.ffn_norm.forward(p, &x);
            let act: Vec<T> = l.fc1.forward(p, &b, 1).into_iter().map(gelu_scalar).collect();
            let out = l.fc2.forward(p, &act, 1);
            x.iter_mut().zip(&out).for_each(|(xv, &o)| *xv += o);
        }
        state.pos += 1;
        let (logits, _, _) = self.head_fwd(&x, 1);
        Ok(logits)
    }
}
