//! The named-parameter schema and the store holding parameter values.

use std::collections::HashMap;

use crate::nn::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::config::{ModelConfig, Part};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SchemaBuilder(Vec<ParamSpec>);

impl SchemaBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) {
        self.push(format!("{prefix}.weight"), vec![inp, out], Init::Normal);
        self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, h: usize) {
        self.push(format!("{prefix}.weight"), vec![h], Init::Ones);
        self.push(format!("{prefix}.bias"), vec![h], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, h: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), h, h);
        }
    }

    fn ffn(&mut self, prefix: &str, h: usize, inner: usize) {
        self.linear(&format!("{prefix}.fc1"), h, inner);
        self.linear(&format!("{prefix}.fc2"), inner, h);
    }
}

/// Every parameter of the model in canonical order. Weight matrices are
/// stored `[in, out]`.
pub fn param_schema(config: &ModelConfig) -> Vec<ParamSpec> {
    let h = config.hidden;
    let mut s = SchemaBuilder(Vec::new());
    s.push("encoder.embed_tokens.weight".into(), vec![config.src_vocab, h], Init::Normal);
    s.push("encoder.embed_positions.weight".into(), vec![config.max_src_len, h], Init::Normal);
    for i in 0..config.enc_layers {
        let p = format!("encoder.layer.{i}");
        s.attention(&format!("{p}.self_attn"), h);
        s.norm(&format!("{p}.self_attn_norm"), h);
        s.ffn(&format!("{p}.ffn"), h, config.ffn);
        s.norm(&format!("{p}.ffn_norm"), h);
    }
    s.push("decoder.embed_tokens.weight".into(), vec![config.tgt_vocab, h], Init::Normal);
    s.push("decoder.embed_positions.weight".into(), vec![config.max_tgt_len, h], Init::Normal);
    for i in 0..config.dec_layers {
        let p = format!("decoder.layer.{i}");
        s.attention(&format!("{p}.self_attn"), h);
        s.norm(&format!("{p}.self_attn_norm"), h);
        s.attention(&format!("{p}.cross_attn"), h);
        s.norm(&format!("{p}.cross_attn_norm"), h);
        s.ffn(&format!("{p}.ffn"), h, config.ffn);
        s.norm(&format!("{p}.ffn_norm"), h);
    }
    s.norm("decoder.final_norm", h);
    s.linear("decoder.output", h, config.tgt_vocab);
    s.0
}

/// Exact parameter count of one part, by enumerating the schema.
pub fn count_params(config: &ModelConfig, part: Part) -> usize {
    param_schema(config)
        .iter()
        .filter(|p| p.name.starts_with(part.prefix()))
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Whether AdamW should skip weight decay for this parameter.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("_norm.") || name.contains(".norm.")
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_specs(specs: &[ParamSpec], rng: &mut Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::Normal => Tensor::randn(&spec.shape, INIT_STD, rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
            };
            store.push(spec.name.clone(), t);
        }
        store
    }

    pub fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        let id = self.tensors.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn data(&self, id: usize) -> &[T] {
        self.tensors[id].data()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_values());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            bufs: (0..store.len())
                .map(|i| vec![T::zero(); store.get(i).len()])
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.bufs.iter().flatten().copied().collect()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_exempt_rules() {
        let specs = param_schema(&ModelConfig::tiny(300));
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.contains(&"encoder.layer.1.self_attn.q.weight".to_string()));
        assert!(is_decay_exempt("decoder.final_norm.weight"));
        assert!(is_decay_exempt("encoder.layer.0.ffn_norm.bias"));
        assert!(is_decay_exempt("decoder.layer.0.ffn.fc1.bias"));
        assert!(!is_decay_exempt("decoder.layer.0.ffn.fc1.weight"));
        assert!(!is_decay_exempt("encoder.embed_tokens.weight"));
    }

    #[test]
    fn parts_sum_to_all() {
        for name in ModelConfig::PRESETS {
            let c = ModelConfig::preset(name, 500).unwrap();
            assert_eq!(
                count_params(&c, Part::All),
                count_params(&c, Part::Encoder) + count_params(&c, Part::Decoder)
            );
        }
    }
}
