use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
}

/// Which stack a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    All,
}

impl Part {
    pub fn prefix(self) -> &'static str {
        match self {
            Part::Encoder => "encoder.",
            Part::Decoder => "decoder.",
            Part::All => "",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" | "encoder-only" => Ok(Part::Encoder),
            "decoder" | "decoder-only" => Ok(Part::Decoder),
            "all" | "full" => Ok(Part::All),
            other => Err(Error::InvalidArgument(format!("unknown part {other:?}"))),
        }
    }
}

/// Size of the character-level ABC vocabulary on the target side.
pub const DEFAULT_TGT_VOCAB: usize = crate::abc::ABC_VOCAB_SIZE;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn table1(layers: usize, hidden: usize, heads: usize, src_vocab: usize, max_src_len: usize) -> Self {
        ModelConfig {
            enc_layers: layers,
            dec_layers: layers,
            hidden,
            heads,
            ffn: 4 * hidden,
            src_vocab,
            tgt_vocab: DEFAULT_TGT_VOCAB,
            max_src_len,
            max_tgt_len: 1024,
            dropout: 0.1,
        }
    }

    /// Randomly initialized 12+12 model with the frequency-pruned BPE vocabulary.
    pub fn rnd() -> Self {
        Self::table1(12, 768, 12, 7418, 1024)
    }

    /// BERT-base-cased-sized encoder.
    pub fn bert() -> Self {
        Self::table1(12, 768, 12, 28_996, 512)
    }

    /// GPT-2-small-sized encoder.
    pub fn gpt2() -> Self {
        Self::table1(12, 768, 12, 50_257, 1024)
    }

    pub fn bart_base() -> Self {
        Self::table1(6, 768, 16, 50_265, 1024)
    }

    pub fn bart_large() -> Self {
        Self::table1(12, 1024, 16, 50_265, 1024)
    }

    /// Desk-scale 2+2 model.
    pub fn tiny(src_vocab: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            hidden: 128,
            heads: 4,
            ffn: 512,
            src_vocab,
            tgt_vocab: DEFAULT_TGT_VOCAB,
            max_src_len: 256,
            max_tgt_len: 512,
            dropout: 0.0,
        }
    }

    /// Looks up a named preset. `src_vocab` replaces the preset's source
    /// vocabulary size for `tiny`, and is ignored otherwise.
    pub fn preset(name: &str, src_vocab: usize) -> Result<Self> {
        match name {
            "rnd" => Ok(Self::rnd()),
            "bert" => Ok(Self::bert()),
            "gpt2" => Ok(Self::gpt2()),
            "bart-base" => Ok(Self::bart_base()),
            "bart-large" => Ok(Self::bart_large()),
            "tiny" => Ok(Self::tiny(src_vocab)),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub const PRESETS: [&'static str; 6] = ["rnd", "bert", "gpt2", "bart-base", "bart-large", "tiny"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ModelConfig::PRESETS {
            ModelConfig::preset(name, 300).unwrap().validate().unwrap();
        }
        let large = ModelConfig::bart_large();
        assert_eq!((large.enc_layers, large.hidden, large.heads), (12, 1024, 16));
        assert_eq!(ModelConfig::bart_base().head_dim(), 48);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::tiny(300);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(300);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(300);
        c.dec_layers = 0;
        assert!(c.validate().is_err());
    }
}
