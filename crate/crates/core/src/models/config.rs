use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The four translation architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Attentional encoder-decoder with Luong attention.
    Baseline,
    /// Encoder-decoder whose attention runs the NTM addressing tail.
    NtmAttention,
    /// Memory-augmented decoder: Luong source attention plus NTM heads on
    /// a private memory.
    Mad,
    /// A single NTM that reads the source, then emits the target.
    PureMann,
}

impl Architecture {
    pub const ALL: [Architecture; 4] =
        [Architecture::Baseline, Architecture::NtmAttention, Architecture::Mad, Architecture::PureMann];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::NtmAttention => "ntm-attention",
            Architecture::Mad => "mad",
            Architecture::PureMann => "pure-mann",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != Architecture::PureMann
    }

    pub fn has_memory(self) -> bool {
        matches!(self, Architecture::Mad | Architecture::PureMann)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("arch", format!("unknown architecture {s:?} (baseline, ntm-attention, mad, pure-mann)")))
    }
}

/// Shape and regularisation of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Vocabulary sizes including the four reserved ids.
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embedding: usize,
    /// Width of every recurrent layer (encoder, decoder, controller).
    pub hidden: usize,
    /// Depth of every recurrent stack.
    pub layers: usize,
    /// Memory locations N (mad, pure-mann).
    pub memory_locations: usize,
    /// Memory cell width W (mad, pure-mann).
    pub memory_width: usize,
    pub read_heads: usize,
    pub write_heads: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    /// Half-width of the uniform weight initialisation.
    pub init_range: f64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, source_vocab: usize, target_vocab: usize) -> Self {
        ModelConfig {
            architecture,
            source_vocab,
            target_vocab,
            embedding: 32,
            hidden: 64,
            layers: 1,
            memory_locations: 16,
            memory_width: 16,
            read_heads: 1,
            write_heads: 1,
            bidirectional: architecture.has_encoder(),
            dropout: 0.3,
            init_range: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("source_vocab", self.source_vocab),
            ("target_vocab", self.target_vocab),
            ("embedding", self.embedding),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("memory_locations", self.memory_locations),
            ("memory_width", self.memory_width),
        ];
        for (field, v) in positive {
            if v < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.source_vocab <= crate::data::RESERVED || self.target_vocab <= crate::data::RESERVED {
            return Err(Error::config("vocab", "vocabularies need at least one token beyond the four reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(Error::config("init_range", "must be finite and nonnegative"));
        }
        if self.architecture.has_memory() && self.read_heads < 1 {
            return Err(Error::config("read_heads", format!("{} needs at least one read head", self.architecture)));
        }
        if self.architecture == Architecture::PureMann && self.bidirectional {
            return Err(Error::config("bidirectional", "pure-mann has no encoder"));
        }
        Ok(())
    }

    /// `key=value` entries in a fixed order; the inverse of [`Self::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.architecture.to_string()),
            ("source_vocab", self.source_vocab.to_string()),
            ("target_vocab", self.target_vocab.to_string()),
            ("embedding", self.embedding.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("memory_locations", self.memory_locations.to_string()),
            ("memory_width", self.memory_width.to_string()),
            ("read_heads", self.read_heads.to_string()),
            ("write_heads", self.write_heads.to_string()),
            ("bidirectional", self.bidirectional.to_string()),
            ("dropout", self.dropout.to_string()),
            ("init_range", self.init_range.to_string()),
        ]
    }

    /// Sets one field from its `entries` key. Returns `Ok(false)` for keys
    /// that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
        }
        match key {
            "arch" => self.architecture = value.trim().parse()?,
            "source_vocab" => self.source_vocab = parse(key, value)?,
            "target_vocab" => self.target_vocab = parse(key, value)?,
            "embedding" => self.embedding = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "memory_locations" => self.memory_locations = parse(key, value)?,
            "memory_width" => self.memory_width = parse(key, value)?,
            "read_heads" => self.read_heads = parse(key, value)?,
            "write_heads" => self.write_heads = parse(key, value)?,
            "bidirectional" => self.bidirectional = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "init_range" => self.init_range = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut c = ModelConfig::new(Architecture::Mad, 20, 30);
        c.dropout = 0.125;
        let mut d = ModelConfig::new(Architecture::Baseline, 5, 5);
        for (k, v) in c.entries() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("beam_width", "3").unwrap());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ModelConfig::new(Architecture::PureMann, 20, 20);
        c.memory_locations = 0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "memory_locations"));
        c.memory_locations = 4;
        c.dropout = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "dropout"));
        assert!("lstm".parse::<Architecture>().is_err());
    }
}
