//! Text checkpoint container.
//!
//! ```text
//! mannmt-checkpoint v1
//! [config]
//! arch=pure-mann
//! hidden=64
//! ...
//! [meta 2]
//! step=2000
//! seed=7
//! [source-vocab 16]
//! 0000
//! ...
//! [target-vocab 16]
//! ...
//! [params 12]
//! decoder.l0.weight 112x256 0.0123 -0.0456 ...
//! ...
//! ```
//!
//! Config lines are the `key=value` entries of [`ModelConfig::entries`].
//! Vocabulary sections list content tokens in id order (reserved ids are
//! implicit). Each parameter line holds the name, the dimensions joined by
//! `x`, then every value in row-major order, written with Rust's shortest
//! round-trip float formatting so a reload is bit exact. Section headers
//! carry their line counts, so tokens never need escaping.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "mannmt-checkpoint v1";

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Free-form `key=value` pairs (training step, seed, …).
    pub meta: Vec<(String, String)>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> Self {
        Checkpoint {
            config: model.config().clone(),
            meta: Vec::new(),
            source_vocab: source_vocab.clone(),
            target_vocab: target_vocab.clone(),
            params: model.params().clone(),
        }
    }

    /// Rebuilds the model; every parameter the config implies must be
    /// present with its shape, and nothing else.
    pub fn to_model(&self) -> Result<Model<T>> {
        if self.config.source_vocab != self.source_vocab.len() || self.config.target_vocab != self.target_vocab.len() {
            return Err(Error::contract(format!(
                "checkpoint vocabularies ({}, {}) disagree with its config ({}, {})",
                self.source_vocab.len(),
                self.target_vocab.len(),
                self.config.source_vocab,
                self.config.target_vocab
            )));
        }
        let mut model = Model::new(self.config.clone(), 0)?;
        if model.params().len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, the config implies {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, value) in self.params.iter() {
            if model.params().id(name).is_none() {
                return Err(Error::contract(format!("checkpoint parameter {name} is not part of a {} model", self.config.architecture)));
            }
            model.params_mut().set(name, value.clone())?;
        }
        Ok(model)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push_str("\n[config]\n");
        for (k, v) in self.config.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("[meta {}]\n", self.meta.len()));
        for (k, v) in &self.meta {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (name, vocab) in [("source-vocab", &self.source_vocab), ("target-vocab", &self.target_vocab)] {
            out.push_str(&format!("[{name} {}]\n", vocab.content().len()));
            for tok in vocab.content() {
                out.push_str(tok);
                out.push('\n');
            }
        }
        out.push_str(&format!("[params {}]\n", self.params.len()));
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(name);
            out.push(' ');
            out.push_str(&dims.join("x"));
            for v in t.data() {
                out.push(' ');
                out.push_str(&v.as_f64().to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|(line, msg)| Error::ingest(path, format!("line {line}: {msg}")))
    }

    /// Errors carry a 1-based line number.
    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or((0, format!("unexpected end of file, expected {what}")));
        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err((n, format!("not a checkpoint (expected {CHECKPOINT_MAGIC:?})")));
        }
        let (n, l) = next("[config]")?;
        if l != "[config]" {
            return Err((n, "expected [config]".into()));
        }
        let mut config: Option<ModelConfig> = None;
        let mut pending: Vec<(usize, String, String)> = Vec::new();
        let (mut n, mut l) = next("[meta]")?;
        while !l.starts_with('[') {
            let (k, v) = l.split_once('=').ok_or((n, format!("expected key=value, got {l:?}")))?;
            if k == "arch" {
                let arch = v.parse().map_err(|e: Error| (n, e.to_string()))?;
                config = Some(ModelConfig::new(arch, 0, 0));
            }
            pending.push((n, k.to_string(), v.to_string()));
            (n, l) = next("[meta]")?;
        }
        let mut config = config.ok_or((n, "config has no arch".to_string()))?;
        for (ln, k, v) in pending {
            match config.set(&k, &v) {
                Ok(true) => {}
                Ok(false) => return Err((ln, format!("unknown config key {k:?}"))),
                Err(e) => return Err((ln, e.to_string())),
            }
        }
        let count = |n: usize, l: &str, name: &str| -> std::result::Result<usize, (usize, String)> {
            l.strip_prefix(&format!("[{name} "))
                .and_then(|r| r.strip_suffix(']'))
                .and_then(|c| c.parse().ok())
                .ok_or((n, format!("expected [{name} <count>], got {l:?}")))
        };
        let mut meta = Vec::new();
        for _ in 0..count(n, l, "meta")? {
            let (n, l) = next("meta entry")?;
            let (k, v) = l.split_once('=').ok_or((n, format!("expected key=value, got {l:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let mut vocabs = Vec::new();
        for name in ["source-vocab", "target-vocab"] {
            let (n, l) = next(name)?;
            let mut toks = Vec::new();
            for _ in 0..count(n, l, name)? {
                toks.push(next("vocabulary token")?.1.to_string());
            }
            vocabs.push(Vocabulary::new(toks).map_err(|e| (n, e.to_string()))?);
        }
        let target_vocab = vocabs.pop().expect("two vocabularies");
        let source_vocab = vocabs.pop().expect("two vocabularies");
        let (n, l) = next("[params]")?;
        let mut params = ParamStore::new();
        for _ in 0..count(n, l, "params")? {
            let (n, l) = next("parameter")?;
            let mut fields = l.split(' ');
            let name = fields.next().filter(|s| !s.is_empty()).ok_or((n, "missing parameter name".to_string()))?;
            let dims: Vec<usize> = fields
                .next()
                .ok_or((n, "missing dimensions".to_string()))?
                .split('x')
                .map(|d| d.parse().map_err(|_| (n, format!("bad dimension {d:?}"))))
                .collect::<std::result::Result<_, _>>()?;
            let values: Vec<T> = fields
                .map(|v| v.parse::<f64>().map(T::lit).map_err(|_| (n, format!("bad value {v:?}"))))
                .collect::<std::result::Result<_, _>>()?;
            let t = Tensor::new(&dims, values).map_err(|e| (n, e.to_string()))?;
            if params.id(name).is_some() {
                return Err((n, format!("duplicate parameter {name}")));
            }
            params.add(name, t);
        }
        if let Some((n, l)) = lines.next() {
            if !l.trim().is_empty() {
                return Err((n, "trailing content".into()));
            }
        }
        Ok(Checkpoint { config, meta, source_vocab, target_vocab, params })
    }
}
