//! Miniature transformer sequence classifier.
//!
//! Post-LN encoder blocks over token + learned positional embeddings, mean
//! pooling over each sequence, and a linear head. Sequences of a batch are
//! packed row-wise (no padding), so attention is block-diagonal per sequence.
//!
//! The eight tracked matrix kinds are addressed by [`TrackedMatrixId`]; all
//! other parameters (biases, layer-norm affine terms, positional embeddings)
//! train normally but are never tracked or masked.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::mask::WeightMask;
use crate::tensor::Tensor;

/// Deterministic RNG used for initialization, dropout and shuffling.
pub type SeedRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 1024,
            max_seq_len: 64,
            n_classes: 2,
            dropout: 0.1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("model config: {name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes != 2 {
            return Err(Error::Validation("model config: only binary classification is supported".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("model config: dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::Validation("model config: ln_eps and init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Layer designator: the unit of freezing and unfreezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Emb,
    /// 1-based encoder layer index.
    Layer(usize),
    Cls,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Emb => f.write_str("emb"),
            Block::Layer(i) => write!(f, "layer{i}"),
            Block::Cls => f.write_str("cls"),
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emb" => Ok(Block::Emb),
            "cls" => Ok(Block::Cls),
            _ => s
                .strip_prefix("layer")
                .and_then(|n| n.parse::<usize>().ok())
                .map(Block::Layer)
                .ok_or_else(|| Error::Validation(format!("unknown layer designator '{s}'"))),
        }
    }
}

impl Serialize for Block {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixKind {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
    Emb,
    Cls,
}

impl MatrixKind {
    pub const LAYER_KINDS: [MatrixKind; 6] =
        [MatrixKind::Wq, MatrixKind::Wk, MatrixKind::Wv, MatrixKind::Wo, MatrixKind::W1, MatrixKind::W2];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Wq => "W_Q",
            MatrixKind::Wk => "W_K",
            MatrixKind::Wv => "W_V",
            MatrixKind::Wo => "W_O",
            MatrixKind::W1 => "W_1",
            MatrixKind::W2 => "W_2",
            MatrixKind::Emb => "W_emb",
            MatrixKind::Cls => "W_cls",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "W_Q" => MatrixKind::Wq,
            "W_K" => MatrixKind::Wk,
            "W_V" => MatrixKind::Wv,
            "W_O" => MatrixKind::Wo,
            "W_1" => MatrixKind::W1,
            "W_2" => MatrixKind::W2,
            "W_emb" => MatrixKind::Emb,
            "W_cls" => MatrixKind::Cls,
            _ => return None,
        })
    }
}

/// One of the tracked weight matrices. Ordering is (block, kind), which is
/// the canonical matrix order used for tie-breaking in rankings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackedMatrixId {
    block: Block,
    kind: MatrixKind,
}

impl TrackedMatrixId {
    pub fn new(block: Block, kind: MatrixKind) -> Result<Self> {
        let ok = match (block, kind) {
            (Block::Emb, MatrixKind::Emb) | (Block::Cls, MatrixKind::Cls) => true,
            (Block::Layer(i), k) => i >= 1 && !matches!(k, MatrixKind::Emb | MatrixKind::Cls),
            _ => false,
        };
        if !ok {
            return Err(Error::Validation(format!("invalid tracked matrix pairing {block}/{}", kind.name())));
        }
        Ok(Self { block, kind })
    }

    pub fn emb() -> Self {
        Self { block: Block::Emb, kind: MatrixKind::Emb }
    }

    pub fn cls() -> Self {
        Self { block: Block::Cls, kind: MatrixKind::Cls }
    }

    pub fn layer(layer: usize, kind: MatrixKind) -> Result<Self> {
        Self::new(Block::Layer(layer), kind)
    }

    pub fn block(&self) -> Block {
        self.block
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }
}

impl fmt::Display for TrackedMatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.kind.name())
    }
}

impl FromStr for TrackedMatrixId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (b, k) = s
            .split_once('.')
            .ok_or_else(|| Error::Validation(format!("malformed matrix id '{s}'")))?;
        let kind = MatrixKind::from_name(k).ok_or_else(|| Error::Validation(format!("unknown matrix kind '{k}'")))?;
        Self::new(b.parse()?, kind)
    }
}

impl Serialize for TrackedMatrixId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrackedMatrixId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub block: Block,
    pub tracked: Option<TrackedMatrixId>,
    pub value: Tensor,
}

const EMB_PARAMS: usize = 4;
const LAYER_PARAMS: usize = 16;

// Offsets within a layer's parameter run.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1G: usize = 8;
const LN1B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2G: usize = 14;
const LN2B: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    trainable: BTreeSet<Block>,
    seed: u64,
}

impl EncoderModel {
    /// Random initialization: matrices and embeddings ~ N(0, init_std²),
    /// biases zero, layer-norm gains one. Everything starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Validation(e.to_string()))?;
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut params = Vec::new();
        let mut push = |name: String, block: Block, tracked: Option<TrackedMatrixId>, value: Tensor| {
            params.push(Parameter { name, block, tracked, value });
        };
        push("emb.W_emb".into(), Block::Emb, Some(TrackedMatrixId::emb()), randn(&[v, d]));
        push("emb.pos".into(), Block::Emb, None, randn(&[config.max_seq_len, d]));
        push("emb.ln_gain".into(), Block::Emb, None, Tensor::filled(&[d], 1.0));
        push("emb.ln_bias".into(), Block::Emb, None, Tensor::zeros(&[d]));
        for layer in 1..=config.n_layers {
            let b = Block::Layer(layer);
            let id = |k| Some(TrackedMatrixId::layer(layer, k).expect("valid layer id"));
            let p = |s: &str| format!("layer{layer}.{s}");
            push(p("W_Q"), b, id(MatrixKind::Wq), randn(&[d, d]));
            push(p("b_Q"), b, None, Tensor::zeros(&[d]));
            push(p("W_K"), b, id(MatrixKind::Wk), randn(&[d, d]));
            push(p("b_K"), b, None, Tensor::zeros(&[d]));
            push(p("W_V"), b, id(MatrixKind::Wv), randn(&[d, d]));
            push(p("b_V"), b, None, Tensor::zeros(&[d]));
            push(p("W_O"), b, id(MatrixKind::Wo), randn(&[d, d]));
            push(p("b_O"), b, None, Tensor::zeros(&[d]));
            push(p("ln1_gain"), b, None, Tensor::filled(&[d], 1.0));
            push(p("ln1_bias"), b, None, Tensor::zeros(&[d]));
            push(p("W_1"), b, id(MatrixKind::W1), randn(&[d, f]));
            push(p("b_1"), b, None, Tensor::zeros(&[f]));
            push(p("W_2"), b, id(MatrixKind::W2), randn(&[f, d]));
            push(p("b_2"), b, None, Tensor::zeros(&[d]));
            push(p("ln2_gain"), b, None, Tensor::filled(&[d], 1.0));
            push(p("ln2_bias"), b, None, Tensor::zeros(&[d]));
        }
        push("cls.W_cls".into(), Block::Cls, Some(TrackedMatrixId::cls()), randn(&[d, config.n_classes]));
        push("cls.b_cls".into(), Block::Cls, None, Tensor::zeros(&[config.n_classes]));
        let trainable = all_blocks(config.n_layers).into_iter().collect();
        Ok(Self { config, params, trainable, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Every tracked matrix id valid for this model, in canonical order.
    pub fn tracked_ids(&self) -> Vec<TrackedMatrixId> {
        let mut ids: Vec<_> = self.params.iter().filter_map(|p| p.tracked).collect();
        ids.sort();
        ids
    }

    fn tracked_index(&self, id: TrackedMatrixId) -> Option<usize> {
        match id.block {
            Block::Emb => Some(0),
            Block::Cls => Some(EMB_PARAMS + self.config.n_layers * LAYER_PARAMS),
            Block::Layer(l) if l >= 1 && l <= self.config.n_layers => {
                let off = match id.kind {
                    MatrixKind::Wq => WQ,
                    MatrixKind::Wk => WK,
                    MatrixKind::Wv => WV,
                    MatrixKind::Wo => WO,
                    MatrixKind::W1 => W1,
                    MatrixKind::W2 => W2,
                    _ => return None,
                };
                Some(EMB_PARAMS + (l - 1) * LAYER_PARAMS + off)
            }
            Block::Layer(_) => None,
        }
    }

    pub fn tracked(&self, id: TrackedMatrixId) -> Option<&Tensor> {
        self.tracked_index(id).map(|i| &self.params[i].value)
    }

    pub fn tracked_mut(&mut self, id: TrackedMatrixId) -> Option<&mut Tensor> {
        self.tracked_index(id).map(move |i| &mut self.params[i].value)
    }

    /// Total number of tracked entries, optionally excluding the head.
    pub fn tracked_universe_size(&self, include_cls: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.tracked.is_some_and(|id| include_cls || id.block != Block::Cls))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable(&self) -> &BTreeSet<Block> {
        &self.trainable
    }

    pub fn is_trainable(&self, block: Block) -> bool {
        self.trainable.contains(&block)
    }

    /// Restricts optimizer updates to the given designators.
    pub fn set_trainable(&mut self, blocks: &[Block]) -> Result<()> {
        for &b in blocks {
            if let Block::Layer(i) = b {
                if i == 0 || i > self.config.n_layers {
                    return Err(Error::Validation(format!(
                        "layer designator {b} outside 1..={}",
                        self.config.n_layers
                    )));
                }
            }
        }
        self.trainable = blocks.iter().copied().collect();
        Ok(())
    }

    /// Logits `[2]` for a single sequence (evaluation mode).
    pub fn forward(&self, token_ids: &[u32]) -> Result<Tensor> {
        let logits = self.logits_batch(&[token_ids])?;
        Tensor::new(vec![self.config.n_classes], logits.into_data())
    }

    /// Logits `[B×2]` for a batch, evaluation mode.
    pub fn logits_batch(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let (logits, _) = self.build(&mut graph, seqs, None)?;
        Ok(graph.value(logits).clone())
    }

    /// Positive-class probabilities, evaluated in chunks.
    pub fn predict_proba(&self, seqs: &[&[u32]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let logits = self.logits_batch(chunk)?;
            for row in logits.data().chunks(2) {
                out.push(positive_probability(row[0], row[1]));
            }
        }
        Ok(out)
    }

    /// Records the forward pass on `graph`. Returns the logits node and one
    /// leaf per parameter (in `params()` order); leaves require gradients
    /// only for trainable blocks, and only when `dropout_rng` is given.
    pub fn build(
        &self,
        graph: &mut Graph,
        seqs: &[&[u32]],
        mut dropout_rng: Option<&mut SeedRng>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Validation("empty token sequence".into()));
            }
            if s.len() > cfg.max_seq_len {
                return Err(Error::Validation(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    s.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Validation(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
            }
            segments.push(Segment { start: ids.len(), len: s.len() });
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
        }

        let training = dropout_rng.is_some();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), training && self.trainable.contains(&p.block)))
            .collect();
        let rate = cfg.dropout;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(x, rate, rng),
                None => Ok(x),
            }
        };

        let tok = graph.embedding(vars[0], &ids)?;
        let pe = graph.embedding(vars[1], &pos)?;
        let h = graph.add(tok, pe)?;
        let h = graph.layer_norm(h, vars[2], vars[3], cfg.ln_eps)?;
        let mut h = drop(graph, h)?;

        for layer in 0..cfg.n_layers {
            let p = |off: usize| vars[EMB_PARAMS + layer * LAYER_PARAMS + off];
            let q = graph.matmul(h, p(WQ))?;
            let q = graph.add_row(q, p(BQ))?;
            let k = graph.matmul(h, p(WK))?;
            let k = graph.add_row(k, p(BK))?;
            let v = graph.matmul(h, p(WV))?;
            let v = graph.add_row(v, p(BV))?;
            let a = graph.attention(q, k, v, &segments, cfg.n_heads)?;
            let o = graph.matmul(a, p(WO))?;
            let o = graph.add_row(o, p(BO))?;
            let o = drop(graph, o)?;
            let r = graph.add(h, o)?;
            let h1 = graph.layer_norm(r, p(LN1G), p(LN1B), cfg.ln_eps)?;
            let f = graph.matmul(h1, p(W1))?;
            let f = graph.add_row(f, p(B1))?;
            let f = graph.gelu(f)?;
            let f = graph.matmul(f, p(W2))?;
            let f = graph.add_row(f, p(B2))?;
            let f = drop(graph, f)?;
            let r = graph.add(h1, f)?;
            h = graph.layer_norm(r, p(LN2G), p(LN2B), cfg.ln_eps)?;
        }

        let cls = EMB_PARAMS + cfg.n_layers * LAYER_PARAMS;
        let pooled = graph.segment_mean(h, &segments)?;
        let logits = graph.matmul(pooled, vars[cls])?;
        let logits = graph.add_row(logits, vars[cls + 1])?;
        Ok((logits, vars))
    }

    /// Copy with every masked coordinate set to exactly zero.
    pub fn apply_mask(&self, mask: &WeightMask) -> Result<EncoderModel> {
        let mut out = self.clone();
        for coord in mask.coords() {
            let t = out.tracked_mut(coord.matrix).ok_or_else(|| {
                Error::Validation(format!("mask addresses matrix {} absent from the model", coord.matrix))
            })?;
            let len = t.len();
            let slot = t.data_mut().get_mut(coord.index).ok_or_else(|| {
                Error::Validation(format!("mask index {} out of range for {} ({len} entries)", coord.index, coord.matrix))
            })?;
            *slot = 0.0;
        }
        Ok(out)
    }

    /// SHA-256 over config, seed and raw parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.seed.to_le_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            trainable: self.trainable.iter().copied().collect(),
            params: self
                .params
                .iter()
                .map(|p| NamedArray { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        let mut model = EncoderModel::new(ckpt.config, ckpt.seed)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} arrays, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (p, arr) in model.params.iter_mut().zip(ckpt.params) {
            if p.name != arr.name || p.value.shape() != arr.shape.as_slice() {
                return Err(Error::Format(format!("checkpoint array '{}' does not match '{}'", arr.name, p.name)));
            }
            p.value = Tensor::new(arr.shape, arr.data)?;
        }
        model.set_trainable(&ckpt.trainable)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.to_checkpoint())?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "deconf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint (JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub trainable: Vec<Block>,
    pub params: Vec<NamedArray>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `{emb, layer1, …, layerN, cls}`.
pub fn all_blocks(n_layers: usize) -> Vec<Block> {
    let mut v = vec![Block::Emb];
    v.extend((1..=n_layers).map(Block::Layer));
    v.push(Block::Cls);
    v
}

/// Softmax probability of class 1 from a two-logit row.
pub fn positive_probability(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 20, max_seq_len: 10, ..Default::default() }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_tracked_id_appears_once() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        let ids = m.tracked_ids();
        assert_eq!(ids.len(), 2 + 6 * 2);
        let unique: BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
        for id in ids {
            assert!(m.tracked(id).is_some());
        }
    }

    #[test]
    fn matrix_id_pairings() {
        assert!(TrackedMatrixId::new(Block::Emb, MatrixKind::Cls).is_err());
        assert!(TrackedMatrixId::new(Block::Layer(1), MatrixKind::Emb).is_err());
        assert!(TrackedMatrixId::new(Block::Layer(0), MatrixKind::Wq).is_err());
        let id: TrackedMatrixId = "layer3.W_V".parse().unwrap();
        assert_eq!(id, TrackedMatrixId::layer(3, MatrixKind::Wv).unwrap());
        assert_eq!(id.to_string(), "layer3.W_V");
        assert!("cls.W_emb".parse::<TrackedMatrixId>().is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = EncoderModel::new(tiny(), 3).unwrap();
        m.tracked_mut(TrackedMatrixId::cls()).unwrap().data_mut().fill(0.0);
        assert_eq!(m.forward(&[1, 2, 3]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = EncoderModel::new(tiny(), 9).unwrap();
        let b = EncoderModel::new(tiny(), 9).unwrap();
        assert_eq!(a.forward(&[4, 5, 6, 7]).unwrap(), b.forward(&[4, 5, 6, 7]).unwrap());
    }

    #[test]
    fn perturbing_value_matrix_changes_logits() {
        let m = EncoderModel::new(tiny(), 5).unwrap();
        let mut p = m.clone();
        let id = TrackedMatrixId::layer(1, MatrixKind::Wv).unwrap();
        p.tracked_mut(id).unwrap().data_mut()[3] += 1e-3;
        assert_ne!(m.forward(&[1, 2, 3]).unwrap(), p.forward(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let m = EncoderModel::new(tiny(), 5).unwrap();
        assert!(matches!(m.forward(&[20]), Err(Error::Validation(_))));
        assert!(matches!(m.forward(&[1; 11]), Err(Error::Validation(_))));
        assert!(matches!(m.forward(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn batched_and_single_forward_agree() {
        let m = EncoderModel::new(tiny(), 11).unwrap();
        let a: &[u32] = &[1, 2, 3];
        let b: &[u32] = &[7, 8, 9, 10, 11];
        let batch = m.logits_batch(&[a, b]).unwrap();
        let single = m.forward(b).unwrap();
        for (x, y) in batch.data()[2..].iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn set_trainable_rejects_unknown_layer() {
        let mut m = EncoderModel::new(tiny(), 1).unwrap();
        assert!(m.set_trainable(&[Block::Layer(3)]).is_err());
        assert!(m.set_trainable(&[Block::Cls, Block::Layer(2)]).is_ok());
        assert!(!m.is_trainable(Block::Emb));
        assert!("layerx".parse::<Block>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = EncoderModel::new(tiny(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = EncoderModel::load(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.fingerprint(), back.fingerprint());
        assert_eq!(m.forward(&[3, 1, 4]).unwrap(), back.forward(&[3, 1, 4]).unwrap());
    }
}
