//! Encoder classifier: token and learned positional embeddings, a stack of
//! pre-norm encoder blocks, final RMSNorm, masked mean pooling and a linear
//! head.
//!
//! Each block computes
//!
//! ```text
//! y = x + Attn(RMSNorm(x))
//! z = y + FFN(RMSNorm(y)),   FFN(u) = W_down · (silu(u·W_gate) ⊙ u·W_up)
//! ```

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::attention::{
    AttentionLayer, ConstraintKind, DtAttentionLayer, NdtAttentionLayer, VanillaAttentionLayer,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, Mask, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Vanilla,
    Dt,
    Ndt,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::Dt => "dt",
            Mechanism::Ndt => "ndt",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Mechanism::Vanilla),
            "dt" => Ok(Mechanism::Dt),
            "ndt" => Ok(Mechanism::Ndt),
            other => Err(Error::Config(format!(
                "unknown mechanism '{other}' (expected vanilla, dt, ndt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Attention components; only meaningful for NDT (DT always uses 2,
    /// vanilla 1).
    pub n_components: usize,
    pub constraint: ConstraintKind,
    pub mechanism: Mechanism,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    /// Dropout probability on sub-layer outputs during training; 0 disables.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            n_components: 2,
            constraint: ConstraintKind::Bounded01,
            mechanism: Mechanism::Ndt,
            ffn_hidden: 512,
            max_seq_len: 256,
            n_classes,
            dropout: 0.0,
        }
    }

    /// Sets `d_model` and the default `4 · d_model` FFN width.
    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.ffn_hidden = 4 * d_model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return fail(format!("d_model must be a positive multiple of 4, got {}", self.d_model));
        }
        if self.n_heads == 0 || !(self.d_model / 2).is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model/2 = {} is not divisible by n_heads = {}",
                self.d_model / 2,
                self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.vocab_size < 2 || self.n_classes < 2 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return fail(format!(
                "vocab_size ({}) and n_classes ({}) must be >= 2, ffn_hidden and max_seq_len >= 1",
                self.vocab_size, self.n_classes
            ));
        }
        match self.mechanism {
            Mechanism::Ndt if !(1..=4).contains(&self.n_components) => {
                fail(format!("NDT supports 1..=4 components, got {}", self.n_components))
            }
            Mechanism::Dt if self.n_components != 2 => {
                fail(format!("DT uses exactly 2 components, got {}", self.n_components))
            }
            _ if !(0.0..1.0).contains(&self.dropout) => {
                fail(format!("dropout must lie in [0, 1), got {}", self.dropout))
            }
            _ => Ok(()),
        }
    }

    /// Effective number of attention maps per layer.
    pub fn effective_components(&self) -> usize {
        match self.mechanism {
            Mechanism::Vanilla => 1,
            Mechanism::Dt => 2,
            Mechanism::Ndt => self.n_components,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SwiGluWeights {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: AttentionLayer,
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    pub ffn: SwiGluWeights,
}

/// Whether a forward pass is for training (dropout active) or inference.
pub enum ForwardMode<'r> {
    Eval,
    Train(&'r mut dyn rand::RngCore),
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl ClassifierModel {
    /// Declares every parameter; values are placeholders until
    /// [`crate::training::init_parameters`] runs.
    pub fn uninitialized(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut ps = ParamStore::new();
        let token_embedding = ps.declare("embed.token", &[config.vocab_size, d], ParamGroup::Main, Init::XavierUniform);
        let position_embedding =
            ps.declare("embed.position", &[config.max_seq_len, d], ParamGroup::Main, Init::XavierUniform);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let prefix = format!("layer{}", l + 1);
            let attn_norm = ps.declare(format!("{prefix}.attn_norm.gain"), &[d], ParamGroup::Main, Init::Constant(1.0));
            let ap = format!("{prefix}.attn");
            let attention = match config.mechanism {
                Mechanism::Vanilla => {
                    AttentionLayer::Vanilla(VanillaAttentionLayer::new(&mut ps, &ap, d, config.n_heads)?)
                }
                Mechanism::Dt => AttentionLayer::Dt(DtAttentionLayer::new(&mut ps, &ap, d, config.n_heads)?),
                Mechanism::Ndt => AttentionLayer::Ndt(NdtAttentionLayer::new(
                    &mut ps,
                    &ap,
                    d,
                    config.n_heads,
                    config.n_components,
                    config.constraint,
                    l + 1,
                )?),
            };
            let ffn_norm = ps.declare(format!("{prefix}.ffn_norm.gain"), &[d], ParamGroup::Main, Init::Constant(1.0));
            let h = config.ffn_hidden;
            let ffn = SwiGluWeights {
                w_gate: ps.declare(format!("{prefix}.ffn.w_gate"), &[d, h], ParamGroup::Main, Init::XavierUniform),
                w_up: ps.declare(format!("{prefix}.ffn.w_up"), &[d, h], ParamGroup::Main, Init::XavierUniform),
                w_down: ps.declare(format!("{prefix}.ffn.w_down"), &[h, d], ParamGroup::Main, Init::XavierUniform),
            };
            layers.push(EncoderLayer {
                attention,
                attn_norm,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = ps.declare("final_norm.gain", &[d], ParamGroup::Main, Init::Constant(1.0));
        let head_weight = ps.declare("head.weight", &[d, config.n_classes], ParamGroup::Main, Init::XavierUniform);
        let head_bias = ps.declare("head.bias", &[config.n_classes], ParamGroup::Main, Init::Constant(0.0));
        Ok(Self {
            config,
            params: ps,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            head_weight,
            head_bias,
        })
    }

    /// Builds and initializes a model from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::uninitialized(config)?;
        crate::training::init_parameters(&mut m, seed);
        Ok(m)
    }

    pub fn validate_input(&self, ids: &[usize], mask: &Mask) -> Result<(usize, usize)> {
        let s = mask.shape();
        if s.len() != 2 || s[0] * s[1] != ids.len() {
            return Err(Error::Dimension(format!(
                "{} token ids do not fit mask shape {s:?}",
                ids.len()
            )));
        }
        let (b, seq) = (s[0], s[1]);
        if seq > self.config.max_seq_len {
            return Err(Error::Dimension(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Dimension(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        for (row, r) in mask.data().chunks(seq).enumerate() {
            if !r.iter().any(|&m| m) {
                return Err(Error::Dimension(format!("sequence {row} is empty (fully padded)")));
            }
        }
        Ok((b, seq))
    }

    /// Final normalized hidden states `[b, s, d]`.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize], mask: &Mask, mut mode: ForwardMode<'_>) -> Result<Var> {
        let (b, seq) = self.validate_input(ids, mask)?;
        let tok_table = g.param(self.token_embedding);
        let tok = g.gather_rows(tok_table, ids, &[b, seq])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pos_table = g.param(self.position_embedding);
        let pos = g.gather_rows(pos_table, &positions, &[b, seq])?;
        let mut x = g.add(tok, pos)?;
        for layer in &self.layers {
            x = encoder_layer_with(g, x, layer, mask, self.config.dropout, &mut mode)?;
        }
        let gain = g.param(self.final_norm);
        rmsnorm(g, x, gain)
    }

    /// Mean of final hidden states over unmasked positions, `[b, d]`.
    pub fn pooled(&self, g: &mut Graph<'_>, ids: &[usize], mask: &Mask, mode: ForwardMode<'_>) -> Result<Var> {
        let h = self.encode(g, ids, mask, mode)?;
        g.masked_mean_pool(h, mask)
    }

    /// Class logits `[b, n_classes]`.
    pub fn logits(&self, g: &mut Graph<'_>, ids: &[usize], mask: &Mask, mode: ForwardMode<'_>) -> Result<Var> {
        let pooled = self.pooled(g, ids, mask, mode)?;
        let w = g.param(self.head_weight);
        let bias = g.param(self.head_bias);
        let z = g.matmul(pooled, w)?;
        g.add_row(z, bias)
    }

    /// Learned coefficients: `(layer (1-based), component, value)`.
    pub fn lambda_snapshot(&self) -> Vec<(usize, usize, f64)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                layer
                    .attention
                    .lambda_snapshot(&self.params)
                    .into_iter()
                    .map(move |(c, v)| (l + 1, c, v))
            })
            .collect()
    }

    /// Clamps coefficient targets and biases into their constraint ranges.
    pub fn project_coefficients(&mut self) {
        for layer in &self.layers {
            layer.attention.project_coefficients(&mut self.params);
        }
    }
}

/// `x / sqrt(mean(x²) + 1e-6) ⊙ gain` over the last axis.
pub fn rmsnorm(g: &mut Graph<'_>, x: Var, gain: Var) -> Result<Var> {
    g.rms_norm(x, gain, RMS_EPS)
}

/// `W_down · (silu(x·W_gate) ⊙ (x·W_up))`.
pub fn swiglu_ffn(g: &mut Graph<'_>, x: Var, w: &SwiGluWeights) -> Result<Var> {
    let gate_w = g.param(w.w_gate);
    let up_w = g.param(w.w_up);
    let down_w = g.param(w.w_down);
    let gate = g.matmul(x, gate_w)?;
    let gate = g.silu(gate);
    let up = g.matmul(x, up_w)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, down_w)
}

/// One pre-norm encoder block in inference mode.
pub fn encoder_layer(g: &mut Graph<'_>, x: Var, layer: &EncoderLayer, pad_mask: &Mask) -> Result<Var> {
    encoder_layer_with(g, x, layer, pad_mask, 0.0, &mut ForwardMode::Eval)
}

fn encoder_layer_with(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayer,
    pad_mask: &Mask,
    dropout: f64,
    mode: &mut ForwardMode<'_>,
) -> Result<Var> {
    let n1 = g.param(layer.attn_norm);
    let h = rmsnorm(g, x, n1)?;
    let a = layer.attention.forward(g, h, pad_mask)?.output;
    let a = apply_dropout(g, a, dropout, mode)?;
    let y = g.add(x, a)?;
    let n2 = g.param(layer.ffn_norm);
    let h = rmsnorm(g, y, n2)?;
    let f = swiglu_ffn(g, h, &layer.ffn)?;
    let f = apply_dropout(g, f, dropout, mode)?;
    g.add(y, f)
}

fn apply_dropout(g: &mut Graph<'_>, x: Var, p: f64, mode: &mut ForwardMode<'_>) -> Result<Var> {
    let ForwardMode::Train(rng) = mode else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let m: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mv = g.constant(Tensor::new(shape, m)?);
    g.mul(x, mv)
}

/// Logits for a batch in inference mode.
pub fn forward(g: &mut Graph<'_>, model: &ClassifierModel, ids: &[usize], pad_mask: &Mask) -> Result<Var> {
    model.logits(g, ids, pad_mask, ForwardMode::Eval)
}

/// Pre-head pooled representation for a batch.
pub fn pooled_embedding(model: &ClassifierModel, ids: &[usize], pad_mask: &Mask) -> Result<Tensor> {
    let mut g = Graph::new(&model.params);
    let p = model.pooled(&mut g, ids, pad_mask, ForwardMode::Eval)?;
    Ok(g.tensor(p))
}

/// Class logits for a batch, detached from any graph.
pub fn predict_logits(model: &ClassifierModel, ids: &[usize], pad_mask: &Mask) -> Result<Tensor> {
    let mut g = Graph::new(&model.params);
    let z = forward(&mut g, model, ids, pad_mask)?;
    Ok(g.tensor(z))
}

/// Trainable-scalar count with a per-tensor breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

pub fn param_count(model: &ClassifierModel) -> ParamCount {
    let breakdown: Vec<(String, usize)> = model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.numel()))
        .collect();
    ParamCount {
        total: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
    }
}

/// Parameter count minus that of a vanilla model of identical config.
pub fn delta_params_vs_vanilla(model: &ClassifierModel) -> Result<i64> {
    let mut cfg = model.config.clone();
    cfg.mechanism = Mechanism::Vanilla;
    cfg.n_components = 1;
    let vanilla = ClassifierModel::uninitialized(cfg)?;
    Ok(param_count(model).total as i64 - param_count(&vanilla).total as i64)
}

#[cfg(test)]
mod tests;
