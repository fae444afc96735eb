//! Attention mechanisms: multi-component additive (NDT), two-map
//! subtractive (DT), and standard scaled dot-product (vanilla).
//!
//! All three share one kernel, [`mix_attention`]: every component `i` owns a
//! query/key projection pair and produces a per-head softmax map; the maps
//! are combined with signed coefficients and applied to a single shared
//! value projection, after which heads are concatenated and projected.
//!
//! ```text
//! head_h = Σ_i c_i · softmax(Q_{i,h} K_{i,h}ᵀ / √d_head) · V_h
//! out    = concat(head_1 .. head_H) · W_O
//! ```
//!
//! NDT fixes `c_0 = 1` and learns `c_i = λ_i` for `i ≥ 1`, DT uses
//! `(1, −λ)`, vanilla has a single component with `c_0 = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Init, Mask, ParamGroup, ParamId, ParamStore, Var};

/// Initial value of the learnable bias term of every coefficient.
pub const BETA_INIT: f64 = 0.05;
/// Initialization target of the subtractive baseline's coefficient.
pub const DT_ALPHA_INIT: f64 = 0.8;
/// Standard deviation of raw query/key coefficient vectors at init.
pub const LAMBDA_INIT_STD: f64 = 0.02;

/// Range restriction applied to raw coefficient parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// sigmoid, codomain (0, 1)
    Bounded01,
    /// tanh, codomain (−1, 1)
    Symmetric11,
    /// relu, codomain [0, ∞)
    NonNegative,
    /// identity
    Unconstrained,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 4] = [
        ConstraintKind::Bounded01,
        ConstraintKind::Symmetric11,
        ConstraintKind::NonNegative,
        ConstraintKind::Unconstrained,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ConstraintKind::Bounded01 => sigmoid(x),
            ConstraintKind::Symmetric11 => x.tanh(),
            ConstraintKind::NonNegative => x.max(0.0),
            ConstraintKind::Unconstrained => x,
        }
    }

    /// Closed hull of the codomain.
    pub fn closed_range(self) -> (f64, f64) {
        match self {
            ConstraintKind::Bounded01 => (0.0, 1.0),
            ConstraintKind::Symmetric11 => (-1.0, 1.0),
            ConstraintKind::NonNegative => (0.0, f64::INFINITY),
            ConstraintKind::Unconstrained => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn clamp(self, v: f64) -> f64 {
        let (lo, hi) = self.closed_range();
        v.clamp(lo, hi)
    }

    /// Membership in the exact codomain (open where the mapping is open).
    pub fn in_codomain(self, v: f64) -> bool {
        match self {
            ConstraintKind::Bounded01 => v > 0.0 && v < 1.0,
            ConstraintKind::Symmetric11 => v > -1.0 && v < 1.0,
            ConstraintKind::NonNegative => v >= 0.0 && v.is_finite(),
            ConstraintKind::Unconstrained => v.is_finite(),
        }
    }

    /// Interval notation used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ConstraintKind::Bounded01 => "[0,1]",
            ConstraintKind::Symmetric11 => "[-1,1]",
            ConstraintKind::NonNegative => "[0,inf)",
            ConstraintKind::Unconstrained => "(-inf,inf)",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::Bounded01 => "bounded01",
            ConstraintKind::Symmetric11 => "sym11",
            ConstraintKind::NonNegative => "nonneg",
            ConstraintKind::Unconstrained => "unconstrained",
        }
    }

    fn on_graph(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            ConstraintKind::Bounded01 => g.sigmoid(x),
            ConstraintKind::Symmetric11 => g.tanh(x),
            ConstraintKind::NonNegative => g.relu(x),
            ConstraintKind::Unconstrained => x,
        }
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bounded01" | "[0,1]" => Ok(ConstraintKind::Bounded01),
            "sym11" | "symmetric11" | "[-1,1]" => Ok(ConstraintKind::Symmetric11),
            "nonneg" | "nonnegative" | "[0,inf)" => Ok(ConstraintKind::NonNegative),
            "unconstrained" | "(-inf,inf)" => Ok(ConstraintKind::Unconstrained),
            other => Err(Error::Config(format!(
                "unknown constraint '{other}' (expected bounded01, sym11, nonneg, unconstrained)"
            ))),
        }
    }
}

pub fn constrain(x: &[f64], kind: ConstraintKind) -> Vec<f64> {
    x.iter().map(|&v| kind.apply(v)).collect()
}

/// Values behind one learned combination coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaParams {
    pub lambda_q: Vec<f64>,
    pub lambda_k: Vec<f64>,
    pub alpha_init: f64,
    pub beta: f64,
}

/// `interaction · alpha_init + (1 − interaction) · beta`, where
/// `interaction = mean(f(lambda_q) ⊙ f(lambda_k))`.
pub fn compute_lambda(p: &LambdaParams, kind: ConstraintKind) -> f64 {
    let interaction = interaction(p, kind);
    interaction * p.alpha_init + (1.0 - interaction) * p.beta
}

pub fn interaction(p: &LambdaParams, kind: ConstraintKind) -> f64 {
    let n = p.lambda_q.len().max(1) as f64;
    p.lambda_q
        .iter()
        .zip(&p.lambda_k)
        .map(|(&q, &k)| kind.apply(q) * kind.apply(k))
        .sum::<f64>()
        / n
}

/// Initialization target for extra component `component` (≥ 1) of encoder
/// layer `layer` (≥ 1): `0.1 · layer · 0.9^(component − 1)`, clamped into
/// the constraint's closed range. Grows with depth, shrinks with index.
pub fn alpha_init_schedule(layer: usize, component: usize, kind: ConstraintKind) -> f64 {
    let raw = 0.1 * layer as f64 * 0.9f64.powi(component.saturating_sub(1) as i32);
    kind.clamp(raw)
}

/// Parameter handles behind one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LambdaHandles {
    pub lambda_q: ParamId,
    pub lambda_k: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl LambdaHandles {
    fn declare(store: &mut ParamStore, prefix: &str, width: usize, alpha_init: f64) -> Self {
        let normal = Init::Normal {
            std: LAMBDA_INIT_STD,
        };
        Self {
            lambda_q: store.declare(format!("{prefix}.lambda_q"), &[width], ParamGroup::Lambda, normal),
            lambda_k: store.declare(format!("{prefix}.lambda_k"), &[width], ParamGroup::Lambda, normal),
            alpha: store.declare(
                format!("{prefix}.alpha"),
                &[1],
                ParamGroup::Lambda,
                Init::Constant(alpha_init),
            ),
            beta: store.declare(
                format!("{prefix}.beta"),
                &[1],
                ParamGroup::Lambda,
                Init::Constant(BETA_INIT),
            ),
        }
    }

    pub fn read(&self, store: &ParamStore) -> LambdaParams {
        LambdaParams {
            lambda_q: store.value(self.lambda_q).data().to_vec(),
            lambda_k: store.value(self.lambda_k).data().to_vec(),
            alpha_init: store.value(self.alpha).data()[0],
            beta: store.value(self.beta).data()[0],
        }
    }

    pub fn write(&self, store: &mut ParamStore, p: &LambdaParams) -> Result<()> {
        store.set(self.lambda_q, &p.lambda_q)?;
        store.set(self.lambda_k, &p.lambda_k)?;
        store.set(self.alpha, &[p.alpha_init])?;
        store.set(self.beta, &[p.beta])
    }

    pub fn value(&self, store: &ParamStore, kind: ConstraintKind) -> f64 {
        compute_lambda(&self.read(store), kind)
    }

    /// The coefficient as a differentiable scalar.
    pub fn on_graph(&self, g: &mut Graph<'_>, kind: ConstraintKind) -> Result<Var> {
        let q = g.param(self.lambda_q);
        let k = g.param(self.lambda_k);
        let alpha = g.param(self.alpha);
        let beta = g.param(self.beta);
        let cq = kind.on_graph(g, q);
        let ck = kind.on_graph(g, k);
        let prod = g.mul(cq, ck)?;
        let inter = g.mean(prod);
        let a_term = g.mul(inter, alpha)?;
        let one_minus = g.scale(inter, -1.0);
        let one_minus = g.add_const(one_minus, 1.0);
        let b_term = g.mul(one_minus, beta)?;
        g.add(a_term, b_term)
    }

    /// Keeps `alpha` and `beta` inside the constraint's closed range.
    pub fn project(&self, store: &mut ParamStore, kind: ConstraintKind) {
        for id in [self.alpha, self.beta] {
            for v in store.value_mut(id) {
                *v = kind.clamp(*v);
            }
        }
    }
}

/// One query/key projection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QkProjection {
    pub wq: ParamId,
    pub wk: ParamId,
}

impl QkProjection {
    fn declare(store: &mut ParamStore, prefix: &str, d_model: usize, width: usize) -> Self {
        Self {
            wq: store.declare(format!("{prefix}.w_q"), &[d_model, width], ParamGroup::Main, Init::XavierUniform),
            wk: store.declare(format!("{prefix}.w_k"), &[d_model, width], ParamGroup::Main, Init::XavierUniform),
        }
    }
}

/// Signed weight of one component map.
#[derive(Debug, Clone, Copy)]
pub enum Coefficient {
    One,
    Plus(Var),
    Minus(Var),
}

/// Result of an attention forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[batch, seq, d_model]`
    pub output: Var,
    /// Combined pre-value map, `[batch, heads, seq, seq]`.
    pub combined_map: Var,
}

/// Shared multi-component kernel.
///
/// `x` is `[batch, seq, d]`, every `(w_q, w_k)` pair is `[d, d_qk]`, `w_v`
/// and `w_o` are `[d, d]`. Key positions whose `pad_mask` entry is false get
/// zero weight in every component map.
#[allow(clippy::too_many_arguments)]
pub fn mix_attention(
    g: &mut Graph<'_>,
    x: Var,
    heads: usize,
    components: &[(Var, Var)],
    coefficients: &[Coefficient],
    w_v: Var,
    w_o: Var,
    pad_mask: &Mask,
) -> Result<AttentionOutput> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(Error::Dimension(format!("attention input must be [batch, seq, d], got {xs:?}")));
    }
    if pad_mask.shape() != &xs[..2] {
        return Err(Error::Shape {
            op: "attention mask",
            left: xs,
            right: pad_mask.shape().to_vec(),
        });
    }
    if components.is_empty() || components.len() != coefficients.len() {
        return Err(Error::Dimension(format!(
            "{} components with {} coefficients",
            components.len(),
            coefficients.len()
        )));
    }
    let mut combined: Option<Var> = None;
    for (&(wq, wk), &coef) in components.iter().zip(coefficients) {
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let qh = g.split_heads(q, heads)?;
        let kh = g.split_heads(k, heads)?;
        let d_head = g.shape(qh)[3];
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt());
        let probs = g.softmax_rows(scores, Some(pad_mask))?;
        combined = Some(match (combined, coef) {
            (None, Coefficient::One) => probs,
            (None, Coefficient::Plus(c)) => g.scale_by(probs, c)?,
            (None, Coefficient::Minus(c)) => {
                let t = g.scale_by(probs, c)?;
                g.scale(t, -1.0)
            }
            (Some(acc), Coefficient::One) => g.add(acc, probs)?,
            (Some(acc), Coefficient::Plus(c)) => {
                let t = g.scale_by(probs, c)?;
                g.add(acc, t)?
            }
            (Some(acc), Coefficient::Minus(c)) => {
                let t = g.scale_by(probs, c)?;
                g.sub(acc, t)?
            }
        });
    }
    let combined_map = combined.expect("at least one component");
    let v = g.matmul(x, w_v)?;
    let vh = g.split_heads(v, heads)?;
    let mixed = g.matmul(combined_map, vh)?;
    let merged = g.merge_heads(mixed)?;
    let output = g.matmul(merged, w_o)?;
    Ok(AttentionOutput {
        output,
        combined_map,
    })
}

fn check_width(d_model: usize, n_heads: usize) -> Result<()> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::Config(format!("d_model must be a positive multiple of 4, got {d_model}")));
    }
    if n_heads == 0 || !(d_model / 2).is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model/2 = {} must be divisible by n_heads = {n_heads}",
            d_model / 2
        )));
    }
    Ok(())
}

/// Multi-component additive attention layer.
#[derive(Debug, Clone)]
pub struct NdtAttentionLayer {
    pub d_model: usize,
    pub n_heads: usize,
    pub constraint: ConstraintKind,
    /// 1-based encoder depth.
    pub layer_index: usize,
    pub components: Vec<QkProjection>,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Coefficients of components `1..N`; component 0 is fixed at 1.
    pub lambdas: Vec<LambdaHandles>,
}

impl NdtAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        n_components: usize,
        constraint: ConstraintKind,
        layer_index: usize,
    ) -> Result<Self> {
        check_width(d_model, n_heads)?;
        if n_components == 0 {
            return Err(Error::Config("NDT needs at least one component".into()));
        }
        if layer_index == 0 {
            return Err(Error::Config("layer_index is 1-based".into()));
        }
        let components = (0..n_components)
            .map(|i| QkProjection::declare(store, &format!("{prefix}.comp{i}"), d_model, d_model / 2))
            .collect();
        let w_v = store.declare(format!("{prefix}.w_v"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        let w_o = store.declare(format!("{prefix}.w_o"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        let lambdas = (1..n_components)
            .map(|i| {
                LambdaHandles::declare(
                    store,
                    &format!("{prefix}.comp{i}"),
                    d_model / 4,
                    alpha_init_schedule(layer_index, i, constraint),
                )
            })
            .collect();
        Ok(Self {
            d_model,
            n_heads,
            constraint,
            layer_index,
            components,
            w_v,
            w_o,
            lambdas,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / 2 / self.n_heads
    }

    /// `λ_1 .. λ_{N−1}` as graph scalars.
    pub fn lambda_vars(&self, g: &mut Graph<'_>) -> Result<Vec<Var>> {
        self.lambdas.iter().map(|h| h.on_graph(g, self.constraint)).collect()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pad_mask: &Mask) -> Result<AttentionOutput> {
        let lambdas = self.lambda_vars(g)?;
        let coefs: Vec<Coefficient> = std::iter::once(Coefficient::One)
            .chain(lambdas.into_iter().map(Coefficient::Plus))
            .collect();
        self.forward_with(g, x, pad_mask, &coefs)
    }

    /// Forward with caller-supplied coefficients (one per component).
    pub fn forward_with(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        pad_mask: &Mask,
        coefficients: &[Coefficient],
    ) -> Result<AttentionOutput> {
        check_input(g, x, self.d_model)?;
        let comps: Vec<(Var, Var)> = self
            .components
            .iter()
            .map(|c| (g.param(c.wq), g.param(c.wk)))
            .collect();
        let (w_v, w_o) = (g.param(self.w_v), g.param(self.w_o));
        mix_attention(g, x, self.n_heads, &comps, coefficients, w_v, w_o, pad_mask)
    }

    /// `(component_index, λ_i)` for `i = 1..N`, in order.
    pub fn lambda_snapshot(&self, store: &ParamStore) -> Vec<(usize, f64)> {
        self.lambdas
            .iter()
            .enumerate()
            .map(|(i, h)| (i + 1, h.value(store, self.constraint)))
            .collect()
    }
}

/// Two-map subtractive attention: `softmax(A₀) − λ·softmax(A₁)`.
#[derive(Debug, Clone)]
pub struct DtAttentionLayer {
    pub d_model: usize,
    pub n_heads: usize,
    pub components: [QkProjection; 2],
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub lambda: LambdaHandles,
}

impl DtAttentionLayer {
    /// The coefficient always uses the non-negative mapping.
    pub const CONSTRAINT: ConstraintKind = ConstraintKind::NonNegative;

    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        check_width(d_model, n_heads)?;
        let components = [
            QkProjection::declare(store, &format!("{prefix}.comp0"), d_model, d_model / 2),
            QkProjection::declare(store, &format!("{prefix}.comp1"), d_model, d_model / 2),
        ];
        let w_v = store.declare(format!("{prefix}.w_v"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        let w_o = store.declare(format!("{prefix}.w_o"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        let lambda = LambdaHandles::declare(store, &format!("{prefix}.comp1"), d_model / 4, DT_ALPHA_INIT);
        Ok(Self {
            d_model,
            n_heads,
            components,
            w_v,
            w_o,
            lambda,
        })
    }

    pub fn lambda_value(&self, store: &ParamStore) -> f64 {
        self.lambda.value(store, Self::CONSTRAINT)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pad_mask: &Mask) -> Result<AttentionOutput> {
        check_input(g, x, self.d_model)?;
        let lambda = self.lambda.on_graph(g, Self::CONSTRAINT)?;
        let comps: Vec<(Var, Var)> = self
            .components
            .iter()
            .map(|c| (g.param(c.wq), g.param(c.wk)))
            .collect();
        let (w_v, w_o) = (g.param(self.w_v), g.param(self.w_o));
        mix_attention(
            g,
            x,
            self.n_heads,
            &comps,
            &[Coefficient::One, Coefficient::Minus(lambda)],
            w_v,
            w_o,
            pad_mask,
        )
    }
}

/// Standard multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct VanillaAttentionLayer {
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the query/key projections (normally `d_model`).
    pub qk_dim: usize,
    pub projection: QkProjection,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl VanillaAttentionLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        Self::with_qk_dim(store, prefix, d_model, n_heads, d_model)
    }

    pub fn with_qk_dim(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        qk_dim: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !qk_dim.is_multiple_of(n_heads) || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "widths d_model={d_model}, qk_dim={qk_dim} must be divisible by n_heads={n_heads}"
            )));
        }
        let projection = QkProjection::declare(store, prefix, d_model, qk_dim);
        let w_v = store.declare(format!("{prefix}.w_v"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        let w_o = store.declare(format!("{prefix}.w_o"), &[d_model, d_model], ParamGroup::Main, Init::XavierUniform);
        Ok(Self {
            d_model,
            n_heads,
            qk_dim,
            projection,
            w_v,
            w_o,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pad_mask: &Mask) -> Result<AttentionOutput> {
        check_input(g, x, self.d_model)?;
        let comps = [(g.param(self.projection.wq), g.param(self.projection.wk))];
        let (w_v, w_o) = (g.param(self.w_v), g.param(self.w_o));
        mix_attention(g, x, self.n_heads, &comps, &[Coefficient::One], w_v, w_o, pad_mask)
    }
}

fn check_input(g: &Graph<'_>, x: Var, d_model: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != d_model {
        return Err(Error::Dimension(format!(
            "attention expects [batch, seq, {d_model}] input, got {s:?}"
        )));
    }
    Ok(())
}

pub fn ndt_attention(g: &mut Graph<'_>, x: Var, layer: &NdtAttentionLayer, pad_mask: &Mask) -> Result<Var> {
    Ok(layer.forward(g, x, pad_mask)?.output)
}

pub fn dt_attention(g: &mut Graph<'_>, x: Var, layer: &DtAttentionLayer, pad_mask: &Mask) -> Result<Var> {
    Ok(layer.forward(g, x, pad_mask)?.output)
}

pub fn vanilla_attention(
    g: &mut Graph<'_>,
    x: Var,
    layer: &VanillaAttentionLayer,
    pad_mask: &Mask,
) -> Result<Var> {
    Ok(layer.forward(g, x, pad_mask)?.output)
}

pub fn lambda_snapshot(layer: &NdtAttentionLayer, store: &ParamStore) -> Vec<(usize, f64)> {
    layer.lambda_snapshot(store)
}

/// Attention sub-layer of an encoder block.
#[derive(Debug, Clone)]
pub enum AttentionLayer {
    Vanilla(VanillaAttentionLayer),
    Dt(DtAttentionLayer),
    Ndt(NdtAttentionLayer),
}

impl AttentionLayer {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pad_mask: &Mask) -> Result<AttentionOutput> {
        match self {
            AttentionLayer::Vanilla(l) => l.forward(g, x, pad_mask),
            AttentionLayer::Dt(l) => l.forward(g, x, pad_mask),
            AttentionLayer::Ndt(l) => l.forward(g, x, pad_mask),
        }
    }

    /// Learned coefficients by component index (DT reports its subtracted λ
    /// as component 1; vanilla has none).
    pub fn lambda_snapshot(&self, store: &ParamStore) -> Vec<(usize, f64)> {
        match self {
            AttentionLayer::Vanilla(_) => Vec::new(),
            AttentionLayer::Dt(l) => vec![(1, l.lambda_value(store))],
            AttentionLayer::Ndt(l) => l.lambda_snapshot(store),
        }
    }

    pub fn project_coefficients(&self, store: &mut ParamStore) {
        match self {
            AttentionLayer::Vanilla(_) => {}
            AttentionLayer::Dt(l) => l.lambda.project(store, DtAttentionLayer::CONSTRAINT),
            AttentionLayer::Ndt(l) => {
                for h in &l.lambdas {
                    h.project(store, l.constraint);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
