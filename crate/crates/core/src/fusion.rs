//! Item-side fusion networks.
//!
//! Every variant consumes adapted modality embeddings `t = A_t h_t` and
//! `v = A_v h_v` and produces a fused item embedding `h_x`:
//!
//! | variant        | pre-norm vector                     |
//! |----------------|-------------------------------------|
//! | `Mlp`          | `MLP([t; v])`                       |
//! | `Moe`          | `α t + (1-α) v`                     |
//! | `MoeMlp`       | `α t + (1-α) v + MLP([t; v])`       |
//! | `Attention`    | `β t + (1-β) v`, β from a modality scorer |
//! | `MoeBilinear`  | `α t + (1-α) v + MLP(‖_k W_t^k t ⊙ W_i^k v)` |
//!
//! followed by a layer norm with learned affine. `α = σ(g·[t; v] + b)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, structural, Error, Result};
use crate::numerics::{
    axpy, cosine_slices, dot, logistic, norm, EmbeddingVector, LayerNormCache, Parameters, Tensor2,
    LAYER_NORM_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    Mlp,
    Moe,
    MoeMlp,
    Attention,
    MoeBilinear,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::Mlp,
        FusionVariant::Moe,
        FusionVariant::MoeMlp,
        FusionVariant::Attention,
        FusionVariant::MoeBilinear,
    ];

    /// Identifier used in config files and directory names.
    pub fn key(self) -> &'static str {
        match self {
            FusionVariant::Mlp => "mlp",
            FusionVariant::Moe => "moe",
            FusionVariant::MoeMlp => "moe_mlp",
            FusionVariant::Attention => "attention",
            FusionVariant::MoeBilinear => "moe_bilinear",
        }
    }

    pub fn has_gate(self) -> bool {
        matches!(self, FusionVariant::Moe | FusionVariant::MoeMlp | FusionVariant::MoeBilinear)
    }

    pub fn has_attention(self) -> bool {
        self == FusionVariant::Attention
    }

    pub fn has_mlp(self) -> bool {
        matches!(self, FusionVariant::Mlp | FusionVariant::MoeMlp | FusionVariant::MoeBilinear)
    }

    pub fn has_bilinear(self) -> bool {
        self == FusionVariant::MoeBilinear
    }

    /// Whether the variant produces a learned text weight.
    pub fn has_mixing_weight(self) -> bool {
        self != FusionVariant::Mlp
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Mlp => "MLP",
            FusionVariant::Moe => "MoE",
            FusionVariant::MoeMlp => "MoE+MLP",
            FusionVariant::Attention => "Attention",
            FusionVariant::MoeBilinear => "MoE+Bilinear",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-'], "_");
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.key() == norm)
            .ok_or_else(|| config(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Query,
    Text,
    Image,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionShape {
    pub variant: FusionVariant,
    pub dim: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub hidden: usize,
}

impl FusionShape {
    /// K = 4 heads, p = dim / 4, hidden = dim.
    pub fn with_defaults(variant: FusionVariant, dim: usize) -> Self {
        FusionShape { variant, dim, heads: 4, proj_dim: (dim / 4).max(1), hidden: dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.proj_dim == 0 || self.hidden == 0 {
            return Err(config(format!("fusion shape has a zero size: {self:?}")));
        }
        Ok(())
    }

    pub fn mlp_input(&self) -> usize {
        if self.variant.has_bilinear() {
            self.heads * self.proj_dim
        } else {
            2 * self.dim
        }
    }
}

/// All trainable tensors. Vectors and scalars are stored as one-row tensors;
/// tensors the variant does not use are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    shape: FusionShape,
    pub query_adapter: Tensor2,
    pub text_adapter: Tensor2,
    pub image_adapter: Tensor2,
    pub gate_w: Tensor2,
    pub gate_b: Tensor2,
    pub attn_w: Tensor2,
    pub attn_b: Tensor2,
    pub heads_text: Vec<Tensor2>,
    pub heads_image: Vec<Tensor2>,
    pub mlp_w1: Tensor2,
    pub mlp_b1: Tensor2,
    pub mlp_w2: Tensor2,
    pub mlp_b2: Tensor2,
    pub ln_gain: Tensor2,
    pub ln_bias: Tensor2,
}

/// Which update group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    QueryAdapter,
    TextAdapter,
    ImageAdapter,
    Fusion,
}

pub fn param_group(name: &str) -> ParamGroup {
    match name {
        "query_adapter" => ParamGroup::QueryAdapter,
        "text_adapter" => ParamGroup::TextAdapter,
        "image_adapter" => ParamGroup::ImageAdapter,
        _ => ParamGroup::Fusion,
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches by construction")
}

impl FusionParams {
    /// Identity adapters, zero gate and attention scorer, unit layer-norm
    /// gain, and seeded uniform `±1/√fan_in` bilinear/MLP weights.
    pub fn init(shape: FusionShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let v = shape.variant;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let empty = || Tensor2::zeros(0, 0);
        let (mut heads_text, mut heads_image) = (Vec::new(), Vec::new());
        if v.has_bilinear() {
            for _ in 0..shape.heads {
                heads_text.push(uniform(&mut rng, shape.proj_dim, d));
                heads_image.push(uniform(&mut rng, shape.proj_dim, d));
            }
        }
        let (mlp_w1, mlp_b1, mlp_w2, mlp_b2) = if v.has_mlp() {
            (
                uniform(&mut rng, shape.hidden, shape.mlp_input()),
                Tensor2::zeros(1, shape.hidden),
                uniform(&mut rng, d, shape.hidden),
                Tensor2::zeros(1, d),
            )
        } else {
            (empty(), empty(), empty(), empty())
        };
        let mut ln_gain = Tensor2::zeros(1, d);
        ln_gain.data_mut().fill(1.0);
        Ok(FusionParams {
            shape,
            query_adapter: Tensor2::identity(d),
            text_adapter: Tensor2::identity(d),
            image_adapter: Tensor2::identity(d),
            gate_w: if v.has_gate() { Tensor2::zeros(1, 2 * d) } else { empty() },
            gate_b: if v.has_gate() { Tensor2::zeros(1, 1) } else { empty() },
            attn_w: if v.has_attention() { Tensor2::zeros(2, d) } else { empty() },
            attn_b: if v.has_attention() { Tensor2::zeros(1, 2) } else { empty() },
            heads_text,
            heads_image,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            ln_gain,
            ln_bias: Tensor2::zeros(1, d),
        })
    }

    pub fn shape(&self) -> FusionShape {
        self.shape
    }

    pub fn variant(&self) -> FusionVariant {
        self.shape.variant
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    /// Same shapes, all zeros; used for gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.data_mut().fill(0.0));
        z
    }

    /// Named tensors in canonical order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Tensor2)> {
        let v = self.shape.variant;
        let mut out: Vec<(String, &Tensor2)> = vec![
            ("query_adapter".into(), &self.query_adapter),
            ("text_adapter".into(), &self.text_adapter),
            ("image_adapter".into(), &self.image_adapter),
        ];
        if v.has_gate() {
            out.push(("gate_w".into(), &self.gate_w));
            out.push(("gate_b".into(), &self.gate_b));
        }
        if v.has_attention() {
            out.push(("attn_w".into(), &self.attn_w));
            out.push(("attn_b".into(), &self.attn_b));
        }
        for (k, (t, i)) in self.heads_text.iter().zip(&self.heads_image).enumerate() {
            out.push((format!("bilinear_text.{k}"), t));
            out.push((format!("bilinear_image.{k}"), i));
        }
        if v.has_mlp() {
            out.push(("mlp_w1".into(), &self.mlp_w1));
            out.push(("mlp_b1".into(), &self.mlp_b1));
            out.push(("mlp_w2".into(), &self.mlp_w2));
            out.push(("mlp_b2".into(), &self.mlp_b2));
        }
        out.push(("ln_gain".into(), &self.ln_gain));
        out.push(("ln_bias".into(), &self.ln_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2)> {
        let v = self.shape.variant;
        let FusionParams {
            query_adapter,
            text_adapter,
            image_adapter,
            gate_w,
            gate_b,
            attn_w,
            attn_b,
            heads_text,
            heads_image,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            ln_gain,
            ln_bias,
            ..
        } = self;
        let mut out: Vec<(String, &mut Tensor2)> = vec![
            ("query_adapter".into(), query_adapter),
            ("text_adapter".into(), text_adapter),
            ("image_adapter".into(), image_adapter),
        ];
        if v.has_gate() {
            out.push(("gate_w".into(), gate_w));
            out.push(("gate_b".into(), gate_b));
        }
        if v.has_attention() {
            out.push(("attn_w".into(), attn_w));
            out.push(("attn_b".into(), attn_b));
        }
        for (k, (t, i)) in heads_text.iter_mut().zip(heads_image.iter_mut()).enumerate() {
            out.push((format!("bilinear_text.{k}"), t));
            out.push((format!("bilinear_image.{k}"), i));
        }
        if v.has_mlp() {
            out.push(("mlp_w1".into(), mlp_w1));
            out.push(("mlp_b1".into(), mlp_b1));
            out.push(("mlp_w2".into(), mlp_w2));
            out.push(("mlp_b2".into(), mlp_b2));
        }
        out.push(("ln_gain".into(), ln_gain));
        out.push(("ln_bias".into(), ln_bias));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor2)) {
        for (name, t) in self.tensors_mut() {
            f(&name, t);
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor2> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn adapter(&self, which: Modality) -> &Tensor2 {
        match which {
            Modality::Query => &self.query_adapter,
            Modality::Text => &self.text_adapter,
            Modality::Image => &self.image_adapter,
        }
    }

    pub fn adapter_mut(&mut self, which: Modality) -> &mut Tensor2 {
        match which {
            Modality::Query => &mut self.query_adapter,
            Modality::Text => &mut self.text_adapter,
            Modality::Image => &mut self.image_adapter,
        }
    }

    /// Zeroes every tensor feeding the interaction term (bilinear heads and MLP).
    pub fn zero_interaction(&mut self) {
        for t in self.heads_text.iter_mut().chain(self.heads_image.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        for t in [&mut self.mlp_w1, &mut self.mlp_b1, &mut self.mlp_w2, &mut self.mlp_b2] {
            t.data_mut().fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    fn check_dim(&self, got: usize, what: &str) -> Result<()> {
        if got != self.shape.dim {
            return Err(structural(format!("{what}: dimension {got} does not match params dim {}", self.shape.dim)));
        }
        Ok(())
    }
}

impl Parameters for FusionParams {
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_mut(|_, t| {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
    }

    fn entry_name(&self, mut index: usize) -> String {
        for (name, t) in self.tensors() {
            let n = t.data().len();
            if index < n {
                let (r, c) = (index / t.cols().max(1), index % t.cols().max(1));
                return format!("{name}[{r},{c}]");
            }
            index -= n;
        }
        format!("<out of range {index}>")
    }
}

/// Per-item outputs reported to analysis tooling.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    /// Text mixing weight; a constant 0.5 placeholder for the MLP variant.
    pub alpha: f64,
    pub h_f: EmbeddingVector,
    pub interaction_norm: f64,
    pub h_x: EmbeddingVector,
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

fn mlp_forward(p: &FusionParams, input: Vec<f64>) -> MlpCache {
    let mut pre = p.mlp_w1.matvec(&input);
    axpy(1.0, p.mlp_b1.data(), &mut pre);
    let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
    let mut out = p.mlp_w2.matvec(&act);
    axpy(1.0, p.mlp_b2.data(), &mut out);
    MlpCache { input, pre, act, out }
}

/// Returns the gradient w.r.t. the MLP input.
fn mlp_backward(p: &FusionParams, c: &MlpCache, d_out: &[f64], g: &mut FusionParams) -> Vec<f64> {
    g.mlp_w2.add_outer(1.0, d_out, &c.act);
    axpy(1.0, d_out, g.mlp_b2.data_mut());
    let mut d_act = vec![0.0; c.act.len()];
    p.mlp_w2.matvec_t_acc(d_out, &mut d_act);
    let d_pre: Vec<f64> = d_act.iter().zip(&c.pre).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect();
    g.mlp_w1.add_outer(1.0, &d_pre, &c.input);
    axpy(1.0, &d_pre, g.mlp_b1.data_mut());
    let mut d_in = vec![0.0; c.input.len()];
    p.mlp_w1.matvec_t_acc(&d_pre, &mut d_in);
    d_in
}

/// Cached forward pass of the fusion core on adapted embeddings.
#[derive(Debug, Clone)]
pub struct FusionForward {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    /// Mixing weight (gate α or attention β); 0.5 for the MLP variant.
    pub alpha: f64,
    pub h_f: Vec<f64>,
    proj_text: Vec<Vec<f64>>,
    proj_image: Vec<Vec<f64>>,
    mlp: Option<MlpCache>,
    ln: LayerNormCache,
    pub h_x: Vec<f64>,
}

impl FusionForward {
    pub fn interaction(&self) -> Option<&[f64]> {
        self.mlp.as_ref().map(|m| m.out.as_slice())
    }

    pub fn interaction_norm(&self) -> f64 {
        self.interaction().map(norm).unwrap_or(0.0)
    }

    pub fn trace(&self) -> FusionTrace {
        FusionTrace {
            alpha: self.alpha,
            h_f: EmbeddingVector::from(self.h_f.clone()),
            interaction_norm: self.interaction_norm(),
            h_x: EmbeddingVector::from(self.h_x.clone()),
        }
    }
}

fn mix(alpha: f64, t: &[f64], v: &[f64]) -> Vec<f64> {
    t.iter().zip(v).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect()
}

fn gate_logit(p: &FusionParams, t: &[f64], v: &[f64]) -> f64 {
    let d = t.len();
    let w = p.gate_w.data();
    dot(&w[..d], t) + dot(&w[d..], v) + p.gate_b.data()[0]
}

fn attention_logit(p: &FusionParams, t: &[f64], v: &[f64]) -> f64 {
    let b = p.attn_b.data();
    (dot(p.attn_w.row(0), t) + b[0]) - (dot(p.attn_w.row(1), v) + b[1])
}

/// Runs the fusion core on already-adapted modality vectors. Callers
/// guarantee dimensions.
pub fn fusion_forward(p: &FusionParams, text: Vec<f64>, image: Vec<f64>) -> Result<FusionForward> {
    let variant = p.variant();
    let alpha = if variant.has_gate() {
        logistic(gate_logit(p, &text, &image))
    } else if variant.has_attention() {
        logistic(attention_logit(p, &text, &image))
    } else {
        0.5
    };
    let h_f = mix(alpha, &text, &image);

    let (mut proj_text, mut proj_image) = (Vec::new(), Vec::new());
    let mlp = if variant.has_bilinear() {
        let mut input = Vec::with_capacity(p.shape.heads * p.shape.proj_dim);
        for (wt, wi) in p.heads_text.iter().zip(&p.heads_image) {
            let pt = wt.matvec(&text);
            let pi = wi.matvec(&image);
            input.extend(pt.iter().zip(&pi).map(|(a, b)| a * b));
            proj_text.push(pt);
            proj_image.push(pi);
        }
        Some(mlp_forward(p, input))
    } else if variant.has_mlp() {
        let mut input = text.clone();
        input.extend_from_slice(&image);
        Some(mlp_forward(p, input))
    } else {
        None
    };

    let pre_norm: Vec<f64> = match (&mlp, variant) {
        (Some(m), FusionVariant::Mlp) => m.out.clone(),
        (Some(m), _) => h_f.iter().zip(&m.out).map(|(a, b)| a + b).collect(),
        (None, _) => h_f.clone(),
    };
    let ln = LayerNormCache::forward(&pre_norm, LAYER_NORM_EPS)?;
    let h_x = ln.output(p.ln_gain.data(), p.ln_bias.data());
    Ok(FusionForward { text, image, alpha, h_f, proj_text, proj_image, mlp, ln, h_x })
}

/// Backpropagates `d_hx` through the fusion core. Accumulates parameter
/// gradients into `g` and returns the gradients w.r.t. the adapted text and
/// image vectors.
pub fn fusion_backward(
    p: &FusionParams,
    f: &FusionForward,
    d_hx: &[f64],
    g: &mut FusionParams,
) -> (Vec<f64>, Vec<f64>) {
    let d = p.dim();
    let variant = p.variant();
    let d_pre = f.ln.backward(d_hx, p.ln_gain.data(), g.ln_gain.data_mut(), g.ln_bias.data_mut());
    let mut d_text = vec![0.0; d];
    let mut d_image = vec![0.0; d];

    if let Some(m) = &f.mlp {
        let d_in = mlp_backward(p, m, &d_pre, g);
        if variant.has_bilinear() {
            let pd = p.shape.proj_dim;
            for k in 0..p.shape.heads {
                let de = &d_in[k * pd..(k + 1) * pd];
                let (pt, pi) = (&f.proj_text[k], &f.proj_image[k]);
                let d_pt: Vec<f64> = de.iter().zip(pi).map(|(a, b)| a * b).collect();
                let d_pi: Vec<f64> = de.iter().zip(pt).map(|(a, b)| a * b).collect();
                g.heads_text[k].add_outer(1.0, &d_pt, &f.text);
                g.heads_image[k].add_outer(1.0, &d_pi, &f.image);
                p.heads_text[k].matvec_t_acc(&d_pt, &mut d_text);
                p.heads_image[k].matvec_t_acc(&d_pi, &mut d_image);
            }
        } else {
            axpy(1.0, &d_in[..d], &mut d_text);
            axpy(1.0, &d_in[d..], &mut d_image);
        }
    }

    if variant != FusionVariant::Mlp {
        // h_f = a t + (1 - a) v
        let a = f.alpha;
        axpy(a, &d_pre, &mut d_text);
        axpy(1.0 - a, &d_pre, &mut d_image);
        let d_alpha: f64 = d_pre.iter().zip(f.text.iter().zip(&f.image)).map(|(g, (t, v))| g * (t - v)).sum();
        let d_logit = d_alpha * a * (1.0 - a);
        if variant.has_gate() {
            let gw = g.gate_w.data_mut();
            axpy(d_logit, &f.text, &mut gw[..d]);
            axpy(d_logit, &f.image, &mut gw[d..]);
            g.gate_b.data_mut()[0] += d_logit;
            let w = p.gate_w.data();
            axpy(d_logit, &w[..d], &mut d_text);
            axpy(d_logit, &w[d..], &mut d_image);
        } else if variant.has_attention() {
            g.attn_w.add_outer(1.0, &[d_logit, 0.0], &f.text);
            g.attn_w.add_outer(1.0, &[0.0, -d_logit], &f.image);
            let gb = g.attn_b.data_mut();
            gb[0] += d_logit;
            gb[1] -= d_logit;
            axpy(d_logit, p.attn_w.row(0), &mut d_text);
            axpy(-d_logit, p.attn_w.row(1), &mut d_image);
        }
    }
    (d_text, d_image)
}

/// Adapter application plus fusion for a raw item.
pub fn item_forward(p: &FusionParams, h_t: &[f64], h_v: &[f64]) -> Result<FusionForward> {
    p.check_dim(h_t.len(), "text embedding")?;
    p.check_dim(h_v.len(), "image embedding")?;
    fusion_forward(p, p.text_adapter.matvec(h_t), p.image_adapter.matvec(h_v))
}

/// Backward of [`item_forward`], including the adapter gradients.
pub fn item_backward(
    p: &FusionParams,
    f: &FusionForward,
    h_t: &[f64],
    h_v: &[f64],
    d_hx: &[f64],
    g: &mut FusionParams,
) {
    let (d_text, d_image) = fusion_backward(p, f, d_hx, g);
    g.text_adapter.add_outer(1.0, &d_text, h_t);
    g.image_adapter.add_outer(1.0, &d_image, h_v);
}

/// Gate weight `σ(g·[h_t; h_v] + b)` for a gated variant.
pub fn gate_alpha(h_t: &EmbeddingVector, h_v: &EmbeddingVector, params: &FusionParams) -> Result<f64> {
    params.check_dim(h_t.dim(), "gate text input")?;
    params.check_dim(h_v.dim(), "gate image input")?;
    if !params.variant().has_gate() {
        return Err(structural(format!("variant {} has no gate", params.variant())));
    }
    Ok(logistic(gate_logit(params, h_t.values(), h_v.values())))
}

/// `α h_t + (1 - α) h_v`
pub fn moe_fuse(h_t: &EmbeddingVector, h_v: &EmbeddingVector, alpha: f64) -> Result<EmbeddingVector> {
    if h_t.dim() != h_v.dim() {
        return Err(structural(format!("moe_fuse: dimension mismatch ({} vs {})", h_t.dim(), h_v.dim())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("mixing weight {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(h_t.clone());
    }
    if alpha == 0.0 {
        return Ok(h_v.clone());
    }
    Ok(EmbeddingVector::from(mix(alpha, h_t.values(), h_v.values())))
}

/// Pre-residual bilinear interaction term `MLP(‖_k W_t^k h_t ⊙ W_i^k h_v)`.
pub fn bilinear_interact(
    h_t: &EmbeddingVector,
    h_v: &EmbeddingVector,
    params: &FusionParams,
) -> Result<EmbeddingVector> {
    params.check_dim(h_t.dim(), "bilinear text input")?;
    params.check_dim(h_v.dim(), "bilinear image input")?;
    if !params.variant().has_bilinear() {
        return Err(structural(format!("variant {} has no bilinear path", params.variant())));
    }
    let f = fusion_forward(params, h_t.values().to_vec(), h_v.values().to_vec())?;
    Ok(EmbeddingVector::from(f.interaction().expect("bilinear variant has an MLP").to_vec()))
}

/// Fusion of adapted modality embeddings into the final item embedding.
pub fn fuse_item(h_t: &EmbeddingVector, h_v: &EmbeddingVector, params: &FusionParams) -> Result<FusionTrace> {
    params.check_dim(h_t.dim(), "fuse_item text input")?;
    params.check_dim(h_v.dim(), "fuse_item image input")?;
    Ok(fusion_forward(params, h_t.values().to_vec(), h_v.values().to_vec())?.trace())
}

pub fn apply_adapter(v: &EmbeddingVector, which: Modality, params: &FusionParams) -> Result<EmbeddingVector> {
    params.check_dim(v.dim(), "adapter input")?;
    Ok(EmbeddingVector::from(params.adapter(which).matvec(v.values())))
}

/// Cosine between the adapted query and a fused item embedding.
pub fn score(q: &EmbeddingVector, h_x: &EmbeddingVector, params: &FusionParams) -> Result<f64> {
    let q = apply_adapter(q, Modality::Query, params)?;
    cosine_slices(q.values(), h_x.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, layer_norm};
    use rand::Rng;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn params(variant: FusionVariant, dim: usize) -> FusionParams {
        FusionParams::init(FusionShape::with_defaults(variant, dim), 3).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gate_examples() {
        let mut p = params(FusionVariant::Moe, 2);
        let (t, v) = (ev(&[1.0, 0.0]), ev(&[0.0, 0.0]));
        assert_eq!(gate_alpha(&t, &v, &p).unwrap(), 0.5);
        p.gate_b.data_mut()[0] = 20.0;
        assert!((gate_alpha(&t, &v, &p).unwrap() - 1.0).abs() < 1e-8);
        p.gate_b.data_mut()[0] = 0.0;
        p.gate_w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        assert!((gate_alpha(&t, &v, &p).unwrap() - 0.731058).abs() < 1e-6);
        assert!(matches!(gate_alpha(&ev(&[1.0]), &v, &p), Err(Error::Structural(_))));
    }

    #[test]
    fn moe_fuse_examples() {
        let (t, v) = (ev(&[1.0, 0.0]), ev(&[0.0, 1.0]));
        assert_eq!(moe_fuse(&t, &v, 1.0).unwrap(), t);
        assert_eq!(moe_fuse(&t, &v, 0.0).unwrap(), v);
        assert_eq!(moe_fuse(&t, &v, 0.5).unwrap().values(), &[0.5, 0.5]);
        assert!(moe_fuse(&t, &ev(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let mut p = FusionParams::init(
            FusionShape { variant: FusionVariant::MoeBilinear, dim: 2, heads: 1, proj_dim: 1, hidden: 1 },
            0,
        )
        .unwrap();
        let out = bilinear_interact(&ev(&[0.3, -0.7]), &ev(&[0.0, 0.0]), &p).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));

        p.heads_text[0] = Tensor2::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        p.heads_image[0] = Tensor2::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        p.mlp_w1 = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        p.mlp_w2 = Tensor2::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let out = bilinear_interact(&ev(&[2.0, 0.0]), &ev(&[0.0, 3.0]), &p).unwrap();
        assert_eq!(out.values(), &[6.0, 6.0]);
    }

    #[test]
    fn bilinear_norm_gradient_wrt_text_head() {
        let p = params(FusionVariant::MoeBilinear, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_vec(&mut rng, 8);
        let v = random_vec(&mut rng, 8);
        let head0 = p.heads_text[0].data().to_vec();
        let f = |w: &Vec<f64>| -> Result<(f64, Vec<f64>)> {
            let mut q = p.clone();
            q.heads_text[0].data_mut().copy_from_slice(w);
            let fw = fusion_forward(&q, t.clone(), v.clone())?;
            let out = fw.interaction().unwrap();
            let n = norm(out);
            // d‖I‖ enters through the MLP output only; route it through the
            // interaction part of the backward pass by hand.
            let d_out: Vec<f64> = out.iter().map(|x| x / n).collect();
            let mut g = q.zeros_like();
            let d_in = mlp_backward(&q, fw.mlp.as_ref().unwrap(), &d_out, &mut g);
            let pd = q.shape.proj_dim;
            let d_pt: Vec<f64> = d_in[..pd].iter().zip(&fw.proj_image[0]).map(|(a, b)| a * b).collect();
            g.heads_text[0].add_outer(1.0, &d_pt, &t);
            Ok((n, g.heads_text[0].data().to_vec()))
        };
        let report = finite_diff_check(f, &head0, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn zero_interaction_reduces_to_normalized_moe() {
        let mut p = params(FusionVariant::MoeBilinear, 4);
        p.zero_interaction();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.gate_w.data_mut().iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let mut moe = params(FusionVariant::Moe, 4);
        moe.gate_w = p.gate_w.clone();
        for _ in 0..20 {
            let t = ev(&random_vec(&mut rng, 4));
            let v = ev(&random_vec(&mut rng, 4));
            let a = fuse_item(&t, &v, &p).unwrap();
            let b = fuse_item(&t, &v, &moe).unwrap();
            assert_eq!(a.h_x, b.h_x);
            assert_eq!(a.interaction_norm, 0.0);
            let alpha = gate_alpha(&t, &v, &p).unwrap();
            let expected = layer_norm(
                &moe_fuse(&t, &v, alpha).unwrap(),
                &EmbeddingVector::filled(4, 1.0),
                &EmbeddingVector::zeros(4),
                LAYER_NORM_EPS,
            )
            .unwrap();
            for (x, y) in a.h_x.values().iter().zip(expected.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gate_selects_text() {
        let mut p = params(FusionVariant::Moe, 2);
        p.gate_b.data_mut()[0] = 1e3;
        let t = ev(&[0.2, 0.9]);
        let trace = fuse_item(&t, &ev(&[5.0, -1.0]), &p).unwrap();
        let expected =
            layer_norm(&t, &EmbeddingVector::filled(2, 1.0), &EmbeddingVector::zeros(2), LAYER_NORM_EPS).unwrap();
        assert_eq!(trace.alpha, 1.0);
        assert_eq!(trace.h_x, expected);
    }

    /// Straight-line evaluation of the bilinear fusion on plain loops,
    /// independent of the cached forward pass.
    fn scripted_moe_bilinear(p: &FusionParams, t: &[f64], v: &[f64]) -> Vec<f64> {
        let d = t.len();
        let mut logit = p.gate_b.get(0, 0);
        for i in 0..d {
            logit += p.gate_w.get(0, i) * t[i] + p.gate_w.get(0, d + i) * v[i];
        }
        let alpha = 1.0 / (1.0 + (-logit).exp());
        let mut concat = Vec::new();
        for k in 0..p.shape.heads {
            for r in 0..p.shape.proj_dim {
                let mut a = 0.0;
                let mut b = 0.0;
                for c in 0..d {
                    a += p.heads_text[k].get(r, c) * t[c];
                    b += p.heads_image[k].get(r, c) * v[c];
                }
                concat.push(a * b);
            }
        }
        let mut hidden = vec![0.0; p.shape.hidden];
        for (h, out) in hidden.iter_mut().enumerate() {
            let mut z = p.mlp_b1.get(0, h);
            for (j, x) in concat.iter().enumerate() {
                z += p.mlp_w1.get(h, j) * x;
            }
            *out = if z > 0.0 { z } else { 0.0 };
        }
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = p.mlp_b2.get(0, i);
            for (h, a) in hidden.iter().enumerate() {
                s += p.mlp_w2.get(i, h) * a;
            }
            y[i] = alpha * t[i] + (1.0 - alpha) * v[i] + s;
        }
        let mean = y.iter().sum::<f64>() / d as f64;
        let var = y.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        y.iter()
            .enumerate()
            .map(|(i, x)| p.ln_gain.get(0, i) * (x - mean) / (var + 1e-5).sqrt() + p.ln_bias.get(0, i))
            .collect()
    }

    #[test]
    fn moe_bilinear_matches_scripted_evaluation() {
        let mut p = params(FusionVariant::MoeBilinear, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        p.for_each_mut(|name, t| {
            if !name.ends_with("adapter") {
                t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
            }
        });
        let (t, v) = ([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]);
        let trace = fuse_item(&ev(&t), &ev(&v), &p).unwrap();
        let expected = scripted_moe_bilinear(&p, &t, &v);
        for (x, y) in trace.h_x.values().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn adapter_examples() {
        let mut p = params(FusionVariant::Moe, 2);
        let v = ev(&[1.0, -1.0]);
        assert_eq!(apply_adapter(&v, Modality::Text, &p).unwrap(), v);
        p.image_adapter = Tensor2::zeros(2, 2);
        assert_eq!(apply_adapter(&v, Modality::Image, &p).unwrap().values(), &[0.0, 0.0]);
        p.query_adapter.scale(2.0);
        assert_eq!(apply_adapter(&v, Modality::Query, &p).unwrap().values(), &[2.0, -2.0]);
        assert!(apply_adapter(&ev(&[1.0]), Modality::Query, &p).is_err());
    }

    #[test]
    fn score_examples() {
        let p = params(FusionVariant::Moe, 2);
        assert_eq!(score(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0]), &p).unwrap(), 1.0);
        assert_eq!(score(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0]), &p).unwrap(), 0.0);
        assert!((score(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0]), &p).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(score(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0]), &p), Err(Error::Domain(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.key().parse::<FusionVariant>().unwrap(), v);
            assert_eq!(v.to_string().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("transformer".parse::<FusionVariant>().is_err());
    }

    #[test]
    fn flatten_round_trip_and_names() {
        let p = params(FusionVariant::MoeBilinear, 8);
        let mut q = p.zeros_like();
        q.unflatten(&p.flatten());
        assert_eq!(p, q);
        assert_eq!(p.entry_name(0), "query_adapter[0,0]");
        assert_eq!(p.entry_name(9), "query_adapter[1,1]");
        assert_eq!(p.entry_name(65), "text_adapter[0,1]");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn gate_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.0f64..5.0) {
                let mut p = params(FusionVariant::Moe, 6);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                p.gate_w.data_mut().iter_mut().for_each(|w| *w = scale * rng.random_range(-1.0..1.0));
                let t = ev(&random_vec(&mut rng, 6));
                let v = ev(&random_vec(&mut rng, 6));
                let a = gate_alpha(&t, &v, &p).unwrap();
                prop_assert!(a > 0.0 && a < 1.0);
            }

            #[test]
            fn moe_fuse_stays_on_segment(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random_vec(&mut rng, 7);
                let v = random_vec(&mut rng, 7);
                let f = moe_fuse(&ev(&t), &ev(&v), alpha).unwrap();
                for i in 0..7 {
                    let (lo, hi) = (t[i].min(v[i]), t[i].max(v[i]));
                    prop_assert!(f.values()[i] >= lo - 1e-15 && f.values()[i] <= hi + 1e-15);
                }
            }

            #[test]
            fn fuse_item_deterministic(seed in any::<u64>(), vi in 0usize..5) {
                let variant = FusionVariant::ALL[vi];
                let p = FusionParams::init(FusionShape::with_defaults(variant, 8), seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
                let t = ev(&random_vec(&mut rng, 8));
                let v = ev(&random_vec(&mut rng, 8));
                prop_assert_eq!(fuse_item(&t, &v, &p).unwrap(), fuse_item(&t, &v, &p).unwrap());
            }

            #[test]
            fn score_invariant_to_query_scaling(seed in any::<u64>(), s in 0.01f64..100.0) {
                let p = params(FusionVariant::Moe, 5);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = random_vec(&mut rng, 5);
                let x = ev(&random_vec(&mut rng, 5));
                let scaled: Vec<f64> = q.iter().map(|v| v * s).collect();
                let a = score(&ev(&q), &x, &p).unwrap();
                let b = score(&ev(&scaled), &x, &p).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
