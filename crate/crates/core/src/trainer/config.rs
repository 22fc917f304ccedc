use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::fusion::{FusionShape, FusionVariant, Modality};
use crate::kv::KvFile;
use crate::objectives::{LossConfig, NegativeSampling};

/// Curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    QueryTextAlign,
    QueryImageAlign,
    FusionAlign,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::QueryTextAlign => "query_text_align",
            Stage::QueryImageAlign => "query_image_align",
            Stage::FusionAlign => "fusion_align",
        }
    }

    /// Item modality aligned by a single-modality stage.
    pub fn modality(self) -> Option<Modality> {
        match self {
            Stage::QueryTextAlign => Some(Modality::Text),
            Stage::QueryImageAlign => Some(Modality::Image),
            Stage::FusionAlign => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "query_text_align" | "querytextalign" | "stage2_text" => Ok(Stage::QueryTextAlign),
            "query_image_align" | "queryimagealign" | "stage2_image" => Ok(Stage::QueryImageAlign),
            "fusion_align" | "fusionalign" | "stage3" => Ok(Stage::FusionAlign),
            other => Err(config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub variant: FusionVariant,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub negative_sampling: NegativeSampling,
    /// Stage III only: keep updating the three adapters.
    pub train_adapters: bool,
    pub heads: usize,
    /// Bilinear projection size; `None` means `dim / 4`.
    pub proj_dim: Option<usize>,
    /// MLP hidden width; `None` means `dim`.
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::FusionAlign,
            batch_size: 64,
            epochs: 20,
            learning_rate: 1e-3,
            seed: 7,
            loss: LossConfig::default(),
            variant: FusionVariant::MoeBilinear,
            grad_clip: Some(5.0),
            negative_sampling: NegativeSampling::TopK,
            train_adapters: true,
            heads: 4,
            proj_dim: None,
            hidden: None,
        }
    }
}

const KEYS: &[&str] = &[
    "stage",
    "batch_size",
    "epochs",
    "learning_rate",
    "seed",
    "variant",
    "grad_clip",
    "eps_plus",
    "eps_minus",
    "eps_zero",
    "m",
    "lambda_eng",
    "lambda_rel",
    "neg_k",
    "negative_sampling",
    "train_adapters",
    "heads",
    "proj_dim",
    "hidden",
];

fn opt_usize(kv: &KvFile, key: &str) -> Result<Option<usize>> {
    match kv.raw(key) {
        None | Some("auto") => Ok(None),
        Some(_) => kv.get(key),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(config(format!("batch_size must be at least 2 (got {})", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(config("epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config(format!("learning_rate must be finite and non-negative (got {})", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config(format!("grad_clip must be positive (got {c})")));
            }
        }
        if self.heads == 0 || self.proj_dim == Some(0) || self.hidden == Some(0) {
            return Err(config("heads, proj_dim and hidden must be positive"));
        }
        Ok(())
    }

    pub fn fusion_shape(&self, dim: usize) -> FusionShape {
        let base = FusionShape::with_defaults(self.variant, dim);
        FusionShape {
            heads: self.heads,
            proj_dim: self.proj_dim.unwrap_or(base.proj_dim),
            hidden: self.hidden.unwrap_or(base.hidden),
            ..base
        }
    }

    /// Parses a run-config file. Missing keys keep their defaults; unknown
    /// keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let d = TrainConfig::default();
        let grad_clip = match kv.raw("grad_clip") {
            None => d.grad_clip,
            Some("none") | Some("off") => None,
            Some(_) => kv.get("grad_clip")?,
        };
        let cfg = TrainConfig {
            stage: kv.get_or("stage", d.stage)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            seed: kv.get_or("seed", d.seed)?,
            variant: kv.get_or("variant", d.variant)?,
            grad_clip,
            loss: LossConfig {
                eps_plus: kv.get_or("eps_plus", d.loss.eps_plus)?,
                eps_minus: kv.get_or("eps_minus", d.loss.eps_minus)?,
                eps_zero: kv.get_or("eps_zero", d.loss.eps_zero)?,
                m: kv.get_or("m", d.loss.m)?,
                lambda_eng: kv.get_or("lambda_eng", d.loss.lambda_eng)?,
                lambda_rel: kv.get_or("lambda_rel", d.loss.lambda_rel)?,
                neg_k: kv.get_or("neg_k", d.loss.neg_k)?,
            },
            negative_sampling: kv.get_or("negative_sampling", d.negative_sampling)?,
            train_adapters: kv.get_or("train_adapters", d.train_adapters)?,
            heads: kv.get_or("heads", d.heads)?,
            proj_dim: opt_usize(&kv, "proj_dim")?,
            hidden: opt_usize(&kv, "hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `(key, value)`, in file order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        vec![
            ("stage", self.stage.key().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.key().to_string()),
            ("grad_clip", self.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            ("eps_plus", self.loss.eps_plus.to_string()),
            ("eps_minus", self.loss.eps_minus.to_string()),
            ("eps_zero", self.loss.eps_zero.to_string()),
            ("m", self.loss.m.to_string()),
            ("lambda_eng", self.loss.lambda_eng.to_string()),
            ("lambda_rel", self.loss.lambda_rel.to_string()),
            ("neg_k", self.loss.neg_k.to_string()),
            ("negative_sampling", self.negative_sampling.key().to_string()),
            ("train_adapters", self.train_adapters.to_string()),
            ("heads", self.heads.to_string()),
            ("proj_dim", opt(self.proj_dim)),
            ("hidden", opt(self.hidden)),
        ]
    }

    pub fn to_kv_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
