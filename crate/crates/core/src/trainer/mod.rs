//! Curriculum training: query/modality alignment (Stage II), fusion
//! alignment (Stage III), the optimizer, checkpoints and the gradient check.

mod batch;
mod checkpoint;
mod config;
mod gradcheck;
mod optimizer;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use batch::{batch_objective, BatchOutput, NegativeDraw, ScoringPath};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Stage, TrainConfig};
pub use gradcheck::{gradcheck, gradcheck_dataset, GradcheckOptions, GRADCHECK_STEP, GRADCHECK_TOL};
pub use optimizer::{optimizer_step, OptimizerConfig, OptimizerState, ADAM_EPS, BETA1, BETA2};

use crate::data_model::{shuffled_batches, Dataset};
use crate::error::{config, structural, Error, Result};
use crate::fusion::{param_group, FusionParams, FusionVariant, Modality, ParamGroup};
use crate::objectives::{LossConfig, NegativeSampling};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_eng: f64,
    pub loss_rel: f64,
    pub mean_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_total).collect()
    }

    /// `epoch,loss_total,loss_eng,loss_rel,mean_alpha`; `mean_alpha` is empty
    /// when the scoring path has no mixing weight.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_total,loss_eng,loss_rel,mean_alpha\n");
        for r in &self.records {
            let alpha = r.mean_alpha.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.loss_total, r.loss_eng, r.loss_rel, alpha);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub params: FusionParams,
    pub optimizer: OptimizerState,
    pub history: LossHistory,
}

impl Stage {
    pub fn scoring_path(self) -> ScoringPath {
        match self.modality() {
            Some(m) => ScoringPath::Single(m),
            None => ScoringPath::Fused,
        }
    }

    /// Tensors this stage updates.
    pub fn trains(self, name: &str, train_adapters: bool) -> bool {
        let group = param_group(name);
        match self {
            Stage::QueryTextAlign => matches!(group, ParamGroup::QueryAdapter | ParamGroup::TextAdapter),
            Stage::QueryImageAlign => matches!(group, ParamGroup::QueryAdapter | ParamGroup::ImageAdapter),
            Stage::FusionAlign => group == ParamGroup::Fusion || train_adapters,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::QueryTextAlign => 1,
            Stage::QueryImageAlign => 2,
            Stage::FusionAlign => 3,
        }
    }
}

/// Runs `cfg.epochs` epochs of the stage selected by `cfg.stage`, starting
/// from a fresh optimizer state. `on_epoch` sees each epoch's record and the
/// parameters at the end of that epoch.
pub fn train_stage(
    ds: &Dataset,
    mut params: FusionParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &FusionParams) -> Result<()>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if params.dim() != ds.dim() {
        return Err(structural(format!("params dim {} does not match dataset dim {}", params.dim(), ds.dim())));
    }
    if cfg.stage == Stage::FusionAlign && params.variant() != cfg.variant {
        return Err(config(format!(
            "params are for variant {} but the config asks for {}",
            params.variant(),
            cfg.variant
        )));
    }
    let path = cfg.stage.scoring_path();
    let opt_cfg = OptimizerConfig { learning_rate: cfg.learning_rate, grad_clip: cfg.grad_clip };
    let trainable = |name: &str| cfg.stage.trains(name, cfg.train_adapters);

    let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    epoch_rng.set_stream(cfg.stage.stream());
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    neg_rng.set_stream(16 + cfg.stage.stream());

    let mut state = OptimizerState::new(&params);
    let mut history = LossHistory::default();
    for epoch in 1..=cfg.epochs {
        let batches = shuffled_batches(ds.pairs().len(), cfg.batch_size, epoch_rng.random())?;
        if batches.is_empty() {
            return Err(config("dataset has fewer than two labeled pairs"));
        }
        let (mut total, mut eng, mut rel, mut alpha) = (0.0, 0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let draw = match cfg.negative_sampling {
                NegativeSampling::TopK => NegativeDraw::TopK,
                mode => NegativeDraw::Random(mode, &mut neg_rng),
            };
            let out = batch_objective(ds, batch, &params, path, &cfg.loss, draw)?;
            if !out.loss.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}, batch {b}")));
            }
            optimizer_step(&mut params, &out.grads, &mut state, opt_cfg, trainable)?;
            total += out.loss.total;
            eng += out.loss.eng;
            rel += out.loss.rel;
            alpha += out.mean_alpha.unwrap_or(0.0);
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            loss_total: total / nb,
            loss_eng: eng / nb,
            loss_rel: rel / nb,
            mean_alpha: matches!(path, ScoringPath::Fused).then_some(alpha / nb),
        };
        history.records.push(record);
        on_epoch(&record, &params)?;
    }
    Ok(StageOutcome { params, optimizer: state, history })
}

/// Stage II: aligns the query adapter with one item modality.
pub fn run_stage2(
    ds: &Dataset,
    modality: Modality,
    params: FusionParams,
    cfg: &TrainConfig,
) -> Result<(FusionParams, LossHistory)> {
    if cfg.stage.modality() != Some(modality) || modality == Modality::Query {
        return Err(config(format!("stage {} does not align the {modality:?} modality", cfg.stage)));
    }
    let out = train_stage(ds, params, cfg, |_, _| Ok(()))?;
    Ok((out.params, out.history))
}

/// Stage III: aligns queries with fused item embeddings.
pub fn run_stage3(ds: &Dataset, params: FusionParams, cfg: &TrainConfig) -> Result<(FusionParams, LossHistory)> {
    if cfg.stage != Stage::FusionAlign {
        return Err(config(format!("stage {} is not fusion_align", cfg.stage)));
    }
    let out = train_stage(ds, params, cfg, |_, _| Ok(()))?;
    Ok((out.params, out.history))
}

/// Per-stage configs for a full Stage II → Stage III run. The `stage` field of
/// each config is overwritten by the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
}

/// Epochs per Stage II sub-run in the benchmark protocol.
pub const BENCHMARK_STAGE2_EPOCHS: usize = 5;

impl Curriculum {
    /// Every stage uses `base`.
    pub fn uniform(base: &TrainConfig) -> Self {
        Curriculum { stage2: base.clone(), stage3: base.clone() }
    }

    /// Defaults with short Stage II sub-runs, as used by the synthetic
    /// benchmark.
    pub fn benchmark() -> Self {
        let base = TrainConfig::default();
        Curriculum { stage2: TrainConfig { epochs: BENCHMARK_STAGE2_EPOCHS, ..base.clone() }, stage3: base }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stage2.seed = seed;
        self.stage3.seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: FusionVariant) -> Self {
        self.stage2.variant = variant;
        self.stage3.variant = variant;
        self
    }

    /// Stage II text then image, sharing the query adapter.
    pub fn run_stage2(&self, ds: &Dataset, params: FusionParams) -> Result<FusionParams> {
        let (params, _) =
            run_stage2(ds, Modality::Text, params, &TrainConfig { stage: Stage::QueryTextAlign, ..self.stage2.clone() })?;
        let (params, _) =
            run_stage2(ds, Modality::Image, params, &TrainConfig { stage: Stage::QueryImageAlign, ..self.stage2.clone() })?;
        Ok(params)
    }

    pub fn stage3_config(&self) -> TrainConfig {
        TrainConfig { stage: Stage::FusionAlign, ..self.stage3.clone() }
    }
}

/// Sequential Stage II (text then image, shared query adapter) followed by
/// Stage III.
pub fn run_curriculum(ds: &Dataset, params: FusionParams, plan: &Curriculum) -> Result<(FusionParams, LossHistory)> {
    let params = plan.run_stage2(ds, params)?;
    run_stage3(ds, params, &plan.stage3_config())
}

/// Mean batch loss with top-k negatives over a fixed seeded batching, with no
/// parameter update. Gives runs trained under different negative samplers a
/// common yardstick.
pub fn evaluate_objective(
    ds: &Dataset,
    params: &FusionParams,
    path: ScoringPath,
    loss: &LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let batches = shuffled_batches(ds.pairs().len(), batch_size, seed)?;
    if batches.is_empty() {
        return Err(config("dataset has fewer than two labeled pairs"));
    }
    let mut total = 0.0;
    for batch in &batches {
        total += batch_objective(ds, batch, params, path, loss, NegativeDraw::TopK)?.loss.total;
    }
    Ok(total / batches.len() as f64)
}
