use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data_model::{Dataset, ItemRecord, Label, LabeledPair, QueryRecord};
use crate::error::{config, Result};
use crate::fusion::{FusionParams, FusionShape, FusionVariant};
use crate::numerics::{finite_diff_check, l2_normalize, EmbeddingVector, GradientReport};
use crate::objectives::LossConfig;

use super::batch::{batch_objective, NegativeDraw, ScoringPath};

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;
const DIM: usize = 8;
const PAIRS: usize = 4;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Margins, exponent and task weights of the checked loss. `neg_k` must
    /// leave room in a four-pair batch.
    pub loss: LossConfig,
    /// Test hook: adds 0.1 to the first analytic gradient entry of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        // Few enough negatives that several hinge terms stay active.
        GradcheckOptions { loss: LossConfig { neg_k: 2, ..LossConfig::default() }, corrupt: None }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> EmbeddingVector {
    let v: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&EmbeddingVector::from(v)).expect("gaussian draw is non-zero")
}

/// Seeded mini-batch: four queries, four items, one labeled pair each.
pub fn gradcheck_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [(Label::High, Label::High), (Label::Low, Label::High), (Label::None, Label::Low), (Label::High, Label::None)];
    let mut queries = Vec::new();
    let mut items = Vec::new();
    let mut pairs = Vec::new();
    for (i, (y_eng, y_rel)) in labels.into_iter().enumerate().take(PAIRS) {
        queries.push(QueryRecord { query_id: format!("q{i}"), embedding: unit(&mut rng) });
        items.push(ItemRecord {
            item_id: format!("x{i}"),
            text_embedding: unit(&mut rng),
            image_embedding: unit(&mut rng),
            category_tag: None,
        });
        pairs.push(LabeledPair { query_id: format!("q{i}"), item_id: format!("x{i}"), y_eng, y_rel });
    }
    Dataset::new(DIM, queries, items, pairs).expect("generated ids are unique")
}

/// Central-difference check of the full batch loss w.r.t. every tensor of
/// `variant`, at a randomly perturbed parameter point. Negatives are mined
/// once and then held fixed so the loss is smooth in the parameters.
pub fn gradcheck(variant: FusionVariant, seed: u64, opts: &GradcheckOptions) -> Result<GradientReport> {
    let ds = gradcheck_dataset(seed);
    let shape = FusionShape { heads: 2, proj_dim: 3, hidden: 6, ..FusionShape::with_defaults(variant, DIM) };
    let mut params = FusionParams::init(shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    params.for_each_mut(|_, t| {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    });
    let loss = opts.loss;
    loss.validate()?;
    if loss.neg_k >= PAIRS {
        return Err(config(format!("gradcheck batch has {PAIRS} pairs; neg_k must be below that (got {})", loss.neg_k)));
    }
    let batch: Vec<usize> = (0..PAIRS).collect();
    let negatives = batch_objective(&ds, &batch, &params, ScoringPath::Fused, &loss, NegativeDraw::TopK)?.negatives;

    let loss_fn = |p: &FusionParams| -> Result<(f64, FusionParams)> {
        let out = batch_objective(&ds, &batch, p, ScoringPath::Fused, &loss, NegativeDraw::Fixed(&negatives))?;
        let mut grads = out.grads;
        if let Some(name) = &opts.corrupt {
            if let Some(t) = grads.tensor_mut(name) {
                if let Some(v) = t.data_mut().first_mut() {
                    *v += 0.1;
                }
            }
        }
        Ok((out.loss.total, grads))
    };
    finite_diff_check(loss_fn, &params, GRADCHECK_STEP, GRADCHECK_TOL)
}
