use rand_chacha::ChaCha8Rng;

use crate::data_model::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{item_backward, item_forward, FusionForward, FusionParams, Modality};
use crate::numerics::{cosine_with_grad, Tensor2};
use crate::objectives::{
    batch_loss_with_grad, sample_negatives_excluding, sample_negatives_random, BatchLoss, LossConfig, LossTerm,
    NegativeSampling,
};

/// What the adapted query is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringPath {
    /// A single adapted item modality (text or image).
    Single(Modality),
    /// The fused item embedding.
    Fused,
}

/// Negative selection for one batch. Rows and columns index batch positions.
pub enum NegativeDraw<'a> {
    None,
    Fixed(&'a [Vec<usize>]),
    TopK,
    Random(NegativeSampling, &'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: BatchLoss,
    pub grads: FusionParams,
    /// Mean mixing weight over the batch's items; `None` on single-modality paths.
    pub mean_alpha: Option<f64>,
    pub negatives: Vec<Vec<usize>>,
}

enum ItemSide {
    Single(Vec<f64>),
    Fused(Box<FusionForward>),
}

impl ItemSide {
    fn embedding(&self) -> &[f64] {
        match self {
            ItemSide::Single(v) => v,
            ItemSide::Fused(f) => &f.h_x,
        }
    }
}

/// Loss and parameter gradients for one batch of labeled pairs.
///
/// Each pair contributes its own diagonal term; mined negatives `(i, j)`
/// contribute a term labeled `None` on both objectives. Cells whose
/// (query, item) is itself a labeled pair are never mined.
pub fn batch_objective(
    ds: &Dataset,
    batch: &[usize],
    params: &FusionParams,
    path: ScoringPath,
    loss_cfg: &LossConfig,
    negatives: NegativeDraw<'_>,
) -> Result<BatchOutput> {
    let n = batch.len();
    let idx: Vec<(usize, usize)> = batch.iter().map(|&p| ds.pair_indices(p)).collect();

    let queries: Vec<Vec<f64>> =
        idx.iter().map(|&(q, _)| params.query_adapter.matvec(ds.queries()[q].embedding.values())).collect();
    let mut items = Vec::with_capacity(n);
    for &(_, x) in &idx {
        let rec = &ds.items()[x];
        items.push(match path {
            ScoringPath::Single(Modality::Text) => ItemSide::Single(params.text_adapter.matvec(rec.text_embedding.values())),
            ScoringPath::Single(Modality::Image) => {
                ItemSide::Single(params.image_adapter.matvec(rec.image_embedding.values()))
            }
            ScoringPath::Single(Modality::Query) => {
                return Err(Error::Structural("query is not an item modality".into()));
            }
            ScoringPath::Fused => ItemSide::Fused(Box::new(item_forward(
                params,
                rec.text_embedding.values(),
                rec.image_embedding.values(),
            )?)),
        });
    }

    let mut sim = Tensor2::zeros(n, n);
    for (i, q) in queries.iter().enumerate() {
        for (j, item) in items.iter().enumerate() {
            sim.set(i, j, cosine_with_grad(q, item.embedding()).value);
        }
    }
    let exclude = |i: usize, j: usize| ds.is_labeled(idx[i].0, idx[j].1);
    let negatives = match negatives {
        NegativeDraw::None => vec![Vec::new(); n],
        NegativeDraw::Fixed(neg) => neg.to_vec(),
        NegativeDraw::TopK => sample_negatives_excluding(&sim, loss_cfg.neg_k, exclude)?,
        NegativeDraw::Random(mode, rng) => sample_negatives_random(&sim, loss_cfg.neg_k, mode, rng, exclude)?,
    };

    let mut cells = Vec::with_capacity(n * (1 + loss_cfg.neg_k));
    let mut terms = Vec::with_capacity(cells.capacity());
    for (i, &p) in batch.iter().enumerate() {
        let pair = &ds.pairs()[p];
        cells.push((i, i));
        terms.push(LossTerm { score: sim.get(i, i), y_eng: pair.y_eng, y_rel: pair.y_rel });
    }
    for (i, row) in negatives.iter().enumerate() {
        for &j in row {
            cells.push((i, j));
            terms.push(LossTerm::negative(sim.get(i, j)));
        }
    }
    let (loss, d_score) = batch_loss_with_grad(&terms, loss_cfg)?;

    let d = params.dim();
    let mut d_query = vec![vec![0.0; d]; n];
    let mut d_item = vec![vec![0.0; d]; n];
    for (&(i, j), &ds_ij) in cells.iter().zip(&d_score) {
        if ds_ij == 0.0 {
            continue;
        }
        let cg = cosine_with_grad(&queries[i], items[j].embedding());
        for k in 0..d {
            d_query[i][k] += ds_ij * cg.d_a[k];
            d_item[j][k] += ds_ij * cg.d_b[k];
        }
    }

    let mut grads = params.zeros_like();
    for (i, &(q, x)) in idx.iter().enumerate() {
        grads.query_adapter.add_outer(1.0, &d_query[i], ds.queries()[q].embedding.values());
        let rec = &ds.items()[x];
        match (&items[i], path) {
            (ItemSide::Single(_), ScoringPath::Single(Modality::Text)) => {
                grads.text_adapter.add_outer(1.0, &d_item[i], rec.text_embedding.values())
            }
            (ItemSide::Single(_), _) => grads.image_adapter.add_outer(1.0, &d_item[i], rec.image_embedding.values()),
            (ItemSide::Fused(f), _) => item_backward(
                params,
                f,
                rec.text_embedding.values(),
                rec.image_embedding.values(),
                &d_item[i],
                &mut grads,
            ),
        }
    }

    let mean_alpha = match path {
        ScoringPath::Fused => Some(
            items
                .iter()
                .map(|s| match s {
                    ItemSide::Fused(f) => f.alpha,
                    ItemSide::Single(_) => unreachable!(),
                })
                .sum::<f64>()
                / n as f64,
        ),
        ScoringPath::Single(_) => None,
    };
    Ok(BatchOutput { loss, grads, mean_alpha, negatives })
}
