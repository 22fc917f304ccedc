//! Graded three-part hinge loss, the engagement/relevance task losses, their
//! weighted total, and in-batch negative sampling.

use std::str::FromStr;

use rand::Rng;

use crate::data_model::{Label, LabeledPair};
use crate::error::{config, structural, Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub eps_zero: f64,
    /// Exponent applied to the margin violation.
    pub m: f64,
    pub lambda_eng: f64,
    pub lambda_rel: f64,
    /// Mined negatives per query row.
    pub neg_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eps_plus: 0.8, eps_minus: 0.4, eps_zero: 0.2, m: 2.0, lambda_eng: 0.7, lambda_rel: 0.3, neg_k: 3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eps_plus, self.eps_minus, self.eps_zero, self.m, self.lambda_eng, self.lambda_rel];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(config("loss config values must be finite"));
        }
        if !(self.eps_plus > self.eps_minus && self.eps_minus > self.eps_zero) {
            return Err(config(format!(
                "margins must satisfy ε+ > ε- > ε0 (got {}, {}, {})",
                self.eps_plus, self.eps_minus, self.eps_zero
            )));
        }
        if self.m <= 0.0 {
            return Err(config(format!("hinge exponent m must be positive (got {})", self.m)));
        }
        if self.lambda_eng <= self.lambda_rel {
            return Err(config(format!(
                "task weights must satisfy λ_eng > λ_rel (got λ_eng = {}, λ_rel = {})",
                self.lambda_eng, self.lambda_rel
            )));
        }
        if self.lambda_rel < 0.0 || (self.lambda_eng + self.lambda_rel - 1.0).abs() > 1e-9 {
            return Err(config(format!(
                "task weights must be non-negative and sum to 1 (got {} + {})",
                self.lambda_eng, self.lambda_rel
            )));
        }
        Ok(())
    }

    /// Signed margin violation for a label: positive when the margin is broken.
    fn violation(&self, y_hat: f64, y: Label) -> f64 {
        match y {
            Label::High => self.eps_plus - y_hat,
            Label::Low => y_hat - self.eps_minus,
            Label::None => y_hat - self.eps_zero,
        }
    }
}

/// `max(0, violation)^m` with the branch selected by the label.
pub fn three_hinge(y_hat: f64, y: Label, cfg: &LossConfig) -> f64 {
    let v = cfg.violation(y_hat, y);
    if v <= 0.0 {
        0.0
    } else if cfg.m == 2.0 {
        v * v
    } else {
        v.powf(cfg.m)
    }
}

/// Derivative of [`three_hinge`] w.r.t. `y_hat` (zero at and below the hinge).
pub fn three_hinge_grad(y_hat: f64, y: Label, cfg: &LossConfig) -> f64 {
    let v = cfg.violation(y_hat, y);
    if v <= 0.0 {
        return 0.0;
    }
    let dv = if cfg.m == 2.0 {
        2.0 * v
    } else if cfg.m == 1.0 {
        1.0
    } else {
        cfg.m * v.powf(cfg.m - 1.0)
    };
    match y {
        Label::High => -dv,
        Label::Low | Label::None => dv,
    }
}

/// Batch means of the engagement and relevance hinge losses.
pub fn task_losses(scores: &[f64], pairs: &[LabeledPair], cfg: &LossConfig) -> Result<(f64, f64)> {
    if scores.len() != pairs.len() {
        return Err(structural(format!("{} scores for {} pairs", scores.len(), pairs.len())));
    }
    let terms: Vec<LossTerm> = scores
        .iter()
        .zip(pairs)
        .map(|(&s, p)| LossTerm { score: s, y_eng: p.y_eng, y_rel: p.y_rel })
        .collect();
    let b = batch_loss(&terms, cfg)?;
    Ok((b.eng, b.rel))
}

/// `λ_eng · eng + λ_rel · rel`
pub fn total_loss(eng: f64, rel: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_eng * eng + cfg.lambda_rel * rel
}

/// One scored (query, item) loss term with its two labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub score: f64,
    pub y_eng: Label,
    pub y_rel: Label,
}

impl LossTerm {
    pub fn negative(score: f64) -> Self {
        LossTerm { score, y_eng: Label::None, y_rel: Label::None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub eng: f64,
    pub rel: f64,
    /// `λ_eng · hinge_eng + λ_rel · hinge_rel` for each term, before averaging.
    pub per_pair: Vec<f64>,
}

pub fn batch_loss(terms: &[LossTerm], cfg: &LossConfig) -> Result<BatchLoss> {
    Ok(batch_loss_with_grad(terms, cfg)?.0)
}

/// Batch loss plus `∂total/∂score` for each term.
pub fn batch_loss_with_grad(terms: &[LossTerm], cfg: &LossConfig) -> Result<(BatchLoss, Vec<f64>)> {
    if terms.is_empty() {
        return Err(config("loss over an empty batch"));
    }
    let n = terms.len() as f64;
    let (mut eng, mut rel) = (0.0, 0.0);
    let mut per_pair = Vec::with_capacity(terms.len());
    let mut grads = Vec::with_capacity(terms.len());
    for t in terms {
        let he = three_hinge(t.score, t.y_eng, cfg);
        let hr = three_hinge(t.score, t.y_rel, cfg);
        eng += he;
        rel += hr;
        per_pair.push(total_loss(he, hr, cfg));
        let g = cfg.lambda_eng * three_hinge_grad(t.score, t.y_eng, cfg)
            + cfg.lambda_rel * three_hinge_grad(t.score, t.y_rel, cfg);
        grads.push(g / n);
    }
    let (eng, rel) = (eng / n, rel / n);
    Ok((BatchLoss { total: total_loss(eng, rel, cfg), eng, rel, per_pair }, grads))
}

/// How in-batch negatives are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSampling {
    /// Deterministic top-k most similar off-diagonal entries.
    TopK,
    /// Uniform draw without replacement among eligible off-diagonal entries.
    Uniform,
    /// Draw without replacement with probability proportional to `(1 + sim) / 2`.
    Proportional,
}

impl NegativeSampling {
    pub fn key(self) -> &'static str {
        match self {
            NegativeSampling::TopK => "topk",
            NegativeSampling::Uniform => "uniform",
            NegativeSampling::Proportional => "proportional",
        }
    }
}

impl FromStr for NegativeSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "topk" | "top_k" => Ok(NegativeSampling::TopK),
            "uniform" => Ok(NegativeSampling::Uniform),
            "proportional" => Ok(NegativeSampling::Proportional),
            other => Err(config(format!("unknown negative sampling mode {other:?}"))),
        }
    }
}

fn check_square(sim: &Tensor2) -> Result<usize> {
    let (r, c) = sim.shape();
    if r != c {
        return Err(structural(format!("similarity matrix must be square (got {r}x{c})")));
    }
    if r < 2 {
        return Err(config("in-batch negatives need at least two pairs"));
    }
    Ok(r)
}

/// For each row, the `min(k, N-1)` largest off-diagonal columns, ties broken
/// by the lower column index.
pub fn sample_negatives(sim: &Tensor2, k: usize) -> Result<Vec<Vec<usize>>> {
    sample_negatives_excluding(sim, k, |_, _| false)
}

/// Top-k selection that also skips the `(row, col)` entries for which
/// `exclude` holds.
pub fn sample_negatives_excluding(
    sim: &Tensor2,
    k: usize,
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<Vec<Vec<usize>>> {
    let n = check_square(sim)?;
    Ok((0..n)
        .map(|i| {
            let mut cands: Vec<usize> = (0..n).filter(|&j| j != i && !exclude(i, j)).collect();
            // `+ 0.0` folds -0.0 into +0.0 so signed zeros tie.
            cands.sort_by(|&a, &b| (sim.get(i, b) + 0.0).total_cmp(&(sim.get(i, a) + 0.0)).then(a.cmp(&b)));
            cands.truncate(k);
            cands
        })
        .collect())
}

/// Stochastic negative draws (uniform or similarity-proportional), without
/// replacement and with the same exclusion rule as the top-k sampler.
pub fn sample_negatives_random<R: Rng>(
    sim: &Tensor2,
    k: usize,
    mode: NegativeSampling,
    rng: &mut R,
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<Vec<Vec<usize>>> {
    let n = check_square(sim)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cands: Vec<usize> = (0..n).filter(|&j| j != i && !exclude(i, j)).collect();
        let mut picked = Vec::with_capacity(k.min(cands.len()));
        while picked.len() < k && !cands.is_empty() {
            let idx = match mode {
                NegativeSampling::Proportional => {
                    let weights: Vec<f64> = cands.iter().map(|&j| ((1.0 + sim.get(i, j)) / 2.0).max(1e-12)).collect();
                    let total: f64 = weights.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut chosen = cands.len() - 1;
                    for (w_idx, w) in weights.iter().enumerate() {
                        if u < *w {
                            chosen = w_idx;
                            break;
                        }
                        u -= w;
                    }
                    chosen
                }
                _ => rng.random_range(0..cands.len()),
            };
            picked.push(cands.remove(idx));
        }
        out.push(picked);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(three_hinge(0.9, Label::High, &cfg()), 0.0);
        assert!((three_hinge(0.5, Label::High, &cfg()) - 0.09).abs() <= 1e-15);
        assert!((three_hinge(0.6, Label::Low, &cfg()) - 0.04).abs() <= 1e-15);
        assert!((three_hinge(0.5, Label::None, &cfg()) - 0.09).abs() <= 1e-15);
    }

    fn pair(y_eng: Label, y_rel: Label) -> LabeledPair {
        LabeledPair { query_id: "q".into(), item_id: "x".into(), y_eng, y_rel }
    }

    #[test]
    fn task_loss_examples() {
        let (e, r) = task_losses(&[0.85], &[pair(Label::High, Label::High)], &cfg()).unwrap();
        assert_eq!((e, r), (0.0, 0.0));

        // engagement hinge values 0.09 and 0.01
        let (e, _) = task_losses(&[0.5, 0.7], &[pair(Label::High, Label::High), pair(Label::High, Label::High)], &cfg())
            .unwrap();
        assert!((e - 0.05).abs() < 1e-15);

        let (e, r) = task_losses(&[0.5], &[pair(Label::High, Label::None)], &cfg()).unwrap();
        assert!((e - 0.09).abs() < 1e-15 && (r - 0.09).abs() < 1e-15);

        assert!(matches!(task_losses(&[], &[], &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_examples() {
        let c = cfg();
        assert!((total_loss(1.0, 0.0, &c) - 0.7).abs() < 1e-15);
        assert!((total_loss(0.2, 0.4, &c) - 0.26).abs() < 1e-15);
        let other = LossConfig { lambda_eng: 0.9, lambda_rel: 0.1, ..c };
        assert!((total_loss(0.37, 0.37, &other) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = LossConfig { lambda_eng: 0.3, lambda_rel: 0.7, ..cfg() };
        assert!(bad.validate().unwrap_err().to_string().contains("λ_eng > λ_rel"));
        assert!(LossConfig { eps_minus: 0.9, ..cfg() }.validate().is_err());
        assert!(LossConfig { m: 0.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { lambda_eng: 0.8, lambda_rel: 0.3, ..cfg() }.validate().is_err());
    }

    #[test]
    fn batch_loss_bookkeeping() {
        let terms = [
            LossTerm { score: 0.5, y_eng: Label::High, y_rel: Label::Low },
            LossTerm::negative(0.45),
            LossTerm { score: -0.1, y_eng: Label::Low, y_rel: Label::None },
        ];
        let b = batch_loss(&terms, &cfg()).unwrap();
        assert!((b.total - (0.7 * b.eng + 0.3 * b.rel)).abs() < 1e-12);
        let mean: f64 = b.per_pair.iter().sum::<f64>() / 3.0;
        assert!((mean - b.total).abs() < 1e-12);
    }

    #[test]
    fn hinge_gradient_matches_differences() {
        let c = LossConfig { m: 1.5, ..cfg() };
        for y in Label::ALL {
            for &s in &[-0.7, 0.1, 0.3, 0.55, 0.9] {
                let h = 1e-6;
                let num = (three_hinge(s + h, y, &c) - three_hinge(s - h, y, &c)) / (2.0 * h);
                assert!((num - three_hinge_grad(s, y, &c)).abs() < 1e-5, "{y:?} {s}");
            }
        }
    }

    #[test]
    fn m1_piecewise_linear_and_m2_smooth_at_hinge() {
        let c1 = LossConfig { m: 1.0, ..cfg() };
        let a = three_hinge(0.5, Label::High, &c1);
        let b = three_hinge(0.6, Label::High, &c1);
        let mid = three_hinge(0.55, Label::High, &c1);
        assert!((mid - (a + b) / 2.0).abs() < 1e-15);
        assert_eq!(three_hinge_grad(0.8, Label::High, &cfg()), 0.0);
        assert!(three_hinge_grad(0.8 - 1e-9, Label::High, &cfg()).abs() < 1e-8);
    }

    #[test]
    fn negative_examples() {
        let two = Tensor2::from_vec(2, 2, vec![1.0, 0.3, 0.2, 1.0]).unwrap();
        assert_eq!(sample_negatives(&two, 3).unwrap(), vec![vec![1], vec![0]]);

        let mut sim = Tensor2::zeros(4, 4);
        for (j, v) in [9.0, 0.9, 0.1, 0.5].into_iter().enumerate() {
            sim.set(0, j, v);
        }
        assert_eq!(sample_negatives(&sim, 2).unwrap()[0], vec![1, 3]);
        assert!(sample_negatives(&sim, 0).unwrap().iter().all(Vec::is_empty));
        assert!(matches!(sample_negatives(&Tensor2::zeros(1, 1), 3), Err(Error::Config(_))));
        assert!(sample_negatives(&Tensor2::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn ties_prefer_lower_column() {
        let sim = Tensor2::from_vec(3, 3, vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(sample_negatives(&sim, 1).unwrap(), vec![vec![1], vec![0], vec![0]]);
    }

    #[test]
    fn exclusion_is_honored() {
        let sim = Tensor2::from_vec(3, 3, vec![0.0, 0.9, 0.1, 0.9, 0.0, 0.1, 0.3, 0.2, 0.0]).unwrap();
        let negs = sample_negatives_excluding(&sim, 2, |i, j| i + j == 1).unwrap();
        assert_eq!(negs, vec![vec![2], vec![2], vec![0, 1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_negatives_random(&sim, 2, NegativeSampling::Uniform, &mut rng, |i, j| i + j == 1).unwrap();
        assert_eq!(r[0], vec![2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Exhaustive oracle: enumerate every off-diagonal column and sort
        /// with an explicit comparison over (score desc, index asc).
        fn oracle(sim: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
            let n = sim.len();
            (0..n)
                .map(|i| {
                    let mut all: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sim[i][j], j)).collect();
                    for a in 0..all.len() {
                        for b in a + 1..all.len() {
                            let swap = all[b].0 > all[a].0 || (all[b].0 == all[a].0 && all[b].1 < all[a].1);
                            if swap {
                                all.swap(a, b);
                            }
                        }
                    }
                    all.into_iter().take(k).map(|(_, j)| j).collect()
                })
                .collect()
        }

        proptest! {
            #[test]
            fn hinge_nonnegative_and_monotone(s in -1.0f64..1.0, d in 0.0f64..0.5, m in 0.5f64..3.0) {
                let c = LossConfig { m, ..LossConfig::default() };
                for y in Label::ALL {
                    prop_assert!(three_hinge(s, y, &c) >= 0.0);
                }
                prop_assert!(three_hinge(s + d, Label::High, &c) <= three_hinge(s, Label::High, &c));
                prop_assert!(three_hinge(s + d, Label::Low, &c) >= three_hinge(s, Label::Low, &c));
                prop_assert!(three_hinge(s + d, Label::None, &c) >= three_hinge(s, Label::None, &c));
                prop_assert_eq!(three_hinge(s, Label::High, &c) == 0.0, s >= c.eps_plus);
            }

            #[test]
            fn total_loss_linear(e1 in 0.0f64..2.0, e2 in 0.0f64..2.0, r in 0.0f64..2.0) {
                let c = LossConfig::default();
                let lhs = total_loss(e1 + e2, r, &c) - total_loss(e2, r, &c);
                prop_assert!((lhs - total_loss(e1, 0.0, &c)).abs() < 1e-12);
                prop_assert!((total_loss(r, r, &c) - r).abs() < 1e-12);
            }

            #[test]
            fn top_k_matches_oracle(vals in prop::collection::vec(-1.0f64..1.0, 36), k in 0usize..7, quant in any::<bool>()) {
                // Quantize half the cases so ties actually occur.
                let vals: Vec<f64> = vals.iter().map(|v| if quant { (v * 4.0).round() / 4.0 } else { *v }).collect();
                let sim = Tensor2::from_vec(6, 6, vals.clone()).unwrap();
                let rows: Vec<Vec<f64>> = vals.chunks(6).map(|c| c.to_vec()).collect();
                let got = sample_negatives(&sim, k).unwrap();
                prop_assert_eq!(&got, &oracle(&rows, k));
                for (i, row) in got.iter().enumerate() {
                    prop_assert!(!row.contains(&i));
                    let mut dedup = row.clone();
                    dedup.sort();
                    dedup.dedup();
                    prop_assert_eq!(dedup.len(), row.len());
                    if !row.is_empty() {
                        // hard-negative dominance over the uniform expectation
                        let picked: f64 = row.iter().map(|&j| rows[i][j]).sum::<f64>() / row.len() as f64;
                        let all: f64 = (0..6).filter(|&j| j != i).map(|j| rows[i][j]).sum::<f64>() / 5.0;
                        prop_assert!(picked >= all - 1e-12);
                    }
                }
            }
        }
    }
}
