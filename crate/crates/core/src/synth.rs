//! Seeded synthetic benchmark generator.
//!
//! All randomness comes from one ChaCha8 stream (`rand_chacha::ChaCha8Rng`
//! seeded with `seed` via `SeedableRng::seed_from_u64`); Gaussian draws use
//! `rand_distr::StandardNormal`. Draw order:
//!
//! 1. `n_topics` Gaussian topic directions, Gram-Schmidt orthonormalised.
//! 2. One unit marker per category (in tag order), then one polarity marker.
//! 3. Text map `T = orth(I + s_t G / √D)`, then image map `V` with `s_v`.
//! 4. Per query `i` (category `i mod n_categories`): topic index, latent
//!    `z_q = norm(a e_topic + √(1-a²) g)`, query embedding `norm(z_q + noise)`.
//! 5. Per item: label band (High 0.2 / Low 0.3 / None 0.5), latent relevance
//!    `ρ` uniform inside the band, `z_x = ρ z_q + √(1-ρ²) u` with `u ⊥ z_q`,
//!    polarity `ε = -1` with probability `j(w) / 2`, text and image
//!    residual directions, embedding noise, then the engagement flip draw.
//!
//! With text weight `w`, marker strength `κ`, polarity strength `κ_p` and
//! joint purity `π`:
//!
//! ```text
//! text  = norm(T (w ε z_x + (1-w) r_t + κ m_cat) + noise)
//! image = norm(V ((1-w)(1 - π j(w)) z_x + w r_v + κ m_cat + κ_p ε m_pol) + noise)
//! ```
//!
//! `j(w) = max(0, 1 - 2|2w - 1|)`, so only categories with balanced weights
//! get sign-flipped text and a weakened image view. Recovering the flip needs
//! the product of the two sides.
//! Noise is `N(0, σ²/D)` per coordinate. Bands: High `[(θh+1)/2, 1]`,
//! Low `[θl, (θl+θh)/2]`, None `[-0.3, θl/2]`. `y_rel` thresholds `ρ` at
//! `θh`/`θl`; `y_eng` replaces it by one of the other two labels with
//! probability `label_flip`. Stored values are rounded to `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data_model::{Dataset, ItemRecord, Label, LabeledPair, QueryRecord};
use crate::error::{config, Result};
use crate::kv::KvFile;
use crate::numerics::{dot, EmbeddingVector, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub tag: String,
    pub text_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_topics: usize,
    pub n_queries: usize,
    pub items_per_query: usize,
    pub noise_sigma: f64,
    pub categories: Vec<CategorySpec>,
    pub theta_high: f64,
    pub theta_low: f64,
    pub seed: u64,
    /// Share of the topic direction in a query latent.
    pub topic_weight: f64,
    /// Strength of the category markers.
    pub marker_strength: f64,
    /// Strength of the image-side polarity marker.
    pub polarity_strength: f64,
    /// How much of the image-side relevance latent jointly-driven items lose.
    pub joint_purity: f64,
    pub text_map_scale: f64,
    pub image_map_scale: f64,
    /// Engagement label flip probability.
    pub label_flip: f64,
}

const HIGH_SHARE: f64 = 0.2;
const LOW_SHARE: f64 = 0.3;
const NONE_FLOOR: f64 = -0.3;

fn cat(tag: &str, w: f64) -> CategorySpec {
    CategorySpec { tag: tag.to_string(), text_weight: w }
}

impl SyntheticSpec {
    /// Standard benchmark: dim 64, 8 topics, 200 queries × 20 items, σ = 0.1.
    pub fn standard() -> Self {
        SyntheticSpec {
            dim: 64,
            n_topics: 8,
            n_queries: 200,
            items_per_query: 20,
            noise_sigma: 0.1,
            categories: vec![cat("image_driven", 0.1), cat("joint", 0.5), cat("text_driven", 0.9)],
            theta_high: 0.6,
            theta_low: 0.2,
            seed: 7,
            topic_weight: 0.6,
            marker_strength: 0.3,
            polarity_strength: 1.0,
            joint_purity: 0.8,
            text_map_scale: 0.5,
            image_map_scale: 1.5,
            label_flip: 0.05,
        }
    }

    /// Noiseless, text-only relevance with exact labels. The text map is far
    /// from the identity, so untrained adapters score poorly.
    pub fn separable() -> Self {
        SyntheticSpec {
            noise_sigma: 0.0,
            text_map_scale: 4.0,
            categories: vec![cat("text_only", 1.0)],
            marker_strength: 0.0,
            polarity_strength: 0.0,
            joint_purity: 0.0,
            label_flip: 0.0,
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "separable" => Ok(Self::separable()),
            other => Err(config(format!("unknown preset {other:?} (expected standard or separable)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_topics == 0 || self.n_queries == 0 || self.items_per_query == 0 {
            return Err(config("dim, n_topics, n_queries and items_per_query must be positive"));
        }
        if self.n_topics > self.dim {
            return Err(config(format!("n_topics ({}) exceeds dim ({})", self.n_topics, self.dim)));
        }
        if !(0.0 < self.theta_low && self.theta_low < self.theta_high && self.theta_high <= 1.0) {
            return Err(config(format!(
                "thresholds must satisfy 0 < theta_low < theta_high <= 1 (got {}, {})",
                self.theta_low, self.theta_high
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config("noise_sigma must be finite and non-negative"));
        }
        if self.categories.is_empty() {
            return Err(config("at least one category is required"));
        }
        for c in &self.categories {
            if !(0.0..=1.0).contains(&c.text_weight) {
                return Err(config(format!("category {} text_weight {} outside [0, 1]", c.tag, c.text_weight)));
            }
        }
        for (name, v) in
            [("topic_weight", self.topic_weight), ("label_flip", self.label_flip), ("joint_purity", self.joint_purity)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(config(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("marker_strength", self.marker_strength),
            ("polarity_strength", self.polarity_strength),
            ("text_map_scale", self.text_map_scale),
            ("image_map_scale", self.image_map_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Parses a spec file. `preset=<name>` selects the base; other keys
    /// override it. Categories are given as `category.<tag>=<text_weight>`
    /// and replace the preset's list when present.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(&[
            "preset",
            "dim",
            "n_topics",
            "n_queries",
            "items_per_query",
            "noise_sigma",
            "theta_high",
            "theta_low",
            "seed",
            "topic_weight",
            "marker_strength",
            "polarity_strength",
            "joint_purity",
            "text_map_scale",
            "image_map_scale",
            "label_flip",
            "category.",
        ])?;
        let d = Self::preset(kv.raw("preset").unwrap_or("standard"))?;
        let mut categories = Vec::new();
        for (k, _) in kv.keys_with_prefix("category.") {
            categories.push(cat(&k["category.".len()..], kv.get(k)?.expect("key exists")));
        }
        let spec = SyntheticSpec {
            dim: kv.get_or("dim", d.dim)?,
            n_topics: kv.get_or("n_topics", d.n_topics)?,
            n_queries: kv.get_or("n_queries", d.n_queries)?,
            items_per_query: kv.get_or("items_per_query", d.items_per_query)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            categories: if categories.is_empty() { d.categories } else { categories },
            theta_high: kv.get_or("theta_high", d.theta_high)?,
            theta_low: kv.get_or("theta_low", d.theta_low)?,
            seed: kv.get_or("seed", d.seed)?,
            topic_weight: kv.get_or("topic_weight", d.topic_weight)?,
            marker_strength: kv.get_or("marker_strength", d.marker_strength)?,
            polarity_strength: kv.get_or("polarity_strength", d.polarity_strength)?,
            joint_purity: kv.get_or("joint_purity", d.joint_purity)?,
            text_map_scale: kv.get_or("text_map_scale", d.text_map_scale)?,
            image_map_scale: kv.get_or("image_map_scale", d.image_map_scale)?,
            label_flip: kv.get_or("label_flip", d.label_flip)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = format!(
            "dim={}\nn_topics={}\nn_queries={}\nitems_per_query={}\nnoise_sigma={}\ntheta_high={}\ntheta_low={}\n\
             seed={}\ntopic_weight={}\nmarker_strength={}\npolarity_strength={}\njoint_purity={}\ntext_map_scale={}\nimage_map_scale={}\nlabel_flip={}\n",
            self.dim,
            self.n_topics,
            self.n_queries,
            self.items_per_query,
            self.noise_sigma,
            self.theta_high,
            self.theta_low,
            self.seed,
            self.topic_weight,
            self.marker_strength,
            self.polarity_strength,
            self.joint_purity,
            self.text_map_scale,
            self.image_map_scale,
            self.label_flip,
        );
        for c in &self.categories {
            out.push_str(&format!("category.{}={}\n", c.tag, c.text_weight));
        }
        out
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    normalized(gaussian(rng, n))
}

/// Modified Gram-Schmidt over `rows`, in order.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        for j in 0..i {
            let (done, rest) = rows.split_at_mut(i);
            let p = dot(&rest[0], &done[j]);
            for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                *x -= p * y;
            }
        }
        let v = std::mem::take(&mut rows[i]);
        rows[i] = normalized(v);
    }
}

fn modality_map(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Tensor2 {
    let s = scale / (dim as f64).sqrt();
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|r| {
            let mut row: Vec<f64> = gaussian(rng, dim).into_iter().map(|g| s * g).collect();
            row[r] += 1.0;
            row
        })
        .collect();
    orthonormalize(&mut rows);
    Tensor2::from_vec(dim, dim, rows.concat()).expect("square by construction")
}

fn jointness(w: f64) -> f64 {
    (1.0 - 2.0 * (2.0 * w - 1.0).abs()).max(0.0)
}

fn threshold(rho: f64, spec: &SyntheticSpec) -> Label {
    if rho >= spec.theta_high {
        Label::High
    } else if rho >= spec.theta_low {
        Label::Low
    } else {
        Label::None
    }
}

fn observe(rng: &mut ChaCha8Rng, clean: Vec<f64>, sigma: f64) -> EmbeddingVector {
    let d = clean.len();
    let scale = sigma / (d as f64).sqrt();
    let noisy: Vec<f64> = clean.iter().map(|c| c + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let v: Vec<f64> = normalized(noisy).into_iter().map(|x| x as f32 as f64).collect();
    EmbeddingVector::from(v)
}

/// Generated dataset plus the latent relevance `ρ` of every pair, in pair order.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub latent_relevance: Vec<f64>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_with_latents(spec)?.dataset)
}

pub fn generate_with_latents(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut topics: Vec<Vec<f64>> = (0..spec.n_topics).map(|_| gaussian(&mut rng, d)).collect();
    orthonormalize(&mut topics);
    let markers: Vec<Vec<f64>> = spec.categories.iter().map(|_| unit(&mut rng, d)).collect();
    let polarity = unit(&mut rng, d);
    let text_map = modality_map(&mut rng, d, spec.text_map_scale);
    let image_map = modality_map(&mut rng, d, spec.image_map_scale);

    let a = spec.topic_weight;
    let b = (1.0 - a * a).sqrt();
    let k = spec.marker_strength;
    let kp = spec.polarity_strength;
    let (high_lo, low_hi, none_hi) =
        ((spec.theta_high + 1.0) / 2.0, (spec.theta_low + spec.theta_high) / 2.0, spec.theta_low / 2.0);

    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut items = Vec::with_capacity(spec.n_queries * spec.items_per_query);
    let mut pairs = Vec::with_capacity(items.capacity());
    let mut latent = Vec::with_capacity(items.capacity());
    for qi in 0..spec.n_queries {
        let c = qi % spec.categories.len();
        let w = spec.categories[c].text_weight;
        let image_share = (1.0 - w) * (1.0 - spec.joint_purity * jointness(w));
        let topic = &topics[rng.random_range(0..spec.n_topics)];
        let g = unit(&mut rng, d);
        let z_q = normalized(topic.iter().zip(&g).map(|(t, g)| a * t + b * g).collect());
        let query_id = format!("q{qi:04}");
        queries.push(QueryRecord { query_id: query_id.clone(), embedding: observe(&mut rng, z_q.clone(), spec.noise_sigma) });

        for xi in 0..spec.items_per_query {
            let band: f64 = rng.random();
            let u01: f64 = rng.random();
            let rho = if band < HIGH_SHARE {
                high_lo + u01 * (1.0 - high_lo)
            } else if band < HIGH_SHARE + LOW_SHARE {
                spec.theta_low + u01 * (low_hi - spec.theta_low)
            } else {
                NONE_FLOOR + u01 * (none_hi - NONE_FLOOR)
            };
            let mut u = gaussian(&mut rng, d);
            let p = dot(&u, &z_q);
            u.iter_mut().zip(&z_q).for_each(|(x, z)| *x -= p * z);
            let u = normalized(u);
            let s = (1.0 - rho * rho).max(0.0).sqrt();
            let z_x: Vec<f64> = z_q.iter().zip(&u).map(|(q, u)| rho * q + s * u).collect();

            let eps = if rng.random::<f64>() < 0.5 * jointness(w) { -1.0 } else { 1.0 };
            let r_t = unit(&mut rng, d);
            let r_v = unit(&mut rng, d);
            let text_latent: Vec<f64> =
                (0..d).map(|i| w * eps * z_x[i] + (1.0 - w) * r_t[i] + k * markers[c][i]).collect();
            let image_latent: Vec<f64> = (0..d)
                .map(|i| image_share * z_x[i] + w * r_v[i] + k * markers[c][i] + kp * eps * polarity[i])
                .collect();
            let text_embedding = observe(&mut rng, text_map.matvec(&text_latent), spec.noise_sigma);
            let image_embedding = observe(&mut rng, image_map.matvec(&image_latent), spec.noise_sigma);

            let y_rel = threshold(rho, spec);
            let flip: f64 = rng.random();
            let other: bool = rng.random();
            let y_eng = if flip < spec.label_flip {
                let alts: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != y_rel).collect();
                alts[usize::from(other)]
            } else {
                y_rel
            };

            let item_id = format!("{query_id}_x{xi:03}");
            items.push(ItemRecord {
                item_id: item_id.clone(),
                text_embedding,
                image_embedding,
                category_tag: Some(spec.categories[c].tag.clone()),
            });
            pairs.push(LabeledPair { query_id: query_id.clone(), item_id, y_eng, y_rel });
            latent.push(rho);
        }
    }
    let dataset = Dataset::new(d, queries, items, pairs)?;
    Ok(Generated { dataset, latent_relevance: latent })
}
