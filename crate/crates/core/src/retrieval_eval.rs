//! Exact top-k retrieval, graded nDCG, evaluation reports, the fusion
//! ablation harness and per-category gate analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data_model::{Dataset, ItemRecord, Label};
use crate::error::{config, structural, Error, Result};
use crate::fusion::{item_forward, FusionParams, FusionShape, FusionVariant, Modality};
use crate::numerics::{cosine_slices, norm, EmbeddingVector};
use crate::trainer::{train_stage, Curriculum, LossHistory, OptimizerState, TrainConfig};

pub const DEFAULT_CUTOFFS: [usize; 4] = [1, 3, 9, 24];
/// Default cutoffs plus @10, which the ablation summaries also report.
pub const ABLATION_CUTOFFS: [usize; 5] = [1, 3, 9, 10, 24];
pub const THREADS_ENV: &str = "MODALFUSE_THREADS";
pub const UNTAGGED: &str = "untagged";

/// Which item representation an index holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Fused,
    /// A single adapted modality, for single-modality baselines.
    Single(Modality),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemIndex {
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

impl ItemIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }
}

/// Runs `f` on a pool capped by `MODALFUSE_THREADS` when it is set.
fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| config(format!("{THREADS_ENV} must be a positive integer (got {v:?})")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

pub fn build_index(items: &[ItemRecord], params: &FusionParams) -> Result<ItemIndex> {
    build_index_with(items, params, IndexKind::Fused)
}

pub fn build_index_with(items: &[ItemRecord], params: &FusionParams, kind: IndexKind) -> Result<ItemIndex> {
    let dim = params.dim();
    let embed = |it: &ItemRecord| -> Result<Vec<f64>> {
        if it.text_embedding.dim() != dim || it.image_embedding.dim() != dim {
            return Err(structural(format!("item {} does not have dim {dim}", it.item_id)));
        }
        let v = match kind {
            IndexKind::Fused => item_forward(params, it.text_embedding.values(), it.image_embedding.values())?.h_x,
            IndexKind::Single(Modality::Text) => params.text_adapter.matvec(it.text_embedding.values()),
            IndexKind::Single(Modality::Image) => params.image_adapter.matvec(it.image_embedding.values()),
            IndexKind::Single(Modality::Query) => return Err(structural("query is not an item modality")),
        };
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("item {} embedding entry {i} is not finite", it.item_id)));
        }
        Ok(v)
    };
    let embeddings = in_pool(|| items.par_iter().map(embed).collect::<Result<Vec<_>>>())??;
    Ok(ItemIndex { ids: items.iter().map(|i| i.item_id.clone()).collect(), embeddings, dim })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(item id, score)`, best first.
    pub ranked: Vec<(String, f64)>,
}

fn rank_order(index: &ItemIndex, scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then_with(|| index.ids[a].cmp(&index.ids[b]))
}

/// Positions of the `k` best items, best first.
fn top_positions(index: &ItemIndex, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let scores: Vec<f64> = index.embeddings.iter().map(|e| cosine_slices(q, e)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k, |&a, &b| rank_order(index, &scores, a, b));
        order.truncate(k);
    }
    order.sort_by(|&a, &b| rank_order(index, &scores, a, b));
    Ok(order.into_iter().map(|i| (i, scores[i])).collect())
}

/// Exact top-k by cosine between the adapted query and the index entries;
/// equal scores rank by ascending item id.
pub fn retrieve_topk(index: &ItemIndex, q: &EmbeddingVector, params: &FusionParams, k: usize) -> Result<RetrievalResult> {
    retrieve_topk_for(index, "", q, params, k)
}

pub fn retrieve_topk_for(
    index: &ItemIndex,
    query_id: &str,
    q: &EmbeddingVector,
    params: &FusionParams,
    k: usize,
) -> Result<RetrievalResult> {
    if k < 1 {
        return Err(config("k must be at least 1"));
    }
    if q.dim() != index.dim {
        return Err(structural(format!("query dim {} does not match index dim {}", q.dim(), index.dim)));
    }
    let mut result = RetrievalResult { query_id: query_id.to_string(), ranked: Vec::new() };
    if index.is_empty() {
        return Ok(result);
    }
    let aq = params.query_adapter.matvec(q.values());
    if norm(&aq) == 0.0 {
        return Err(Error::Domain(format!("adapted query {query_id:?} has zero norm")));
    }
    result.ranked =
        top_positions(index, &aq, k)?.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect();
    Ok(result)
}

fn dcg(gains: impl Iterator<Item = u8>) -> f64 {
    gains.enumerate().map(|(i, r)| (2f64.powi(r as i32) - 1.0) / ((i + 2) as f64).log2()).sum()
}

/// `DCG@k / IDCG@k` for gains in retrieved order. IDCG is taken from
/// `labeled_pool`, the query's full set of labeled gains; 0 when it is 0.
pub fn ndcg_at_k(gains: &[u8], labeled_pool: &[u8], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(config("nDCG cutoff must be at least 1"));
    }
    let mut ideal = labeled_pool.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(gains.iter().copied().take(k)) / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Objective {
    Desirability,
    Relevance,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::Desirability, Objective::Relevance];

    pub fn key(self) -> &'static str {
        match self {
            Objective::Desirability => "desirability",
            Objective::Relevance => "relevance",
        }
    }

    fn label(self, eng: Label, rel: Label) -> Label {
        match self {
            Objective::Desirability => eng,
            Objective::Relevance => rel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    /// Mean nDCG per cutoff, aligned with `cutoffs`.
    pub desirability: Vec<f64>,
    pub relevance: Vec<f64>,
    pub query_count: usize,
    /// Queries without any labeled pair.
    pub excluded_queries: usize,
    /// Evaluated queries whose labeled pool has zero ideal gain, per objective.
    pub zero_ideal: [usize; 2],
}

impl MetricReport {
    pub fn values(&self, obj: Objective) -> &[f64] {
        match obj {
            Objective::Desirability => &self.desirability,
            Objective::Relevance => &self.relevance,
        }
    }

    pub fn value(&self, obj: Objective, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == cutoff).map(|i| self.values(obj)[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("objective,cutoff,value,query_count\n");
        for obj in Objective::ALL {
            for (c, v) in self.cutoffs.iter().zip(self.values(obj)) {
                let _ = writeln!(out, "{},{c},{v},{}", obj.key(), self.query_count);
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14}", "");
        for c in &self.cutoffs {
            let _ = write!(out, "{:>9}", format!("nDCG@{c}"));
        }
        out.push('\n');
        for (name, obj) in [("Desirability", Objective::Desirability), ("Relevance", Objective::Relevance)] {
            let _ = write!(out, "{name:<14}");
            for v in self.values(obj) {
                let _ = write!(out, "{v:>9.4}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "queries: {} evaluated, {} excluded (no labels), {}/{} with zero ideal gain",
            self.query_count, self.excluded_queries, self.zero_ideal[0], self.zero_ideal[1]
        );
        out
    }
}

/// Per-query nDCG values, aligned with the evaluation cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub query_id: String,
    pub category: String,
    pub desirability: Vec<f64>,
    pub relevance: Vec<f64>,
    pub zero_ideal: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetail {
    pub cutoffs: Vec<usize>,
    /// Evaluated queries in dataset order.
    pub queries: Vec<QueryEval>,
    pub excluded_queries: usize,
}

impl EvalDetail {
    fn aggregate<'a>(&self, rows: impl Iterator<Item = &'a QueryEval>, excluded: usize) -> MetricReport {
        let n = self.cutoffs.len();
        let (mut des, mut rel) = (vec![0.0; n], vec![0.0; n]);
        let mut count = 0;
        let mut zero = [0, 0];
        for q in rows {
            count += 1;
            for i in 0..n {
                des[i] += q.desirability[i];
                rel[i] += q.relevance[i];
            }
            zero[0] += usize::from(q.zero_ideal[0]);
            zero[1] += usize::from(q.zero_ideal[1]);
        }
        if count > 0 {
            des.iter_mut().chain(rel.iter_mut()).for_each(|v| *v /= count as f64);
        }
        MetricReport {
            cutoffs: self.cutoffs.clone(),
            desirability: des,
            relevance: rel,
            query_count: count,
            excluded_queries: excluded,
            zero_ideal: zero,
        }
    }

    pub fn report(&self) -> MetricReport {
        self.aggregate(self.queries.iter(), self.excluded_queries)
    }

    /// Report restricted to queries of one category.
    pub fn report_for(&self, category: &str) -> MetricReport {
        self.aggregate(self.queries.iter().filter(|q| q.category == category), 0)
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.queries.iter().map(|q| q.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}

/// Most common tag among a query's labeled items; ties go to the smaller tag.
fn query_categories(ds: &Dataset) -> Vec<String> {
    let mut counts: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); ds.queries().len()];
    for i in 0..ds.pairs().len() {
        let (q, x) = ds.pair_indices(i);
        let tag = ds.items()[x].category_tag.as_deref().unwrap_or(UNTAGGED);
        *counts[q].entry(tag).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|m| {
            m.into_iter()
                .fold((UNTAGGED, 0), |best, (t, c)| if c > best.1 { (t, c) } else { best })
                .0
                .to_string()
        })
        .collect()
}

pub fn evaluate(ds: &Dataset, params: &FusionParams, cutoffs: &[usize]) -> Result<MetricReport> {
    Ok(evaluate_detail(ds, params, IndexKind::Fused, cutoffs)?.report())
}

/// Retrieves over every item of `ds` for every query with at least one
/// labeled pair. Unlabeled retrieved items have gain 0.
pub fn evaluate_detail(ds: &Dataset, params: &FusionParams, kind: IndexKind, cutoffs: &[usize]) -> Result<EvalDetail> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(config("cutoffs must be a non-empty list of positive integers"));
    }
    if params.dim() != ds.dim() {
        return Err(structural(format!("params dim {} does not match dataset dim {}", params.dim(), ds.dim())));
    }
    let index = build_index_with(ds.items(), params, kind)?;
    let item_pos: HashMap<&str, usize> = index.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut labels: Vec<HashMap<usize, (Label, Label)>> = vec![HashMap::new(); ds.queries().len()];
    for (i, p) in ds.pairs().iter().enumerate() {
        let (q, x) = ds.pair_indices(i);
        labels[q].insert(item_pos[ds.items()[x].item_id.as_str()], (p.y_eng, p.y_rel));
    }
    let categories = query_categories(ds);
    let max_k = *cutoffs.iter().max().expect("non-empty");

    let eval_one = |qi: usize| -> Result<Option<QueryEval>> {
        let lab = &labels[qi];
        if lab.is_empty() {
            return Ok(None);
        }
        let qrec = &ds.queries()[qi];
        let aq = params.query_adapter.matvec(qrec.embedding.values());
        if norm(&aq) == 0.0 {
            return Err(Error::Domain(format!("adapted query {} has zero norm", qrec.query_id)));
        }
        let top = top_positions(&index, &aq, max_k)?;
        let mut out = QueryEval {
            query_id: qrec.query_id.clone(),
            category: categories[qi].clone(),
            desirability: Vec::new(),
            relevance: Vec::new(),
            zero_ideal: [false; 2],
        };
        for (o, obj) in Objective::ALL.into_iter().enumerate() {
            let gains: Vec<u8> =
                top.iter().map(|(i, _)| lab.get(i).map_or(0, |&(e, r)| obj.label(e, r).gain())).collect();
            let pool: Vec<u8> = lab.values().map(|&(e, r)| obj.label(e, r).gain()).collect();
            out.zero_ideal[o] = pool.iter().all(|&g| g == 0);
            let vals = cutoffs.iter().map(|&k| ndcg_at_k(&gains, &pool, k)).collect::<Result<Vec<_>>>()?;
            match obj {
                Objective::Desirability => out.desirability = vals,
                Objective::Relevance => out.relevance = vals,
            }
        }
        Ok(Some(out))
    };
    let per_query: Vec<Option<QueryEval>> =
        in_pool(|| (0..ds.queries().len()).into_par_iter().map(eval_one).collect::<Result<Vec<_>>>())??;
    let excluded = per_query.iter().filter(|q| q.is_none()).count();
    Ok(EvalDetail { cutoffs: cutoffs.to_vec(), queries: per_query.into_iter().flatten().collect(), excluded_queries: excluded })
}

/// SHA-256 over the three adapters' shapes and f64 bytes.
pub fn adapter_checksum(params: &FusionParams) -> String {
    let mut h = Sha256::new();
    for m in [Modality::Query, Modality::Text, Modality::Image] {
        let t = params.adapter(m);
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: FusionVariant,
    pub params: FusionParams,
    /// Stage III optimizer state at the end of the run.
    pub optimizer: OptimizerState,
    pub history: LossHistory,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    /// Checksum of the shared Stage II adapters every variant started from.
    pub stage2_checksum: String,
    pub stage2_params: FusionParams,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: FusionVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// `variant,objective,cutoff,value` for every row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,objective,cutoff,value\n");
        for r in &self.rows {
            for obj in Objective::ALL {
                for (c, v) in r.report.cutoffs.iter().zip(r.report.values(obj)) {
                    let _ = writeln!(out, "{},{},{c},{v}", r.variant.key(), obj.key());
                }
            }
        }
        out
    }

    /// One row per variant; desirability columns, then relevance columns.
    pub fn to_table(&self) -> String {
        let Some(first) = self.rows.first() else { return String::from("(no variants)\n") };
        let mut out = format!("{:<14}", "Fusion");
        for prefix in ["D", "R"] {
            for c in &first.report.cutoffs {
                let _ = write!(out, "{:>9}", format!("{prefix}@{c}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<14}", r.variant.to_string());
            for obj in Objective::ALL {
                for v in r.report.values(obj) {
                    let _ = write!(out, "{v:>9.4}");
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "D = desirability nDCG, R = relevance nDCG; stage II adapters sha256 {}", self.stage2_checksum);
        out
    }
}

/// Runs Stage II once (text then image, shared query adapter), then Stage
/// III for each variant from a transplant of those adapters, and evaluates
/// each result on `eval`.
pub fn ablate_fusions(
    train: &Dataset,
    eval: &Dataset,
    plan: &Curriculum,
    variants: &[FusionVariant],
    cutoffs: &[usize],
) -> Result<AblationTable> {
    let base = &plan.stage3;
    let shape = |v: FusionVariant| TrainConfig { variant: v, ..base.clone() }.fusion_shape(train.dim());
    let stage2 = plan.run_stage2(train, FusionParams::init(shape(plan.stage2.variant), base.seed)?)?;
    let checksum = adapter_checksum(&stage2);

    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut params = FusionParams::init(shape(v), base.seed)?;
        transplant_adapters(&stage2, &mut params);
        if adapter_checksum(&params) != checksum {
            return Err(Error::Integrity(format!("variant {v} did not receive the shared stage II adapters")));
        }
        let cfg = TrainConfig { variant: v, ..plan.stage3_config() };
        let out = train_stage(train, params, &cfg, |_, _| Ok(()))?;
        let report = evaluate(eval, &out.params, cutoffs)?;
        rows.push(AblationRow { variant: v, params: out.params, optimizer: out.optimizer, history: out.history, report });
    }
    Ok(AblationTable { stage2_checksum: checksum, stage2_params: stage2, rows })
}

pub fn transplant_adapters(from: &FusionParams, to: &mut FusionParams) {
    for m in [Modality::Query, Modality::Text, Modality::Image] {
        *to.adapter_mut(m) = from.adapter(m).clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub category: String,
    pub items: usize,
    /// `None` when the variant has no mixing weight.
    pub mean_alpha: Option<f64>,
    pub mean_interaction_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub variant: FusionVariant,
    /// One row per category in tag order, then an `overall` row.
    pub rows: Vec<GateRow>,
}

impl GateReport {
    pub fn category(&self, tag: &str) -> Option<&GateRow> {
        self.rows.iter().find(|r| r.category == tag)
    }

    pub fn overall(&self) -> &GateRow {
        self.rows.last().expect("overall row is always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,items,mean_alpha,mean_interaction_norm\n");
        for r in &self.rows {
            let alpha = r.mean_alpha.map_or("undefined".to_string(), |a| a.to_string());
            let _ = writeln!(out, "{},{},{alpha},{}", r.category, r.items, r.mean_interaction_norm);
        }
        out
    }
}

/// Mean mixing weight and interaction norm per item category.
pub fn analyze_gates(ds: &Dataset, params: &FusionParams) -> Result<GateReport> {
    let traces = in_pool(|| {
        ds.items()
            .par_iter()
            .map(|it| item_forward(params, it.text_embedding.values(), it.image_embedding.values()).map(|f| f.trace()))
            .collect::<Result<Vec<_>>>()
    })??;
    let defined = params.variant().has_mixing_weight();
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    let mut all = (0usize, 0.0, 0.0);
    for (it, tr) in ds.items().iter().zip(&traces) {
        let g = groups.entry(it.category_tag.as_deref().unwrap_or(UNTAGGED)).or_default();
        for acc in [g, &mut all] {
            acc.0 += 1;
            acc.1 += tr.alpha;
            acc.2 += tr.interaction_norm;
        }
    }
    let row = |category: &str, (n, a, m): (usize, f64, f64)| {
        let nf = n.max(1) as f64;
        GateRow {
            category: category.to_string(),
            items: n,
            mean_alpha: (defined && n > 0).then_some(a / nf),
            mean_interaction_norm: m / nf,
        }
    };
    let mut rows: Vec<GateRow> = groups.into_iter().map(|(c, acc)| row(c, acc)).collect();
    rows.push(row("overall", all));
    Ok(GateReport { variant: params.variant(), rows })
}

/// Convenience: a freshly initialised parameter set for `variant` at `dim`.
pub fn init_params(variant: FusionVariant, dim: usize, seed: u64) -> Result<FusionParams> {
    FusionParams::init(FusionShape::with_defaults(variant, dim), seed)
}
