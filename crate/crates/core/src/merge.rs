//! Adapter merging strategies.
//!
//! Linear and concatenation merges keep the low-rank factor form. TIES, DARE
//! and Slerp act on each factor tensor (`B` and `A`, read as task vectors
//! against a zero base) and return the materialized deltas of the merged
//! factors. LoraHub and LM-Cocktail choose weights for a linear merge; DAM
//! learns column scales and lives in [`crate::model::dam`] because it needs a
//! model to train against.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, factor_delta, validate_compat, Adapter, LoraPair, ModelSpec, SiteKey};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, SeededRng};
use crate::safetensors::{self, Dtype};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Linear,
    Concat,
    Ties,
    Dare,
    Slerp,
    Lorahub,
    LmCocktail,
    Dam,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Linear,
        Strategy::Concat,
        Strategy::Ties,
        Strategy::Dare,
        Strategy::Slerp,
        Strategy::Lorahub,
        Strategy::LmCocktail,
        Strategy::Dam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Linear => "linear",
            Strategy::Concat => "concat",
            Strategy::Ties => "ties",
            Strategy::Dare => "dare",
            Strategy::Slerp => "slerp",
            Strategy::Lorahub => "lorahub",
            Strategy::LmCocktail => "lm_cocktail",
            Strategy::Dam => "dam",
        }
    }

    /// Strategies that need data (and a model) to pick their weights.
    pub fn needs_data(self) -> bool {
        matches!(self, Strategy::Lorahub | Strategy::LmCocktail | Strategy::Dam)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown merge strategy `{s}`")))
    }
}

/// Strategy plus hyperparameters, as read from a merge-spec JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSpec {
    pub strategy: Strategy,
    /// Per-adapter weights; uniform `1/N` when absent.
    pub weights: Option<Vec<f32>>,
    pub density: f32,
    pub slerp_t: f32,
    pub seed: u64,
    /// LoraHub evaluation budget.
    pub budget: usize,
    /// LM-Cocktail softmax temperature.
    pub temperature: f64,
    /// DAM optimization steps.
    pub steps: usize,
    /// DAM learning rate.
    pub lr: f64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Linear,
            weights: None,
            density: 0.5,
            slerp_t: 0.5,
            seed: 0,
            budget: 40,
            temperature: 1.0,
            steps: 100,
            lr: 5e-3,
        }
    }
}

impl MergeSpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn resolved_weights(&self, n: usize) -> Result<Vec<f32>> {
        match &self.weights {
            Some(w) if w.len() != n => Err(Error::invalid(format!(
                "{} weights for {n} adapters",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(uniform_weights(n)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::invalid(format!("density {} not in (0, 1]", self.density)));
        }
        if !(0.0..=1.0).contains(&self.slerp_t) {
            return Err(Error::invalid(format!("slerp_t {} not in [0, 1]", self.slerp_t)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

pub fn uniform_weights(n: usize) -> Vec<f32> {
    vec![1.0 / n as f32; n]
}

/// Materialized per-site updates for merges that leave the low-rank form.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub strategy: String,
    pub deltas: BTreeMap<SiteKey, TensorF32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergedAdapter {
    Factor(Adapter),
    Delta(DeltaSet),
}

pub fn delta_name(layer: usize, comp: crate::ComponentKind) -> String {
    format!("layers.{layer}.{comp}.delta")
}

impl MergedAdapter {
    pub fn delta(&self, layer: usize, comp: crate::ComponentKind) -> Result<TensorF32> {
        match self {
            MergedAdapter::Factor(a) => a.delta_weight(layer, comp),
            MergedAdapter::Delta(d) => d
                .deltas
                .get(&(layer, comp))
                .cloned()
                .ok_or(Error::Coverage { layer, component: comp }),
        }
    }

    /// Every site's update, materialized.
    pub fn materialize(&self) -> Result<BTreeMap<SiteKey, TensorF32>> {
        match self {
            MergedAdapter::Factor(a) => a
                .tensors
                .keys()
                .map(|&(l, c)| Ok(((l, c), a.delta_weight(l, c)?)))
                .collect(),
            MergedAdapter::Delta(d) => Ok(d.deltas.clone()),
        }
    }

    pub fn as_factor(&self) -> Option<&Adapter> {
        match self {
            MergedAdapter::Factor(a) => Some(a),
            MergedAdapter::Delta(_) => None,
        }
    }

    pub fn is_factor(&self) -> bool {
        self.as_factor().is_some()
    }

    /// Factor form is written as an adapter (with sidecar config); delta form
    /// as `layers.{i}.{component}.delta` tensors tagged `form = delta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            MergedAdapter::Factor(a) => a.save(path),
            MergedAdapter::Delta(d) => {
                let tensors = d
                    .deltas
                    .iter()
                    .map(|(&(l, c), t)| (delta_name(l, c), t.clone()))
                    .collect();
                let meta = BTreeMap::from([
                    ("form".to_string(), "delta".to_string()),
                    ("strategy".to_string(), d.strategy.clone()),
                ]);
                safetensors::write_file(path, &tensors, &meta, Dtype::F32).map(|_| ())
            }
        }
    }

    /// Reads either form; delta files are recognized by their metadata.
    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let file = safetensors::read_file(path)?;
        if file.metadata.get("form").map(String::as_str) == Some("delta") {
            let mut deltas = BTreeMap::new();
            for (layer, comp) in spec.sites() {
                let t = file.get_f32(&delta_name(layer, comp))?;
                let (d_out, d_in) = spec.dim(comp)?;
                if t.shape() != [d_out, d_in] {
                    return Err(Error::Tensor {
                        name: delta_name(layer, comp),
                        reason: format!("shape {:?}, expected {:?}", t.shape(), [d_out, d_in]),
                    });
                }
                deltas.insert((layer, comp), t.clone());
            }
            let strategy = file.metadata.get("strategy").cloned().unwrap_or_default();
            return Ok(MergedAdapter::Delta(DeltaSet { strategy, deltas }));
        }
        let cfg_path = adapter::config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = serde_json::from_str(&text)?;
        Ok(MergedAdapter::Factor(Adapter::from_parts(&file, &cfg, spec)?))
    }
}

/// `Σ wᵢ·xᵢ` per coordinate. Terms are summed in sorted order, so the result
/// does not depend on the order of the inputs.
fn weighted_sum(vecs: &[&[f32]], weights: &[f32]) -> Vec<f32> {
    let n = vecs[0].len();
    let mut terms = Vec::with_capacity(vecs.len());
    (0..n)
        .map(|j| {
            terms.clear();
            terms.extend(vecs.iter().zip(weights).map(|(v, &w)| w as f64 * v[j] as f64));
            terms.sort_by(f64::total_cmp);
            terms.iter().sum::<f64>() as f32
        })
        .collect()
}

fn same_rank(adapters: &[&Adapter]) -> Result<usize> {
    let r = adapters[0].rank;
    if adapters.iter().any(|a| a.rank != r) {
        return Err(Error::invalid("this strategy requires equal ranks (use concat for mixed ranks)"));
    }
    Ok(r)
}

fn check_weights(adapters: &[&Adapter], weights: &[f32]) -> Result<()> {
    if weights.len() != adapters.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("weights must be finite"));
    }
    Ok(())
}

fn task_label(adapters: &[&Adapter], sep: &str) -> String {
    adapters.iter().map(|a| a.task_name.as_str()).collect::<Vec<_>>().join(sep)
}

/// Applies `f` to every factor tensor (across adapters) and rebuilds an adapter
/// with the results.
fn map_factors(
    spec: &ModelSpec,
    adapters: &[&Adapter],
    mut f: impl FnMut(&str, &[&[f32]]) -> Result<Vec<f32>>,
) -> Result<Adapter> {
    let first = adapters[0];
    let mut tensors = BTreeMap::new();
    for (layer, comp) in spec.sites() {
        let pairs: Vec<&LoraPair> = adapters
            .iter()
            .map(|a| a.pair(layer, comp))
            .collect::<Result<_>>()?;
        let bs: Vec<&[f32]> = pairs.iter().map(|p| p.b.data()).collect();
        let as_: Vec<&[f32]> = pairs.iter().map(|p| p.a.data()).collect();
        let b = TensorF32::new(pairs[0].b.shape().to_vec(), f(&adapter::lora_b_name(layer, comp), &bs)?)?;
        let a = TensorF32::new(pairs[0].a.shape().to_vec(), f(&adapter::lora_a_name(layer, comp), &as_)?)?;
        tensors.insert((layer, comp), LoraPair { b, a });
    }
    Adapter::new(spec, first.rank, first.alpha, first.dropout, task_label(adapters, "+"), tensors)
}

fn to_delta_set(merged: &Adapter, strategy: Strategy) -> Result<MergedAdapter> {
    let mut deltas = BTreeMap::new();
    for (&(l, c), pair) in &merged.tensors {
        deltas.insert((l, c), factor_delta(&pair.b, &pair.a, merged.scale())?);
    }
    Ok(MergedAdapter::Delta(DeltaSet {
        strategy: strategy.name().to_string(),
        deltas,
    }))
}

/// `B' = Σ wᵢBᵢ`, `A' = Σ wᵢAᵢ`. Weights need not sum to one. With uniform
/// weights this is the plain average of factors; note the merged delta
/// `B'A'` is not the average of the individual deltas.
pub fn merge_linear(spec: &ModelSpec, adapters: &[&Adapter], weights: &[f32]) -> Result<MergedAdapter> {
    validate_compat(adapters, spec)?;
    same_rank(adapters)?;
    check_weights(adapters, weights)?;
    Ok(MergedAdapter::Factor(map_factors(spec, adapters, |_, v| {
        Ok(weighted_sum(v, weights))
    })?))
}

/// Stacks factors: `B = [c₁B₁ | … | c_N B_N]`, `A = [A₁; …; A_N]`, rank `Σ rᵢ`.
///
/// The merged adapter keeps the shared `α` scale of the first adapter
/// (`α_cat = α·r_cat/r₁`) and folds `wᵢ·r₁/rᵢ` into each `B` block, so its
/// delta is `Σ wᵢ·ΔWᵢ` for any mix of ranks, and `B·A = Σ wᵢ·BᵢAᵢ` when the
/// ranks are equal.
pub fn merge_concat(spec: &ModelSpec, adapters: &[&Adapter], weights: &[f32]) -> Result<MergedAdapter> {
    validate_compat(adapters, spec)?;
    check_weights(adapters, weights)?;
    let r_ref = adapters[0].rank;
    let r_cat: usize = adapters.iter().map(|a| a.rank).sum();
    let alpha = adapters[0].alpha * r_cat as f32 / r_ref as f32;
    let mut tensors = BTreeMap::new();
    for (layer, comp) in spec.sites() {
        let (d_out, d_in) = spec.dim(comp)?;
        let mut b = vec![0.0f32; d_out * r_cat];
        let mut a = Vec::with_capacity(r_cat * d_in);
        let mut col = 0;
        for (ad, &w) in adapters.iter().zip(weights) {
            let p = ad.pair(layer, comp)?;
            let c = w as f64 * r_ref as f64 / ad.rank as f64;
            for i in 0..d_out {
                for k in 0..ad.rank {
                    b[i * r_cat + col + k] = (c * p.b.get(i, k) as f64) as f32;
                }
            }
            a.extend_from_slice(p.a.data());
            col += ad.rank;
        }
        tensors.insert(
            (layer, comp),
            LoraPair {
                b: TensorF32::new(vec![d_out, r_cat], b)?,
                a: TensorF32::new(vec![r_cat, d_in], a)?,
            },
        );
    }
    Ok(MergedAdapter::Factor(Adapter::new(
        spec,
        r_cat,
        alpha,
        adapters[0].dropout,
        task_label(adapters, "+"),
        tensors,
    )?))
}

/// TIES on flat task vectors: trim each to its top `⌈density·n⌉` magnitudes
/// (ties keep the lower index), elect a sign per coordinate from the sum of
/// trimmed values (zero elects `+`), then take the weight-normalized mean of
/// the entries that agree with the elected sign.
pub fn ties_vectors(vecs: &[&[f32]], weights: &[f32], density: f32) -> Result<Vec<f32>> {
    if vecs.is_empty() {
        return Err(Error::invalid("TIES needs at least one task vector"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} not in (0, 1]")));
    }
    let n = vecs[0].len();
    let keep = ((density as f64 * n as f64).ceil() as usize).min(n);
    let trimmed: Vec<Vec<f32>> = vecs
        .iter()
        .map(|v| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()).then(i.cmp(&j)));
            let mut t = vec![0.0f32; n];
            for &i in &order[..keep] {
                t[i] = v[i];
            }
            t
        })
        .collect();
    let mut out = vec![0.0f32; n];
    let mut num = Vec::with_capacity(vecs.len());
    let mut den = Vec::with_capacity(vecs.len());
    for j in 0..n {
        let mut col: Vec<f64> = trimmed.iter().map(|t| t[j] as f64).collect();
        col.sort_by(f64::total_cmp);
        let positive = col.iter().sum::<f64>() >= 0.0;
        num.clear();
        den.clear();
        for (t, &w) in trimmed.iter().zip(weights) {
            let x = t[j];
            if x != 0.0 && (x > 0.0) == positive {
                num.push(w as f64 * x as f64);
                den.push(w as f64);
            }
        }
        if !num.is_empty() {
            num.sort_by(f64::total_cmp);
            den.sort_by(f64::total_cmp);
            let d: f64 = den.iter().sum();
            if d != 0.0 {
                out[j] = (num.iter().sum::<f64>() / d) as f32;
            }
        }
    }
    Ok(out)
}

pub fn merge_ties(spec: &ModelSpec, adapters: &[&Adapter], weights: &[f32], density: f32) -> Result<MergedAdapter> {
    validate_compat(adapters, spec)?;
    same_rank(adapters)?;
    check_weights(adapters, weights)?;
    let merged = map_factors(spec, adapters, |_, v| ties_vectors(v, weights, density))?;
    to_delta_set(&merged, Strategy::Ties)
}

/// DARE on flat task vectors: each entry is kept with probability `density`
/// and rescaled by `1/density`, then the vectors are combined linearly.
/// `rngs[i]` draws the mask for vector `i`.
pub fn dare_vectors(vecs: &[&[f32]], weights: &[f32], density: f32, rngs: &mut [SeededRng]) -> Result<Vec<f32>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} not in (0, 1]")));
    }
    let rescaled: Vec<Vec<f32>> = vecs
        .iter()
        .zip(rngs.iter_mut())
        .map(|(v, rng)| {
            v.iter()
                .map(|&x| {
                    let keep = density >= 1.0 || rng.bernoulli(density as f64);
                    if keep {
                        x / density
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[f32]> = rescaled.iter().map(Vec::as_slice).collect();
    Ok(weighted_sum(&refs, weights))
}

/// Masks are drawn per `(adapter index, tensor name)` from `seed`, so a call is
/// reproducible but not invariant to reordering the adapters.
pub fn merge_dare(
    spec: &ModelSpec,
    adapters: &[&Adapter],
    weights: &[f32],
    density: f32,
    seed: u64,
) -> Result<MergedAdapter> {
    validate_compat(adapters, spec)?;
    same_rank(adapters)?;
    check_weights(adapters, weights)?;
    let merged = map_factors(spec, adapters, |name, v| {
        let mut rngs: Vec<SeededRng> = (0..v.len())
            .map(|i| SeededRng::derive(seed, &[i as u64, fnv1a(name.as_bytes())]))
            .collect();
        dare_vectors(v, weights, density, &mut rngs)
    })?;
    to_delta_set(&merged, Strategy::Dare)
}

/// Angle below which Slerp falls back to linear interpolation.
pub const SLERP_MIN_ANGLE: f64 = 1e-6;
/// Norm below which a vector counts as zero for Slerp.
pub const SLERP_MIN_NORM: f64 = 1e-12;

/// Spherical interpolation of two flat vectors; `t = 0` and `t = 1` return
/// the endpoints unchanged.
pub fn slerp_vectors(v1: &[f32], v2: &[f32], t: f32) -> Result<Vec<f32>> {
    if v1.len() != v2.len() {
        return Err(Error::Shape {
            op: "slerp",
            left: vec![v1.len()],
            right: vec![v2.len()],
        });
    }
    if t == 0.0 {
        return Ok(v1.to_vec());
    }
    if t == 1.0 {
        return Ok(v2.to_vec());
    }
    let t = t as f64;
    let dot: f64 = v1.iter().zip(v2).map(|(&a, &b)| a as f64 * b as f64).sum();
    let n1 = v1.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let n2 = v2.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let lerp = |c1: f64, c2: f64| -> Vec<f32> {
        v1.iter()
            .zip(v2)
            .map(|(&a, &b)| (c1 * a as f64 + c2 * b as f64) as f32)
            .collect()
    };
    if n1 < SLERP_MIN_NORM || n2 < SLERP_MIN_NORM {
        return Ok(lerp(1.0 - t, t));
    }
    let omega = (dot / (n1 * n2)).clamp(-1.0, 1.0).acos();
    if omega < SLERP_MIN_ANGLE {
        return Ok(lerp(1.0 - t, t));
    }
    let s = omega.sin();
    Ok(lerp(((1.0 - t) * omega).sin() / s, (t * omega).sin() / s))
}

pub fn merge_slerp(spec: &ModelSpec, adapters: &[&Adapter], t: f32) -> Result<MergedAdapter> {
    if adapters.len() != 2 {
        return Err(Error::invalid(format!("slerp merges exactly 2 adapters, got {}", adapters.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("slerp t {t} not in [0, 1]")));
    }
    validate_compat(adapters, spec)?;
    same_rank(adapters)?;
    let merged = map_factors(spec, adapters, |_, v| slerp_vectors(v[0], v[1], t))?;
    to_delta_set(&merged, Strategy::Slerp)
}

/// Weight box searched by LoraHub.
pub const LORAHUB_BOUND: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub evaluations: usize,
}

/// Derivative-free minimization over `[-1.5, 1.5]^n`.
///
/// The first half of the budget evaluates the uniform point and then seeded
/// uniform samples; the rest runs golden-section line searches one coordinate
/// at a time around the incumbent, halving the search radius after each sweep.
/// Only evaluated points are ever returned.
pub fn search_weights(n: usize, budget: usize, seed: u64, mut loss: impl FnMut(&[f64]) -> f64) -> SearchResult {
    assert!(n > 0 && budget > 0, "search needs n > 0 and budget > 0");
    let mut rng = SeededRng::new(seed);
    let mut evals = 0usize;
    let mut eval = |w: &[f64], evals: &mut usize| {
        *evals += 1;
        let l = loss(w);
        if l.is_finite() {
            l
        } else {
            f64::INFINITY
        }
    };

    let mut best_w = vec![1.0 / n as f64; n];
    let mut best = eval(&best_w, &mut evals);
    let random_phase = (budget / 2).max(1);
    while evals < random_phase {
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_f64(-LORAHUB_BOUND, LORAHUB_BOUND)).collect();
        let l = eval(&w, &mut evals);
        if l < best {
            best = l;
            best_w = w;
        }
    }

    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    const EVALS_PER_LINE: usize = 10;
    let mut radius = LORAHUB_BOUND;
    'outer: while evals < budget {
        for j in 0..n {
            let mut lo = (best_w[j] - radius).max(-LORAHUB_BOUND);
            let mut hi = (best_w[j] + radius).min(LORAHUB_BOUND);
            let mut probe = |x: f64, evals: &mut usize, best: &mut f64, best_w: &mut Vec<f64>| {
                let mut w = best_w.clone();
                w[j] = x;
                let l = eval(&w, evals);
                if l < *best {
                    *best = l;
                    *best_w = w;
                }
                l
            };
            if evals >= budget {
                break 'outer;
            }
            let mut x1 = hi - GOLDEN * (hi - lo);
            let mut f1 = probe(x1, &mut evals, &mut best, &mut best_w);
            if evals >= budget {
                break 'outer;
            }
            let mut x2 = lo + GOLDEN * (hi - lo);
            let mut f2 = probe(x2, &mut evals, &mut best, &mut best_w);
            for _ in 2..EVALS_PER_LINE {
                if evals >= budget {
                    break 'outer;
                }
                if f1 < f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - GOLDEN * (hi - lo);
                    f1 = probe(x1, &mut evals, &mut best, &mut best_w);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + GOLDEN * (hi - lo);
                    f2 = probe(x2, &mut evals, &mut best, &mut best_w);
                }
            }
        }
        radius *= 0.5;
    }
    SearchResult {
        weights: best_w,
        loss: best,
        evaluations: evals,
    }
}

/// LoraHub: searches linear-merge weights minimizing `loss_fn` on the merged adapter.
pub fn merge_lorahub(
    spec: &ModelSpec,
    adapters: &[&Adapter],
    budget: usize,
    seed: u64,
    mut loss_fn: impl FnMut(&MergedAdapter) -> f64,
) -> Result<(MergedAdapter, SearchResult)> {
    validate_compat(adapters, spec)?;
    same_rank(adapters)?;
    if budget < adapters.len() + 1 {
        return Err(Error::invalid(format!(
            "lorahub budget {budget} must be at least N + 1 = {}",
            adapters.len() + 1
        )));
    }
    let mut failure = None;
    let result = search_weights(adapters.len(), budget, seed, |w| {
        let wf: Vec<f32> = w.iter().map(|&x| x as f32).collect();
        match merge_linear(spec, adapters, &wf) {
            Ok(m) => loss_fn(&m),
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let wf: Vec<f32> = result.weights.iter().map(|&x| x as f32).collect();
    Ok((merge_linear(spec, adapters, &wf)?, result))
}

/// `softmax(-loss / temperature)`.
pub fn lmcocktail_weights(losses: &[f64], temperature: f64) -> Result<Vec<f32>> {
    if losses.is_empty() {
        return Err(Error::invalid("no losses given"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("losses must be finite"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let logits: Vec<f64> = losses.iter().map(|l| -l / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// LM-Cocktail: linear merge weighted by `softmax(-lossᵢ/T)` of per-adapter losses.
pub fn merge_lmcocktail(
    spec: &ModelSpec,
    adapters: &[&Adapter],
    losses: &[f64],
    temperature: f64,
) -> Result<(MergedAdapter, Vec<f32>)> {
    if losses.len() != adapters.len() {
        return Err(Error::invalid("one loss per adapter is required"));
    }
    let w = lmcocktail_weights(losses, temperature)?;
    Ok((merge_linear(spec, adapters, &w)?, w))
}

/// Data-free strategies driven by a [`MergeSpec`]. Data-dependent ones go
/// through [`crate::model::merge_with_data`].
pub fn merge(spec: &ModelSpec, adapters: &[&Adapter], ms: &MergeSpec) -> Result<MergedAdapter> {
    ms.validate()?;
    let w = ms.resolved_weights(adapters.len())?;
    match ms.strategy {
        Strategy::Linear => merge_linear(spec, adapters, &w),
        Strategy::Concat => merge_concat(spec, adapters, &w),
        Strategy::Ties => merge_ties(spec, adapters, &w, ms.density),
        Strategy::Dare => merge_dare(spec, adapters, &w, ms.density, ms.seed),
        Strategy::Slerp => merge_slerp(spec, adapters, ms.slerp_t),
        s => Err(Error::invalid(format!(
            "strategy `{}` needs training data and a base model",
            s.name()
        ))),
    }
}
