//! Column-scaled merging trained by backprop, and the dispatcher for merges
//! that need a model and data.

use ndarray::Array2;

use super::train::{fit, TrainConfig, TrainLog, Trainable};
use super::{array_from_tensor, encode_dataset, tensor_from_array, Deltas, Grads, Sequence, ToyModel, Weights};
use crate::adapter::{Adapter, ModelSpec, SiteKey};
use crate::error::{Error, Result};
use crate::merge::{self, DeltaSet, MergeSpec, MergedAdapter, Strategy};
use crate::tasks::Dataset;

/// `ΔW = Σᵢ ΔWᵢ·diag(cᵢ)` with one column-scale vector per adapter and site.
#[derive(Debug, Clone)]
pub struct DamTrainable {
    theta: Vec<f64>,
    /// Per site, the materialized update of every adapter.
    parts: Vec<(SiteKey, Vec<Array2<f64>>)>,
}

impl DamTrainable {
    /// Scales start at `1/N`.
    pub fn new(spec: &ModelSpec, adapters: &[&Adapter]) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::invalid("no adapters to merge"));
        }
        crate::adapter::validate_compat(adapters, spec)?;
        let n = adapters.len();
        let mut parts = Vec::new();
        let mut len = 0;
        for (l, c) in spec.sites() {
            let ds = adapters
                .iter()
                .map(|a| Ok(array_from_tensor(&a.delta_weight(l, c)?)))
                .collect::<Result<Vec<_>>>()?;
            len += n * ds[0].ncols();
            parts.push(((l, c), ds));
        }
        Ok(Self {
            theta: vec![1.0 / n as f64; len],
            parts,
        })
    }

    /// Column scales of adapter `i` at the `site_index`-th site.
    fn scales(&self, offset: usize, cols: usize) -> &[f64] {
        &self.theta[offset..offset + cols]
    }

    pub fn deltas(&self) -> Deltas {
        let mut off = 0;
        let mut out = Deltas::new();
        for (k, ds) in &self.parts {
            let cols = ds[0].ncols();
            let mut acc = Array2::zeros(ds[0].dim());
            for d in ds {
                let c = self.scales(off, cols);
                for (mut out_row, row) in acc.rows_mut().into_iter().zip(d.rows()) {
                    for j in 0..cols {
                        out_row[j] += row[j] * c[j];
                    }
                }
                off += cols;
            }
            out.insert(*k, acc);
        }
        out
    }

    pub fn to_merged(&self) -> Result<MergedAdapter> {
        let deltas = self
            .deltas()
            .iter()
            .map(|(&k, d)| Ok((k, tensor_from_array(d)?)))
            .collect::<Result<_>>()?;
        Ok(MergedAdapter::Delta(DeltaSet {
            strategy: Strategy::Dam.name().to_string(),
            deltas,
        }))
    }
}

impl Trainable for DamTrainable {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn weights(&self, model: &ToyModel) -> Weights {
        model.effective(Some(&self.deltas()))
    }

    fn param_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.theta.len()];
        let mut off = 0;
        for (k, ds) in &self.parts {
            let g = &grads.sites[k];
            let cols = ds[0].ncols();
            for d in ds {
                let dc = &mut out[off..off + cols];
                for (grow, drow) in g.rows().into_iter().zip(d.rows()) {
                    for j in 0..cols {
                        dc[j] += grow[j] * drow[j];
                    }
                }
                off += cols;
            }
        }
        out
    }
}

/// Trains DAM column scales with Adam on cross-entropy over `data`.
pub fn merge_dam(
    model: &ToyModel,
    adapters: &[&Adapter],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MergedAdapter, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("DAM needs a nonempty training set"));
    }
    let mut t = DamTrainable::new(model.spec(), adapters)?;
    let seqs = encode_dataset(data)?;
    let log = fit(model, &mut t, &seqs, cfg)?;
    Ok((t.to_merged()?, log))
}

/// Mean loss of `model` with `merged` attached.
pub fn merged_loss(model: &ToyModel, merged: &MergedAdapter, data: &[Sequence]) -> Result<f64> {
    let deltas = super::deltas_from_tensors(&merged.materialize()?);
    model.with_deltas(deltas)?.loss(data)
}

/// Every strategy, including LoraHub, LM-Cocktail and DAM, which score
/// candidates on `data` with `model`.
pub fn merge_with_data(model: &ToyModel, adapters: &[&Adapter], ms: &MergeSpec, data: &Dataset) -> Result<MergedAdapter> {
    ms.validate()?;
    let spec = model.spec();
    if !ms.strategy.needs_data() {
        return merge::merge(spec, adapters, ms);
    }
    if data.is_empty() {
        return Err(Error::invalid(format!("strategy `{}` needs a nonempty dataset", ms.strategy.name())));
    }
    let seqs = encode_dataset(data)?;
    match ms.strategy {
        Strategy::Lorahub => {
            let mut failure = None;
            let (m, _) = merge::merge_lorahub(spec, adapters, ms.budget, ms.seed, |cand| {
                merged_loss(model, cand, &seqs).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::INFINITY
                })
            })?;
            match failure {
                Some(e) => Err(e),
                None => Ok(m),
            }
        }
        Strategy::LmCocktail => {
            let losses = adapters
                .iter()
                .map(|a| merged_loss(model, &MergedAdapter::Factor((*a).clone()), &seqs))
                .collect::<Result<Vec<_>>>()?;
            Ok(merge::merge_lmcocktail(spec, adapters, &losses, ms.temperature)?.0)
        }
        Strategy::Dam => {
            let cfg = TrainConfig {
                lr: ms.lr,
                steps: ms.steps,
                seed: ms.seed,
                ..TrainConfig::default()
            };
            Ok(merge_dam(model, adapters, data, &cfg)?.0)
        }
        _ => unreachable!("data-free strategies returned above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::gradient_check;
    use crate::rng::SeededRng;
    use crate::tasks::{gen_dataset, ComposedTask, Split};

    fn adapters(spec: &ModelSpec) -> Vec<Adapter> {
        let mut rng = SeededRng::new(11);
        (0..2).map(|_| Adapter::random(spec, 4, 8.0, 0.2, &mut rng).unwrap()).collect()
    }

    #[test]
    fn zero_steps_is_the_uniform_delta_average() {
        let spec = ModelSpec::toy();
        let ads = adapters(&spec);
        let refs: Vec<&Adapter> = ads.iter().collect();
        let m = ToyModel::init(&spec, 0).unwrap();
        let data = gen_dataset(&ComposedTask::from_names(&["reverse"]).unwrap(), 20, 0, [0.8, 0.1, 0.1]).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (merged, _) = merge_dam(&m, &refs, data.get(Split::Train), &cfg).unwrap();
        for (l, c) in spec.sites() {
            let (d0, d1) = (ads[0].delta_weight(l, c).unwrap(), ads[1].delta_weight(l, c).unwrap());
            let avg: Vec<f32> = d0.data().iter().zip(d1.data()).map(|(&a, &b)| (a as f64 * 0.5 + b as f64 * 0.5) as f32).collect();
            assert_eq!(merged.delta(l, c).unwrap().data(), &avg[..]);
        }
    }

    #[test]
    fn dam_gradients_match_finite_differences() {
        let spec = ModelSpec::toy();
        let ads = adapters(&spec);
        let refs: Vec<&Adapter> = ads.iter().collect();
        let m = ToyModel::init(&spec, 4).unwrap();
        let mut t = DamTrainable::new(&spec, &refs).unwrap();
        let mut rng = SeededRng::new(2);
        t.params_mut().iter_mut().for_each(|c| *c = rng.uniform_f64(0.2, 0.8));
        let batch = vec![Sequence::new("abc", "bcd").unwrap(), Sequence::new("Zq r", "x").unwrap()];
        for c in gradient_check(&m, &t, &batch, 24, 5).unwrap() {
            assert!(c.rel_err < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let spec = ModelSpec::toy();
        let ads = adapters(&spec);
        let refs: Vec<&Adapter> = ads.iter().collect();
        let m = ToyModel::init(&spec, 0).unwrap();
        let empty = Dataset {
            split: Split::Train,
            examples: vec![],
        };
        assert!(merge_dam(&m, &refs, &empty, &TrainConfig::default()).is_err());
    }
}
