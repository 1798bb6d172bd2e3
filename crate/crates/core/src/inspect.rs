//! Per-site statistics of update matrices: Frobenius norm, spread, and a
//! symmetric value histogram. Used to compare a plain merge against its
//! calibrated counterpart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{ComponentKind, SiteKey};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

pub const HIST_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub layer: usize,
    pub component: ComponentKind,
    pub frobenius: f64,
    pub mean: f64,
    /// Population standard deviation of the entries.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Bins cover `[-range, range]`.
    pub range: f64,
    pub counts: Vec<u64>,
}

/// Histogram bin of `x` over `[-range, range]`; the top edge folds into the last bin.
fn bin_of(x: f64, range: f64) -> usize {
    let t = (x + range) / (2.0 * range) * HIST_BINS as f64;
    (t.floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Statistics for one matrix. `range` defaults to the largest magnitude
/// (or 1 for an all-zero matrix).
pub fn site_stats(layer: usize, component: ComponentKind, t: &TensorF32, range: Option<f64>) -> Result<SiteStats> {
    if t.is_empty() {
        return Err(Error::Degenerate(format!("empty update at layer {layer} {component}")));
    }
    let n = t.len() as f64;
    let data = t.data();
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = data.iter().fold(f64::INFINITY, |m, &x| m.min(x as f64));
    let max = data.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let range = match range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::invalid(format!("histogram range must be positive, got {r}"))),
        None => {
            let m = t.max_abs() as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let mut counts = vec![0u64; HIST_BINS];
    for &x in data {
        counts[bin_of(x as f64, range)] += 1;
    }
    Ok(SiteStats {
        layer,
        component,
        frobenius: t.frobenius(),
        mean,
        std: var.sqrt(),
        min,
        max,
        range,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub label: String,
    pub sites: Vec<SiteStats>,
}

impl InspectReport {
    pub fn site(&self, layer: usize, component: ComponentKind) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.layer == layer && s.component == component)
    }

    /// Frobenius norm over all sites together.
    pub fn total_frobenius(&self) -> f64 {
        self.sites.iter().map(|s| s.frobenius * s.frobenius).sum::<f64>().sqrt()
    }

    /// Frobenius norm of each component, pooled over layers.
    pub fn component_norms(&self) -> BTreeMap<ComponentKind, f64> {
        let mut acc = BTreeMap::new();
        for s in &self.sites {
            *acc.entry(s.component).or_insert(0.0) += s.frobenius * s.frobenius;
        }
        acc.into_iter().map(|(c, v): (ComponentKind, f64)| (c, v.sqrt())).collect()
    }

    pub fn stats_csv(&self) -> String {
        let mut out = String::from("label,layer,component,frobenius,mean,std,min,max\n");
        for s in &self.sites {
            let _ = writeln!(
                out,
                "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.label, s.layer, s.component, s.frobenius, s.mean, s.std, s.min, s.max
            );
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("label,layer,component,bin,lo,hi,count\n");
        for s in &self.sites {
            let width = 2.0 * s.range / HIST_BINS as f64;
            for (b, c) in s.counts.iter().enumerate() {
                let lo = -s.range + b as f64 * width;
                let _ = writeln!(
                    out,
                    "{},{},{},{b},{:.9e},{:.9e},{c}",
                    self.label,
                    s.layer,
                    s.component,
                    lo,
                    lo + width
                );
            }
        }
        out
    }

    /// Writes `{label}_stats.csv` and `{label}_hist.csv` under `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (suffix, body) in [("stats", self.stats_csv()), ("hist", self.histogram_csv())] {
            let path = dir.join(format!("{}_{suffix}.csv", self.label));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Statistics for every site, each histogram over its own range.
pub fn inspect(label: impl Into<String>, deltas: &BTreeMap<SiteKey, TensorF32>) -> Result<InspectReport> {
    inspect_with_ranges(label, deltas, &BTreeMap::new())
}

/// Like [`inspect`], with fixed per-site histogram ranges so two artifacts
/// can be binned identically.
pub fn inspect_with_ranges(
    label: impl Into<String>,
    deltas: &BTreeMap<SiteKey, TensorF32>,
    ranges: &BTreeMap<SiteKey, f64>,
) -> Result<InspectReport> {
    if deltas.is_empty() {
        return Err(Error::invalid("nothing to inspect"));
    }
    let sites = deltas
        .iter()
        .map(|(&(l, c), t)| site_stats(l, c, t, ranges.get(&(l, c)).copied()))
        .collect::<Result<Vec<_>>>()?;
    Ok(InspectReport {
        label: label.into(),
        sites,
    })
}

/// Per-site ranges large enough for every artifact given.
pub fn shared_ranges(sets: &[&BTreeMap<SiteKey, TensorF32>]) -> BTreeMap<SiteKey, f64> {
    let mut out: BTreeMap<SiteKey, f64> = BTreeMap::new();
    for set in sets {
        for (k, t) in *set {
            let m = out.entry(*k).or_insert(0.0);
            *m = m.max(t.max_abs() as f64);
        }
    }
    for v in out.values_mut() {
        if *v == 0.0 {
            *v = 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{Adapter, ModelSpec};
    use crate::calibration::{calibrated_deltas, CalibrationSet, SharedScope};
    use crate::merge::{merge_linear, uniform_weights};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn frobenius_of_three_four() {
        let t = TensorF32::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap();
        let s = site_stats(0, ComponentKind::QProj, &t, None).unwrap();
        assert_eq!(s.frobenius, 5.0);
        assert_eq!(s.mean, 1.75);
        assert_eq!(s.range, 4.0);
        assert_eq!(s.counts.iter().sum::<u64>(), 4);
        assert_eq!(s.counts[HIST_BINS - 1], 1);
        assert_eq!(s.counts[HIST_BINS / 2], 2);
    }

    #[test]
    fn zero_calibration_keeps_norms() {
        let spec = ModelSpec::toy();
        let mut rng = SeededRng::new(5);
        let a = Adapter::random(&spec, 4, 8.0, 0.1, &mut rng).unwrap();
        let b = Adapter::random(&spec, 4, 8.0, 0.1, &mut rng).unwrap();
        let merged = merge_linear(&spec, &[&a, &b], &uniform_weights(2)).unwrap();
        let base = inspect("linear", &merged.materialize().unwrap()).unwrap();
        for calib in [
            CalibrationSet::init_bias(&spec, SharedScope::PerCompositionalTask, "t").unwrap(),
            CalibrationSet::init_lora(&spec, 4, &mut rng, SharedScope::PerCompositionalTask, "t").unwrap(),
        ] {
            let cal = inspect("lc", &calibrated_deltas(&spec, &merged, &calib).unwrap()).unwrap();
            for (x, y) in base.sites.iter().zip(&cal.sites) {
                assert_eq!(x.frobenius, y.frobenius);
                assert_eq!(x.counts, y.counts);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let t = TensorF32::from_rows(&[&[1.0, -1.0]]).unwrap();
        let deltas = BTreeMap::from([((0, ComponentKind::UpProj), t)]);
        let r = inspect("m", &deltas).unwrap();
        let stats = r.stats_csv();
        assert_eq!(stats.lines().count(), 2);
        assert!(stats.lines().nth(1).unwrap().starts_with("m,0,up_proj,"));
        assert_eq!(r.histogram_csv().lines().count(), 1 + HIST_BINS);
        let dir = tempfile::tempdir().unwrap();
        let paths = r.write_csv(dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&paths[0]).unwrap(), stats);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(inspect("x", &BTreeMap::new()).is_err());
        let t = TensorF32::zeros(&[2, 2]);
        assert!(site_stats(0, ComponentKind::QProj, &t, Some(0.0)).is_err());
        assert_eq!(site_stats(0, ComponentKind::QProj, &t, None).unwrap().range, 1.0);
    }

    proptest! {
        #[test]
        fn histogram_counts_every_entry(vals in proptest::collection::vec(-10.0f32..10.0, 1..50)) {
            let t = TensorF32::vector(vals.clone()).unwrap();
            let s = site_stats(0, ComponentKind::VProj, &t, None).unwrap();
            prop_assert_eq!(s.counts.iter().sum::<u64>(), vals.len() as u64);
            prop_assert!(s.std >= 0.0);
            prop_assert!(s.min <= s.mean + 1e-9 && s.mean <= s.max + 1e-9);
        }
    }
}
