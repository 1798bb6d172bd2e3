//! Learnable calibration on top of a linear merge.
//!
//! Two parameterizations, each shared across all layers and specific to the
//! component type:
//!
//! - **bias**: a vector `p ∈ R^{d_out}` added to every column of the merged
//!   update, `ΔWᶜ = ΔW' + p·1ᵀ`;
//! - **lora**: a rank-`s` pair with `ΔWᶜ = P2·P1 + ΔW'`, `P2: d_out × s`,
//!   `P1: s × d_in`.
//!
//! Both start as the identity on `ΔW'` (`p = 0`, `P2 = 0`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{ComponentKind, ModelSpec};
use crate::error::{Error, Result};
use crate::merge::MergedAdapter;
use crate::rng::SeededRng;
use crate::safetensors::{self, Dtype};
use crate::tensor::{Init, TensorF32};

/// Default calibration rank for the low-rank variant.
pub const DEFAULT_CALIB_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibVariant {
    Bias,
    Lora,
}

impl CalibVariant {
    pub fn name(self) -> &'static str {
        match self {
            CalibVariant::Bias => "bias",
            CalibVariant::Lora => "lora",
        }
    }
}

impl std::str::FromStr for CalibVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(CalibVariant::Bias),
            "lora" => Ok(CalibVariant::Lora),
            _ => Err(Error::invalid(format!("unknown calibration variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedScope {
    PerCompositionalTask,
    SharedAcrossTasks,
}

impl SharedScope {
    pub fn name(self) -> &'static str {
        match self {
            SharedScope::PerCompositionalTask => "per_compositional_task",
            SharedScope::SharedAcrossTasks => "shared_across_tasks",
        }
    }
}

impl std::str::FromStr for SharedScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_compositional_task" => Ok(SharedScope::PerCompositionalTask),
            "shared_across_tasks" => Ok(SharedScope::SharedAcrossTasks),
            _ => Err(Error::invalid(format!("unknown shared scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibBias {
    pub p: BTreeMap<ComponentKind, TensorF32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibLoraPair {
    /// `d_out × s`, zero-initialized.
    pub p2: TensorF32,
    /// `s × d_in`, Kaiming-uniform.
    pub p1: TensorF32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibLora {
    pub rank: usize,
    pub factors: BTreeMap<ComponentKind, CalibLoraPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibParams {
    Bias(CalibBias),
    Lora(CalibLora),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub params: CalibParams,
    pub shared_scope: SharedScope,
    pub task_label: String,
}

impl CalibrationSet {
    pub fn init_bias(spec: &ModelSpec, scope: SharedScope, task_label: impl Into<String>) -> Result<Self> {
        let p = ComponentKind::ALL
            .into_iter()
            .map(|c| Ok((c, TensorF32::zeros(&[spec.dim(c)?.0]))))
            .collect::<Result<_>>()?;
        Ok(Self {
            params: CalibParams::Bias(CalibBias { p }),
            shared_scope: scope,
            task_label: task_label.into(),
        })
    }

    pub fn init_lora(
        spec: &ModelSpec,
        rank: usize,
        rng: &mut SeededRng,
        scope: SharedScope,
        task_label: impl Into<String>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("calibration rank must be positive"));
        }
        let mut factors = BTreeMap::new();
        for c in ComponentKind::ALL {
            let (d_out, d_in) = spec.dim(c)?;
            if rank >= d_out.min(d_in) {
                return Err(Error::invalid(format!(
                    "calibration rank {rank} is not below min({d_out}, {d_in}) for {c}"
                )));
            }
            factors.insert(
                c,
                CalibLoraPair {
                    p2: TensorF32::zeros(&[d_out, rank]),
                    p1: TensorF32::init(Init::KaimingUniform { fan_in: d_in }, &[rank, d_in], rng)?,
                },
            );
        }
        Ok(Self {
            params: CalibParams::Lora(CalibLora { rank, factors }),
            shared_scope: scope,
            task_label: task_label.into(),
        })
    }

    pub fn init(
        spec: &ModelSpec,
        variant: CalibVariant,
        rank: usize,
        rng: &mut SeededRng,
        scope: SharedScope,
        task_label: impl Into<String>,
    ) -> Result<Self> {
        match variant {
            CalibVariant::Bias => Self::init_bias(spec, scope, task_label),
            CalibVariant::Lora => Self::init_lora(spec, rank, rng, scope, task_label),
        }
    }

    pub fn variant(&self) -> CalibVariant {
        match self.params {
            CalibParams::Bias(_) => CalibVariant::Bias,
            CalibParams::Lora(_) => CalibVariant::Lora,
        }
    }

    /// Calibration rank `s` (0 for the bias variant).
    pub fn rank(&self) -> usize {
        match &self.params {
            CalibParams::Bias(_) => 0,
            CalibParams::Lora(l) => l.rank,
        }
    }

    /// Scalars held, which is also the number written to disk.
    pub fn num_params(&self) -> usize {
        self.tensor_map().values().map(TensorF32::len).sum()
    }

    /// Checks coverage and shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        for c in ComponentKind::ALL {
            let (d_out, d_in) = spec.dim(c)?;
            match &self.params {
                CalibParams::Bias(b) => {
                    let p = b.p.get(&c).ok_or_else(|| Error::MissingTensor(bias_name(c)))?;
                    if p.shape() != [d_out] {
                        return Err(shape_err(bias_name(c), p.shape(), &[d_out]));
                    }
                }
                CalibParams::Lora(l) => {
                    let f = l.factors.get(&c).ok_or_else(|| Error::MissingTensor(p2_name(c)))?;
                    if f.p2.shape() != [d_out, l.rank] {
                        return Err(shape_err(p2_name(c), f.p2.shape(), &[d_out, l.rank]));
                    }
                    if f.p1.shape() != [l.rank, d_in] {
                        return Err(shape_err(p1_name(c), f.p1.shape(), &[l.rank, d_in]));
                    }
                }
            }
        }
        Ok(())
    }

    /// The additive correction for `comp`, identical at every layer.
    pub fn correction(&self, comp: ComponentKind, d_in: usize) -> Result<TensorF32> {
        match &self.params {
            CalibParams::Bias(b) => {
                let p = b.p.get(&comp).ok_or_else(|| Error::MissingTensor(bias_name(comp)))?;
                let data = p.data().iter().flat_map(|&v| std::iter::repeat_n(v, d_in)).collect();
                TensorF32::new(vec![p.len(), d_in], data)
            }
            CalibParams::Lora(l) => {
                let f = l.factors.get(&comp).ok_or_else(|| Error::MissingTensor(p2_name(comp)))?;
                f.p2.matmul(&f.p1)
            }
        }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, TensorF32> {
        let mut out = BTreeMap::new();
        match &self.params {
            CalibParams::Bias(b) => {
                for (&c, p) in &b.p {
                    out.insert(bias_name(c), p.clone());
                }
            }
            CalibParams::Lora(l) => {
                for (&c, f) in &l.factors {
                    out.insert(p1_name(c), f.p1.clone());
                    out.insert(p2_name(c), f.p2.clone());
                }
            }
        }
        out
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("variant".to_string(), self.variant().name().to_string()),
            ("s".to_string(), self.rank().to_string()),
            ("shared_scope".to_string(), self.shared_scope.name().to_string()),
            ("task_label".to_string(), self.task_label.clone()),
        ])
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        safetensors::serialize(&self.tensor_map(), &self.metadata(), dtype)
    }

    /// Writes the calibration file and returns its size in bytes. `BF16`
    /// storage halves the payload; loading widens it back to `f32`.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<u64> {
        safetensors::write_file(path, &self.tensor_map(), &self.metadata(), dtype)
    }

    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        Self::from_file(&safetensors::read_file(path)?, spec)
    }

    pub fn from_file(file: &safetensors::TensorFile, spec: &ModelSpec) -> Result<Self> {
        let meta = |k: &str| {
            file.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("calibration metadata lacks `{k}`")))
        };
        let variant: CalibVariant = meta("variant")?.parse()?;
        let s: usize = meta("s")?
            .parse()
            .map_err(|_| Error::Format("calibration metadata `s` is not an integer".into()))?;
        let shared_scope: SharedScope = meta("shared_scope")?.parse()?;
        let task_label = meta("task_label")?;
        let params = match variant {
            CalibVariant::Bias => {
                if s != 0 {
                    return Err(Error::Format(format!("bias calibration with s = {s}")));
                }
                let p = ComponentKind::ALL
                    .into_iter()
                    .map(|c| Ok((c, file.get(&bias_name(c))?.clone())))
                    .collect::<Result<_>>()?;
                CalibParams::Bias(CalibBias { p })
            }
            CalibVariant::Lora => {
                let factors = ComponentKind::ALL
                    .into_iter()
                    .map(|c| {
                        Ok((
                            c,
                            CalibLoraPair {
                                p2: file.get(&p2_name(c))?.clone(),
                                p1: file.get(&p1_name(c))?.clone(),
                            },
                        ))
                    })
                    .collect::<Result<_>>()?;
                CalibParams::Lora(CalibLora { rank: s, factors })
            }
        };
        let set = Self {
            params,
            shared_scope,
            task_label,
        };
        if file.tensors.len() != set.tensor_map().len() {
            return Err(Error::Format(format!(
                "calibration file has {} tensors, expected {}",
                file.tensors.len(),
                set.tensor_map().len()
            )));
        }
        set.check(spec)?;
        Ok(set)
    }
}

fn shape_err(name: String, got: &[usize], want: &[usize]) -> Error {
    Error::Tensor {
        name,
        reason: format!("shape {got:?}, expected {want:?}"),
    }
}

pub fn bias_name(c: ComponentKind) -> String {
    format!("calib.{c}.p")
}

pub fn p1_name(c: ComponentKind) -> String {
    format!("calib.{c}.P1")
}

pub fn p2_name(c: ComponentKind) -> String {
    format!("calib.{c}.P2")
}

/// `ΔWᶜ` for one site: the merged update plus the shared correction.
///
/// `merged` must be the factor-form linear merge the calibration was trained on.
pub fn calibrated_delta(
    merged: &MergedAdapter,
    calib: &CalibrationSet,
    layer: usize,
    comp: ComponentKind,
) -> Result<TensorF32> {
    if !merged.is_factor() {
        return Err(Error::invalid("calibration applies to a factor-form linear merge"));
    }
    let base = merged.delta(layer, comp)?;
    let correction = calib.correction(comp, base.cols())?;
    if correction.shape() != base.shape() {
        return Err(Error::Shape {
            op: "calibrated_delta",
            left: base.shape().to_vec(),
            right: correction.shape().to_vec(),
        });
    }
    base.add(&correction)
}

/// Every site's calibrated update.
pub fn calibrated_deltas(
    spec: &ModelSpec,
    merged: &MergedAdapter,
    calib: &CalibrationSet,
) -> Result<BTreeMap<(usize, ComponentKind), TensorF32>> {
    spec.sites()
        .map(|(l, c)| Ok(((l, c), calibrated_delta(merged, calib, l, c)?)))
        .collect()
}

/// Extra scalars a calibration set adds. Independent of the layer count
/// because parameters are shared across layers.
pub fn param_count(spec: &ModelSpec, variant: CalibVariant, s: usize) -> usize {
    ComponentKind::ALL
        .iter()
        .filter_map(|&c| spec.dims.get(&c))
        .map(|&(d_out, d_in)| match variant {
            CalibVariant::Bias => d_out,
            CalibVariant::Lora => d_out * s + s * d_in,
        })
        .sum()
}
