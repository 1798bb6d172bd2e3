//! LoRA adapters: data model, materialized deltas, and on-disk format.
//!
//! An adapter holds one `(B, A)` factor pair per `(layer, component)` of a
//! [`ModelSpec`], with `B: d_out × r` and `A: r × d_in`. The materialized
//! update is `ΔW = (α / r) · B · A`.
//!
//! On disk an adapter is a safetensors file with tensors named
//! `layers.{i}.{component}.lora_B` / `.lora_A`, plus a sidecar
//! `<stem>.adapter_config.json` next to it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::safetensors::{self, Dtype};
use crate::tensor::{Init, TensorF32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    QProj,
    KProj,
    VProj,
    OProj,
    UpProj,
    DownProj,
    GateProj,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::QProj,
        ComponentKind::KProj,
        ComponentKind::VProj,
        ComponentKind::OProj,
        ComponentKind::UpProj,
        ComponentKind::DownProj,
        ComponentKind::GateProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::QProj => "q_proj",
            ComponentKind::KProj => "k_proj",
            ComponentKind::VProj => "v_proj",
            ComponentKind::OProj => "o_proj",
            ComponentKind::UpProj => "up_proj",
            ComponentKind::DownProj => "down_proj",
            ComponentKind::GateProj => "gate_proj",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown component `{s}`")))
    }
}

/// Shapes of the projection sites an adapter can attach to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// `(d_out, d_in)` per component.
    pub dims: BTreeMap<ComponentKind, (usize, usize)>,
    #[serde(default = "default_context")]
    pub context_len: usize,
}

fn default_context() -> usize {
    64
}

impl ModelSpec {
    /// The desk-scale testbed: vocab 64, width 32, two layers, MLP width 64.
    pub fn toy() -> Self {
        Self::decoder(2, 64, 32, 32, 32, 64, 64)
    }

    /// Component shapes of a decoder block with (possibly grouped) attention.
    pub fn decoder(
        n_layers: usize,
        vocab_size: usize,
        embed_dim: usize,
        q_dim: usize,
        kv_dim: usize,
        mlp_dim: usize,
        context_len: usize,
    ) -> Self {
        use ComponentKind::*;
        let dims = BTreeMap::from([
            (QProj, (q_dim, embed_dim)),
            (KProj, (kv_dim, embed_dim)),
            (VProj, (kv_dim, embed_dim)),
            (OProj, (embed_dim, q_dim)),
            (UpProj, (mlp_dim, embed_dim)),
            (GateProj, (mlp_dim, embed_dim)),
            (DownProj, (embed_dim, mlp_dim)),
        ]);
        Self {
            n_layers,
            vocab_size,
            embed_dim,
            dims,
            context_len,
        }
    }

    /// Published projection shapes of Qwen2.5-1.5B (hidden 1536, 2 KV heads of 128, MLP 8960).
    pub fn qwen2_5_1_5b() -> Self {
        Self::decoder(28, 151_936, 1536, 1536, 256, 8960, 32_768)
    }

    /// Published projection shapes of Llama-3.2-1B (hidden 2048, 8 KV heads of 64, MLP 8192).
    pub fn llama3_2_1b() -> Self {
        Self::decoder(16, 128_256, 2048, 2048, 512, 8192, 131_072)
    }

    /// Published projection shapes of StableLM-2-1.6B (hidden 2048, full MHA, MLP 5632).
    pub fn stablelm2_1_6b() -> Self {
        Self::decoder(24, 100_352, 2048, 2048, 2048, 5632, 4096)
    }

    pub fn dim(&self, comp: ComponentKind) -> Result<(usize, usize)> {
        self.dims
            .get(&comp)
            .copied()
            .ok_or_else(|| Error::invalid(format!("model spec has no {comp}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("model spec sizes must be positive"));
        }
        for comp in ComponentKind::ALL {
            let (o, i) = self.dim(comp)?;
            if o == 0 || i == 0 {
                return Err(Error::invalid(format!("{comp} has a zero dimension")));
            }
        }
        Ok(())
    }

    /// Every `(layer, component)` site in canonical order.
    pub fn sites(&self) -> impl Iterator<Item = (usize, ComponentKind)> + '_ {
        (0..self.n_layers).flat_map(|l| ComponentKind::ALL.into_iter().map(move |c| (l, c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `d_out × r`
    pub b: TensorF32,
    /// `r × d_in`
    pub a: TensorF32,
}

pub type SiteKey = (usize, ComponentKind);

pub fn lora_b_name(layer: usize, comp: ComponentKind) -> String {
    format!("layers.{layer}.{comp}.lora_B")
}

pub fn lora_a_name(layer: usize, comp: ComponentKind) -> String {
    format!("layers.{layer}.{comp}.lora_A")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub rank: usize,
    pub alpha: f32,
    /// Training-time dropout; recorded, never applied at merge or inference time.
    pub dropout: f32,
    pub task_name: String,
    pub tensors: BTreeMap<SiteKey, LoraPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub r: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    pub target_modules: Vec<ComponentKind>,
    pub task_name: String,
}

impl Adapter {
    pub fn new(
        spec: &ModelSpec,
        rank: usize,
        alpha: f32,
        dropout: f32,
        task_name: impl Into<String>,
        tensors: BTreeMap<SiteKey, LoraPair>,
    ) -> Result<Self> {
        let adapter = Self {
            rank,
            alpha,
            dropout,
            task_name: task_name.into(),
            tensors,
        };
        adapter.check(spec)?;
        Ok(adapter)
    }

    /// Standard LoRA initialization: `B = 0`, `A` Kaiming-uniform over `d_in`.
    pub fn init(spec: &ModelSpec, rank: usize, alpha: f32, dropout: f32, rng: &mut SeededRng) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (layer, comp) in spec.sites() {
            let (d_out, d_in) = spec.dim(comp)?;
            let b = TensorF32::zeros(&[d_out, rank]);
            let a = TensorF32::init(Init::KaimingUniform { fan_in: d_in }, &[rank, d_in], rng)?;
            tensors.insert((layer, comp), LoraPair { b, a });
        }
        Self::new(spec, rank, alpha, dropout, "", tensors)
    }

    /// Both factors drawn uniformly from `±scale`; for tests and demonstrations.
    pub fn random(spec: &ModelSpec, rank: usize, alpha: f32, scale: f32, rng: &mut SeededRng) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (layer, comp) in spec.sites() {
            let (d_out, d_in) = spec.dim(comp)?;
            let mut draw = |shape: [usize; 2]| {
                let data = (0..shape[0] * shape[1]).map(|_| rng.uniform(-scale, scale)).collect();
                TensorF32::new(shape.to_vec(), data)
            };
            let b = draw([d_out, rank])?;
            let a = draw([rank, d_in])?;
            tensors.insert((layer, comp), LoraPair { b, a });
        }
        Self::new(spec, rank, alpha, 0.0, "", tensors)
    }

    pub fn with_task_name(mut self, name: impl Into<String>) -> Self {
        self.task_name = name.into();
        self
    }

    /// Checks coverage of every site and factor shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("adapter rank must be positive"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("adapter alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("adapter dropout must be in [0, 1)"));
        }
        for (layer, comp) in spec.sites() {
            let pair = self
                .tensors
                .get(&(layer, comp))
                .ok_or(Error::Coverage { layer, component: comp })?;
            let (d_out, d_in) = spec.dim(comp)?;
            if pair.b.shape() != [d_out, self.rank] {
                return Err(Error::Tensor {
                    name: lora_b_name(layer, comp),
                    reason: format!("shape {:?}, expected {:?}", pair.b.shape(), [d_out, self.rank]),
                });
            }
            if pair.a.shape() != [self.rank, d_in] {
                return Err(Error::Tensor {
                    name: lora_a_name(layer, comp),
                    reason: format!("shape {:?}, expected {:?}", pair.a.shape(), [self.rank, d_in]),
                });
            }
        }
        if self.tensors.len() != spec.n_layers * ComponentKind::ALL.len() {
            return Err(Error::invalid("adapter has sites outside the model spec"));
        }
        Ok(())
    }

    /// `α / r`, the factor applied to `B·A`.
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn pair(&self, layer: usize, comp: ComponentKind) -> Result<&LoraPair> {
        self.tensors
            .get(&(layer, comp))
            .ok_or(Error::Coverage { layer, component: comp })
    }

    /// `ΔW = (α / r) · B · A`.
    pub fn delta_weight(&self, layer: usize, comp: ComponentKind) -> Result<TensorF32> {
        let pair = self.pair(layer, comp)?;
        factor_delta(&pair.b, &pair.a, self.scale())
    }

    pub fn config(&self) -> AdapterConfig {
        let mut targets: Vec<ComponentKind> = self.tensors.keys().map(|&(_, c)| c).collect();
        targets.sort();
        targets.dedup();
        AdapterConfig {
            r: self.rank,
            lora_alpha: self.alpha,
            lora_dropout: self.dropout,
            target_modules: targets,
            task_name: self.task_name.clone(),
        }
    }

    /// Number of scalars across all factors.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn to_tensor_map(&self) -> BTreeMap<String, TensorF32> {
        let mut out = BTreeMap::new();
        for (&(layer, comp), pair) in &self.tensors {
            out.insert(lora_b_name(layer, comp), pair.b.clone());
            out.insert(lora_a_name(layer, comp), pair.a.clone());
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = BTreeMap::from([("format".to_string(), "lora".to_string())]);
        safetensors::serialize(&self.to_tensor_map(), &meta, Dtype::F32)
    }

    /// Writes `path` and its sidecar config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let cfg_path = config_path(path);
        let cfg = serde_json::to_string_pretty(&self.config())?;
        std::fs::write(&cfg_path, cfg).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let cfg_path = config_path(path);
        let cfg_text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: AdapterConfig = serde_json::from_str(&cfg_text)?;
        let file = safetensors::read_file(path)?;
        Self::from_parts(&file, &cfg, spec)
    }

    pub fn from_parts(file: &safetensors::TensorFile, cfg: &AdapterConfig, spec: &ModelSpec) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (layer, comp) in spec.sites() {
            let b = file.get_f32(&lora_b_name(layer, comp))?.clone();
            let a = file.get_f32(&lora_a_name(layer, comp))?.clone();
            tensors.insert((layer, comp), LoraPair { b, a });
        }
        let expected = 2 * spec.n_layers * ComponentKind::ALL.len();
        if file.tensors.len() != expected {
            return Err(Error::Format(format!(
                "adapter file has {} tensors, expected {expected}",
                file.tensors.len()
            )));
        }
        Self::new(spec, cfg.r, cfg.lora_alpha, cfg.lora_dropout, cfg.task_name.clone(), tensors)
    }
}

/// `scale · B · A`, accumulated in `f64` and rounded once.
pub fn factor_delta(b: &TensorF32, a: &TensorF32, scale: f32) -> Result<TensorF32> {
    let (d_out, r) = (b.rows(), b.cols());
    if a.rows() != r {
        return Err(Error::Shape {
            op: "factor_delta",
            left: b.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    let d_in = a.cols();
    let (bd, ad) = (b.data(), a.data());
    let mut out = vec![0.0f32; d_out * d_in];
    let mut acc = vec![0.0f64; d_in];
    for i in 0..d_out {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..r {
            let bik = bd[i * r + k] as f64;
            for (x, &akj) in acc.iter_mut().zip(&ad[k * d_in..(k + 1) * d_in]) {
                *x += bik * akj as f64;
            }
        }
        for (o, &x) in out[i * d_in..(i + 1) * d_in].iter_mut().zip(&acc) {
            *o = (scale as f64 * x) as f32;
        }
    }
    TensorF32::new(vec![d_out, d_in], out)
}

/// Sidecar config path: `dir/name.safetensors` → `dir/name.adapter_config.json`.
pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("adapter_config.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompatReport {
    /// Ranks differ; only rank-agnostic strategies (concat, delta-space merges) apply.
    pub rank_heterogeneous: bool,
}

/// Preconditions shared by every merge: equal coverage of `spec` and a shared `α`.
pub fn validate_compat(adapters: &[&Adapter], spec: &ModelSpec) -> Result<CompatReport> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::invalid("at least one adapter is required"))?;
    for a in adapters {
        a.check(spec)?;
        if a.alpha != first.alpha {
            return Err(Error::invalid(format!(
                "mixed alpha ({} vs {}) in one merge",
                first.alpha, a.alpha
            )));
        }
    }
    Ok(CompatReport {
        rank_heterogeneous: adapters.iter().any(|a| a.rank != first.rank),
    })
}
