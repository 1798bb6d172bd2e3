//! The desk-scale testbed: a small frozen-base decoder.
//!
//! Architecture: token and position embeddings, `n_layers` blocks of
//! single-head causal attention (q/k/v/o) and a gated MLP
//! `down(silu(gate)·up)`, each preceded by RMS normalization and wrapped in a
//! residual connection, then a final RMS normalization and an output
//! projection. Every projection computes `(W₀ + ΔW)·x` when a delta is
//! attached.
//!
//! Internals run in `f64`; base weights are kept `f32`-representable so they
//! round-trip through safetensors exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::adapter::{ComponentKind, ModelSpec, SiteKey};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::safetensors::{self, Dtype};
use crate::tensor::{kaiming_bound, TensorF32};

pub mod dam;
pub mod decode;
pub mod engine;
pub mod train;

pub use dam::{merge_dam, merge_with_data, DamTrainable};
pub use decode::{decode_greedy, eval_strategy, Artifacts, EvalReport, EvalStrategy};
pub use engine::{loss_and_grads, Grads};
pub use train::{
    pretrain_base, train_calibration, train_single_task_lora, Adam, BaseTrainable, CalibTrainable, LoraTrainable,
    TrainConfig, TrainLog, Trainable,
};

/// Per-site additive updates in `f64`.
pub type Deltas = BTreeMap<SiteKey, Array2<f64>>;

pub mod vocab {
    //! Character vocabulary: `a–z`, `A–Z`, space, and two control symbols.

    use crate::error::{Error, Result};

    pub const SPACE: usize = 52;
    pub const SEP: usize = 53;
    pub const STOP: usize = 54;
    /// Ids in use; the remaining rows of a larger vocabulary are never targets.
    pub const USED: usize = 55;

    pub fn encode_char(c: char) -> Result<usize> {
        match c {
            'a'..='z' => Ok(c as usize - 'a' as usize),
            'A'..='Z' => Ok(26 + c as usize - 'A' as usize),
            ' ' => Ok(SPACE),
            _ => Err(Error::invalid(format!("character {c:?} is outside the toy alphabet"))),
        }
    }

    pub fn encode(s: &str) -> Result<Vec<usize>> {
        s.chars().map(encode_char).collect()
    }

    /// Text for ids; control symbols and unused ids render as nothing.
    pub fn decode(ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                0..=25 => Some((b'a' + id as u8) as char),
                26..=51 => Some((b'A' + (id - 26) as u8) as char),
                SPACE => Some(' '),
                _ => None,
            })
            .collect()
    }
}

/// One training or evaluation sequence: `input SEP output STOP`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    /// Length of `input SEP`; positions from `prompt_len - 1` on are scored.
    pub prompt_len: usize,
}

impl Sequence {
    pub fn new(input: &str, output: &str) -> Result<Self> {
        let mut ids = vocab::encode(input)?;
        ids.push(vocab::SEP);
        let prompt_len = ids.len();
        ids.extend(vocab::encode(output)?);
        ids.push(vocab::STOP);
        Ok(Self { ids, prompt_len })
    }

    pub fn prompt(input: &str) -> Result<Vec<usize>> {
        let mut ids = vocab::encode(input)?;
        ids.push(vocab::SEP);
        Ok(ids)
    }

    pub fn n_targets(&self) -> usize {
        self.ids.len() - self.prompt_len
    }
}

pub fn encode_dataset(ds: &crate::tasks::Dataset) -> Result<Vec<Sequence>> {
    ds.examples.iter().map(|e| Sequence::new(&e.input, &e.output)).collect()
}

/// Full parameter set of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab × embed`
    pub tok_emb: Array2<f64>,
    /// `context × embed`
    pub pos_emb: Array2<f64>,
    /// `vocab × embed`
    pub unembed: Array2<f64>,
    pub sites: BTreeMap<SiteKey, Array2<f64>>,
}

impl Weights {
    pub fn site(&self, layer: usize, comp: ComponentKind) -> &Array2<f64> {
        &self.sites[&(layer, comp)]
    }

    pub fn num_params(&self) -> usize {
        self.tok_emb.len() + self.pos_emb.len() + self.unembed.len() + self.sites.values().map(|w| w.len()).sum::<usize>()
    }

    fn round_to_f32(&mut self) {
        let round = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
        round(&mut self.tok_emb);
        round(&mut self.pos_emb);
        round(&mut self.unembed);
        self.sites.values_mut().for_each(round);
    }

    fn with_deltas(&self, deltas: &Deltas) -> Weights {
        let mut w = self.clone();
        for (k, d) in deltas {
            *w.sites.get_mut(k).expect("delta sites are checked on attach") += d;
        }
        w
    }
}

/// Checks that the spec describes a single-head decoder this engine can run.
pub fn check_spec(spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    let (q_out, q_in) = spec.dim(ComponentKind::QProj)?;
    let d = spec.embed_dim;
    let kv = spec.dim(ComponentKind::KProj)?;
    let (up_out, _) = spec.dim(ComponentKind::UpProj)?;
    let expect = [
        (ComponentKind::KProj, (q_out, d)),
        (ComponentKind::VProj, (q_out, d)),
        (ComponentKind::OProj, (d, q_out)),
        (ComponentKind::GateProj, (up_out, d)),
        (ComponentKind::DownProj, (d, up_out)),
    ];
    if q_in != d || kv.0 != q_out {
        return Err(Error::invalid("single-head attention needs q, k and v of equal width over the embedding"));
    }
    for (c, want) in expect {
        if spec.dim(c)? != want {
            return Err(Error::invalid(format!("{c} has shape {:?}, expected {want:?}", spec.dim(c)?)));
        }
    }
    if spec.vocab_size < vocab::USED {
        return Err(Error::invalid(format!("vocabulary must hold at least {} ids", vocab::USED)));
    }
    Ok(())
}

/// A frozen base network plus optionally attached per-site deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    spec: ModelSpec,
    base: Weights,
    attached: Deltas,
}

fn to_f64(t: &TensorF32) -> Array2<f64> {
    let (r, c) = if t.shape().len() == 2 { (t.rows(), t.cols()) } else { (1, t.len()) };
    Array2::from_shape_vec((r, c), t.data().iter().map(|&v| v as f64).collect()).expect("shape checked by tensor")
}

fn to_f32(a: &Array2<f64>) -> Result<TensorF32> {
    TensorF32::new(vec![a.nrows(), a.ncols()], a.iter().map(|&v| v as f32).collect())
}

/// Converts materialized deltas (e.g. from a merge) to the engine's form.
pub fn deltas_from_tensors(tensors: &BTreeMap<SiteKey, TensorF32>) -> Deltas {
    tensors.iter().map(|(&k, t)| (k, to_f64(t))).collect()
}

pub fn deltas_to_tensors(deltas: &Deltas) -> Result<BTreeMap<SiteKey, TensorF32>> {
    deltas.iter().map(|(&k, d)| Ok((k, to_f32(d)?))).collect()
}

pub(crate) fn array_from_tensor(t: &TensorF32) -> Array2<f64> {
    to_f64(t)
}

pub(crate) fn tensor_from_array(a: &Array2<f64>) -> Result<TensorF32> {
    to_f32(a)
}

impl ToyModel {
    /// Random base: embeddings `±0.5`, projections Kaiming-uniform over their inputs.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        check_spec(spec)?;
        let mut rng = SeededRng::derive(seed, &[0x6d6f_6465_6c]);
        let d = spec.embed_dim;
        let mut draw = |rows: usize, cols: usize, bound: f32| {
            Array2::from_shape_fn((rows, cols), |_| rng.uniform(-bound, bound) as f64)
        };
        let tok_emb = draw(spec.vocab_size, d, 0.5);
        let pos_emb = draw(spec.context_len, d, 0.5);
        let unembed = draw(spec.vocab_size, d, kaiming_bound(d));
        let mut sites = BTreeMap::new();
        for (l, c) in spec.sites() {
            let (o, i) = spec.dim(c)?;
            sites.insert((l, c), draw(o, i, kaiming_bound(i)));
        }
        let mut base = Weights {
            tok_emb,
            pos_emb,
            unembed,
            sites,
        };
        base.round_to_f32();
        Ok(Self {
            spec: spec.clone(),
            base,
            attached: Deltas::new(),
        })
    }

    pub fn from_weights(spec: &ModelSpec, mut base: Weights) -> Result<Self> {
        check_spec(spec)?;
        let d = spec.embed_dim;
        let check = |name: &str, a: &Array2<f64>, want: (usize, usize)| {
            if a.dim() != want {
                return Err(Error::Tensor {
                    name: name.to_string(),
                    reason: format!("shape {:?}, expected {want:?}", a.dim()),
                });
            }
            Ok(())
        };
        check("tok_emb", &base.tok_emb, (spec.vocab_size, d))?;
        check("pos_emb", &base.pos_emb, (spec.context_len, d))?;
        check("unembed", &base.unembed, (spec.vocab_size, d))?;
        for (l, c) in spec.sites() {
            let w = base.sites.get(&(l, c)).ok_or(Error::Coverage { layer: l, component: c })?;
            check(&site_name(l, c), w, spec.dim(c)?)?;
        }
        if base.sites.len() != spec.n_layers * ComponentKind::ALL.len() {
            return Err(Error::invalid("base weights hold sites outside the spec"));
        }
        base.round_to_f32();
        Ok(Self {
            spec: spec.clone(),
            base,
            attached: Deltas::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn base(&self) -> &Weights {
        &self.base
    }

    pub fn attached(&self) -> &Deltas {
        &self.attached
    }

    /// A copy of the model with `deltas` attached in place of any current ones.
    pub fn with_deltas(&self, deltas: Deltas) -> Result<Self> {
        for (&(l, c), d) in &deltas {
            if l >= self.spec.n_layers {
                return Err(Error::invalid(format!("delta for layer {l} beyond {} layers", self.spec.n_layers)));
            }
            let want = self.spec.dim(c)?;
            if d.dim() != want {
                return Err(Error::Shape {
                    op: "attach delta",
                    left: vec![d.nrows(), d.ncols()],
                    right: vec![want.0, want.1],
                });
            }
        }
        Ok(Self {
            spec: self.spec.clone(),
            base: self.base.clone(),
            attached: deltas,
        })
    }

    pub fn without_deltas(&self) -> Self {
        Self {
            attached: Deltas::new(),
            ..self.clone()
        }
    }

    /// `W₀ + ΔW` at every site, with `extra` added on top of attached deltas.
    pub fn effective(&self, extra: Option<&Deltas>) -> Weights {
        let mut w = self.base.with_deltas(&self.attached);
        if let Some(extra) = extra {
            for (k, d) in extra {
                *w.sites.get_mut(k).expect("trainable sites come from the spec") += d;
            }
        }
        w
    }

    /// Logits for every position, `len × vocab`.
    pub fn forward(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let w = self.effective(None);
        engine::check_ids(&self.spec, ids)?;
        Ok(engine::forward(&self.spec, &w, ids).logits)
    }

    /// Row-wise softmax of [`ToyModel::forward`].
    pub fn probabilities(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut p = self.forward(ids)?;
        for mut row in p.axis_iter_mut(Axis(0)) {
            engine::softmax_inplace(row.as_slice_mut().expect("contiguous rows"));
        }
        Ok(p)
    }

    /// Mean token cross-entropy over the output positions of `batch`.
    pub fn loss(&self, batch: &[Sequence]) -> Result<f64> {
        let w = self.effective(None);
        engine::mean_loss(&self.spec, &w, batch)
    }

    pub fn tensor_map(&self) -> Result<BTreeMap<String, TensorF32>> {
        let mut out = BTreeMap::new();
        out.insert("tok_emb".to_string(), to_f32(&self.base.tok_emb)?);
        out.insert("pos_emb".to_string(), to_f32(&self.base.pos_emb)?);
        out.insert("unembed".to_string(), to_f32(&self.base.unembed)?);
        for (&(l, c), w) in &self.base.sites {
            out.insert(site_name(l, c), to_f32(w)?);
        }
        Ok(out)
    }

    /// Writes the base weights (never the attached deltas) with the spec in the metadata.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let meta = BTreeMap::from([
            ("format".to_string(), "toy_model".to_string()),
            ("spec".to_string(), serde_json::to_string(&self.spec)?),
        ]);
        safetensors::write_file(path, &self.tensor_map()?, &meta, Dtype::F32)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = safetensors::read_file(path)?;
        let spec_json = file
            .metadata
            .get("spec")
            .ok_or_else(|| Error::Format("model file lacks `spec` metadata".into()))?;
        let spec: ModelSpec = serde_json::from_str(spec_json)?;
        let get = |name: &str| file.get_f32(name).map(to_f64);
        let mut sites = BTreeMap::new();
        for (l, c) in spec.sites() {
            sites.insert((l, c), get(&site_name(l, c))?);
        }
        let base = Weights {
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            unembed: get("unembed")?,
            sites,
        };
        if file.tensors.len() != base.sites.len() + 3 {
            return Err(Error::Format("model file holds unexpected tensors".into()));
        }
        Self::from_weights(&spec, base)
    }
}

pub fn site_name(layer: usize, comp: ComponentKind) -> String {
    format!("layers.{layer}.{comp}.weight")
}
