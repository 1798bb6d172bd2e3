//! Trainable parameter groups, Adam, and the training loops.
//!
//! A [`Trainable`] owns one flat `f64` parameter vector. It knows how to turn
//! that vector into effective model weights and how to pull full weight
//! gradients back onto its own parameters. Everything else in the model stays
//! frozen.

use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::engine::{self, Grads};
use super::{array_from_tensor, encode_dataset, tensor_from_array, Deltas, Sequence, ToyModel, Weights};
use crate::adapter::{Adapter, ComponentKind, LoraPair, ModelSpec, SiteKey};
use crate::calibration::{CalibBias, CalibLora, CalibLoraPair, CalibParams, CalibVariant, CalibrationSet, SharedScope};
use crate::error::{Error, Result};
use crate::merge::MergedAdapter;
use crate::rng::SeededRng;
use crate::tasks::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            steps: 300,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![params.len(), grads.len()],
                right: vec![self.m.len()],
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// A group of parameters trained on top of a frozen [`ToyModel`].
pub trait Trainable {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Effective weights of `model` under the current parameters.
    fn weights(&self, model: &ToyModel) -> Weights;
    /// Gradient of the loss with respect to [`Trainable::params`].
    fn param_grads(&self, grads: &Grads) -> Vec<f64>;
}

/// Mean cross-entropy over `batch` and its gradient with respect to the
/// trainable group only.
pub fn trainable_loss_and_grads<T: Trainable + ?Sized>(
    model: &ToyModel,
    trainable: &T,
    batch: &[Sequence],
) -> Result<(f64, Vec<f64>)> {
    let w = trainable.weights(model);
    let (loss, g) = engine::loss_and_grads(model.spec(), &w, batch)?;
    Ok((loss, trainable.param_grads(&g)))
}

pub fn trainable_loss<T: Trainable + ?Sized>(model: &ToyModel, trainable: &T, batch: &[Sequence]) -> Result<f64> {
    engine::mean_loss(model.spec(), &trainable.weights(model), batch)
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients with central differences at `n` random
/// coordinates. The step is `1e-3·max(|θ|, 1e-2)` and the difference quotient
/// uses the step actually realized in floating point.
pub fn gradient_check<T: Trainable + Clone>(
    model: &ToyModel,
    trainable: &T,
    batch: &[Sequence],
    n: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let (_, analytic) = trainable_loss_and_grads(model, trainable, batch)?;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let index = rng.below(analytic.len());
        let mut t = trainable.clone();
        let theta = t.params()[index];
        let h = 1e-3 * theta.abs().max(1e-2);
        t.params_mut()[index] = theta + h;
        let up = trainable_loss(model, &t, batch)?;
        let hp = t.params()[index] - theta;
        t.params_mut()[index] = theta - h;
        let down = trainable_loss(model, &t, batch)?;
        let hm = theta - t.params()[index];
        let numeric = (up - down) / (hp + hm);
        let a = analytic[index];
        let rel_err = if a == 0.0 && numeric.abs() < 1e-10 {
            0.0
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        out.push(GradCheck {
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean minibatch loss over `window` steps ending at each multiple of `window`.
    pub fn checkpoints(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Runs Adam on `trainable` over minibatches drawn from shuffled passes of `data`.
pub fn fit<T: Trainable + ?Sized>(
    model: &ToyModel,
    trainable: &mut T,
    data: &[Sequence],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut adam = Adam::new(trainable.params().len(), cfg);
    let mut rng = SeededRng::derive(cfg.seed, &[0x7472_6169_6e]);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                rng.shuffle(&mut order);
            }
            batch.push(data[order.pop().expect("refilled")].clone());
        }
        let (loss, grads) = trainable_loss_and_grads(model, trainable, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam.step(trainable.params_mut(), &grads)?;
        log.losses.push(loss);
        if step % 100 == 0 {
            debug!("step {step}: loss {loss:.4}");
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn view<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &theta[self.off..self.off + self.rows * self.cols])
            .expect("layout is consistent")
    }

    fn view_mut<'a>(&self, theta: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut theta[self.off..self.off + self.rows * self.cols])
            .expect("layout is consistent")
    }
}

#[derive(Default)]
struct Layout {
    len: usize,
}

impl Layout {
    fn push(&mut self, rows: usize, cols: usize) -> Block {
        let b = Block {
            off: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        b
    }
}

fn put(theta: &mut [f64], block: Block, src: &Array2<f64>) {
    block.view_mut(theta).assign(src);
}

fn to_tensor(block: Block, theta: &[f64]) -> Result<crate::tensor::TensorF32> {
    tensor_from_array(&block.view(theta).to_owned())
}

/// LoRA factors at every site, `ΔW = (α/r)·B·A`.
#[derive(Debug, Clone)]
pub struct LoraTrainable {
    theta: Vec<f64>,
    blocks: Vec<(SiteKey, Block, Block)>,
    rank: usize,
    alpha: f32,
    dropout: f32,
    task_name: String,
}

impl LoraTrainable {
    pub fn new(spec: &ModelSpec, adapter: &Adapter) -> Result<Self> {
        adapter.check(spec)?;
        let mut layout = Layout::default();
        let mut blocks = Vec::new();
        for (&k, pair) in &adapter.tensors {
            let b = layout.push(pair.b.rows(), pair.b.cols());
            let a = layout.push(pair.a.rows(), pair.a.cols());
            blocks.push((k, b, a));
        }
        let mut theta = vec![0.0; layout.len];
        for ((k, b, a), pair) in blocks.iter().zip(adapter.tensors.values()) {
            debug_assert_eq!(adapter.tensors.get(k), Some(pair));
            put(&mut theta, *b, &array_from_tensor(&pair.b));
            put(&mut theta, *a, &array_from_tensor(&pair.a));
        }
        Ok(Self {
            theta,
            blocks,
            rank: adapter.rank,
            alpha: adapter.alpha,
            dropout: adapter.dropout,
            task_name: adapter.task_name.clone(),
        })
    }

    fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }

    pub fn deltas(&self) -> Deltas {
        self.blocks
            .iter()
            .map(|&(k, b, a)| (k, b.view(&self.theta).dot(&a.view(&self.theta)) * self.scale()))
            .collect()
    }

    /// Rounds the factors to `f32`.
    pub fn to_adapter(&self, spec: &ModelSpec) -> Result<Adapter> {
        let tensors = self
            .blocks
            .iter()
            .map(|&(k, b, a)| {
                Ok((
                    k,
                    LoraPair {
                        b: to_tensor(b, &self.theta)?,
                        a: to_tensor(a, &self.theta)?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Adapter::new(spec, self.rank, self.alpha, self.dropout, self.task_name.clone(), tensors)
    }
}

impl Trainable for LoraTrainable {
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
        let s = self.scale();
        for &(k, b, a) in &self.blocks {
            let g = &grads.sites[&k];
            let bv = b.view(&self.theta);
            let av = a.view(&self.theta);
            b.view_mut(&mut out).assign(&(g.dot(&av.t()) * s));
            a.view_mut(&mut out).assign(&(bv.t().dot(g) * s));
        }
        out
    }
}

/// Calibration parameters on top of a fixed merged delta `ΔW'`.
#[derive(Debug, Clone)]
pub struct CalibTrainable {
    theta: Vec<f64>,
    merged: Deltas,
    variant: CalibVariant,
    rank: usize,
    /// Bias: one `d_out × 1` block per component. LoRA: `(P2, P1)` per component.
    blocks: BTreeMap<ComponentKind, (Block, Option<Block>)>,
    shared_scope: SharedScope,
    task_label: String,
}

impl CalibTrainable {
    pub fn new(spec: &ModelSpec, merged: Deltas, calib: &CalibrationSet) -> Result<Self> {
        calib.check(spec)?;
        for (l, c) in spec.sites() {
            if !merged.contains_key(&(l, c)) {
                return Err(Error::Coverage { layer: l, component: c });
            }
        }
        let mut layout = Layout::default();
        let mut blocks = BTreeMap::new();
        let mut init: Vec<(Block, Array2<f64>)> = Vec::new();
        match &calib.params {
            CalibParams::Bias(b) => {
                for (&c, p) in &b.p {
                    let blk = layout.push(p.len(), 1);
                    init.push((blk, array_from_tensor(p).reversed_axes()));
                    blocks.insert(c, (blk, None));
                }
            }
            CalibParams::Lora(l) => {
                for (&c, f) in &l.factors {
                    let p2 = layout.push(f.p2.rows(), f.p2.cols());
                    let p1 = layout.push(f.p1.rows(), f.p1.cols());
                    init.push((p2, array_from_tensor(&f.p2)));
                    init.push((p1, array_from_tensor(&f.p1)));
                    blocks.insert(c, (p2, Some(p1)));
                }
            }
        }
        let mut theta = vec![0.0; layout.len];
        for (blk, a) in init {
            put(&mut theta, blk, &a);
        }
        Ok(Self {
            theta,
            merged,
            variant: calib.variant(),
            rank: calib.rank(),
            blocks,
            shared_scope: calib.shared_scope,
            task_label: calib.task_label.clone(),
        })
    }

    fn correction(&self, comp: ComponentKind, d_in: usize) -> Array2<f64> {
        let (first, second) = self.blocks[&comp];
        match second {
            None => {
                let p = first.view(&self.theta);
                Array2::from_shape_fn((p.nrows(), d_in), |(i, _)| p[[i, 0]])
            }
            Some(p1) => first.view(&self.theta).dot(&p1.view(&self.theta)),
        }
    }

    pub fn deltas(&self) -> Deltas {
        let corrections: BTreeMap<ComponentKind, Array2<f64>> = self
            .blocks
            .keys()
            .map(|&c| {
                let d_in = self.merged.iter().find(|((_, k), _)| *k == c).map_or(0, |(_, m)| m.ncols());
                (c, self.correction(c, d_in))
            })
            .collect();
        self.merged
            .iter()
            .map(|(&(l, c), m)| ((l, c), m + &corrections[&c]))
            .collect()
    }

    pub fn to_calibration(&self) -> Result<CalibrationSet> {
        let params = match self.variant {
            CalibVariant::Bias => CalibParams::Bias(CalibBias {
                p: self
                    .blocks
                    .iter()
                    .map(|(&c, &(b, _))| Ok((c, to_tensor(b, &self.theta)?.reshape(&[b.rows])?)))
                    .collect::<Result<_>>()?,
            }),
            CalibVariant::Lora => CalibParams::Lora(CalibLora {
                rank: self.rank,
                factors: self
                    .blocks
                    .iter()
                    .map(|(&c, &(p2, p1))| {
                        Ok((
                            c,
                            CalibLoraPair {
                                p2: to_tensor(p2, &self.theta)?,
                                p1: to_tensor(p1.expect("lora blocks come in pairs"), &self.theta)?,
                            },
                        ))
                    })
                    .collect::<Result<_>>()?,
            }),
        };
        Ok(CalibrationSet {
            params,
            shared_scope: self.shared_scope,
            task_label: self.task_label.clone(),
        })
    }
}

impl Trainable for CalibTrainable {
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
        for (&(_, c), g) in grads.sites.iter().filter(|(k, _)| self.merged.contains_key(k)) {
            let (first, second) = self.blocks[&c];
            match second {
                None => {
                    let mut dp = first.view_mut(&mut out);
                    for (i, row) in g.rows().into_iter().enumerate() {
                        dp[[i, 0]] += row.sum();
                    }
                }
                Some(p1) => {
                    let p2v = first.view(&self.theta);
                    let p1v = p1.view(&self.theta);
                    let d2 = g.dot(&p1v.t());
                    let d1 = p2v.t().dot(g);
                    first.view_mut(&mut out).scaled_add(1.0, &d2);
                    p1.view_mut(&mut out).scaled_add(1.0, &d1);
                }
            }
        }
        out
    }
}

/// Every base weight, for pretraining from scratch.
#[derive(Debug, Clone)]
pub struct BaseTrainable {
    theta: Vec<f64>,
    tok: Block,
    pos: Block,
    unembed: Block,
    sites: Vec<(SiteKey, Block)>,
}

impl BaseTrainable {
    pub fn new(model: &ToyModel) -> Self {
        let w = model.base();
        let mut layout = Layout::default();
        let tok = layout.push(w.tok_emb.nrows(), w.tok_emb.ncols());
        let pos = layout.push(w.pos_emb.nrows(), w.pos_emb.ncols());
        let unembed = layout.push(w.unembed.nrows(), w.unembed.ncols());
        let sites: Vec<_> = w.sites.iter().map(|(&k, m)| (k, layout.push(m.nrows(), m.ncols()))).collect();
        let mut theta = vec![0.0; layout.len];
        put(&mut theta, tok, &w.tok_emb);
        put(&mut theta, pos, &w.pos_emb);
        put(&mut theta, unembed, &w.unembed);
        for (k, b) in &sites {
            put(&mut theta, *b, &w.sites[k]);
        }
        Self {
            theta,
            tok,
            pos,
            unembed,
            sites,
        }
    }

    fn to_weights(&self) -> Weights {
        Weights {
            tok_emb: self.tok.view(&self.theta).to_owned(),
            pos_emb: self.pos.view(&self.theta).to_owned(),
            unembed: self.unembed.view(&self.theta).to_owned(),
            sites: self.sites.iter().map(|&(k, b)| (k, b.view(&self.theta).to_owned())).collect(),
        }
    }

    pub fn to_model(&self, spec: &ModelSpec) -> Result<ToyModel> {
        ToyModel::from_weights(spec, self.to_weights())
    }
}

impl Trainable for BaseTrainable {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn weights(&self, _model: &ToyModel) -> Weights {
        self.to_weights()
    }

    fn param_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.theta.len()];
        put(&mut out, self.tok, &grads.tok_emb);
        put(&mut out, self.pos, &grads.pos_emb);
        put(&mut out, self.unembed, &grads.unembed);
        for (k, b) in &self.sites {
            put(&mut out, *b, &grads.sites[k]);
        }
        out
    }
}

/// Trains every weight of a freshly initialized model on `data`.
pub fn pretrain_base(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    let init = ToyModel::init(spec, cfg.seed)?;
    let seqs = encode_dataset(data)?;
    let mut t = BaseTrainable::new(&init);
    let log = fit(&init, &mut t, &seqs, cfg)?;
    info!(
        "pretrained base: loss {:.4} -> {:.4}",
        log.losses.first().copied().unwrap_or(f64::NAN),
        log.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok((t.to_model(spec)?, log))
}

/// Trains a fresh LoRA (`B = 0`, `A` Kaiming-uniform) with the base frozen.
pub fn train_single_task_lora(
    model: &ToyModel,
    data: &Dataset,
    rank: usize,
    alpha: f32,
    cfg: &TrainConfig,
) -> Result<(Adapter, TrainLog)> {
    let spec = model.spec();
    let mut rng = SeededRng::derive(cfg.seed, &[0x6c6f_7261]);
    let task = data.examples.first().map(|e| e.task.clone()).unwrap_or_default();
    let init = Adapter::init(spec, rank, alpha, 0.0, &mut rng)?.with_task_name(task);
    let seqs = encode_dataset(data)?;
    let mut t = LoraTrainable::new(spec, &init)?;
    let log = fit(model, &mut t, &seqs, cfg)?;
    Ok((t.to_adapter(spec)?, log))
}

/// Options for [`train_calibration`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibOptions {
    pub variant: CalibVariant,
    pub rank: usize,
    pub scope: SharedScope,
    pub task_label: String,
}

/// Trains calibration parameters on top of a factor-form linear merge; only
/// the calibration parameters move.
pub fn train_calibration(
    model: &ToyModel,
    merged: &MergedAdapter,
    opts: &CalibOptions,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(CalibrationSet, TrainLog)> {
    if !merged.is_factor() {
        return Err(Error::invalid("calibration trains on top of a factor-form linear merge"));
    }
    let spec = model.spec();
    let mut rng = SeededRng::derive(cfg.seed, &[0x6361_6c69_62]);
    let init = CalibrationSet::init(spec, opts.variant, opts.rank, &mut rng, opts.scope, opts.task_label.clone())?;
    let base = super::deltas_from_tensors(&merged.materialize()?);
    let mut t = CalibTrainable::new(spec, base, &init)?;
    let seqs = encode_dataset(data)?;
    let log = fit(model, &mut t, &seqs, cfg)?;
    Ok((t.to_calibration()?, log))
}
