//! Flow-matching training, guidance and Euler sampling.

mod sample;

pub use sample::{euler_sample, euler_trajectory, guided_velocity, sample, Guided, SampleConfig, VelocityField};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{BranchInput, Component, ControlBatch, ModelBundle, TextBatch};
use crate::tensor::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditLossWeights {
    pub alpha_edit: f64,
    pub alpha_no_edit: f64,
}

impl Default for EditLossWeights {
    fn default() -> Self {
        Self {
            alpha_edit: 10.0,
            alpha_no_edit: 1.0,
        }
    }
}

impl EditLossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha_edit > 0.0 && self.alpha_no_edit > 0.0 && self.alpha_edit.is_finite() && self.alpha_no_edit.is_finite(),
            Config,
            "edit loss weights must be positive"
        );
        Ok(())
    }

    fn weight(&self, edited: bool) -> f64 {
        if edited {
            self.alpha_edit
        } else {
            self.alpha_no_edit
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Probability of dropping caption and control together.
    pub cfg_drop_prob: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub edit_weights: EditLossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            steps: 1000,
            cfg_drop_prob: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            edit_weights: EditLossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), Config, "learning_rate must be positive");
        ensure!((0.0..1.0).contains(&self.cfg_drop_prob), Config, "cfg_drop_prob must be in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), Config, "betas must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0 && self.grad_clip >= 0.0, Config, "weight_decay and grad_clip must be >= 0");
        self.edit_weights.validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Mean squared error against the flow target `eps - x0`.
pub fn flow_loss(model_out: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<f64> {
    ensure!(
        model_out.shape() == x0.shape() && x0.shape() == eps.shape(),
        Shape,
        "flow loss shapes {:?} {:?} {:?} differ",
        model_out.shape(),
        x0.shape(),
        eps.shape()
    );
    ensure!(model_out.numel() > 0, InvalidInput, "flow loss of an empty tensor");
    let s: f64 = model_out
        .data()
        .iter()
        .zip(x0.data().iter().zip(eps.data()))
        .map(|(o, (x, e))| (o - (e - x)).powi(2))
        .sum();
    Ok(s / model_out.numel() as f64)
}

/// Per-row weights `w_t / (D Σ w)` for a `[B, T, D]` output.
fn edit_weight_tensor(shape: &[usize], mask: &[bool], w: &EditLossWeights) -> Result<Tensor> {
    w.validate()?;
    ensure!(shape.len() == 3, Shape, "edit loss needs [B, T, D], got {shape:?}");
    let rows = shape[0] * shape[1];
    ensure!(rows > 0 && shape[2] > 0, InvalidInput, "edit loss of an empty tensor");
    ensure!(mask.len() == rows, Shape, "edit mask has {} frames for {rows}", mask.len());
    let total: f64 = mask.iter().map(|&m| w.weight(m)).sum();
    let norm = total * shape[2] as f64;
    Tensor::new(&[shape[0], shape[1], 1], mask.iter().map(|&m| w.weight(m) / norm).collect())
}

/// Frame-weighted squared error: `Σ_t w_t ‖err_t‖² / (D Σ_t w_t)`; `mask` is `B·T` frames.
pub fn edit_loss(model_out: &Tensor, target: &Tensor, mask: &[bool], w: &EditLossWeights) -> Result<f64> {
    ensure!(model_out.shape() == target.shape(), Shape, "edit loss shapes {:?} and {:?} differ", model_out.shape(), target.shape());
    let wt = edit_weight_tensor(model_out.shape(), mask, w)?;
    let d = model_out.shape()[2];
    Ok(model_out
        .data()
        .chunks(d)
        .zip(target.data().chunks(d))
        .zip(wt.data())
        .map(|((o, t), w)| w * o.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum())
}

fn flow_loss_var(g: &mut Graph, out: Var, target: Var) -> Result<Var> {
    let e = g.sub(out, target)?;
    let sq = g.mul(e, e)?;
    g.mean(sq)
}

fn edit_loss_var(g: &mut Graph, out: Var, target: Var, mask: &[bool], w: &EditLossWeights) -> Result<Var> {
    let wt = edit_weight_tensor(g.shape(out), mask, w)?;
    let wt = g.constant(wt);
    let e = g.sub(out, target)?;
    let sq = g.mul(e, e)?;
    let weighted = g.mul(sq, wt)?;
    g.sum(weighted)
}

/// One training item: a latent `[T, D]`, its caption, and the branch input
/// (batch of one) plus an edit mask over latent frames when training an editor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub latent: Tensor,
    pub caption: Vec<String>,
    pub control: Option<ControlBatch>,
    pub edit_mask: Option<Vec<bool>>,
}

/// Metrics of one optimisation step (one JSON line of the log).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// What a [`Trainer`] updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Backbone,
    /// A branch; the backbone stays frozen.
    Branch(String),
}

struct Prepared {
    xt: Tensor,
    target: Tensor,
    t: Vec<f64>,
    drop: Vec<bool>,
    keep: Vec<bool>,
    text: TextBatch,
    control: Option<ControlBatch>,
    mask: Option<Vec<bool>>,
}

pub struct Trainer<'a> {
    bundle: &'a mut ModelBundle,
    target: Target,
    config: TrainConfig,
    trainable: Vec<ParamId>,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    null_uses: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a mut ModelBundle, target: Target, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let trainable = match &target {
            Target::Backbone => bundle.ids(&Component::Backbone),
            Target::Branch(n) => {
                ensure!(bundle.branch(n).is_some(), InvalidArgument, "no branch named {n}");
                bundle.ids(&Component::Branch(n.clone()))
            }
        };
        ensure!(!trainable.is_empty(), Config, "nothing to train");
        Ok(Self {
            bundle,
            target,
            opt: AdamW::new(config.adamw()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            trainable,
            step: 0,
            null_uses: 0,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Rows whose caption and control were replaced by the null condition so far.
    pub fn null_uses(&self) -> u64 {
        self.null_uses
    }

    /// Noised inputs, targets and conditions for a batch.
    fn prepare(&self, batch: &[&TrainExample], rng: &mut ChaCha8Rng, drop_prob: f64) -> Result<Prepared> {
        ensure!(!batch.is_empty(), InvalidInput, "empty batch");
        let shape = batch[0].latent.shape().to_vec();
        ensure!(shape.len() == 2, Shape, "latent must be [T, D], got {shape:?}");
        for ex in batch {
            ensure!(ex.latent.shape() == shape, Shape, "batch latents differ in shape");
        }
        let b = batch.len();
        let x0 = Tensor::stack(&batch.iter().map(|e| e.latent.clone()).collect::<Vec<_>>())?;
        let eps = Tensor::randn(&[b, shape[0], shape[1]], 1.0, rng);
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let drop: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < drop_prob).collect();

        let per = shape[0] * shape[1];
        let mut xt = x0.clone();
        for (row, &tb) in t.iter().enumerate() {
            let r = row * per..(row + 1) * per;
            for (v, e) in xt.data_mut()[r.clone()].iter_mut().zip(&eps.data()[r]) {
                *v = (1.0 - tb) * *v + tb * e;
            }
        }
        let target = eps.zip_map(&x0, |e, x| e - x)?;

        let captions: Vec<Vec<&str>> = batch.iter().map(|e| e.caption.iter().map(String::as_str).collect()).collect();
        let text = self.bundle.text_batch(&captions, &drop)?;
        let control = match &self.target {
            Target::Backbone => None,
            Target::Branch(_) => {
                let parts = batch
                    .iter()
                    .map(|e| e.control.clone().ok_or_else(|| Error::InvalidInput("branch training needs a control input".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(ControlBatch::stack(&parts)?)
            }
        };
        let mask = if batch.iter().any(|e| e.edit_mask.is_some()) {
            let mut m = Vec::with_capacity(b * shape[0]);
            for e in batch {
                let em = e.edit_mask.as_ref().ok_or_else(|| Error::InvalidInput("edit masks must be given for every example".into()))?;
                ensure!(em.len() == shape[0], Shape, "edit mask has {} frames, latent has {}", em.len(), shape[0]);
                m.extend_from_slice(em);
            }
            Some(m)
        } else {
            None
        };
        Ok(Prepared {
            xt,
            target,
            t,
            keep: drop.iter().map(|d| !d).collect(),
            drop,
            text,
            control,
            mask,
        })
    }

    fn loss(&self, g: &mut Graph, p: &Prepared) -> Result<Var> {
        let xv = g.constant(p.xt.clone());
        let inputs: Vec<BranchInput> = match (&self.target, &p.control) {
            (Target::Branch(name), Some(c)) => vec![BranchInput { name, input: c, keep: Some(&p.keep) }],
            _ => Vec::new(),
        };
        let out = self.bundle.forward(g, xv, &p.t, &p.text, &inputs).map_err(|e| self.diagnose(e, &p.t))?;
        let tv = g.constant(p.target.clone());
        match &p.mask {
            Some(m) => edit_loss_var(g, out.velocity, tv, m, &self.config.edit_weights),
            None => flow_loss_var(g, out.velocity, tv),
        }
    }

    /// Loss on `batch` with noise and times drawn from `seed` and nothing dropped; no update.
    pub fn eval_loss(&self, batch: &[&TrainExample], seed: u64) -> Result<f64> {
        let p = self.prepare(batch, &mut ChaCha8Rng::seed_from_u64(seed), 0.0)?;
        let mut g = Graph::no_grad();
        let l = self.loss(&mut g, &p)?;
        Ok(g.value(l).item())
    }

    /// One step on an explicit batch.
    pub fn step(&mut self, batch: &[&TrainExample]) -> Result<StepStats> {
        let mut rng = self.rng.clone();
        let p = self.prepare(batch, &mut rng, self.config.cfg_drop_prob)?;
        self.rng = rng;
        self.null_uses += p.drop.iter().filter(|&&d| d).count() as u64;
        let mut g = Graph::with_trainable(self.trainable.iter().copied());
        let loss = self.loss(&mut g, &p)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(self.diagnose(Error::NonFinite(format!("loss {loss_value}")), &p.t));
        }
        let grads = g.backward(loss)?;
        let mut owned: Vec<(ParamId, Tensor)> = grads.params().into_iter().map(|(id, g)| (id, g.clone())).collect();
        let norm = if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut owned, self.config.grad_clip)
        } else {
            grad_norm(&owned.iter().map(|(i, g)| (*i, g)).collect::<Vec<_>>())
        };
        if !norm.is_finite() {
            return Err(self.diagnose(Error::NonFinite(format!("gradient norm {norm}")), &p.t));
        }
        let refs: Vec<(ParamId, &Tensor)> = owned.iter().map(|(i, g)| (*i, g)).collect();
        self.opt.step(&mut self.bundle.store, &refs);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss_value,
            grad_norm: norm,
            lr: self.config.learning_rate,
        })
    }

    fn diagnose(&self, e: Error, t: &[f64]) -> Error {
        match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at step {} (target {:?}, t = {t:?})", self.step + 1, self.target)),
            other => other,
        }
    }

    /// Draw a batch with replacement and take one step.
    pub fn step_random(&mut self, data: &[TrainExample]) -> Result<StepStats> {
        ensure!(!data.is_empty(), InvalidInput, "no training examples");
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..data.len())).collect();
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &data[i]).collect();
        self.step(&batch)
    }

    /// Run the configured number of steps, writing one JSON line per step to `log`.
    pub fn run(&mut self, data: &[TrainExample], mut log: Option<&mut dyn Write>, mut on_step: impl FnMut(&StepStats, &ModelBundle) -> Result<()>) -> Result<Vec<StepStats>> {
        let mut all = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let s = self.step_random(data)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &s)?;
                w.write_all(b"\n")?;
            }
            on_step(&s, self.bundle)?;
            all.push(s);
        }
        Ok(all)
    }
}
