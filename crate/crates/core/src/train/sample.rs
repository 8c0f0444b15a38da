use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{BranchInput, ControlBatch, ModelBundle, TextBatch};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            cfg_scale: 4.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "sampling needs at least one step");
        ensure!(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite(), Config, "cfg_scale must be >= 0");
        Ok(())
    }
}

/// Anything that gives a velocity for a state at time `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// `v_u + s (v_c - v_u)`; scale 1 returns `v_c` and scale 0 returns `v_u` unchanged.
pub fn guided_velocity(v_uncond: &Tensor, v_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Euler steps from `t = 1` down to `t = 0`. Returns every state, noise first.
pub fn euler_trajectory(field: &impl VelocityField, noise: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    ensure!(steps >= 1, InvalidArgument, "sampling needs at least one step");
    let dt = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = noise.clone();
    states.push(x.clone());
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&x, t)?;
        ensure!(v.shape() == x.shape(), Shape, "velocity {:?} for state {:?}", v.shape(), x.shape());
        x = x.zip_map(&v, |a, b| a - dt * b)?;
        states.push(x.clone());
    }
    Ok(states)
}

pub fn euler_sample(field: &impl VelocityField, noise: &Tensor, steps: usize) -> Result<Tensor> {
    Ok(euler_trajectory(field, noise, steps)?.pop().expect("at least the initial state"))
}

/// The bundle under classifier-free guidance. The unconditional pass uses the
/// null caption and zeroes every control after its front-end.
pub struct Guided<'a> {
    bundle: &'a ModelBundle,
    text: &'a TextBatch,
    inputs: &'a [BranchInput<'a>],
    scale: f64,
}

impl<'a> Guided<'a> {
    pub fn new(bundle: &'a ModelBundle, text: &'a TextBatch, inputs: &'a [BranchInput<'a>], scale: f64) -> Result<Self> {
        ensure!(scale >= 0.0 && scale.is_finite(), InvalidArgument, "cfg scale must be >= 0");
        Ok(Self { bundle, text, inputs, scale })
    }

    fn conditional(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.bundle.velocity(x, t, self.text, self.inputs)
    }

    fn unconditional(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let b = self.text.batch();
        let null = TextBatch::null(&self.bundle.config().backbone, b);
        let off = vec![false; b];
        let inputs: Vec<BranchInput> = self.inputs.iter().map(|i| BranchInput { keep: Some(&off), ..*i }).collect();
        self.bundle.velocity(x, t, &null, &inputs)
    }

    /// Both passes as one batch of `2B` rows.
    fn both(&self, x: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
        let b = self.text.batch();
        let cfg = &self.bundle.config().backbone;
        let text = TextBatch::concat(&[self.text, &TextBatch::null(cfg, b)])?;
        let xx = Tensor::stack(&[x.clone(), x.clone()])?;
        let xx = xx.reshape(&[2 * b, x.shape()[1], x.shape()[2]])?;
        let tt: Vec<f64> = t.iter().chain(t).copied().collect();
        let stacked: Vec<ControlBatch> = self
            .inputs
            .iter()
            .map(|i| ControlBatch::stack(&[i.input.clone(), i.input.clone()]))
            .collect::<Result<_>>()?;
        let keeps: Vec<Vec<bool>> = self
            .inputs
            .iter()
            .map(|i| {
                let mut k = i.keep.map_or_else(|| vec![true; b], <[bool]>::to_vec);
                k.extend(std::iter::repeat_n(false, b));
                k
            })
            .collect();
        let inputs: Vec<BranchInput> = self
            .inputs
            .iter()
            .zip(&stacked)
            .zip(&keeps)
            .map(|((i, c), k)| BranchInput { name: i.name, input: c, keep: Some(k) })
            .collect();
        let v = self.bundle.velocity(&xx, &tt, &text, &inputs)?;
        let n = v.numel() / 2;
        let shape = x.shape();
        Ok((
            Tensor::new(shape, v.data()[n..].to_vec())?,
            Tensor::new(shape, v.data()[..n].to_vec())?,
        ))
    }
}

impl VelocityField for Guided<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let tv = vec![t; self.text.batch()];
        if self.scale == 1.0 {
            return self.conditional(x, &tv);
        }
        if self.scale == 0.0 {
            return self.unconditional(x, &tv);
        }
        let (u, c) = self.both(x, &tv)?;
        guided_velocity(&u, &c, self.scale)
    }
}

/// Draw `[B, frames, D]` noise from the config seed and integrate it to a latent.
pub fn sample(bundle: &ModelBundle, text: &TextBatch, inputs: &[BranchInput], frames: usize, cfg: &SampleConfig) -> Result<Tensor> {
    cfg.validate()?;
    ensure!(frames >= 1, InvalidArgument, "need at least one latent frame");
    let shape = [text.batch(), frames, bundle.config().backbone.latent_width];
    let noise = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    euler_sample(&Guided::new(bundle, text, inputs, cfg.cfg_scale)?, &noise, cfg.steps)
}
