use super::backbone::{Backbone, Embedded, LayerHook, LayerInfo, BACKBONE_PREFIX};
use super::blocks::{build_blocks, Block};
use super::config::{AdapterConfig, BackboneConfig, BranchArch, BranchConfig, ControlNetConfig};
use super::layers::{Conv1d, Ctx, Init, Linear, LoraSet, ParamBuilder};
use crate::conditions::ConditionKind;
use crate::conditions::TEXT_WIDTH as EVENT_WIDTH;
use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Codebook rows for quantized pitch.
pub const PITCH_BINS: usize = 256;

/// Conditioning input for one branch over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlBatch {
    /// `[B, T, latent]` dense sequence (loudness).
    Dense(Tensor),
    /// Quantized pitch bins, `B × T × S` row-major.
    Pitch { bins: Vec<usize>, batch: usize, frames: usize, scales: usize },
    /// `[B, T, 64]` event indicator.
    Events(Tensor),
    /// Reference latent `[B, T, latent]` and `[B, T, 64]` edit-region indicator.
    Edit { reference: Tensor, events: Tensor },
}

impl ControlBatch {
    pub fn kind(&self) -> ConditionKind {
        match self {
            Self::Dense(_) => ConditionKind::Loudness,
            Self::Pitch { .. } => ConditionKind::Pitch,
            Self::Events(_) => ConditionKind::Event,
            Self::Edit { .. } => ConditionKind::Edit,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            Self::Dense(t) | Self::Events(t) | Self::Edit { events: t, .. } => t.shape().first().copied().unwrap_or(0),
            Self::Pitch { batch, .. } => *batch,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            Self::Dense(t) | Self::Events(t) | Self::Edit { events: t, .. } => t.shape().get(1).copied().unwrap_or(0),
            Self::Pitch { frames, .. } => *frames,
        }
    }

    /// Rows `start..start+len` of the batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(match self {
            Self::Dense(t) => Self::Dense(t.rows(start, len)?),
            Self::Events(t) => Self::Events(t.rows(start, len)?),
            Self::Edit { reference, events } => Self::Edit {
                reference: reference.rows(start, len)?,
                events: events.rows(start, len)?,
            },
            Self::Pitch { bins, batch, frames, scales } => {
                ensure!(start + len <= *batch, Shape, "rows {start}..{} out of {batch}", start + len);
                let per = frames * scales;
                Self::Pitch {
                    bins: bins[start * per..(start + len) * per].to_vec(),
                    batch: len,
                    frames: *frames,
                    scales: *scales,
                }
            }
        })
    }

    /// Nearest-frame resampling along time to `frames` rows.
    pub fn resample(&self, frames: usize) -> Result<Self> {
        let src = self.frames();
        ensure!(src > 0 && frames > 0, Shape, "cannot resample {src} frames to {frames}");
        let map: Vec<usize> = (0..frames).map(|j| (((j as f64 + 0.5) * src as f64 / frames as f64) as usize).min(src - 1)).collect();
        let pick = |t: &Tensor| -> Result<Tensor> {
            let (b, d) = (t.shape()[0], t.shape()[2]);
            let mut data = Vec::with_capacity(b * frames * d);
            for i in 0..b {
                for &m in &map {
                    let at = (i * src + m) * d;
                    data.extend_from_slice(&t.data()[at..at + d]);
                }
            }
            Tensor::new(&[b, frames, d], data)
        };
        Ok(match self {
            Self::Dense(t) => Self::Dense(pick(t)?),
            Self::Events(t) => Self::Events(pick(t)?),
            Self::Edit { reference, events } => Self::Edit {
                reference: pick(reference)?,
                events: pick(events)?,
            },
            Self::Pitch { bins, batch, scales, .. } => {
                let mut out = Vec::with_capacity(batch * frames * scales);
                for i in 0..*batch {
                    for &m in &map {
                        let at = (i * src + m) * scales;
                        out.extend_from_slice(&bins[at..at + scales]);
                    }
                }
                Self::Pitch { bins: out, batch: *batch, frames, scales: *scales }
            }
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack(parts: &[ControlBatch]) -> Result<Self> {
        ensure!(!parts.is_empty(), InvalidInput, "nothing to stack");
        let tensors = |f: &dyn Fn(&ControlBatch) -> Option<Tensor>| -> Result<Vec<Tensor>> {
            parts.iter().map(|p| f(p).ok_or_else(|| Error::InvalidInput("mixed control kinds".into()))).collect()
        };
        let cat = |ts: Vec<Tensor>| -> Result<Tensor> {
            let s = ts[0].shape().to_vec();
            let mut data = Vec::new();
            let mut b = 0;
            for t in &ts {
                ensure!(t.shape()[1..] == s[1..], Shape, "cannot stack {:?} with {:?}", t.shape(), s);
                b += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = s.clone();
            shape[0] = b;
            Tensor::new(&shape, data)
        };
        Ok(match &parts[0] {
            Self::Dense(_) => Self::Dense(cat(tensors(&|p| match p {
                Self::Dense(t) => Some(t.clone()),
                _ => None,
            })?)?),
            Self::Events(_) => Self::Events(cat(tensors(&|p| match p {
                Self::Events(t) => Some(t.clone()),
                _ => None,
            })?)?),
            Self::Edit { .. } => Self::Edit {
                reference: cat(tensors(&|p| match p {
                    Self::Edit { reference, .. } => Some(reference.clone()),
                    _ => None,
                })?)?,
                events: cat(tensors(&|p| match p {
                    Self::Edit { events, .. } => Some(events.clone()),
                    _ => None,
                })?)?,
            },
            Self::Pitch { frames, scales, .. } => {
                let mut bins = Vec::new();
                let mut batch = 0;
                for p in parts {
                    match p {
                        Self::Pitch { bins: b, batch: n, frames: f, scales: s } if f == frames && s == scales => {
                            bins.extend_from_slice(b);
                            batch += n;
                        }
                        _ => return Err(Error::InvalidInput("cannot stack mismatched pitch codes".into())),
                    }
                }
                Self::Pitch { bins, batch, frames: *frames, scales: *scales }
            }
        })
    }
}

/// Learned map from a raw condition to a `[B, T, D]` sequence.
#[derive(Clone, Debug)]
pub enum FrontEnd {
    Dense,
    Pitch { codebook: ParamId },
    Events { w: ParamId },
    Edit { w: ParamId },
}

impl FrontEnd {
    fn new(pb: &mut ParamBuilder, prefix: &str, kind: ConditionKind, width: usize) -> Result<Self> {
        Ok(match kind {
            ConditionKind::Loudness => Self::Dense,
            ConditionKind::Pitch => Self::Pitch {
                codebook: pb.param(&format!("{prefix}codebook"), &[PITCH_BINS, width], Init::Normal(1.0))?,
            },
            ConditionKind::Event => Self::Events {
                w: pb.param(&format!("{prefix}event_proj"), &[EVENT_WIDTH, width], Init::Fan)?,
            },
            ConditionKind::Edit => Self::Edit {
                w: pb.param(&format!("{prefix}edit_proj"), &[EVENT_WIDTH, width], Init::Fan)?,
            },
        })
    }

    /// Output width given the backbone latent width.
    pub fn width(&self, latent: usize) -> usize {
        match self {
            Self::Edit { .. } => 2 * latent,
            _ => latent,
        }
    }

    fn forward(&self, g: &mut Graph, ctx: &Ctx, input: &ControlBatch, latent: usize) -> Result<Var> {
        let check = |t: &Tensor, d: usize, what: &str| {
            ensure!(t.rank() == 3 && t.shape()[2] == d, Shape, "{what} must be [B, T, {d}], got {:?}", t.shape());
            Ok(())
        };
        match (self, input) {
            (Self::Dense, ControlBatch::Dense(t)) => {
                check(t, latent, "dense condition")?;
                Ok(g.constant(t.clone()))
            }
            (Self::Pitch { codebook }, ControlBatch::Pitch { bins, batch, frames, scales }) => {
                ensure!(bins.len() == batch * frames * scales && *scales >= 1, Shape, "pitch code has {} bins for {batch}×{frames}×{scales}", bins.len());
                let cb = g.param(ctx.store, *codebook);
                let e = g.embedding(cb, bins)?;
                let e = g.reshape(e, &[batch * frames, *scales, latent])?;
                let e = g.transpose(e)?;
                let ones = g.constant(Tensor::full(&[*scales, 1], 1.0 / *scales as f64));
                let m = g.matmul(e, ones)?;
                g.reshape(m, &[*batch, *frames, latent])
            }
            (Self::Events { w }, ControlBatch::Events(t)) => {
                check(t, EVENT_WIDTH, "event indicator")?;
                let x = g.constant(t.clone());
                let w = g.param(ctx.store, *w);
                g.matmul(x, w)
            }
            (Self::Edit { w }, ControlBatch::Edit { reference, events }) => {
                check(reference, latent, "reference latent")?;
                check(events, EVENT_WIDTH, "edit indicator")?;
                ensure!(reference.shape()[..2] == events.shape()[..2], Shape, "reference {:?} and indicator {:?} disagree", reference.shape(), events.shape());
                let r = g.constant(reference.clone());
                let x = g.constant(events.clone());
                let w = g.param(ctx.store, *w);
                let e = g.matmul(x, w)?;
                g.concat(&[r, e], 2)
            }
            _ => Err(Error::InvalidArgument(format!("branch expects a different condition than {}", input.kind()))),
        }
    }
}

#[derive(Clone, Debug)]
struct AdapterLayer {
    query: Option<Linear>,
    kv: Option<Linear>,
    zero: Linear,
}

/// Shared conv encoder producing keys/values, cross-attended by the latent at
/// each of the first `depth` layers, with zero-initialised outputs.
#[derive(Clone, Debug)]
pub struct Adapter {
    encoder: [Conv1d; 3],
    layers: Vec<AdapterLayer>,
}

impl Adapter {
    fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &AdapterConfig, bb: &BackboneConfig, in_width: usize) -> Result<Self> {
        let (e, h, k) = (cfg.encoder_hidden, bb.hidden, cfg.kernel);
        let encoder = [
            Conv1d::new(pb, &format!("{prefix}enc.0"), in_width, e, k, Init::Fan)?,
            Conv1d::new(pb, &format!("{prefix}enc.1"), e, e, k, Init::Fan)?,
            Conv1d::new(pb, &format!("{prefix}enc.2"), e, 2 * h, k, Init::Fan)?,
        ];
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("{prefix}layers.{i}");
                Ok(AdapterLayer {
                    query: if cfg.query_proj {
                        Some(Linear::new(pb, &format!("{p}.query"), h, h, true, Init::Fan)?)
                    } else {
                        None
                    },
                    kv: if cfg.per_layer_kv {
                        Some(Linear::new(pb, &format!("{p}.kv"), 2 * h, 2 * h, true, Init::Fan)?)
                    } else {
                        None
                    },
                    zero: Linear::new(pb, &format!("{p}.zero"), h, h, true, Init::Zeros)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { encoder, layers })
    }

    /// `[B, T, C] → [B, T, 2H]`.
    fn encode(&self, g: &mut Graph, ctx: &Ctx, cond: Var) -> Result<Var> {
        let mut h = g.permute(cond, &[0, 2, 1])?;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(g, ctx, h)?;
            if i + 1 < self.encoder.len() {
                h = g.silu(h)?;
            }
        }
        g.permute(h, &[0, 2, 1])
    }

    fn layer(&self, g: &mut Graph, ctx: &Ctx, info: &LayerInfo, z: Var, kv: Var, cond_pos: &[f64]) -> Result<Option<Var>> {
        let Some(layer) = self.layers.get(info.index) else {
            return Ok(None);
        };
        let q = match &layer.query {
            Some(p) => {
                let n = g.layer_norm(z, 1e-6)?;
                p.forward(g, ctx, n)?
            }
            None => z,
        };
        let kv = match &layer.kv {
            Some(p) => p.forward(g, ctx, kv)?,
            None => kv,
        };
        let h = *g.shape(q).last().expect("rank 3");
        let k = g.narrow(kv, 2, 0, h)?;
        let v = g.narrow(kv, 2, h, h)?;
        let q = g.rope(q, info.positions, info.heads, info.rope_base)?;
        let k = g.rope(k, cond_pos, info.heads, info.rope_base)?;
        let a = g.attention(q, k, v, info.heads)?;
        Ok(Some(layer.zero.forward(g, ctx, a)?))
    }
}

/// Trainable copy of the first `depth` backbone layers driven by the condition.
#[derive(Clone, Debug)]
pub struct ControlNet {
    backbone: BackboneConfig,
    input: Linear,
    blocks: Vec<Block>,
    outputs: Vec<Linear>,
}

impl ControlNet {
    fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &ControlNetConfig, bb: &BackboneConfig, in_width: usize) -> Result<Self> {
        copy_prefix(pb.store_mut(), &format!("{BACKBONE_PREFIX}blocks."), &format!("{prefix}blocks."), cfg.depth)?;
        Ok(Self {
            backbone: bb.clone(),
            input: Linear::new(pb, &format!("{prefix}zero_in"), in_width, bb.hidden, true, Init::Zeros)?,
            blocks: build_blocks(pb, prefix, bb, cfg.depth)?,
            outputs: (0..cfg.depth)
                .map(|i| Linear::new(pb, &format!("{prefix}zero_out.{i}"), bb.hidden, bb.hidden, true, Init::Zeros))
                .collect::<Result<_>>()?,
        })
    }

    fn residuals(&self, g: &mut Graph, ctx: &Ctx, emb: &Embedded, cond: Var) -> Result<Vec<Var>> {
        let cfg = &self.backbone;
        let mut x = self.input.forward(g, ctx, cond)?;
        let mut c = emb.c;
        let mut joint: Option<Var> = None;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, zero) in self.blocks.iter().zip(&self.outputs) {
            let z = match block {
                Block::Mmdit(b) => {
                    (x, c) = b.forward(g, ctx, x, c, emb.silu_y, &emb.audio_pos, cfg)?;
                    x
                }
                Block::Dit(b) => {
                    let s = match joint {
                        Some(s) => s,
                        None => g.concat(&[c, x], 1)?,
                    };
                    let s = b.forward(g, ctx, s, emb.silu_y, &emb.joint_pos, cfg)?;
                    joint = Some(s);
                    s
                }
            };
            out.push(zero.forward(g, ctx, z)?);
        }
        Ok(out)
    }
}

/// Clone `from{i}.*` to `to{i}.*` for `i < depth`, skipping names already present.
fn copy_prefix(store: &mut ParamStore, from: &str, to: &str, depth: usize) -> Result<()> {
    let copies: Vec<(String, Tensor)> = store
        .iter()
        .filter_map(|(_, name, v)| {
            let rest = name.strip_prefix(from)?;
            let layer: usize = rest.split('.').next()?.parse().ok()?;
            (layer < depth).then(|| (format!("{to}{rest}"), v.clone()))
        })
        .collect();
    for (name, v) in copies {
        if store.id(&name).is_none() {
            store.add(name, v)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Arch {
    ControlNet(ControlNet),
    Adapter(Adapter),
}

/// One built branch (controller or editor).
#[derive(Clone, Debug)]
pub struct Branch {
    config: BranchConfig,
    latent: usize,
    front: FrontEnd,
    arch: Arch,
    lora: Option<LoraSet>,
}

impl Branch {
    pub fn new(pb: &mut ParamBuilder, backbone: &Backbone, config: BranchConfig) -> Result<Self> {
        let bb = &backbone.config;
        config.validate(bb)?;
        let prefix = config.prefix();
        let front = FrontEnd::new(pb, &prefix, config.condition, bb.latent_width)?;
        let in_width = front.width(bb.latent_width);
        let arch = match &config.arch {
            BranchArch::ControlNet(c) => Arch::ControlNet(ControlNet::new(pb, &prefix, c, bb, in_width)?),
            BranchArch::Adapter(a) => Arch::Adapter(Adapter::new(pb, &prefix, a, bb, in_width)?),
        };
        let lora = match config.lora {
            Some(l) => Some(LoraSet::new(pb, &format!("{prefix}lora."), &backbone.attention_linears(), l.rank, l.alpha)?),
            None => None,
        };
        Ok(Self {
            latent: bb.latent_width,
            config,
            front,
            arch,
            lora,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn kind(&self) -> ConditionKind {
        self.config.condition
    }

    pub fn lora(&self) -> Option<&LoraSet> {
        self.lora.as_ref()
    }

    /// Condition sequence after the learned front-end, with dropped rows zeroed.
    pub fn front_end(&self, g: &mut Graph, ctx: &Ctx, input: &ControlBatch, keep: Option<&[bool]>) -> Result<Var> {
        let x = self.front.forward(g, ctx, input, self.latent)?;
        match keep {
            Some(k) if k.iter().any(|&v| !v) => {
                ensure!(k.len() == input.batch(), Shape, "{} keep flags for batch {}", k.len(), input.batch());
                let m = Tensor::new(&[k.len(), 1, 1], k.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
                let m = g.constant(m);
                let x = g.mul(x, m)?;
                // turn the -0.0 of negative entries into +0.0
                g.add_scalar(x, 0.0)
            }
            _ => Ok(x),
        }
    }

    pub fn bind<'a>(&'a self, input: &'a ControlBatch, keep: Option<&'a [bool]>) -> ActiveBranch<'a> {
        ActiveBranch {
            branch: self,
            input,
            keep,
            state: State::Idle,
        }
    }
}

enum State {
    Idle,
    ControlNet(Vec<Var>),
    Adapter { kv: Var, positions: Vec<f64> },
}

/// A branch bound to its input for one forward pass.
pub struct ActiveBranch<'a> {
    branch: &'a Branch,
    input: &'a ControlBatch,
    keep: Option<&'a [bool]>,
    state: State,
}

impl LayerHook for ActiveBranch<'_> {
    fn name(&self) -> &str {
        self.branch.name()
    }

    fn prepare(&mut self, g: &mut Graph, ctx: &Ctx, emb: &Embedded) -> Result<()> {
        let b = g.shape(emb.x)[0];
        ensure!(self.input.batch() == b, Shape, "branch {} got batch {} for latent batch {b}", self.branch.name(), self.input.batch());
        let frames = emb.audio_pos.len();
        let src = self.input.frames();
        let name = self.branch.name();
        ensure!(
            src == frames || self.input.kind() != ConditionKind::Edit,
            Shape,
            "branch {name} reference has {src} frames, latent has {frames}"
        );
        self.state = match &self.branch.arch {
            Arch::ControlNet(cn) => {
                let resampled;
                let input = if src == frames {
                    self.input
                } else {
                    resampled = self.input.resample(frames)?;
                    &resampled
                };
                let cond = self.branch.front_end(g, ctx, input, self.keep)?;
                State::ControlNet(cn.residuals(g, ctx, emb, cond)?)
            }
            Arch::Adapter(a) => {
                // keys live on the latent's time axis whatever the condition length
                let cond = self.branch.front_end(g, ctx, self.input, self.keep)?;
                let step = frames as f64 / src as f64;
                State::Adapter {
                    kv: a.encode(g, ctx, cond)?,
                    positions: (0..src).map(|j| (j as f64 + 0.5) * step - 0.5).collect(),
                }
            }
        };
        Ok(())
    }

    fn residual(&mut self, g: &mut Graph, ctx: &Ctx, info: &LayerInfo, z: Var) -> Result<Option<Var>> {
        match (&self.state, &self.branch.arch) {
            (State::ControlNet(r), _) => Ok(r.get(info.index).copied()),
            (State::Adapter { kv, positions }, Arch::Adapter(a)) => a.layer(g, ctx, info, z, *kv, positions),
            _ => Err(Error::InvalidArgument(format!("branch {} used before prepare", self.branch.name()))),
        }
    }
}
