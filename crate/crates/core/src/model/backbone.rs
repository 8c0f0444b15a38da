use super::blocks::{build_blocks, Block};
use super::config::BackboneConfig;
use super::layers::{chunks, modulate, timestep_embedding, Conv1d, Ctx, Init, Linear, ParamBuilder};
use crate::conditions::caption_embedding;
use crate::error::{ensure, Result};
use crate::tensor::{Graph, ParamId, Tensor, Var};

pub const PAD_TOKEN: usize = 0;
pub const NULL_TOKEN: usize = 1;

/// Tokenised captions for one batch. Null rows use the learned null token
/// and the learned null global vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    tokens: Vec<usize>,
    global: Tensor,
    null: Vec<bool>,
    len: usize,
}

impl TextBatch {
    /// `null[b]` (or an empty caption) replaces row `b` with the null embedding.
    pub fn new<S: AsRef<str>>(cfg: &BackboneConfig, captions: &[Vec<S>], null: &[bool]) -> Result<Self> {
        ensure!(captions.len() == null.len(), Shape, "{} captions but {} null flags", captions.len(), null.len());
        let (b, l) = (captions.len(), cfg.text_len);
        let mut tokens = vec![PAD_TOKEN; b * l];
        let mut global = vec![0.0; b * cfg.text_width];
        let mut is_null = vec![false; b];
        for (i, cap) in captions.iter().enumerate() {
            let mut ids = Vec::with_capacity(cap.len());
            for w in cap {
                let w = w.as_ref().trim().to_lowercase();
                match cfg.token_id(&w) {
                    Some(id) => ids.push(id),
                    None => return Err(crate::Error::InvalidArgument(format!("caption word {w:?} is not in the vocabulary"))),
                }
            }
            ids.sort_unstable();
            ids.dedup();
            ensure!(ids.len() <= l, InvalidArgument, "caption has {} distinct labels, limit is {l}", ids.len());
            if null[i] || ids.is_empty() {
                is_null[i] = true;
                tokens[i * l..(i + 1) * l].fill(NULL_TOKEN);
                continue;
            }
            tokens[i * l..i * l + ids.len()].copy_from_slice(&ids);
            let words: Vec<&str> = ids.iter().map(|&id| cfg.vocab[id - 2].as_str()).collect();
            let e = caption_embedding(&words)?.expect("non-empty caption");
            global[i * cfg.text_width..(i + 1) * cfg.text_width].copy_from_slice(&e);
        }
        Ok(Self {
            tokens,
            global: Tensor::new(&[b, cfg.text_width], global)?,
            null: is_null,
            len: l,
        })
    }

    pub fn null(cfg: &BackboneConfig, batch: usize) -> Self {
        let empty: Vec<Vec<&str>> = vec![Vec::new(); batch];
        Self::new(cfg, &empty, &vec![true; batch]).expect("null captions are always valid")
    }

    pub fn batch(&self) -> usize {
        self.null.len()
    }

    pub fn is_null(&self) -> &[bool] {
        &self.null
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Rows of every part in order.
    pub fn concat(parts: &[&TextBatch]) -> Result<Self> {
        ensure!(!parts.is_empty(), InvalidInput, "nothing to concatenate");
        let len = parts[0].len;
        ensure!(parts.iter().all(|p| p.len == len), Shape, "text batches differ in length");
        let globals: Vec<Tensor> = parts.iter().map(|p| p.global.clone()).collect();
        let w = globals[0].shape()[1];
        let data: Vec<f64> = globals.iter().flat_map(|g| g.data().iter().copied()).collect();
        let b = data.len() / w;
        Ok(Self {
            tokens: parts.iter().flat_map(|p| p.tokens.iter().copied()).collect(),
            global: Tensor::new(&[b, w], data)?,
            null: parts.iter().flat_map(|p| p.null.iter().copied()).collect(),
            len,
        })
    }

    /// Copy with the null flag forced on where `drop` is set.
    pub fn with_dropped(&self, drop: &[bool]) -> Self {
        let mut out = self.clone();
        for (i, &d) in drop.iter().enumerate() {
            if d {
                out.null[i] = true;
                out.tokens[i * self.len..(i + 1) * self.len].fill(NULL_TOKEN);
                let w = self.global.shape()[1];
                out.global.data_mut()[i * w..(i + 1) * w].fill(0.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Mmdit,
    Dit,
}

/// What a hook sees at layer `index`. For MMDiT layers the latent is the
/// audio stream; for DiT layers it is the whole `[text; audio]` sequence.
#[derive(Clone, Copy, Debug)]
pub struct LayerInfo<'a> {
    pub index: usize,
    pub kind: LayerKind,
    /// Rotary positions of the latent rows.
    pub positions: &'a [f64],
    pub heads: usize,
    pub rope_base: f64,
}

/// Backbone tokens shared with every branch.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub x: Var,
    pub c: Var,
    pub y: Var,
    pub silu_y: Var,
    pub audio_pos: Vec<f64>,
    pub joint_pos: Vec<f64>,
}

/// A branch that may add a residual after backbone layers.
pub trait LayerHook {
    fn name(&self) -> &str;
    fn prepare(&mut self, g: &mut Graph, ctx: &Ctx, emb: &Embedded) -> Result<()>;
    fn residual(&mut self, g: &mut Graph, ctx: &Ctx, info: &LayerInfo, z: Var) -> Result<Option<Var>>;
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: Var,
    /// Summed residual injected after each layer, if any.
    pub residuals: Vec<Option<Var>>,
    /// Each branch's own residual per layer, branches in name order.
    pub branch_residuals: Vec<(String, Vec<Option<Var>>)>,
    /// Text stream after each MMDiT layer.
    pub text: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    input: Linear,
    tokens: ParamId,
    null_global: ParamId,
    time_in: Linear,
    time_out: Linear,
    text_in: Linear,
    text_out: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head_in: Conv1d,
    head_out: Conv1d,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (h, p) = (config.hidden, BACKBONE_PREFIX);
        let lin = |pb: &mut ParamBuilder, n: &str, i, o, init| Linear::new(pb, &format!("{p}{n}"), i, o, true, init);
        Ok(Self {
            input: lin(pb, "input", config.latent_width, h, Init::Fan)?,
            tokens: pb.param(&format!("{p}tokens"), &[config.vocab.len() + 2, h], Init::Normal(1.0))?,
            null_global: pb.param(&format!("{p}null_global"), &[config.text_width], Init::Normal(1.0 / (config.text_width as f64).sqrt()))?,
            time_in: lin(pb, "time_in", h, h, Init::Fan)?,
            time_out: lin(pb, "time_out", h, h, Init::Fan)?,
            text_in: lin(pb, "text_in", config.text_width, h, Init::Fan)?,
            text_out: lin(pb, "text_out", h, h, Init::Fan)?,
            blocks: build_blocks(pb, p, &config, config.n_layers())?,
            final_mod: lin(pb, "final_mod", h, 2 * h, Init::Zeros)?,
            head_in: Conv1d::new(pb, &format!("{p}head_in"), h, h, 3, Init::Fan)?,
            head_out: Conv1d::new(pb, &format!("{p}head_out"), h, config.latent_width, 1, Init::Fan)?,
            config,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn attention_linears(&self) -> Vec<&Linear> {
        self.blocks.iter().flat_map(Block::attention_linears).collect()
    }

    /// `x_t: [B, T, latent]` and per-sample times into backbone tokens.
    pub fn embed(&self, g: &mut Graph, ctx: &Ctx, x_t: Var, t: &[f64], text: &TextBatch) -> Result<Embedded> {
        let cfg = &self.config;
        let s = g.shape(x_t).to_vec();
        ensure!(s.len() == 3 && s[2] == cfg.latent_width, Shape, "latent must be [B, T, {}], got {:?}", cfg.latent_width, s);
        let (b, frames) = (s[0], s[1]);
        ensure!(t.len() == b && text.batch() == b, Shape, "batch {b} but {} times and {} captions", t.len(), text.batch());
        let x = self.input.forward(g, ctx, x_t)?;

        let table = g.param(ctx.store, self.tokens);
        let c = g.embedding(table, text.tokens())?;
        let c = g.reshape(c, &[b, cfg.text_len, cfg.hidden])?;

        let stub = g.constant(text.global.clone());
        let mask = Tensor::new(&[b, 1], text.null.iter().map(|&n| if n { 1.0 } else { 0.0 }).collect())?;
        let mask = g.constant(mask);
        let null = g.param(ctx.store, self.null_global);
        let null = g.mul(null, mask)?;
        let glob = g.add(stub, null)?;
        let ty = self.text_in.forward(g, ctx, glob)?;
        let ty = g.silu(ty)?;
        let ty = self.text_out.forward(g, ctx, ty)?;

        let te = g.constant(timestep_embedding(t, cfg.hidden));
        let tt = self.time_in.forward(g, ctx, te)?;
        let tt = g.silu(tt)?;
        let tt = self.time_out.forward(g, ctx, tt)?;
        let y = g.add(tt, ty)?;
        let silu_y = g.silu(y)?;

        let audio_pos: Vec<f64> = (0..frames).map(|i| i as f64).collect();
        let joint_pos = std::iter::repeat_n(0.0, cfg.text_len).chain(audio_pos.iter().copied()).collect();
        Ok(Embedded { x, c, y, silu_y, audio_pos, joint_pos })
    }

    /// Velocity prediction; hooks run in name order and their residuals are summed.
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x_t: Var, t: &[f64], text: &TextBatch, hooks: &mut [&mut dyn LayerHook]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let emb = self.embed(g, ctx, x_t, t, text)?;
        hooks.sort_by(|a, b| a.name().cmp(b.name()));
        for w in hooks.windows(2) {
            ensure!(w[0].name() != w[1].name(), InvalidArgument, "branch {} given twice", w[0].name());
        }
        for h in hooks.iter_mut() {
            h.prepare(g, ctx, &emb)?;
        }
        let (mut x, mut c) = (emb.x, emb.c);
        let mut joint: Option<Var> = None;
        let mut residuals = Vec::with_capacity(self.blocks.len());
        let mut texts = Vec::new();
        let mut per_branch: Vec<(String, Vec<Option<Var>>)> = hooks.iter().map(|h| (h.name().to_string(), Vec::new())).collect();
        for (i, block) in self.blocks.iter().enumerate() {
            let (kind, z, positions) = match block {
                Block::Mmdit(b) => {
                    (x, c) = b.forward(g, ctx, x, c, emb.silu_y, &emb.audio_pos, cfg)?;
                    texts.push(c);
                    (LayerKind::Mmdit, x, &emb.audio_pos)
                }
                Block::Dit(b) => {
                    let s = match joint {
                        Some(s) => s,
                        None => g.concat(&[c, x], 1)?,
                    };
                    (LayerKind::Dit, b.forward(g, ctx, s, emb.silu_y, &emb.joint_pos, cfg)?, &emb.joint_pos)
                }
            };
            let info = LayerInfo {
                index: i,
                kind,
                positions,
                heads: cfg.heads,
                rope_base: cfg.rope_base,
            };
            let mut sum: Option<Var> = None;
            for (h, own) in hooks.iter_mut().zip(per_branch.iter_mut()) {
                let r = h.residual(g, ctx, &info, z)?;
                if let Some(r) = r {
                    ensure!(g.shape(r) == g.shape(z), Shape, "branch {} residual {:?} does not match latent {:?}", h.name(), g.shape(r), g.shape(z));
                    sum = Some(match sum {
                        Some(acc) => g.add(acc, r)?,
                        None => r,
                    });
                }
                own.1.push(r);
            }
            let z = match sum {
                Some(r) => g.add(z, r)?,
                None => z,
            };
            residuals.push(sum);
            match kind {
                LayerKind::Mmdit => x = z,
                LayerKind::Dit => joint = Some(z),
            }
        }
        if let Some(s) = joint {
            let t = g.shape(x)[1];
            x = g.narrow(s, 1, cfg.text_len, t)?;
        }
        let m = self.final_mod.forward(g, ctx, emb.silu_y)?;
        let b = g.shape(m)[0];
        let m = g.reshape(m, &[b, 1, 2 * cfg.hidden])?;
        let m = chunks(g, m, 2)?;
        let h = modulate(g, x, m[0], m[1])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let h = self.head_in.forward(g, ctx, h)?;
        let h = g.silu(h)?;
        let h = self.head_out.forward(g, ctx, h)?;
        let velocity = g.permute(h, &[0, 2, 1])?;
        Ok(ForwardOutput {
            velocity,
            residuals,
            branch_residuals: per_branch,
            text: texts,
        })
    }
}
