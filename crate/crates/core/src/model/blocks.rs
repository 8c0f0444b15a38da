use super::config::BackboneConfig;
use super::layers::{chunks, modulate, Ctx, Init, Linear, ParamBuilder};
use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Per-stream weights of one transformer layer with adaLN-Zero modulation.
#[derive(Clone, Debug)]
pub struct Stream {
    modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl Stream {
    fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        let h = cfg.hidden;
        let lin = |pb: &mut ParamBuilder, n: &str, i, o, init| Linear::new(pb, &format!("{prefix}.{n}"), i, o, true, init);
        Ok(Self {
            modulation: lin(pb, "mod", h, 6 * h, Init::Zeros)?,
            q: lin(pb, "q", h, h, Init::Fan)?,
            k: lin(pb, "k", h, h, Init::Fan)?,
            v: lin(pb, "v", h, h, Init::Fan)?,
            o: lin(pb, "o", h, h, Init::Fan)?,
            mlp_in: lin(pb, "mlp_in", h, cfg.mlp_ratio * h, Init::Fan)?,
            mlp_out: lin(pb, "mlp_out", cfg.mlp_ratio * h, h, Init::Fan)?,
        })
    }

    pub fn attention_linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    /// Six `[B, 1, H]` chunks: shift, scale, gate for attention then MLP.
    fn modulation(&self, g: &mut Graph, ctx: &Ctx, silu_y: Var) -> Result<Vec<Var>> {
        let m = self.modulation.forward(g, ctx, silu_y)?;
        let b = g.shape(m)[0];
        let w = g.shape(m)[1];
        let m = g.reshape(m, &[b, 1, w])?;
        chunks(g, m, 6)
    }

    fn qkv(&self, g: &mut Graph, ctx: &Ctx, h: Var, pos: Option<&[f64]>, cfg: &BackboneConfig) -> Result<[Var; 3]> {
        let mut q = self.q.forward(g, ctx, h)?;
        let mut k = self.k.forward(g, ctx, h)?;
        let v = self.v.forward(g, ctx, h)?;
        if let Some(p) = pos {
            q = g.rope(q, p, cfg.heads, cfg.rope_base)?;
            k = g.rope(k, p, cfg.heads, cfg.rope_base)?;
        }
        Ok([q, k, v])
    }

    fn finish(&self, g: &mut Graph, ctx: &Ctx, x: Var, attn: Var, m: &[Var]) -> Result<Var> {
        let a = self.o.forward(g, ctx, attn)?;
        let a = g.mul(a, m[2])?;
        let x = g.add(x, a)?;
        let h = modulate(g, x, m[3], m[4])?;
        let h = self.mlp_in.forward(g, ctx, h)?;
        let h = g.silu(h)?;
        let h = self.mlp_out.forward(g, ctx, h)?;
        let h = g.mul(h, m[5])?;
        g.add(x, h)
    }
}

/// Two-stream block: separate weights for text and audio tokens, one joint attention.
#[derive(Clone, Debug)]
pub struct MmditBlock {
    pub audio: Stream,
    pub text: Stream,
}

impl MmditBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            audio: Stream::new(pb, &format!("{prefix}.audio"), cfg)?,
            text: Stream::new(pb, &format!("{prefix}.text"), cfg)?,
        })
    }

    /// Returns the updated `(audio, text)` streams. Text tokens sit at position 0.
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, c: Var, silu_y: Var, audio_pos: &[f64], cfg: &BackboneConfig) -> Result<(Var, Var)> {
        let ma = self.audio.modulation(g, ctx, silu_y)?;
        let mc = self.text.modulation(g, ctx, silu_y)?;
        let hx = modulate(g, x, ma[0], ma[1])?;
        let hc = modulate(g, c, mc[0], mc[1])?;
        let [qx, kx, vx] = self.audio.qkv(g, ctx, hx, Some(audio_pos), cfg)?;
        let [qc, kc, vc] = self.text.qkv(g, ctx, hc, None, cfg)?;
        let q = g.concat(&[qc, qx], 1)?;
        let k = g.concat(&[kc, kx], 1)?;
        let v = g.concat(&[vc, vx], 1)?;
        let a = g.attention(q, k, v, cfg.heads)?;
        let (l, t) = (g.shape(c)[1], g.shape(x)[1]);
        let ac = g.narrow(a, 1, 0, l)?;
        let ax = g.narrow(a, 1, l, t)?;
        let x = self.audio.finish(g, ctx, x, ax, &ma)?;
        let c = self.text.finish(g, ctx, c, ac, &mc)?;
        Ok((x, c))
    }
}

/// Single-stream block over the concatenated `[text; audio]` sequence.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub stream: Stream,
}

impl DitBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            stream: Stream::new(pb, &format!("{prefix}.joint"), cfg)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, s: Var, silu_y: Var, pos: &[f64], cfg: &BackboneConfig) -> Result<Var> {
        let m = self.stream.modulation(g, ctx, silu_y)?;
        let h = modulate(g, s, m[0], m[1])?;
        let [q, k, v] = self.stream.qkv(g, ctx, h, Some(pos), cfg)?;
        let a = g.attention(q, k, v, cfg.heads)?;
        self.stream.finish(g, ctx, s, a, &m)
    }
}

/// Either kind of layer, in backbone order.
#[derive(Clone, Debug)]
pub enum Block {
    Mmdit(MmditBlock),
    Dit(DitBlock),
}

impl Block {
    pub fn attention_linears(&self) -> Vec<&Linear> {
        match self {
            Block::Mmdit(b) => b.audio.attention_linears().into_iter().chain(b.text.attention_linears()).collect(),
            Block::Dit(b) => b.stream.attention_linears().to_vec(),
        }
    }
}

/// The first `count` layers of a backbone laid out under `prefix`.
pub fn build_blocks(pb: &mut ParamBuilder, prefix: &str, cfg: &BackboneConfig, count: usize) -> Result<Vec<Block>> {
    (0..count)
        .map(|i| {
            let p = format!("{prefix}blocks.{i}");
            Ok(if i < cfg.n_mmdit {
                Block::Mmdit(MmditBlock::new(pb, &p, cfg)?)
            } else {
                Block::Dit(DitBlock::new(pb, &p, cfg)?)
            })
        })
        .collect()
}
