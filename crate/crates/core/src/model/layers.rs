use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`, fan-in taken from the first axis
    /// (or the product of the trailing axes for rank-3 conv kernels).
    Fan,
}

/// Creates parameters on first use, binds to existing ones otherwise.
///
/// In strict mode a missing parameter is an error; that is how checkpoints
/// are re-bound.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    strict: bool,
    touched: HashSet<ParamId>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            strict: false,
            touched: HashSet::new(),
        }
    }

    pub fn strict(store: &'a mut ParamStore) -> Self {
        Self {
            strict: true,
            ..Self::new(store, 0)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if let Some(id) = self.store.id(name) {
            let have = self.store.value(id).shape();
            if have != shape {
                let msg = format!("parameter {name} has shape {:?}, expected {:?}", have, shape);
                return Err(if self.strict { Error::Incompatible(msg) } else { Error::Config(msg) });
            }
            self.touched.insert(id);
            return Ok(id);
        }
        if self.strict {
            return Err(Error::Incompatible(format!("missing parameter {name}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Fan => {
                let fan_in = if shape.len() == 3 { shape[1] * shape[2] } else { shape[0] };
                Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), &mut self.rng)
            }
        };
        let id = self.store.add(name, value)?;
        self.touched.insert(id);
        Ok(id)
    }

    /// Distinct parameters created or bound so far.
    pub fn touched(&self) -> usize {
        self.touched.len()
    }
}

/// Read-only view used by every forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub lora: Option<&'a LoraSet>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, lora: None }
    }

    pub fn with_lora(store: &'a ParamStore, lora: Option<&'a LoraSet>) -> Self {
        Self { store, lora }
    }
}

/// `y = x·W + b` on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let w = pb.param(&format!("{name}.w"), &[in_dim, out_dim], init)?;
        let b = if bias {
            Some(pb.param(&format!("{name}.b"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = g.param(ctx.store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(ctx.store, b);
            y = g.add(y, b)?;
        }
        if let Some(l) = ctx.lora.and_then(|set| set.get(&self.name)) {
            let a = g.param(ctx.store, l.a);
            let bb = g.param(ctx.store, l.b);
            let h = g.matmul(x, a)?;
            let h = g.matmul(h, bb)?;
            let h = g.scale(h, l.scale)?;
            y = g.add(y, h)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// Low-rank deltas `ΔW = (α/r)·A·B` keyed by the name of the adapted linear.
/// `B` starts at zero, so a fresh set changes nothing.
#[derive(Clone, Debug, Default)]
pub struct LoraSet {
    pairs: HashMap<String, LoraPair>,
}

impl LoraSet {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, targets: &[&Linear], rank: usize, alpha: f64) -> Result<Self> {
        let mut pairs = HashMap::new();
        for lin in targets {
            let a = pb.param(&format!("{prefix}{}.a", lin.name()), &[lin.in_dim, rank], Init::Fan)?;
            let b = pb.param(&format!("{prefix}{}.b", lin.name()), &[rank, lin.out_dim], Init::Zeros)?;
            pairs.insert(
                lin.name().to_string(),
                LoraPair {
                    a,
                    b,
                    scale: alpha / rank as f64,
                },
            );
        }
        Ok(Self { pairs })
    }

    pub fn get(&self, name: &str) -> Option<&LoraPair> {
        self.pairs.get(name)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// 1-D convolution weights `[out, in, k]` plus bias, "same" padding, stride 1.
#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    kernel: usize,
}

impl Conv1d {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, kernel: usize, init: Init) -> Result<Self> {
        ensure!(kernel % 2 == 1, Config, "same-padding conv needs an odd kernel, got {kernel}");
        Ok(Self {
            w: pb.param(&format!("{name}.w"), &[out_ch, in_ch, kernel], init)?,
            b: pb.param(&format!("{name}.b"), &[out_ch], Init::Zeros)?,
            kernel,
        })
    }

    /// `x: [B, C_in, T] → [B, C_out, T]`.
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = g.param(ctx.store, self.w);
        let b = g.param(ctx.store, self.b);
        g.conv1d(x, w, Some(b), 1, self.kernel / 2)
    }
}

/// `LN(x)·(1 + scale) + shift` with `[B, 1, H]` modulation.
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm(x, 1e-6)?;
    let s = g.add_scalar(scale, 1.0)?;
    let h = g.mul(h, s)?;
    g.add(h, shift)
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled by 1000), `[B, width]`.
pub fn timestep_embedding(t: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0; t.len() * width];
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
            let arg = ti * 1000.0 * freq;
            data[i * width + j] = arg.cos();
            data[i * width + half + j] = arg.sin();
        }
    }
    Tensor::new(&[t.len(), width], data).expect("shape matches data")
}

/// Split `[B, 1, n·H]` into `n` chunks of `[B, 1, H]`.
pub fn chunks(g: &mut Graph, x: Var, n: usize) -> Result<Vec<Var>> {
    let w = *g.shape(x).last().expect("rank >= 1") / n;
    (0..n).map(|i| g.narrow(x, 2, i * w, w)).collect()
}
