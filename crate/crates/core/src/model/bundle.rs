use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;

use super::backbone::{Backbone, ForwardOutput, LayerHook, TextBatch, BACKBONE_PREFIX};
use super::branch::{ActiveBranch, Branch, ControlBatch};
use super::codec::{CodecConfig, LatentCodec};
use super::config::{BackboneConfig, BranchConfig};
use super::layers::{Ctx, ParamBuilder};
use crate::conditions::text::fnv1a64;
use crate::conditions::ConditionKind;
use crate::dsp::QuantizerStats;
use crate::error::{ensure, Error, Result};
use crate::io::{Dtype, Fgc1Array};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "fgc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub branches: Vec<BranchConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            codec: CodecConfig::default(),
            branches: Vec::new(),
            seed: 0,
        }
    }
}

/// Which parameters a count or a training run refers to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Component {
    Backbone,
    /// Everything a branch owns, LoRA included.
    Branch(String),
    /// Only the LoRA deltas of a branch.
    Lora(String),
    All,
}

impl Component {
    fn prefix(&self) -> String {
        match self {
            Self::Backbone => BACKBONE_PREFIX.to_string(),
            Self::Branch(n) => format!("branch.{n}."),
            Self::Lora(n) => format!("branch.{n}.lora."),
            Self::All => String::new(),
        }
    }
}

/// A branch and its input for one forward pass. `keep[b] = false` nulls the condition of row `b`.
#[derive(Clone, Copy, Debug)]
pub struct BranchInput<'a> {
    pub name: &'a str,
    pub input: &'a ControlBatch,
    pub keep: Option<&'a [bool]>,
}

impl<'a> BranchInput<'a> {
    pub fn new(name: &'a str, input: &'a ControlBatch) -> Self {
        Self { name, input, keep: None }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    pitch: Option<QuantizerStats>,
}

/// Backbone, branches, codec and their parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    branches: Vec<Branch>,
    codec: LatentCodec,
    pub pitch_stats: Option<QuantizerStats>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut ParamBuilder::new(&mut store, config.seed), config.backbone.clone())?;
        let codec = LatentCodec::new(config.backbone.latent_width, config.codec.clone())?;
        let branch_configs = config.branches.clone();
        let mut bundle = Self {
            config: ModelConfig { branches: Vec::new(), ..config },
            store,
            backbone,
            branches: Vec::new(),
            codec,
            pitch_stats: None,
        };
        for b in branch_configs {
            bundle.add_branch(b)?;
        }
        Ok(bundle)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name() == name)
    }

    /// Build a new branch on top of the current backbone weights.
    pub fn add_branch(&mut self, config: BranchConfig) -> Result<()> {
        ensure!(self.branch(&config.name).is_none(), Config, "branch {} already exists", config.name);
        let seed = self.config.seed ^ fnv1a64(config.name.as_bytes());
        let branch = Branch::new(&mut ParamBuilder::new(&mut self.store, seed), &self.backbone, config.clone())?;
        self.branches.push(branch);
        self.config.branches.push(config);
        Ok(())
    }

    pub fn ids(&self, component: &Component) -> Vec<ParamId> {
        if let Component::Branch(n) | Component::Lora(n) = component {
            if self.branch(n).is_none() {
                return Vec::new();
            }
        }
        self.store.with_prefix(&component.prefix()).collect()
    }

    pub fn count_params(&self, component: &Component) -> usize {
        self.store.count(&component.prefix())
    }

    /// Velocity for `x_t` with the named branches active.
    pub fn forward(&self, g: &mut Graph, x_t: Var, t: &[f64], text: &TextBatch, inputs: &[BranchInput]) -> Result<ForwardOutput> {
        let mut active: Vec<ActiveBranch> = Vec::with_capacity(inputs.len());
        let mut lora = None;
        for inp in inputs {
            let b = self
                .branch(inp.name)
                .ok_or_else(|| Error::InvalidArgument(format!("no branch named {}", inp.name)))?;
            ensure!(b.kind() == inp.input.kind(), InvalidArgument, "branch {} takes {} input, got {}", b.name(), b.kind(), inp.input.kind());
            if let Some(l) = b.lora() {
                ensure!(lora.is_none(), InvalidArgument, "at most one LoRA branch can be active");
                lora = Some(l);
            }
            active.push(b.bind(inp.input, inp.keep));
        }
        // the editor replaces the caption with the empty one
        let null_text;
        let text = if inputs.iter().any(|i| i.input.kind() == ConditionKind::Edit) {
            null_text = TextBatch::null(&self.config.backbone, text.batch());
            &null_text
        } else {
            text
        };
        let mut hooks: Vec<&mut dyn LayerHook> = active.iter_mut().map(|a| a as &mut dyn LayerHook).collect();
        let ctx = Ctx::with_lora(&self.store, lora);
        self.backbone.forward(g, &ctx, x_t, t, text, &mut hooks)
    }

    /// Evaluate velocities without recording gradients.
    pub fn velocity(&self, x_t: &Tensor, t: &[f64], text: &TextBatch, inputs: &[BranchInput]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(x_t.clone());
        let out = self.forward(&mut g, x, t, text, inputs)?;
        Ok(g.value(out.velocity).clone())
    }

    pub fn text_batch<S: AsRef<str>>(&self, captions: &[Vec<S>], null: &[bool]) -> Result<TextBatch> {
        TextBatch::new(&self.config.backbone, captions, null)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut zip = zip::ZipWriter::new(file);
        let opts = SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.store.len());
        for (_, name, value) in self.store.iter() {
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                offset: blob.len() as u64,
            });
            Fgc1Array::new(Dtype::F64, &storage_shape(value.shape()), value.data().to_vec())?.write_to(&mut blob)?;
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: entries,
        };
        let files: [(&str, Vec<u8>); 4] = [
            ("manifest.json", serde_json::to_vec_pretty(&manifest)?),
            ("params.fgc1", blob),
            ("config.json", serde_json::to_vec_pretty(&self.config)?),
            ("quantizer_stats.json", serde_json::to_vec_pretty(&StatsFile { pitch: self.pitch_stats })?),
        ];
        for (name, bytes) in files {
            zip.start_file(name, opts)?;
            zip.write_all(&bytes)?;
        }
        zip.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut zip = zip::ZipArchive::new(file)?;
        let mut read = |name: &str| -> Result<Vec<u8>> {
            let mut f = zip
                .by_name(name)
                .map_err(|_| Error::Format(format!("{} has no {name}", path.display())))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            Ok(buf)
        };
        let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
        ensure!(
            manifest.format == CHECKPOINT_FORMAT && manifest.version == CHECKPOINT_VERSION,
            Format,
            "unsupported checkpoint {} v{}",
            manifest.format,
            manifest.version
        );
        let config: ModelConfig = serde_json::from_slice(&read("config.json")?)?;
        let stats: StatsFile = serde_json::from_slice(&read("quantizer_stats.json")?)?;
        let blob = read("params.fgc1")?;
        let mut store = ParamStore::new();
        for e in &manifest.params {
            let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            ensure!(start <= blob.len(), Format, "parameter {} starts past the end of params.fgc1", e.name);
            let arr = Fgc1Array::read_from(&mut &blob[start..])?;
            ensure!(arr.shape == storage_shape(&e.shape), Format, "parameter {} stored as {:?}, manifest says {:?}", e.name, arr.shape, e.shape);
            store.add(e.name.clone(), Tensor::new(&e.shape, arr.data)?)?;
        }
        let mut bundle = Self::bind(config, store)?;
        bundle.pitch_stats = stats.pitch;
        Ok(bundle)
    }

    /// Re-create the module tree over an existing store; every parameter must match.
    pub fn bind(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        let total = store.len();
        let mut pb = ParamBuilder::strict(&mut store);
        let backbone = Backbone::new(&mut pb, config.backbone.clone())?;
        let branches = config
            .branches
            .iter()
            .map(|b| Branch::new(&mut pb, &backbone, b.clone()))
            .collect::<Result<Vec<_>>>()?;
        let used = pb.touched();
        ensure!(used == total, Incompatible, "checkpoint has {} parameters the model does not use", total - used);
        Ok(Self {
            codec: LatentCodec::new(config.backbone.latent_width, config.codec.clone())?,
            config,
            store,
            backbone,
            branches,
            pitch_stats: None,
        })
    }

    /// Copy parameters of `component` from another bundle with the same layout.
    pub fn copy_from(&mut self, other: &ModelBundle, component: &Component) -> Result<usize> {
        let mut n = 0;
        for id in other.ids(component) {
            let name = other.store.name(id);
            let dst = self
                .store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            self.store.set(dst, other.store.value(id).clone())?;
            n += 1;
        }
        Ok(n)
    }
}

fn storage_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 => vec![1],
        1 => shape.to_vec(),
        _ => vec![shape[0], shape[1..].iter().product()],
    }
}
