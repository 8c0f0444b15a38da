mod commands;

use std::path::Path;

use fgc_core::conditions::{LoudnessConfig, PitchConfig};
use fgc_core::data::ToyCorpusSpec;
use fgc_core::eval::{SedConfig, DEFAULT_COLLAR, DEFAULT_SEGMENT};
use fgc_core::model::{AdapterConfig, BackboneConfig, CodecConfig, ControlNetConfig, LoraConfig, ModelBundle};
use fgc_core::train::{SampleConfig, TrainConfig};
use fgc_core::Error;
use serde::Deserialize;

use crate::{Cli, Command};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;
pub const EXIT_NAN: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn bad_input(message: impl Into<String>) -> Self {
        Self { code: EXIT_BAD_INPUT, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Incompatible(_) => EXIT_CHECKPOINT,
            Error::NonFinite(_) => EXIT_NAN,
            Error::File { .. } | Error::InvalidInput(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Wav(_) | Error::Format(_) | Error::Shape(_) => EXIT_BAD_INPUT,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `FGC_THREADS` caps worker threads; computation here runs on one thread,
/// so the value is only validated.
pub fn check_threads() -> CliResult<()> {
    match std::env::var("FGC_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                log::debug!("FGC_THREADS={n}; running single-threaded");
                Ok(())
            }
            _ => Err(CliError::bad_input(format!("FGC_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub codec: CodecConfig,
    pub adapter: AdapterConfig,
    pub controlnet: ControlNetConfig,
    pub lora: LoraConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            codec: CodecConfig::default(),
            adapter: AdapterConfig {
                depth: BackboneConfig::desk().n_layers(),
                ..AdapterConfig::desk()
            },
            controlnet: ControlNetConfig::default(),
            lora: LoraConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub collar: f64,
    pub segment: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            collar: DEFAULT_COLLAR,
            segment: DEFAULT_SEGMENT,
        }
    }
}

/// Parameters of every subcommand; file values first, then flags.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub corpus: ToyCorpusSpec,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub loudness: LoudnessConfig,
    pub pitch: PitchConfig,
    pub sed: SedConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::bad_input(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::bad_input(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::bad_input(format!("{}: {}", p.display(), e.message)))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.corpus.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.sample.seed = cfg.seed;
        Ok(cfg)
    }
}

/// Missing file → bad input; anything else wrong with a checkpoint → incompatible.
pub fn load_checkpoint(path: &Path) -> CliResult<ModelBundle> {
    ModelBundle::load(path).map_err(|e| match e {
        Error::File { .. } => CliError::from(e),
        other => CliError {
            code: EXIT_CHECKPOINT,
            message: format!("{}: {other}", path.display()),
        },
    })
}

pub fn dispatch(cli: Cli, cfg: RunConfig) -> CliResult<()> {
    let out = cli.out_dir;
    match cli.command {
        Command::Extract { kind, input, checkpoint } => commands::extract(&cfg, &out, kind, &input, checkpoint.as_deref()),
        Command::Simulate { clips, pairs, duration } => commands::simulate(cfg, &out, clips, pairs, duration),
        Command::Train {
            corpus,
            target,
            init,
            arch,
            lora,
            branch,
            steps,
            lr,
            batch_size,
            cfg_drop,
            out: ckpt,
            log,
        } => {
            let mut cfg = cfg;
            if let Some(v) = steps {
                cfg.train.steps = v;
            }
            if let Some(v) = lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = cfg_drop {
                cfg.train.cfg_drop_prob = v;
            }
            let ckpt = ckpt.unwrap_or_else(|| out.join("model.fgc"));
            commands::train(&cfg, &corpus, target, init.as_deref(), arch, lora, branch, &ckpt, log.as_deref())
        }
        Command::Generate {
            checkpoint,
            text,
            conditions,
            steps,
            cfg_scale,
            duration,
        } => {
            let mut cfg = cfg;
            apply_sample_flags(&mut cfg.sample, steps, cfg_scale);
            commands::generate(&cfg, &out, &checkpoint, &text, &conditions, duration)
        }
        Command::Edit {
            checkpoint,
            input,
            spec,
            branch,
            steps,
            cfg_scale,
        } => {
            let mut cfg = cfg;
            apply_sample_flags(&mut cfg.sample, steps, cfg_scale);
            commands::edit(&cfg, &out, &checkpoint, &input, &spec, branch.as_deref())
        }
        Command::Eval {
            reference,
            generated,
            collar,
            segment,
        } => {
            let mut cfg = cfg;
            if let Some(c) = collar {
                cfg.eval.collar = c;
            }
            if let Some(s) = segment {
                cfg.eval.segment = s;
            }
            commands::eval(&cfg, &out, &reference, &generated)
        }
    }
}

fn apply_sample_flags(s: &mut SampleConfig, steps: Option<usize>, cfg_scale: Option<f64>) {
    if let Some(v) = steps {
        s.steps = v;
    }
    if let Some(v) = cfg_scale {
        s.cfg_scale = v;
    }
}
