//! On-disk layout: `clips/*.wav`, `rolls/*.json`, `captions/*.json`,
//! `pairs/*.json` (+ `pairs/*_{input,output}.wav`) and `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EditPair, EditSpec, ToyClip, ToyCorpusSpec};
use crate::conditions::EventRoll;
use crate::dsp::AudioClip;
use crate::error::{ensure, Error, Result};
use crate::io::{read_wav, write_wav};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Every tenth clip goes to val and the next to test; the rest train.
    pub fn by_index(ids: &[String]) -> Self {
        let mut s = Self::default();
        for (i, id) in ids.iter().enumerate() {
            match i % 10 {
                8 => s.val.push(id.clone()),
                9 => s.test.push(id.clone()),
                _ => s.train.push(id.clone()),
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub spec: ToyCorpusSpec,
    pub splits: Split,
    #[serde(default)]
    pub pairs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    spec: EditSpec,
    prose: String,
    caption_labels: Vec<String>,
    span: (f64, f64),
    input: String,
    output: String,
}

/// A corpus read back from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<ToyClip>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::file(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_corpus(dir: &Path, spec: &ToyCorpusSpec, clips: &[ToyClip], pairs: &[EditPair]) -> Result<CorpusManifest> {
    for sub in ["clips", "rolls", "captions", "pairs"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    for c in clips {
        write_wav(&dir.join("clips").join(format!("{}.wav", c.id)), &c.audio)?;
        write_json(&dir.join("rolls").join(format!("{}.json", c.id)), &c.roll)?;
        write_json(&dir.join("captions").join(format!("{}.json", c.id)), &c.caption)?;
    }
    let mut pair_ids = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("pair{i:05}");
        let (input, output) = (format!("{id}_input.wav"), format!("{id}_output.wav"));
        write_wav(&dir.join("pairs").join(&input), &p.input)?;
        write_wav(&dir.join("pairs").join(&output), &p.output)?;
        let rec = PairRecord {
            prose: p.spec.prose(),
            spec: p.spec.clone(),
            caption_labels: p.caption_labels.clone(),
            span: p.span,
            input,
            output,
        };
        write_json(&dir.join("pairs").join(format!("{id}.json")), &rec)?;
        pair_ids.push(id);
    }
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let manifest = CorpusManifest {
        spec: spec.clone(),
        splits: Split::by_index(&ids),
        pairs: pair_ids,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// An edit pair read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredPair {
    pub id: String,
    pub spec: EditSpec,
    pub caption_labels: Vec<String>,
    pub input: AudioClip,
    pub output: AudioClip,
}

/// Edit pairs listed in the manifest.
pub fn read_pairs(dir: &Path) -> Result<Vec<StoredPair>> {
    let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
    let mut out = Vec::with_capacity(manifest.pairs.len());
    for id in &manifest.pairs {
        let rec: PairRecord = read_json(&dir.join("pairs").join(format!("{id}.json")))?;
        rec.spec.validate()?;
        let input = read_wav(&dir.join("pairs").join(&rec.input))?;
        let output = read_wav(&dir.join("pairs").join(&rec.output))?;
        ensure!(input.len() == output.len(), Format, "pair {id}: input and output lengths differ");
        rec.spec.check_duration(input.duration())?;
        out.push(StoredPair {
            id: id.clone(),
            spec: rec.spec,
            caption_labels: rec.caption_labels,
            input,
            output,
        });
    }
    Ok(out)
}

/// Clips listed in the manifest, in split order train, val, test.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
    let s = &manifest.splits;
    let mut clips = Vec::new();
    for id in s.train.iter().chain(&s.val).chain(&s.test) {
        let roll: EventRoll = read_json(&dir.join("rolls").join(format!("{id}.json")))?;
        roll.validate()?;
        let caption: Vec<String> = read_json(&dir.join("captions").join(format!("{id}.json")))?;
        let audio = read_wav(&dir.join("clips").join(format!("{id}.wav")))?;
        ensure!(
            (audio.duration() - roll.duration).abs() < 0.05,
            Format,
            "clip {id} lasts {} s but its roll says {} s",
            audio.duration(),
            roll.duration
        );
        clips.push(ToyClip {
            id: id.clone(),
            roll,
            caption,
            audio,
        });
    }
    Ok(Corpus { manifest, clips })
}
