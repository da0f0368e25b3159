//! Checkpoint container.
//!
//! ```text
//! "OLTC" | version u32 | header length u32 | header (key-sorted JSON)
//! then sections: tag u8 | length u64 | payload | CRC-32 u32
//! ```
//!
//! All integers and floats are little-endian. Each section CRC covers the
//! tag, the length and the payload, and starts from the CRC of the header
//! bytes, so a damaged header fails every section check.
//!
//! Section order follows the config: every stored weight ([`SectionTag::Weight`], or [`SectionTag::Embedding`] for frozen
//! embeddings), then one [`SectionTag::Mask`] per supermask, then for
//! resume checkpoints one [`SectionTag::Scores`] per supermask holding the
//! scores and both Adam moments.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{pack_mask, packed_len, popcount, unpack_mask};
use crate::error::{Error, Result};
use crate::supermask::{k_count, Fans, SupermaskTensor};
use crate::tensor::Tensor;
use crate::train::{Adam, AdamState, RunConfig, TrainRun};
use crate::transformer::{mask_layout, tensor_layout, MaskInfo, Model, ModelConfig, ModelSeeds, ParamSource, TensorInfo, TieMode};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OLTC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;
const FRAME: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SectionTag {
    Weight = 0x01,
    Mask = 0x02,
    Embedding = 0x03,
    Scores = 0x7F,
}

impl SectionTag {
    pub fn from_byte(b: u8) -> Option<SectionTag> {
        match b {
            0x01 => Some(SectionTag::Weight),
            0x02 => Some(SectionTag::Mask),
            0x03 => Some(SectionTag::Embedding),
            0x7F => Some(SectionTag::Scores),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionTag::Weight => "weight",
            SectionTag::Mask => "mask",
            SectionTag::Embedding => "embedding",
            SectionTag::Scores => "scores",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Weights and masks only.
    Inference,
    /// Adds scores and optimizer state.
    Resume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeState {
    pub run: RunConfig,
    pub step: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    /// Names of the tensors the optimizer state belongs to.
    pub optimizer_keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub flavor: Flavor,
    pub model: ModelConfig,
    pub seeds: ModelSeeds,
    pub sigma: f32,
    pub tie_mode: TieMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeState>,
}

#[derive(Clone, Debug, PartialEq)]
struct Section {
    tag: SectionTag,
    payload: Vec<u8>,
}

/// A section located in a byte buffer, before any validation of its content.
#[derive(Clone, Debug, PartialEq)]
struct RawSection {
    tag: u8,
    start: usize,
    len: usize,
    stored_crc: u32,
    computed_crc: u32,
}

fn section_crc(header_crc: u32, tag: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new_with_initial(header_crc);
    h.update(&[tag]);
    h.update(&(payload.len() as u64).to_le_bytes());
    h.update(payload);
    h.finalize()
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Splits a file into header and sections, checking magic, version and
/// lengths but not checksums.
fn scan(bytes: &[u8]) -> Result<(CheckpointHeader, usize, Vec<RawSection>)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            expected: PREAMBLE,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Magic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u32_at(bytes, 8) as usize;
    let body = PREAMBLE + header_len;
    if bytes.len() < body {
        return Err(Error::Truncated {
            expected: body,
            actual: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..body])
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Corrupt(format!(
            "header claims format {} inside a version {version} file",
            header.format_version
        )));
    }
    let header_crc = crc32fast::hash(&bytes[PREAMBLE..body]);
    let mut sections = Vec::new();
    let mut at = body;
    while at < bytes.len() {
        if bytes.len() < at + 9 {
            return Err(Error::Truncated {
                expected: at + 9,
                actual: bytes.len(),
            });
        }
        let tag = bytes[at];
        let len = u64::from_le_bytes(bytes[at + 1..at + 9].try_into().unwrap());
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| (at + 9).checked_add(l))
            .and_then(|e| e.checked_add(4))
            .ok_or_else(|| Error::Corrupt(format!("section length {len} overflows")))?;
        if bytes.len() < end {
            return Err(Error::Truncated {
                expected: end,
                actual: bytes.len(),
            });
        }
        let len = len as usize;
        let start = at + 9;
        sections.push(RawSection {
            tag,
            start,
            len,
            stored_crc: u32_at(bytes, start + len),
            computed_crc: section_crc(header_crc, tag, &bytes[start..start + len]),
        });
        at = end;
    }
    Ok((header, header_len, sections))
}

/// Expected `(tag, payload length, name)` for every section of a checkpoint.
fn expected_sections(header: &CheckpointHeader) -> Result<Vec<(SectionTag, usize, String)>> {
    let layout = tensor_layout(&header.model)?;
    let masks = mask_layout(&header.model)?;
    let mut out: Vec<(SectionTag, usize, String)> = layout
        .iter()
        .map(|t| {
            let tag = if t.masks > 0 {
                SectionTag::Weight
            } else {
                SectionTag::Embedding
            };
            (tag, 4 * t.numel(), t.name.clone())
        })
        .collect();
    for m in &masks {
        out.push((SectionTag::Mask, packed_len(numel(m)), m.name.clone()));
    }
    if header.flavor == Flavor::Resume {
        for m in &masks {
            out.push((SectionTag::Scores, 12 * numel(m), m.name.clone()));
        }
    }
    Ok(out)
}

fn numel(m: &MaskInfo) -> usize {
    m.shape[0] * m.shape[1]
}

fn check_header(header: &CheckpointHeader) -> Result<()> {
    let corrupt = |m: &str| Err(Error::Corrupt(m.to_string()));
    if header.sigma.to_bits() != header.model.sigma.to_bits() || header.tie_mode != header.model.tie_mode {
        return corrupt("header echo disagrees with the model config");
    }
    match (&header.flavor, &header.resume) {
        (Flavor::Inference, None) => Ok(()),
        (Flavor::Resume, Some(r)) if r.run.model == header.model => Ok(()),
        (Flavor::Resume, Some(_)) => corrupt("resume run config disagrees with the model config"),
        _ => corrupt("flavor and resume state disagree"),
    }
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn float_bytes<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// A checkpoint held in memory, already validated.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCheckpoint {
    pub header: CheckpointHeader,
    sections: Vec<Section>,
}

impl MaskedCheckpoint {
    fn build(model: &Model, flavor: Flavor, resume: Option<(ResumeState, &Adam)>) -> Result<MaskedCheckpoint> {
        let cfg = model.config().clone();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            flavor,
            sigma: cfg.sigma,
            tie_mode: cfg.tie_mode,
            seeds: model.seeds(),
            model: cfg,
            resume: resume.as_ref().map(|(r, _)| r.clone()),
        };
        let masked_weights: std::collections::HashSet<String> = model.mask_weight_names().into_iter().collect();
        let mut sections = Vec::new();
        for (name, w) in model.stored_weights() {
            let tag = if masked_weights.contains(&name) {
                SectionTag::Weight
            } else {
                SectionTag::Embedding
            };
            sections.push(Section {
                tag,
                payload: float_bytes(w.data()),
            });
        }
        for (_, m) in model.masked() {
            sections.push(Section {
                tag: SectionTag::Mask,
                payload: pack_mask(&m.mask())?,
            });
        }
        if let Some((_, adam)) = resume {
            let masked = model.masked();
            if adam.states.len() != masked.len() {
                return Err(Error::Integrity("optimizer state does not cover every mask".into()));
            }
            for ((name, m), state) in masked.into_iter().zip(&adam.states) {
                let scores = m
                    .scores()
                    .ok_or_else(|| Error::Config(format!("{name} has a frozen mask and cannot be resumed")))?;
                if state.name != name {
                    return Err(Error::Integrity(format!("optimizer state {} is out of order", state.name)));
                }
                let payload = float_bytes(scores.data().iter().chain(&state.m).chain(&state.v));
                sections.push(Section {
                    tag: SectionTag::Scores,
                    payload,
                });
            }
        }
        Ok(MaskedCheckpoint { header, sections })
    }

    /// Weights and masks; scores are dropped.
    pub fn inference(model: &Model) -> Result<MaskedCheckpoint> {
        MaskedCheckpoint::build(model, Flavor::Inference, None)
    }

    /// Everything needed to continue training.
    pub fn resume(run: &TrainRun) -> Result<MaskedCheckpoint> {
        let state = ResumeState {
            run: run.config.clone(),
            step: run.step,
            beta1: run.adam.beta1,
            beta2: run.adam.beta2,
            eps: run.adam.eps,
            t: run.adam.t,
            optimizer_keys: run.adam.states.iter().map(|s| s.name.clone()).collect(),
        };
        MaskedCheckpoint::build(&run.model, Flavor::Resume, Some((state, &run.adam)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&serde_json::to_value(&self.header).expect("header serializes"))
            .expect("value serializes");
        let payload: usize = self.sections.iter().map(|s| FRAME + s.payload.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let header_crc = crc32fast::hash(&header);
        for s in &self.sections {
            let tag = s.tag as u8;
            out.push(tag);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
            out.extend_from_slice(&section_crc(header_crc, tag, &s.payload).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MaskedCheckpoint> {
        let (header, _, raw) = scan(bytes)?;
        for (i, s) in raw.iter().enumerate() {
            if s.stored_crc != s.computed_crc {
                return Err(Error::Checksum {
                    section: i,
                    stored: s.stored_crc,
                    computed: s.computed_crc,
                });
            }
        }
        check_header(&header)?;
        let expected = expected_sections(&header)?;
        if raw.len() != expected.len() {
            return Err(Error::Corrupt(format!(
                "{} sections present, config implies {}",
                raw.len(),
                expected.len()
            )));
        }
        let masks = mask_layout(&header.model)?;
        let mut sections = Vec::with_capacity(raw.len());
        for (i, (s, (tag, len, name))) in raw.iter().zip(&expected).enumerate() {
            if SectionTag::from_byte(s.tag) != Some(*tag) || s.len != *len {
                return Err(Error::Corrupt(format!(
                    "section {i} ({name}) has tag {:#04x} and {} bytes, expected {:#04x} and {len}",
                    s.tag, s.len, *tag as u8
                )));
            }
            let payload = bytes[s.start..s.start + s.len].to_vec();
            if *tag == SectionTag::Mask {
                let info = masks.iter().find(|m| &m.name == name).expect("mask in layout");
                unpack_mask(&payload, numel(info))?;
                let want = k_count(header.model.sigma, numel(info));
                let ones = popcount(&payload);
                if ones != want {
                    return Err(Error::Integrity(format!("mask {name} keeps {ones} entries, expected {want}")));
                }
            }
            sections.push(Section { tag: *tag, payload });
        }
        Ok(MaskedCheckpoint { header, sections })
    }

    fn tensors(&self) -> Result<CheckpointSource> {
        let expected = expected_sections(&self.header)?;
        let layout: HashMap<String, TensorInfo> = tensor_layout(&self.header.model)?
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        let mask_shapes: HashMap<String, [usize; 2]> = mask_layout(&self.header.model)?
            .into_iter()
            .map(|m| (m.name, m.shape))
            .collect();
        let mut source = CheckpointSource::default();
        for ((tag, _, name), s) in expected.into_iter().zip(&self.sections) {
            match tag {
                SectionTag::Weight | SectionTag::Embedding => {
                    let shape = layout[&name].shape;
                    source.weights.insert(name, Tensor::new(shape.to_vec(), floats(&s.payload))?);
                }
                SectionTag::Mask => {
                    let shape = mask_shapes[&name];
                    let mask = unpack_mask(&s.payload, shape[0] * shape[1])?.reshape(shape.to_vec())?;
                    source.masks.insert(name, mask);
                }
                SectionTag::Scores => {
                    let shape = mask_shapes[&name];
                    let n = shape[0] * shape[1];
                    let mut values = floats(&s.payload);
                    let v = values.split_off(2 * n);
                    let m = values.split_off(n);
                    source.scores.insert(name.clone(), Tensor::new(shape.to_vec(), values)?);
                    source.moments.push(AdamState { name, m, v });
                }
            }
        }
        Ok(source)
    }

    /// The stored model; masks are frozen unless the checkpoint carries scores.
    pub fn model(&self) -> Result<Model> {
        let mut source = self.tensors()?;
        let model = Model::assemble(self.header.model.clone(), self.header.seeds, &mut source)?;
        source.finish()?;
        Ok(model)
    }

    pub fn train_run(&self) -> Result<TrainRun> {
        let state = self
            .header
            .resume
            .as_ref()
            .ok_or_else(|| Error::Config("inference checkpoints cannot resume training".into()))?;
        let mut source = self.tensors()?;
        let model = Model::assemble(self.header.model.clone(), self.header.seeds, &mut source)?;
        let moments = std::mem::take(&mut source.moments);
        source.finish()?;
        let keys: Vec<&String> = moments.iter().map(|m| &m.name).collect();
        if keys.iter().map(|k| k.as_str()).ne(state.optimizer_keys.iter().map(String::as_str)) {
            return Err(Error::Integrity("optimizer keys differ from stored score sections".into()));
        }
        let adam = Adam {
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            t: state.t,
            states: moments,
        };
        TrainRun::resume(state.run.clone(), model, adam, state.step)
    }

    /// Bytes taken by sections of `tag`, payload only.
    pub fn payload_bytes(&self, tag: SectionTag) -> usize {
        self.sections
            .iter()
            .filter(|s| s.tag == tag)
            .map(|s| s.payload.len())
            .sum()
    }

    pub fn section_count(&self, tag: SectionTag) -> usize {
        self.sections.iter().filter(|s| s.tag == tag).count()
    }
}

#[derive(Default)]
struct CheckpointSource {
    weights: HashMap<String, Tensor>,
    masks: HashMap<String, Tensor>,
    scores: HashMap<String, Tensor>,
    moments: Vec<AdamState>,
}

impl CheckpointSource {
    fn finish(self) -> Result<()> {
        let left = self.weights.len() + self.masks.len() + self.scores.len();
        if left != 0 {
            return Err(Error::Corrupt(format!("{left} stored tensors were not used by the model")));
        }
        Ok(())
    }
}

impl ParamSource for CheckpointSource {
    fn weight(&mut self, _: &ModelConfig, name: &str, _: [usize; 2], _: Fans) -> Result<Tensor> {
        self.weights
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("weight {name} missing")))
    }

    fn mask(&mut self, cfg: &ModelConfig, name: &str, weight: Arc<Tensor>, _: Fans) -> Result<SupermaskTensor> {
        let mask = self
            .masks
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("mask {name} missing")))?;
        match self.scores.remove(name) {
            Some(scores) => {
                let t = SupermaskTensor::new(weight, scores, cfg.sigma)?;
                if t.mask() != mask {
                    return Err(Error::Integrity(format!("stored mask {name} does not match its scores")));
                }
                Ok(t)
            }
            None => SupermaskTensor::frozen(weight, mask, cfg.sigma),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &MaskedCheckpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MaskedCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MaskedCheckpoint::from_bytes(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SectionStatus {
    pub index: usize,
    pub tag: String,
    pub name: String,
    pub bytes: usize,
    pub stored_crc: u32,
    pub computed_crc: u32,
    pub crc_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskDensity {
    pub name: String,
    pub weight: String,
    pub shape: [usize; 2],
    pub ones: usize,
    pub k_count: usize,
    pub density: f64,
}

/// Everything `inspect` reports about a file. Checksum failures are
/// recorded instead of aborting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectReport {
    pub header: CheckpointHeader,
    pub file_bytes: usize,
    pub header_bytes: usize,
    pub weight_sections: usize,
    pub embedding_sections: usize,
    pub mask_sections: usize,
    pub score_sections: usize,
    pub sections: Vec<SectionStatus>,
    pub masks: Vec<MaskDensity>,
    pub crc_ok: bool,
    /// Problems beyond checksums (layout, mask cardinality).
    pub problems: Vec<String>,
}

impl InspectReport {
    pub fn ok(&self) -> bool {
        self.crc_ok && self.problems.is_empty()
    }
}

pub fn inspect(bytes: &[u8]) -> Result<InspectReport> {
    let (header, header_bytes, raw) = scan(bytes)?;
    let mut problems = Vec::new();
    if let Err(e) = check_header(&header) {
        problems.push(e.to_string());
    }
    let (expected, masks) = match (expected_sections(&header), mask_layout(&header.model)) {
        (Ok(e), Ok(m)) => (e, m),
        (Err(e), _) | (_, Err(e)) => {
            problems.push(format!("header config is unusable: {e}"));
            (Vec::new(), Vec::new())
        }
    };
    if expected.len() != raw.len() {
        problems.push(format!("{} sections present, config implies {}", raw.len(), expected.len()));
    }
    let mut sections = Vec::with_capacity(raw.len());
    let mut densities = Vec::new();
    let count = |t: SectionTag| raw.iter().filter(|s| s.tag == t as u8).count();
    for (i, s) in raw.iter().enumerate() {
        let tag = SectionTag::from_byte(s.tag);
        let name = expected.get(i).map(|e| e.2.clone()).unwrap_or_default();
        let crc_ok = s.stored_crc == s.computed_crc;
        sections.push(SectionStatus {
            index: i,
            tag: tag.map_or_else(|| format!("{:#04x}", s.tag), |t| t.name().to_string()),
            name: name.clone(),
            bytes: s.len,
            stored_crc: s.stored_crc,
            computed_crc: s.computed_crc,
            crc_ok,
        });
        if tag == Some(SectionTag::Mask) {
            if let Some(info) = masks.iter().find(|m| m.name == name) {
                let payload = &bytes[s.start..s.start + s.len];
                let n = numel(info);
                let ones = popcount(payload);
                let k = k_count(header.model.sigma, n);
                if crc_ok && ones != k {
                    problems.push(format!("mask {name} keeps {ones} entries, expected {k}"));
                }
                densities.push(MaskDensity {
                    name,
                    weight: info.weight.clone(),
                    shape: info.shape,
                    ones,
                    k_count: k,
                    density: ones as f64 / n as f64,
                });
            }
        }
    }
    Ok(InspectReport {
        file_bytes: bytes.len(),
        header_bytes,
        weight_sections: count(SectionTag::Weight),
        embedding_sections: count(SectionTag::Embedding),
        mask_sections: count(SectionTag::Mask),
        score_sections: count(SectionTag::Scores),
        crc_ok: sections.iter().all(|s| s.crc_ok),
        sections,
        masks: densities,
        problems,
        header,
    })
}
