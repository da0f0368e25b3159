//! Encoder-decoder Transformer whose every linear map is a supermask over a
//! frozen random weight.
//!
//! In [`TieMode::OneLayer`] each stack allocates a single layer of weights
//! and applies it `L` times; every application carries its own scores and
//! therefore its own mask. [`TieMode::PerLayer`] is the ordinary stack with
//! `L` independent weight sets.
//!
//! Layers are post-norm with sinusoidal positions added to the raw
//! embedding rows (no `√d` factor; the initializers already put rows on the
//! same scale as the position signal). LayerNorm gain and bias
//! are fixed at 1 and 0 and linear maps have no bias, so scores are the only
//! trainable state.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::datapipe::{PretrainedEmbeddings, Tokens, BOS, EOS, MIN_VOCAB, PAD};
use crate::error::{Error, Result};
use crate::supermask::{self, Fans, InitScheme, SupermaskTensor};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const MASKED: f32 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    PerLayer,
    OneLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    RandomPruned,
    PretrainedFrozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Number of encoder layer applications.
    pub enc_layers: usize,
    /// Number of decoder layer applications.
    pub dec_layers: usize,
    pub tie_mode: TieMode,
    pub embedding_mode: EmbeddingMode,
    /// Fraction of each weight tensor kept by its mask.
    pub sigma: f32,
    pub init: InitScheme,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub activation: Activation,
    /// Reuse the decoder embedding as the output projection.
    #[serde(default)]
    pub tie_decoder_io: bool,
}

impl ModelConfig {
    /// Desk-scale reference architecture.
    pub fn reference() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            enc_layers: 2,
            dec_layers: 2,
            tie_mode: TieMode::OneLayer,
            embedding_mode: EmbeddingMode::RandomPruned,
            sigma: 0.5,
            init: InitScheme::default(),
            src_vocab: 64,
            tgt_vocab: 64,
            max_len: 16,
            activation: Activation::Relu,
            tie_decoder_io: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return fail("d_model, n_heads and d_ffn must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("enc_layers and dec_layers must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return fail(format!("sigma must be in (0, 1], got {}", self.sigma));
        }
        if self.src_vocab < MIN_VOCAB || self.tgt_vocab < MIN_VOCAB {
            return fail(format!("vocabularies need at least {MIN_VOCAB} entries"));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn weight_sets(&self, applications: usize) -> usize {
        match self.tie_mode {
            TieMode::OneLayer => 1,
            TieMode::PerLayer => applications,
        }
    }
}

/// Position of a weight inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    FfnIn,
    FfnOut,
}

impl Slot {
    pub const ENCODER: [Slot; 6] = [
        Slot::SelfQ,
        Slot::SelfK,
        Slot::SelfV,
        Slot::SelfO,
        Slot::FfnIn,
        Slot::FfnOut,
    ];
    pub const DECODER: [Slot; 10] = [
        Slot::SelfQ,
        Slot::SelfK,
        Slot::SelfV,
        Slot::SelfO,
        Slot::CrossQ,
        Slot::CrossK,
        Slot::CrossV,
        Slot::CrossO,
        Slot::FfnIn,
        Slot::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::SelfQ => "self_q",
            Slot::SelfK => "self_k",
            Slot::SelfV => "self_v",
            Slot::SelfO => "self_o",
            Slot::CrossQ => "cross_q",
            Slot::CrossK => "cross_k",
            Slot::CrossV => "cross_v",
            Slot::CrossO => "cross_o",
            Slot::FfnIn => "ffn_in",
            Slot::FfnOut => "ffn_out",
        }
    }

    pub fn shape(self, cfg: &ModelConfig) -> [usize; 2] {
        match self {
            Slot::FfnIn => [cfg.d_model, cfg.d_ffn],
            Slot::FfnOut => [cfg.d_ffn, cfg.d_model],
            _ => [cfg.d_model, cfg.d_model],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackKind {
    Encoder,
    Decoder,
}

impl StackKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StackKind::Encoder => "enc",
            StackKind::Decoder => "dec",
        }
    }

    pub fn slots(self) -> &'static [Slot] {
        match self {
            StackKind::Encoder => &Slot::ENCODER,
            StackKind::Decoder => &Slot::DECODER,
        }
    }
}

fn stack_weight_name(kind: StackKind, sets: usize, apps: usize, set: usize, slot: Slot) -> String {
    if sets == 1 && apps > 1 {
        format!("{}.shared.{}", kind.prefix(), slot.name())
    } else {
        format!("{}.w{set}.{}", kind.prefix(), slot.name())
    }
}

fn stack_mask_name(kind: StackKind, app: usize, slot: Slot) -> String {
    format!("{}.{app}.{}", kind.prefix(), slot.name())
}

/// 64-bit FNV-1a followed by a splitmix finalizer.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSeeds {
    pub weights: u64,
    pub scores: u64,
}

/// One set of frozen layer weights, aligned with [`StackKind::slots`].
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub slots: Vec<Arc<Tensor>>,
}

/// One application of a layer: a supermask per slot.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub slots: Vec<SupermaskTensor>,
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub kind: StackKind,
    pub weights: Vec<LayerWeights>,
    pub apps: Vec<LayerParams>,
}

impl Stack {
    /// Index into `weights` used by application `app`.
    pub fn weight_index(&self, app: usize) -> usize {
        if self.weights.len() == 1 {
            0
        } else {
            app
        }
    }

    pub fn weight_name(&self, set: usize, slot: Slot) -> String {
        stack_weight_name(self.kind, self.weights.len(), self.apps.len(), set, slot)
    }

    pub fn mask_name(&self, app: usize, slot: Slot) -> String {
        stack_mask_name(self.kind, app, slot)
    }
}

#[derive(Clone, Debug)]
pub enum EmbeddingTable {
    Masked(SupermaskTensor),
    Frozen(Arc<Tensor>),
}

impl EmbeddingTable {
    pub fn weight(&self) -> &Arc<Tensor> {
        match self {
            EmbeddingTable::Masked(m) => m.weight(),
            EmbeddingTable::Frozen(w) => w,
        }
    }

    fn effective(&self) -> Tensor {
        match self {
            EmbeddingTable::Masked(m) => m.effective_weight(),
            EmbeddingTable::Frozen(w) => Tensor::clone(w),
        }
    }
}

/// Encoder embedding, decoder embedding and output projection, all `[V×d]`.
/// `out_proj` is `None` when tied to the decoder embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub mode: EmbeddingMode,
    pub enc: EmbeddingTable,
    pub dec: EmbeddingTable,
    pub out_proj: Option<EmbeddingTable>,
}

/// Whether forward passes apply the masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Masked,
    /// Raw `W` everywhere, no mask nodes. Used as a reference.
    Unmasked,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    seeds: ModelSeeds,
    pub embeddings: EmbeddingParams,
    pub encoder: Stack,
    pub decoder: Stack,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
struct Registered {
    emb_enc: Var,
    emb_dec: Var,
    out_proj: Var,
    enc: Vec<Vec<Var>>,
    dec: Vec<Vec<Var>>,
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch × tgt_len × tgt_vocab]`.
    pub logits: Var,
    /// Score leaves, aligned with [`Model::masked`]; `None` for frozen masks.
    pub scores: Vec<Option<Var>>,
}

fn embedding_fans(cfg: &ModelConfig, vocab: usize) -> Fans {
    Fans {
        fan_in: cfg.d_model,
        fan_out: vocab,
    }
}

/// Supplies tensors while a model is assembled.
pub trait ParamSource {
    /// The frozen weight stored under `name`.
    fn weight(&mut self, cfg: &ModelConfig, name: &str, shape: [usize; 2], fans: Fans) -> Result<Tensor>;
    /// The supermask `name` over `weight`.
    fn mask(&mut self, cfg: &ModelConfig, name: &str, weight: Arc<Tensor>, fans: Fans) -> Result<SupermaskTensor>;
}

/// Seeded random initialization; frozen embeddings come from a file.
struct RandomSource {
    seeds: ModelSeeds,
    pretrained: Option<PretrainedEmbeddings>,
}

impl ParamSource for RandomSource {
    fn weight(&mut self, cfg: &ModelConfig, name: &str, shape: [usize; 2], fans: Fans) -> Result<Tensor> {
        if let Some(p) = &self.pretrained {
            let table = match name {
                n if n == Table::Enc.weight_name() => Some(&p.enc),
                n if n == Table::Dec.weight_name() => Some(&p.dec),
                n if n == Table::Out.weight_name() => Some(&p.out_proj),
                _ => None,
            };
            if let Some(t) = table {
                return Ok(t.clone());
            }
        }
        supermask::init_weight_with_fans(&shape, fans, cfg.init, cfg.sigma, derive_seed(self.seeds.weights, name))
    }

    fn mask(&mut self, cfg: &ModelConfig, name: &str, weight: Arc<Tensor>, fans: Fans) -> Result<SupermaskTensor> {
        let scores = supermask::init_scores_with_fans(weight.shape(), fans, derive_seed(self.seeds.scores, name))?;
        SupermaskTensor::new(weight, scores, cfg.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Table {
    Enc,
    Dec,
    Out,
}

impl Table {
    fn mask_name(self) -> &'static str {
        match self {
            Table::Enc => "emb.enc",
            Table::Dec => "emb.dec",
            Table::Out => "emb.out",
        }
    }

    fn weight_name(self) -> &'static str {
        match self {
            Table::Enc => "emb.enc.weight",
            Table::Dec => "emb.dec.weight",
            Table::Out => "emb.out.weight",
        }
    }

    fn vocab(self, cfg: &ModelConfig) -> usize {
        match self {
            Table::Enc => cfg.src_vocab,
            Table::Dec | Table::Out => cfg.tgt_vocab,
        }
    }
}

fn fetch_weight(cfg: &ModelConfig, source: &mut dyn ParamSource, name: &str, shape: [usize; 2], fans: Fans) -> Result<Arc<Tensor>> {
    let w = source.weight(cfg, name, shape, fans)?;
    if w.shape() != shape {
        return Err(Error::dim("weight", w.shape(), &shape));
    }
    Ok(Arc::new(w.with_requires_grad(false)))
}

fn fetch_mask(cfg: &ModelConfig, source: &mut dyn ParamSource, name: &str, weight: Arc<Tensor>, fans: Fans) -> Result<SupermaskTensor> {
    let m = source.mask(cfg, name, Arc::clone(&weight), fans)?;
    if !Arc::ptr_eq(m.weight(), &weight) {
        return Err(Error::Integrity(format!("{name} is not backed by its weight")));
    }
    Ok(m)
}

fn build_table(cfg: &ModelConfig, source: &mut dyn ParamSource, table: Table) -> Result<EmbeddingTable> {
    let vocab = table.vocab(cfg);
    let fans = embedding_fans(cfg, vocab);
    let w = fetch_weight(cfg, source, table.weight_name(), [vocab, cfg.d_model], fans)?;
    Ok(match cfg.embedding_mode {
        EmbeddingMode::RandomPruned => EmbeddingTable::Masked(fetch_mask(cfg, source, table.mask_name(), w, fans)?),
        EmbeddingMode::PretrainedFrozen => EmbeddingTable::Frozen(w),
    })
}

fn build_stack(cfg: &ModelConfig, source: &mut dyn ParamSource, kind: StackKind, applications: usize) -> Result<Stack> {
    let sets = cfg.weight_sets(applications);
    // Names depend on the final counts, so size the stack first.
    let mut stack = Stack {
        kind,
        weights: vec![LayerWeights { slots: Vec::new() }; sets],
        apps: vec![LayerParams { slots: Vec::new() }; applications],
    };
    for set in 0..sets {
        for &slot in kind.slots() {
            let shape = slot.shape(cfg);
            let name = stack.weight_name(set, slot);
            let w = fetch_weight(cfg, source, &name, shape, Fans::of(&shape)?)?;
            stack.weights[set].slots.push(w);
        }
    }
    for app in 0..applications {
        let set = stack.weight_index(app);
        let mut slots = Vec::with_capacity(kind.slots().len());
        for (i, &slot) in kind.slots().iter().enumerate() {
            let weight = Arc::clone(&stack.weights[set].slots[i]);
            let fans = Fans::of(weight.shape())?;
            slots.push(fetch_mask(cfg, source, &stack.mask_name(app, slot), weight, fans)?);
        }
        stack.apps[app] = LayerParams { slots };
    }
    Ok(stack)
}

/// Sinusoidal position table `[len×d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = (10000f64).powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + 2 * i] = angle.sin() as f32;
            pe[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
        if d % 2 == 1 {
            let angle = pos as f64 * (10000f64).powf(-((d - 1) as f64) / d as f64);
            pe[pos * d + d - 1] = angle.sin() as f32;
        }
    }
    pe
}

impl Model {
    pub fn new(cfg: ModelConfig, seeds: ModelSeeds, pretrained: Option<PretrainedEmbeddings>) -> Result<Model> {
        cfg.validate()?;
        match (cfg.embedding_mode, &pretrained) {
            (EmbeddingMode::RandomPruned, Some(_)) => {
                return Err(Error::Config("random_pruned embeddings take no embedding file".into()))
            }
            (EmbeddingMode::PretrainedFrozen, None) => {
                return Err(Error::Config("pretrained_frozen embeddings need an embedding file".into()))
            }
            (_, Some(p)) => p.check(&cfg)?,
            (_, None) => {}
        }
        Model::assemble(cfg, seeds, &mut RandomSource { seeds, pretrained })
    }

    /// Builds the model structure, pulling every tensor from `source` in
    /// the order of [`Model::stored_weights`] interleaved with
    /// [`Model::masked`].
    pub fn assemble(cfg: ModelConfig, seeds: ModelSeeds, source: &mut dyn ParamSource) -> Result<Model> {
        cfg.validate()?;
        let enc = build_table(&cfg, source, Table::Enc)?;
        let dec = build_table(&cfg, source, Table::Dec)?;
        let out_proj = if cfg.tie_decoder_io {
            None
        } else {
            Some(build_table(&cfg, source, Table::Out)?)
        };
        let embeddings = EmbeddingParams {
            mode: cfg.embedding_mode,
            enc,
            dec,
            out_proj,
        };
        let encoder = build_stack(&cfg, source, StackKind::Encoder, cfg.enc_layers)?;
        let decoder = build_stack(&cfg, source, StackKind::Decoder, cfg.dec_layers)?;
        Ok(Model {
            cfg,
            seeds,
            embeddings,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seeds(&self) -> ModelSeeds {
        self.seeds
    }

    fn tables(&self) -> Vec<(Table, &EmbeddingTable)> {
        let e = &self.embeddings;
        let mut out = vec![(Table::Enc, &e.enc), (Table::Dec, &e.dec)];
        out.extend(e.out_proj.as_ref().map(|t| (Table::Out, t)));
        out
    }

    /// Every supermask in a fixed order: embeddings, encoder, decoder.
    pub fn masked(&self) -> Vec<(String, &SupermaskTensor)> {
        let mut out = Vec::new();
        for (table, t) in self.tables() {
            if let EmbeddingTable::Masked(m) = t {
                out.push((table.mask_name().to_string(), m));
            }
        }
        for stack in [&self.encoder, &self.decoder] {
            for (app, params) in stack.apps.iter().enumerate() {
                for (slot, m) in stack.kind.slots().iter().zip(&params.slots) {
                    out.push((stack.mask_name(app, *slot), m));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`Model::masked`], same order.
    pub fn masked_mut(&mut self) -> Vec<(String, &mut SupermaskTensor)> {
        let mut out = Vec::new();
        let e = &mut self.embeddings;
        for (table, t) in [(Table::Enc, Some(&mut e.enc)), (Table::Dec, Some(&mut e.dec)), (Table::Out, e.out_proj.as_mut())] {
            if let Some(EmbeddingTable::Masked(m)) = t {
                out.push((table.mask_name().to_string(), m));
            }
        }
        for stack in [&mut self.encoder, &mut self.decoder] {
            let kind = stack.kind;
            let names: Vec<String> = (0..stack.apps.len())
                .flat_map(|app| kind.slots().iter().map(move |&s| (app, s)))
                .map(|(app, s)| format!("{}.{app}.{}", kind.prefix(), s.name()))
                .collect();
            let tensors = stack.apps.iter_mut().flat_map(|p| p.slots.iter_mut());
            out.extend(names.into_iter().zip(tensors));
        }
        out
    }

    /// Distinct frozen float tensors, each listed once.
    pub fn stored_weights(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = Vec::new();
        for (table, t) in self.tables() {
            out.push((table.weight_name().to_string(), Arc::clone(t.weight())));
        }
        for stack in [&self.encoder, &self.decoder] {
            for (set, w) in stack.weights.iter().enumerate() {
                for (slot, t) in stack.kind.slots().iter().zip(&w.slots) {
                    out.push((stack.weight_name(set, *slot), Arc::clone(t)));
                }
            }
        }
        out
    }

    /// Name of the stored weight behind each entry of [`Model::masked`].
    pub fn mask_weight_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (table, t) in self.tables() {
            if let EmbeddingTable::Masked(_) = t {
                out.push(table.weight_name().to_string());
            }
        }
        for stack in [&self.encoder, &self.decoder] {
            for app in 0..stack.apps.len() {
                for &slot in stack.kind.slots() {
                    out.push(stack.weight_name(stack.weight_index(app), slot));
                }
            }
        }
        out
    }

    /// CRC-32 of every stored weight, by name.
    pub fn weight_checksums(&self) -> Vec<(String, u32)> {
        self.stored_weights()
            .into_iter()
            .map(|(n, w)| (n, w.checksum()))
            .collect()
    }

    /// Combined checksum over all stored weights, in order.
    pub fn weight_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, c) in self.weight_checksums() {
            h.update(&c.to_le_bytes());
        }
        h.finalize()
    }

    /// Replaces every mask by the one its scores currently select and drops
    /// the scores.
    pub fn freeze_masks(&mut self) {
        for (_, m) in self.masked_mut() {
            m.freeze();
        }
    }

    fn register(&self, tape: &mut Tape, mode: WeightMode) -> Result<(Registered, Vec<Option<Var>>)> {
        let mut scores = Vec::new();
        let mut reg_masked = |tape: &mut Tape, m: &SupermaskTensor| -> Result<Var> {
            match mode {
                WeightMode::Unmasked => Ok(tape.constant(Tensor::clone(m.weight()))),
                WeightMode::Masked => {
                    let v = supermask::masked_weight(tape, m)?;
                    scores.push(v.scores);
                    Ok(v.effective)
                }
            }
        };
        let mut reg_table = |tape: &mut Tape, t: &EmbeddingTable| -> Result<Var> {
            match t {
                EmbeddingTable::Masked(m) => reg_masked(tape, m),
                EmbeddingTable::Frozen(w) => Ok(tape.constant(Tensor::clone(w))),
            }
        };
        let e = &self.embeddings;
        let emb_enc = reg_table(tape, &e.enc)?;
        let emb_dec = reg_table(tape, &e.dec)?;
        let out_proj = match &e.out_proj {
            Some(t) => reg_table(tape, t)?,
            None => emb_dec,
        };
        let mut stack_vars = |tape: &mut Tape, stack: &Stack| -> Result<Vec<Vec<Var>>> {
            stack
                .apps
                .iter()
                .map(|p| p.slots.iter().map(|m| reg_masked(tape, m)).collect())
                .collect()
        };
        let enc = stack_vars(tape, &self.encoder)?;
        let dec = stack_vars(tape, &self.decoder)?;
        Ok((
            Registered {
                emb_enc,
                emb_dec,
                out_proj,
                enc,
                dec,
            },
            scores,
        ))
    }

    /// Teacher-forced forward pass producing next-token logits.
    pub fn forward(&self, tape: &mut Tape, src: &Tokens, tgt_in: &Tokens) -> Result<Forward> {
        self.forward_with(tape, src, tgt_in, WeightMode::Masked)
    }

    pub fn forward_with(&self, tape: &mut Tape, src: &Tokens, tgt_in: &Tokens, mode: WeightMode) -> Result<Forward> {
        let (reg, scores) = self.register(tape, mode)?;
        let memory = encode(&self.cfg, tape, &reg, src)?;
        let logits = decode(&self.cfg, tape, &reg, memory, src, tgt_in)?;
        Ok(Forward { logits, scores })
    }

    /// Read-only copy of the effective weights (`W ⊙ M`) for inference.
    pub fn snapshot(&self) -> Snapshot {
        let e = &self.embeddings;
        let stack = |s: &Stack| -> Vec<Vec<Tensor>> {
            s.apps
                .iter()
                .map(|p| p.slots.iter().map(|m| m.effective_weight()).collect())
                .collect()
        };
        Snapshot {
            cfg: self.cfg.clone(),
            emb_enc: e.enc.effective(),
            emb_dec: e.dec.effective(),
            out_proj: e.out_proj.as_ref().map(EmbeddingTable::effective),
            enc: stack(&self.encoder),
            dec: stack(&self.decoder),
        }
    }

    /// Checks weight sharing in one-layer mode.
    pub fn one_layer_forward_consistency(&self) -> Result<ConsistencyReport> {
        if self.cfg.tie_mode != TieMode::OneLayer {
            return Err(Error::Config("consistency check needs tie_mode one_layer".into()));
        }
        let mut stacks = Vec::new();
        for stack in [&self.encoder, &self.decoder] {
            if stack.weights.len() != 1 {
                return Err(Error::Integrity(format!(
                    "{} stack holds {} weight sets",
                    stack.kind.prefix(),
                    stack.weights.len()
                )));
            }
            let shared = &stack.weights[0];
            let checksums: Vec<u32> = shared.slots.iter().map(|w| w.checksum()).collect();
            let mut distinct_scores = true;
            for (app, params) in stack.apps.iter().enumerate() {
                for (i, m) in params.slots.iter().enumerate() {
                    if !Arc::ptr_eq(m.weight(), &shared.slots[i]) || m.weight().checksum() != checksums[i] {
                        return Err(Error::Integrity(format!(
                            "{} does not share the layer weight",
                            stack.mask_name(app, stack.kind.slots()[i])
                        )));
                    }
                }
                for other in &stack.apps[..app] {
                    for (a, b) in params.slots.iter().zip(&other.slots) {
                        if let (Some(x), Some(y)) = (a.scores(), b.scores()) {
                            if std::ptr::eq(x.data().as_ptr(), y.data().as_ptr()) || x == y {
                                distinct_scores = false;
                            }
                        }
                    }
                }
            }
            stacks.push(StackReport {
                kind: stack.kind,
                weight_sets: stack.weights.len(),
                score_sets: stack.apps.len(),
                weight_checksums: checksums,
                distinct_scores,
            });
        }
        Ok(ConsistencyReport {
            encoder: stacks.remove(0),
            decoder: stacks.remove(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackReport {
    pub kind: StackKind,
    pub weight_sets: usize,
    pub score_sets: usize,
    pub weight_checksums: Vec<u32>,
    /// False if two applications hold identical score matrices.
    pub distinct_scores: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub encoder: StackReport,
    pub decoder: StackReport,
}

/// Effective weights frozen for inference; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct Snapshot {
    cfg: ModelConfig,
    emb_enc: Tensor,
    emb_dec: Tensor,
    out_proj: Option<Tensor>,
    enc: Vec<Vec<Tensor>>,
    dec: Vec<Vec<Tensor>>,
}

impl Snapshot {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn register(&self, tape: &mut Tape) -> Registered {
        let emb_enc = tape.constant(self.emb_enc.clone());
        let emb_dec = tape.constant(self.emb_dec.clone());
        let out_proj = match &self.out_proj {
            Some(t) => tape.constant(t.clone()),
            None => emb_dec,
        };
        let mut stack = |s: &[Vec<Tensor>]| -> Vec<Vec<Var>> {
            s.iter()
                .map(|app| app.iter().map(|w| tape.constant(w.clone())).collect())
                .collect()
        };
        let enc = stack(&self.enc);
        let dec = stack(&self.dec);
        Registered {
            emb_enc,
            emb_dec,
            out_proj,
            enc,
            dec,
        }
    }

    pub fn forward(&self, tape: &mut Tape, src: &Tokens, tgt_in: &Tokens) -> Result<Var> {
        let reg = self.register(tape);
        let memory = encode(&self.cfg, tape, &reg, src)?;
        decode(&self.cfg, tape, &reg, memory, src, tgt_in)
    }

    /// Greedy decoding for a batch of sources (content tokens, without
    /// `EOS`). Each output stops after the first `EOS` or `max_new` tokens.
    pub fn generate(&self, sources: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
        let mut active: Vec<usize> = Vec::new();
        for (i, s) in sources.iter().enumerate() {
            if s.is_empty() {
                outputs[i].push(EOS);
            } else {
                active.push(i);
            }
        }
        if active.is_empty() || max_new == 0 {
            return Ok(outputs);
        }
        let rows: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| crate::datapipe::source_row(&sources[i]))
            .collect();
        let src = Tokens::from_rows(&rows);
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let memory = encode(&self.cfg, &mut tape, &reg, &src)?;
        let memory_value = tape.value(memory).clone();

        let steps = max_new.min(self.cfg.max_len);
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; active.len()];
        let mut done = vec![false; active.len()];
        let vocab = self.cfg.tgt_vocab;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let reg = self.register(&mut tape);
            let memory = tape.constant(memory_value.clone());
            let tgt = Tokens::from_rows(&prefixes);
            let logits = decode(&self.cfg, &mut tape, &reg, memory, &src, &tgt)?;
            let values = tape.value(logits).data();
            for (r, prefix) in prefixes.iter_mut().enumerate() {
                let at = (r * tgt.len + tgt.len - 1) * vocab;
                let row = &values[at..at + vocab];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                prefix.push(best);
                if !done[r] {
                    outputs[active[r]].push(best);
                    done[r] = best == EOS;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

fn check_tokens(tokens: &Tokens, vocab: usize, max_len: usize) -> Result<()> {
    if tokens.len > max_len {
        return Err(Error::LengthOverflow {
            len: tokens.len,
            max_len,
        });
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    Ok(())
}

fn embed(cfg: &ModelConfig, tape: &mut Tape, table: Var, tokens: &Tokens) -> Result<Var> {
    let d = cfg.d_model;
    let x = tape.gather(table, &tokens.ids)?;
    let pe = positional_encoding(tokens.len, d);
    let mut tiled = Vec::with_capacity(tokens.batch * pe.len());
    for _ in 0..tokens.batch {
        tiled.extend_from_slice(&pe);
    }
    let pe = tape.constant(Tensor::new(vec![tokens.batch * tokens.len, d], tiled)?);
    tape.add(x, pe)
}

fn layer_norm(cfg: &ModelConfig, tape: &mut Tape, x: Var) -> Result<Var> {
    let gain = tape.constant(Tensor::full(vec![cfg.d_model], 1.0));
    let bias = tape.constant(Tensor::zeros(vec![cfg.d_model]));
    tape.layer_norm(x, gain, bias, LN_EPS)
}

/// Additive attention mask `[batch·heads × q_len × k_len]`.
fn attention_mask(cfg: &ModelConfig, keys: &Tokens, q_len: usize, causal: bool) -> Tensor {
    let (b, h, k_len) = (keys.batch, cfg.n_heads, keys.len);
    let mut data = vec![0.0f32; b * h * q_len * k_len];
    for bi in 0..b {
        let key_row = keys.row(bi);
        for hi in 0..h {
            for qi in 0..q_len {
                let base = ((bi * h + hi) * q_len + qi) * k_len;
                for (kj, &tok) in key_row.iter().enumerate() {
                    if tok == PAD || (causal && kj > qi) {
                        data[base + kj] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * h, q_len, k_len], data).expect("mask shape")
}

fn split_heads(cfg: &ModelConfig, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let x = tape.reshape(x, &[batch, len, h, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * h, len, dh])
}

#[allow(clippy::too_many_arguments)]
fn attention(
    cfg: &ModelConfig,
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    batch: usize,
    (q_len, k_len): (usize, usize),
    w: &[Var],
    mask: Tensor,
) -> Result<Var> {
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let q = tape.matmul(x_q, w[0])?;
    let k = tape.matmul(x_kv, w[1])?;
    let v = tape.matmul(x_kv, w[2])?;
    let q = split_heads(cfg, tape, q, batch, q_len)?;
    let k = split_heads(cfg, tape, k, batch, k_len)?;
    let v = split_heads(cfg, tape, v, batch, k_len)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
    let mask = tape.constant(mask);
    let scores = tape.add(scores, mask)?;
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[batch, h, q_len, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * q_len, cfg.d_model])?;
    tape.matmul(ctx, w[3])
}

fn feed_forward(cfg: &ModelConfig, tape: &mut Tape, x: Var, w_in: Var, w_out: Var) -> Result<Var> {
    let hidden = tape.matmul(x, w_in)?;
    let hidden = match cfg.activation {
        Activation::Relu => tape.relu(hidden),
        Activation::Gelu => tape.gelu(hidden),
    };
    tape.matmul(hidden, w_out)
}

fn encode(cfg: &ModelConfig, tape: &mut Tape, reg: &Registered, src: &Tokens) -> Result<Var> {
    check_tokens(src, cfg.src_vocab, cfg.max_len)?;
    let mut x = embed(cfg, tape, reg.emb_enc, src)?;
    for w in &reg.enc {
        let mask = attention_mask(cfg, src, src.len, false);
        let a = attention(cfg, tape, x, x, src.batch, (src.len, src.len), &w[0..4], mask)?;
        let sum = tape.add(x, a)?;
        x = layer_norm(cfg, tape, sum)?;
        let f = feed_forward(cfg, tape, x, w[4], w[5])?;
        let sum = tape.add(x, f)?;
        x = layer_norm(cfg, tape, sum)?;
    }
    Ok(x)
}

fn decode(cfg: &ModelConfig, tape: &mut Tape, reg: &Registered, memory: Var, src: &Tokens, tgt_in: &Tokens) -> Result<Var> {
    check_tokens(tgt_in, cfg.tgt_vocab, cfg.max_len)?;
    if src.batch != tgt_in.batch {
        return Err(Error::dim("decode", &[src.batch, src.len], &[tgt_in.batch, tgt_in.len]));
    }
    let (b, t) = (tgt_in.batch, tgt_in.len);
    let mut y = embed(cfg, tape, reg.emb_dec, tgt_in)?;
    for w in &reg.dec {
        let mask = attention_mask(cfg, tgt_in, t, true);
        let a = attention(cfg, tape, y, y, b, (t, t), &w[0..4], mask)?;
        let sum = tape.add(y, a)?;
        y = layer_norm(cfg, tape, sum)?;
        let mask = attention_mask(cfg, src, t, false);
        let c = attention(cfg, tape, y, memory, b, (t, src.len), &w[4..8], mask)?;
        let sum = tape.add(y, c)?;
        y = layer_norm(cfg, tape, sum)?;
        let f = feed_forward(cfg, tape, y, w[8], w[9])?;
        let sum = tape.add(y, f)?;
        y = layer_norm(cfg, tape, sum)?;
    }
    let logits = tape.matmul_nt(y, reg.out_proj)?;
    tape.reshape(logits, &[b, t, cfg.tgt_vocab])
}

/// Token-level cross entropy of `logits` against `tgt_out`, padding ignored.
pub fn sequence_loss(tape: &mut Tape, logits: Var, tgt_out: &Tokens) -> Result<Var> {
    let vocab = *tape.shape(logits).last().unwrap_or(&0);
    let flat = tape.reshape(logits, &[tgt_out.ids.len(), vocab])?;
    tape.cross_entropy(flat, &tgt_out.ids, PAD)
}

/// One row of the tensor layout derived from a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
    /// Number of masks applied to this stored tensor.
    pub masks: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

/// Stored tensors implied by `cfg`, without allocating any of them.
pub fn tensor_layout(cfg: &ModelConfig) -> Result<Vec<TensorInfo>> {
    cfg.validate()?;
    let emb_masks = match cfg.embedding_mode {
        EmbeddingMode::RandomPruned => 1,
        EmbeddingMode::PretrainedFrozen => 0,
    };
    let mut out = vec![
        TensorInfo {
            name: Table::Enc.weight_name().into(),
            shape: [cfg.src_vocab, cfg.d_model],
            masks: emb_masks,
        },
        TensorInfo {
            name: Table::Dec.weight_name().into(),
            shape: [cfg.tgt_vocab, cfg.d_model],
            masks: emb_masks,
        },
    ];
    if !cfg.tie_decoder_io {
        out.push(TensorInfo {
            name: Table::Out.weight_name().into(),
            shape: [cfg.tgt_vocab, cfg.d_model],
            masks: emb_masks,
        });
    }
    for (kind, apps) in [(StackKind::Encoder, cfg.enc_layers), (StackKind::Decoder, cfg.dec_layers)] {
        let sets = cfg.weight_sets(apps);
        for set in 0..sets {
            for &slot in kind.slots() {
                out.push(TensorInfo {
                    name: stack_weight_name(kind, sets, apps, set, slot),
                    shape: slot.shape(cfg),
                    masks: apps / sets,
                });
            }
        }
    }
    Ok(out)
}

/// One supermask implied by a config, in [`Model::masked`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskInfo {
    pub name: String,
    /// Stored weight the mask applies to.
    pub weight: String,
    pub shape: [usize; 2],
}

pub fn mask_layout(cfg: &ModelConfig) -> Result<Vec<MaskInfo>> {
    cfg.validate()?;
    let mut out = Vec::new();
    if cfg.embedding_mode == EmbeddingMode::RandomPruned {
        let mut tables = vec![Table::Enc, Table::Dec];
        if !cfg.tie_decoder_io {
            tables.push(Table::Out);
        }
        for t in tables {
            out.push(MaskInfo {
                name: t.mask_name().into(),
                weight: t.weight_name().into(),
                shape: [t.vocab(cfg), cfg.d_model],
            });
        }
    }
    for (kind, apps) in [(StackKind::Encoder, cfg.enc_layers), (StackKind::Decoder, cfg.dec_layers)] {
        let sets = cfg.weight_sets(apps);
        for app in 0..apps {
            let set = if sets == 1 { 0 } else { app };
            for &slot in kind.slots() {
                out.push(MaskInfo {
                    name: stack_mask_name(kind, app, slot),
                    weight: stack_weight_name(kind, sets, apps, set, slot),
                    shape: slot.shape(cfg),
                });
            }
        }
    }
    Ok(out)
}

/// Parameter accounting for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Entries over all score matrices (one per mask).
    pub trainable_scores: usize,
    /// Frozen floats the network applies, counting each application.
    pub frozen_weights: usize,
    /// Distinct floats that must be stored; shared tensors counted once.
    pub stored_weights_no_mask: usize,
    /// Stored floats a mask keeps: `k_count` per masked stored tensor plus
    /// every unmasked stored float.
    pub retained_weights: usize,
    /// Number of mask tensors.
    pub masks: usize,
    /// Sum of mask sizes in bits.
    pub mask_bits: usize,
}

pub fn param_counts(cfg: &ModelConfig) -> Result<ParamCounts> {
    let layout = tensor_layout(cfg)?;
    let mut c = ParamCounts {
        trainable_scores: 0,
        frozen_weights: 0,
        stored_weights_no_mask: 0,
        retained_weights: 0,
        masks: 0,
        mask_bits: 0,
    };
    for t in &layout {
        let n = t.numel();
        c.stored_weights_no_mask += n;
        c.frozen_weights += n * t.masks.max(1);
        c.trainable_scores += n * t.masks;
        c.masks += t.masks;
        c.mask_bits += n * t.masks;
        c.retained_weights += if t.masks > 0 {
            supermask::k_count(cfg.sigma, n)
        } else {
            n
        };
    }
    Ok(c)
}
