//! Score-only training: run configuration, Adam over scores, evaluation and
//! the metrics stream.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datapipe::{self, bleu, Batch, BatchSampler, Dataset, Example, PretrainedEmbeddings, TaskSpec, EOS};
use crate::error::{Error, Result};
use crate::kernels::map_ordered;
use crate::transformer::{derive_seed, sequence_loss, Model, ModelConfig, ModelSeeds, Snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f32,
    pub warmup_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub eval_every: usize,
    /// Validation examples used per evaluation (taken from the front).
    pub eval_samples: usize,
    pub eval_batch_size: usize,
    /// Stop once validation sequence accuracy reaches this value.
    #[serde(default)]
    pub target_seq_acc: Option<f64>,
}

impl TrainConfig {
    /// Inverse-square-root schedule with linear warmup; `step` is 1-based.
    pub fn lr_at(&self, step: usize) -> f32 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps.max(1) as f64;
        (f64::from(self.lr) * (step / warmup).min((warmup / step).sqrt())) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// Seeds weights, scores and batch order.
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.task.vocab_size > self.model.src_vocab || self.task.vocab_size > self.model.tgt_vocab {
            return fail(format!(
                "task vocabulary {} exceeds model vocabularies {}/{}",
                self.task.vocab_size, self.model.src_vocab, self.model.tgt_vocab
            ));
        }
        if self.task.max_len + 1 > self.model.max_len {
            return fail(format!(
                "task sequences of {} tokens plus a special token exceed max_len {}",
                self.task.max_len, self.model.max_len
            ));
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.eval_every == 0 || t.eval_batch_size == 0 {
            return fail("steps, batch_size, eval_every and eval_batch_size must be positive".into());
        }
        if t.eval_samples == 0 || t.eval_samples > self.task.valid_samples {
            return fail(format!(
                "eval_samples must be in 1..={}, got {}",
                self.task.valid_samples, t.eval_samples
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.eps.is_nan() || t.eps <= 0.0 {
            return fail("lr and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if let Some(target) = t.target_seq_acc {
            if !(0.0..=1.0).contains(&target) {
                return fail(format!("target_seq_acc must lie in [0, 1], got {target}"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn model_seeds(&self) -> ModelSeeds {
        ModelSeeds {
            weights: derive_seed(self.seed, "weights"),
            scores: derive_seed(self.seed, "scores"),
        }
    }

    pub fn batch_seed(&self) -> u64 {
        derive_seed(self.seed, "batches")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// Name of the score tensor, as listed by [`Model::masked`].
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam whose state covers exactly the model's score tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn for_model(model: &Model, cfg: &TrainConfig) -> Adam {
        let states = model
            .masked()
            .into_iter()
            .filter(|(_, m)| !m.is_frozen())
            .map(|(name, m)| AdamState {
                name,
                m: vec![0.0; m.numel()],
                v: vec![0.0; m.numel()],
            })
            .collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            states,
        }
    }

    /// Applies one update. `grads` is aligned with [`Model::masked`].
    fn update(&mut self, model: &mut Model, grads: &[Option<&[f32]>], lr: f32) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut states = self.states.iter_mut();
        for ((name, tensor), grad) in model.masked_mut().into_iter().zip(grads) {
            let (Some(scores), Some(grad)) = (tensor.scores_mut(), grad) else {
                continue;
            };
            let state = states
                .next()
                .filter(|s| s.name == name && s.m.len() == grad.len())
                .ok_or_else(|| Error::Integrity(format!("optimizer state does not match score tensor {name}")))?;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((s, &g), m), v) in scores
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *s -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        if states.next().is_some() {
            return Err(Error::Integrity("optimizer holds state for a missing score tensor".into()));
        }
        Ok(())
    }
}

/// Aggregate metrics over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Token-weighted mean cross entropy under teacher forcing.
    pub loss: f64,
    /// Teacher-forced argmax accuracy over non-padding targets.
    pub token_acc: f64,
    /// Fraction of greedy outputs equal to `target + EOS`.
    pub seq_acc: f64,
    pub bleu: f64,
}

struct BatchEval {
    loss_sum: f64,
    tokens: usize,
    correct: usize,
    exact: usize,
    hyps: Vec<Vec<usize>>,
}

fn eval_batch(snapshot: &Snapshot, batch: &Batch, examples: &[Example]) -> Result<BatchEval> {
    let mut tape = Tape::new();
    let logits = snapshot.forward(&mut tape, &batch.src, &batch.tgt_in)?;
    let loss = sequence_loss(&mut tape, logits, &batch.tgt_out)?;
    let tokens = batch.tgt_out.ids.iter().filter(|&&t| t != datapipe::PAD).count();
    let loss_sum = f64::from(tape.value(loss).data()[0]) * tokens as f64;
    let vocab = snapshot.config().tgt_vocab;
    let values = tape.value(logits).data();
    let mut correct = 0;
    for (pos, &target) in batch.tgt_out.ids.iter().enumerate() {
        if target == datapipe::PAD {
            continue;
        }
        let row = &values[pos * vocab..(pos + 1) * vocab];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == target);
    }
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
    let outputs = snapshot.generate(&sources, snapshot.config().max_len)?;
    let mut exact = 0;
    let mut hyps = Vec::with_capacity(outputs.len());
    for (out, ex) in outputs.into_iter().zip(examples) {
        let finished = out.last() == Some(&EOS);
        let body = if finished { &out[..out.len() - 1] } else { &out[..] };
        exact += usize::from(finished && body == ex.tgt.as_slice());
        hyps.push(body.to_vec());
    }
    Ok(BatchEval {
        loss_sum,
        tokens,
        correct,
        exact,
        hyps,
    })
}

/// Evaluates `examples` on parallel workers; results do not depend on the
/// number of threads.
pub fn evaluate(snapshot: &Snapshot, examples: &[Example], batch_size: usize) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty example set".into()));
    }
    let chunks: Vec<&[Example]> = examples.chunks(batch_size.max(1)).collect();
    let parts = map_ordered(&chunks, |chunk| eval_batch(snapshot, &Batch::from_examples(*chunk), chunk));
    let (mut loss_sum, mut tokens, mut correct, mut exact) = (0.0, 0, 0, 0);
    let mut hyps = Vec::with_capacity(examples.len());
    for part in parts {
        let part = part?;
        loss_sum += part.loss_sum;
        tokens += part.tokens;
        correct += part.correct;
        exact += part.exact;
        hyps.extend(part.hyps);
    }
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let b = bleu(&hyps, &refs, 4)?;
    Ok(EvalMetrics {
        loss: loss_sum / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        seq_acc: exact as f64 / examples.len() as f64,
        bleu: b.score,
    })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record; absent at step 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub bleu: f64,
    pub lr: f64,
    /// Combined CRC-32 of all stored weights.
    pub weight_checksum: u32,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub stopped_early: bool,
    pub last: MetricsRecord,
    pub initial_weight_checksum: u32,
}

/// A training run: model, optimizer and the data it trains on.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    data: Dataset,
}

impl TrainRun {
    pub fn new(config: RunConfig, pretrained: Option<PretrainedEmbeddings>) -> Result<TrainRun> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.model_seeds(), pretrained)?;
        let data = datapipe::generate_task(&config.task)?;
        let adam = Adam::for_model(&model, &config.train);
        Ok(TrainRun {
            config,
            model,
            adam,
            step: 0,
            data,
        })
    }

    /// Rebuilds a run from restored state.
    pub fn resume(config: RunConfig, model: Model, adam: Adam, step: usize) -> Result<TrainRun> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("checkpoint model does not match run config".into()));
        }
        let expected = Adam::for_model(&model, &config.train);
        let names = |a: &Adam| a.states.iter().map(|s| (s.name.clone(), s.m.len())).collect::<Vec<_>>();
        if names(&expected) != names(&adam) {
            return Err(Error::Integrity("optimizer state keys differ from score tensors".into()));
        }
        let data = datapipe::generate_task(&config.task)?;
        Ok(TrainRun {
            config,
            model,
            adam,
            step,
            data,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Runs `n` optimizer steps and returns their mean loss.
    pub fn train_steps(&mut self, n: usize) -> Result<f64> {
        let mut sampler = BatchSampler::new(&self.data.train, self.config.train.batch_size, self.config.batch_seed());
        sampler.skip(self.step);
        let mut total = 0.0;
        for _ in 0..n {
            let batch = sampler.next_batch();
            self.step += 1;
            let lr = self.config.train.lr_at(self.step);
            total += f64::from(train_step(&mut self.model, &mut self.adam, &batch, lr, self.step)?);
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    pub fn evaluate_valid(&self) -> Result<EvalMetrics> {
        let n = self.config.train.eval_samples;
        evaluate(&self.model.snapshot(), &self.data.valid[..n], self.config.train.eval_batch_size)
    }

    pub fn evaluate_test(&self) -> Result<EvalMetrics> {
        evaluate(&self.model.snapshot(), &self.data.test, self.config.train.eval_batch_size)
    }

    fn record(&self, train_loss: Option<f64>) -> Result<MetricsRecord> {
        let m = self.evaluate_valid()?;
        Ok(MetricsRecord {
            step: self.step,
            train_loss,
            val_loss: m.loss,
            token_acc: m.token_acc,
            seq_acc: m.seq_acc,
            bleu: m.bleu,
            lr: f64::from(self.config.train.lr_at(self.step)),
            weight_checksum: self.model.weight_checksum(),
        })
    }

    /// Trains to the step budget, evaluating every `eval_every` steps and
    /// handing each record to `sink`. A fresh run also reports step 0.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<RunSummary> {
        let initial_weight_checksum = self.model.weight_checksum();
        let cfg = self.config.train.clone();
        let mut last = self.record(None)?;
        // A resumed run already reported its starting point.
        if self.step == 0 {
            sink(&last)?;
        }
        let mut stopped_early = reached(&cfg, &last);
        while !stopped_early && self.step < cfg.steps {
            let chunk = (cfg.eval_every - self.step % cfg.eval_every).min(cfg.steps - self.step);
            let loss = self.train_steps(chunk)?;
            last = self.record(Some(loss))?;
            sink(&last)?;
            stopped_early = reached(&cfg, &last) && self.step < cfg.steps;
        }
        Ok(RunSummary {
            steps: self.step,
            stopped_early,
            last,
            initial_weight_checksum,
        })
    }
}

fn reached(cfg: &TrainConfig, record: &MetricsRecord) -> bool {
    cfg.target_seq_acc.is_some_and(|t| record.seq_acc >= t)
}

fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, lr: f32, step: usize) -> Result<f32> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.src, &batch.tgt_in)?;
    let loss = sequence_loss(&mut tape, fwd.logits, &batch.tgt_out)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&[f32]>> = fwd.scores.iter().map(|v| v.and_then(|v| tape.grad(v))).collect();
    adam.update(model, &grads, lr)?;
    Ok(value)
}

/// Outcome of one complete run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub test: EvalMetrics,
    pub run: TrainRun,
}

pub fn run_to_completion(config: RunConfig, pretrained: Option<PretrainedEmbeddings>) -> Result<RunOutcome> {
    let mut run = TrainRun::new(config, pretrained)?;
    let mut records = Vec::new();
    let summary = run.run(&mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    let test = run.evaluate_test()?;
    Ok(RunOutcome {
        records,
        summary,
        test,
        run,
    })
}

/// Runs independent configurations on parallel workers, results in input order.
pub fn run_many(configs: &[RunConfig], pretrained: Option<&PretrainedEmbeddings>) -> Vec<Result<RunOutcome>> {
    map_ordered(configs, |c| run_to_completion(c.clone(), pretrained.cloned()))
}

/// Rejects out-of-range or repeated retention ratios.
pub fn validate_sigmas(sigmas: &[f32]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::Config("sigma list is empty".into()));
    }
    let mut seen = HashSet::new();
    for &s in sigmas {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Config(format!("sigma must be in (0, 1], got {s}")));
        }
        if !seen.insert(s.to_bits()) {
            return Err(Error::Config(format!("duplicate sigma {s}")));
        }
    }
    Ok(())
}

/// One configuration per σ, everything else (including seeds) shared.
pub fn sweep_configs(base: &RunConfig, sigmas: &[f32]) -> Result<Vec<RunConfig>> {
    validate_sigmas(sigmas)?;
    base.validate()?;
    Ok(sigmas
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.model.sigma = s;
            c
        })
        .collect())
}
