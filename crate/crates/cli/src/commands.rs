use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use onelayer_core::datapipe::{generate_task, load_embeddings, PretrainedEmbeddings};
use onelayer_core::persist::{footprint as footprint_of, inspect as inspect_bytes, load_checkpoint, save_checkpoint};
use onelayer_core::persist::{FootprintReport, InspectReport, MaskedCheckpoint};
use onelayer_core::supermask::InitFamily;
use onelayer_core::train::{evaluate, run_many, sweep_configs, validate_sigmas, MetricsRecord, RunConfig, RunOutcome, TrainRun};
use onelayer_core::transformer::{EmbeddingMode, TieMode};
use onelayer_core::{Error, Result};
use serde_json::json;

use crate::{
    EmbeddingArg, EvalArgs, FootprintArgs, InitArg, InspectArgs, Overrides, Split, Switch, SweepArgs, TieArg,
    TrainArgs,
};

const REFERENCE: &str = include_str!("../../../configs/reference.json");

pub fn exit_code(e: &Error) -> ExitCode {
    if e.is_integrity() {
        ExitCode::from(3)
    } else if matches!(e, Error::NonFiniteLoss { .. }) {
        ExitCode::FAILURE
    } else {
        ExitCode::from(2)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::from_json(REFERENCE),
    }
}

impl From<TieArg> for TieMode {
    fn from(t: TieArg) -> Self {
        match t {
            TieArg::OneLayer => TieMode::OneLayer,
            TieArg::PerLayer => TieMode::PerLayer,
        }
    }
}

impl Overrides {
    fn any_model_override(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.sigma.is_some()
            || self.tie_mode.is_some()
            || self.init.is_some()
            || self.sigma_scaling.is_some()
            || self.embedding.is_some()
    }

    /// Loads the base configuration, applies overrides, validates, and loads
    /// the embedding file if one was requested.
    fn resolve(&self) -> Result<(RunConfig, Option<PretrainedEmbeddings>)> {
        let mut cfg = base_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(sigma) = self.sigma {
            cfg.model.sigma = sigma;
        }
        if let Some(t) = self.tie_mode {
            cfg.model.tie_mode = t.into();
        }
        if let Some(i) = self.init {
            cfg.model.init.family = match i {
                InitArg::Kaiming => InitFamily::KaimingUniform,
                InitArg::Xavier => InitFamily::XavierUniform,
            };
        }
        if let Some(s) = self.sigma_scaling {
            cfg.model.init.sigma_scaling = s == Switch::On;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        let file = match &self.embedding {
            None => None,
            Some(EmbeddingArg::Random) => {
                cfg.model.embedding_mode = EmbeddingMode::RandomPruned;
                None
            }
            Some(EmbeddingArg::File(p)) => {
                cfg.model.embedding_mode = EmbeddingMode::PretrainedFrozen;
                Some(p.clone())
            }
        };
        cfg.validate()?;
        let pretrained = match (cfg.model.embedding_mode, file) {
            (EmbeddingMode::PretrainedFrozen, Some(p)) => Some(load_embeddings(p, Some(&cfg.model))?),
            (EmbeddingMode::PretrainedFrozen, None) => {
                return Err(Error::Config(
                    "pretrained_frozen embeddings need --embedding file:<path>".into(),
                ))
            }
            _ => None,
        };
        Ok((cfg, pretrained))
    }
}

/// Writes every record to stdout and, if requested, to a JSON Lines file.
struct MetricsSink {
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsSink {
    fn create(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some((p.to_path_buf(), BufWriter::new(File::create(p).map_err(io_err(p))?))),
            None => None,
        };
        Ok(MetricsSink { file })
    }

    fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = r.to_json_line();
        println!("{line}");
        if let Some((p, w)) = &mut self.file {
            writeln!(w, "{line}").map_err(io_err(p))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((p, mut w)) = self.file {
            w.flush().map_err(io_err(&p))?;
        }
        Ok(())
    }
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut run = match &args.resume {
        Some(path) => {
            if args.overrides.any_model_override() {
                return Err(Error::Config(
                    "only --steps may be combined with --resume; the rest comes from the checkpoint".into(),
                ));
            }
            let mut run = load_checkpoint(path)?.train_run()?;
            if let Some(steps) = args.overrides.steps {
                run.config.train.steps = steps;
                run.config.validate()?;
            }
            run
        }
        None => {
            let (cfg, pretrained) = args.overrides.resolve()?;
            TrainRun::new(cfg, pretrained)?
        }
    };
    let mut sink = MetricsSink::create(args.metrics_out.as_deref())?;
    let summary = run.run(&mut |r| sink.write(r))?;
    sink.finish()?;
    if summary.last.weight_checksum != summary.initial_weight_checksum {
        return Err(Error::Integrity("stored weights changed during training".into()));
    }
    save_checkpoint(&args.out, &MaskedCheckpoint::inference(&run.model)?)?;
    if let Some(p) = &args.resume_out {
        save_checkpoint(p, &MaskedCheckpoint::resume(&run)?)?;
    }
    eprintln!(
        "trained {} steps{}; checkpoint written to {}",
        summary.steps,
        if summary.stopped_early { " (target reached)" } else { "" },
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = match (&args.config, &ckpt.header.resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(state)) => state.run.clone(),
        (None, None) => RunConfig::from_json(REFERENCE)?,
    };
    let model = ckpt.model()?;
    if model.config().src_vocab < cfg.task.vocab_size || model.config().tgt_vocab < cfg.task.vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary {} exceeds the checkpoint's model vocabulary",
            cfg.task.vocab_size
        )));
    }
    let data = generate_task(&cfg.task)?;
    let (name, examples) = match args.split {
        Split::Valid => ("valid", &data.valid),
        Split::Test => ("test", &data.test),
    };
    let m = evaluate(&model.snapshot(), examples, cfg.train.eval_batch_size)?;
    let out = json!({
        "split": name,
        "examples": examples.len(),
        "loss": m.loss,
        "token_acc": m.token_acc,
        "seq_acc": m.seq_acc,
        "bleu": m.bleu,
        "weight_checksum": model.weight_checksum(),
    });
    println!("{out}");
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(args: SweepArgs) -> Result<ExitCode> {
    validate_sigmas(&args.sigmas)?;
    if args.overrides.sigma.is_some() {
        return Err(Error::Config("use --sigmas, not --sigma, with sweep".into()));
    }
    let (base, pretrained) = args.overrides.resolve()?;
    let configs = sweep_configs(&base, &args.sigmas)?;
    let outcomes: Vec<RunOutcome> = run_many(&configs, pretrained.as_ref())
        .into_iter()
        .collect::<Result<_>>()?;

    // Streams are concatenated in σ order; each run starts again at step 0.
    let mut file = match &args.metrics_out {
        Some(p) => Some((p, BufWriter::new(File::create(p).map_err(io_err(p))?))),
        None => None,
    };
    if let Some((p, w)) = &mut file {
        for r in outcomes.iter().flat_map(|o| &o.records) {
            writeln!(w, "{}", r.to_json_line()).map_err(io_err(p))?;
        }
        w.flush().map_err(io_err(p))?;
    }

    let rows: Vec<_> = args
        .sigmas
        .iter()
        .zip(&outcomes)
        .map(|(&sigma, o)| {
            json!({
                "sigma": sigma,
                "steps": o.summary.steps,
                "val_loss": o.summary.last.val_loss,
                "val_seq_acc": o.summary.last.seq_acc,
                "test_loss": o.test.loss,
                "test_token_acc": o.test.token_acc,
                "test_seq_acc": o.test.seq_acc,
                "test_bleu": o.test.bleu,
            })
        })
        .collect();
    if args.json {
        println!("{}", serde_json::Value::Array(rows));
    } else {
        println!(
            "{:>6} {:>6} {:>10} {:>8} {:>10} {:>8} {:>8}",
            "sigma", "steps", "val_loss", "val_seq", "test_loss", "test_seq", "bleu"
        );
        for (&sigma, o) in args.sigmas.iter().zip(&outcomes) {
            println!(
                "{:>6} {:>6} {:>10.4} {:>8.3} {:>10.4} {:>8.3} {:>8.2}",
                sigma,
                o.summary.steps,
                o.summary.last.val_loss,
                o.summary.last.seq_acc,
                o.test.loss,
                o.test.seq_acc,
                o.test.bleu
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_inspect(r: &InspectReport) {
    let h = &r.header;
    println!("format version  {}", h.format_version);
    println!("flavor          {:?}", h.flavor);
    println!("tie mode        {:?}", h.tie_mode);
    println!("sigma           {}", h.sigma);
    println!(
        "model           d={} heads={} ffn={} layers={}/{} vocab={}/{}",
        h.model.d_model,
        h.model.n_heads,
        h.model.d_ffn,
        h.model.enc_layers,
        h.model.dec_layers,
        h.model.src_vocab,
        h.model.tgt_vocab
    );
    println!("file bytes      {} (header {})", r.file_bytes, r.header_bytes);
    println!(
        "sections        {} weight, {} embedding, {} mask, {} score",
        r.weight_sections, r.embedding_sections, r.mask_sections, r.score_sections
    );
    println!();
    println!("{:>4} {:<6} {:<28} {:>10} {:>10} {:>10}  crc", "#", "tag", "name", "bytes", "stored", "computed");
    for s in &r.sections {
        println!(
            "{:>4} {:<6} {:<28} {:>10} {:#010x} {:#010x}  {}",
            s.index,
            s.tag,
            s.name,
            s.bytes,
            s.stored_crc,
            s.computed_crc,
            if s.crc_ok { "ok" } else { "FAIL" }
        );
    }
    println!();
    println!("{:<28} {:<24} {:>12} {:>8} {:>8} {:>9}", "mask", "weight", "shape", "ones", "k", "density");
    for m in &r.masks {
        println!(
            "{:<28} {:<24} {:>12} {:>8} {:>8} {:>9.6}",
            m.name,
            m.weight,
            format!("{}x{}", m.shape[0], m.shape[1]),
            m.ones,
            m.k_count,
            m.density
        );
    }
    println!();
    println!("crc             {}", if r.crc_ok { "ok" } else { "FAILED" });
    for p in &r.problems {
        println!("problem         {p}");
    }
}

pub fn inspect(args: InspectArgs) -> Result<ExitCode> {
    let bytes = std::fs::read(&args.checkpoint).map_err(io_err(&args.checkpoint))?;
    let report = inspect_bytes(&bytes)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_inspect(&report);
    }
    Ok(if report.ok() { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn footprint_json(r: &FootprintReport) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(r)?)
}

pub fn footprint(args: FootprintArgs) -> Result<ExitCode> {
    let (cfg, _) = args.overrides.resolve()?;
    let primary = footprint_of(&cfg.model)?;
    let other = match args.compare {
        Some(t) => {
            let mut m = cfg.model.clone();
            m.tie_mode = t.into();
            Some(footprint_of(&m)?)
        }
        None => None,
    };
    if args.json {
        let mut reports = vec![footprint_json(&primary)?];
        if let Some(o) = &other {
            reports.push(footprint_json(o)?);
        }
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("[{:?}]", primary.tie_mode);
    println!("{primary}");
    if let Some(o) = other {
        println!();
        println!("[{:?}]", o.tie_mode);
        println!("{o}");
        println!();
        println!("{:<18} {:>16} {:>16}", "", format!("{:?}", primary.tie_mode), format!("{:?}", o.tie_mode));
        for (label, a, b) in [
            ("stored floats", primary.stored_floats, o.stored_floats),
            ("float bytes", primary.float_bytes, o.float_bytes),
            ("masks", primary.mask_count, o.mask_count),
            ("mask bytes", primary.mask_bytes, o.mask_bytes),
            ("total bytes", primary.total_bytes, o.total_bytes),
            ("retained floats", primary.retained_floats, o.retained_floats),
        ] {
            println!("{label:<18} {a:>16} {b:>16}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
