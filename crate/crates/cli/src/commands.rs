use std::cell::Cell;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use movad::ablation::{run_ablation, AblationAxis, AblationGrid};
use movad::checkpoint::{load_model, save_checkpoint};
use movad::config::RunConfig;
use movad::data::{generate_synthetic, Dataset, FrameSource, ImageDirSource, SignalKind, SyntheticSpec};
use movad::engine::Session;
use movad::eval::{evaluate, EvalOptions, EvalResult};
use movad::head::RecurrentState;
use movad::model::Movad;
use movad::train::{init_rng, Trainer};
use serde::Serialize;

use crate::{AblateArgs, EvalArgs, ScoreArgs, Signal, SynthArgs, TrainArgs};

/// A preset name or the path of a TOML run config.
fn load_config(name: &str) -> Result<RunConfig> {
    if let Some(cfg) = RunConfig::preset(name) {
        return Ok(cfg);
    }
    let path = Path::new(name);
    ensure!(path.is_file(), "{name:?} is neither a preset (toy, full) nor a config file");
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let (h, w) = (cfg.model.stmm.input_h, cfg.model.stmm.input_w);
    let d = Dataset::load(path, h, w).with_context(|| format!("loading dataset {}", path.display()))?;
    info!("{}: {} videos, {} frames", path.display(), d.len(), d.total_frames());
    Ok(d)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None if args.long_range => SyntheticSpec::long_range(0),
        None => SyntheticSpec::toy(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(v) = args.videos {
        spec.num_videos = v;
    }
    if let Some(v) = args.frames {
        spec.frames = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(s) = args.signal {
        spec.signal = match s {
            Signal::Appearance => SignalKind::AppearanceSwitch,
            Signal::Motion => SignalKind::MotionDiscontinuity,
        };
    }
    let dataset = generate_synthetic(&spec)?;
    dataset.save(&args.out)?;
    fs::write(args.out.join("spec.toml"), toml::to_string(&spec)?)?;
    info!("wrote {} videos to {}", dataset.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct StepLine {
    step: u64,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc: Option<f64>,
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    args.overrides.apply(&mut cfg);
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(d) = args.data {
        cfg.data.train = Some(d);
    }
    if let Some(d) = args.eval_data {
        cfg.data.eval = Some(d);
    }
    cfg.validate().context("invalid run config")?;
    let train_path = cfg.data.train.clone().context("no training data: pass --data")?;
    // everything that can fail on input is checked before the output directory exists
    let train_set = load_dataset(&train_path, &cfg)?;
    let eval_set = cfg.data.eval.as_deref().map(|p| load_dataset(p, &cfg)).transpose()?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    cfg.save(&args.out.join("config.toml"))?;
    let mut metrics = create(&args.out.join("metrics.jsonl"))?;
    let mut epochs = create(&args.out.join("epochs.jsonl"))?;
    let mut log_file = create(&args.out.join("train.log"))?;
    let checkpoint = args.out.join("checkpoint.bin");

    let mut model = Movad::new(&cfg.model)?;
    model.init_params(&mut init_rng(cfg.train.seed));
    let mut trainer = Trainer::new(model, &cfg.train, &train_set)?;
    let steps = trainer.steps_per_epoch(&train_set);
    info!(
        "training {} parameters for {} epochs of {steps} steps, class weights {:?}",
        trainer.model.params.iter().map(|(_, t)| t.numel()).sum::<usize>(),
        cfg.train.epochs,
        trainer.weights
    );
    writeln!(log_file, "weights\t{:?}", trainer.weights)?;

    let options = EvalOptions { exclude_warmup: args.exclude_warmup };
    let loss_sum = Cell::new(0.0);
    let loss_count = Cell::new(0usize);
    let mut io_error: Option<io::Error> = None;
    let mut epoch_io_error: Option<anyhow::Error> = None;
    let total = cfg.train.epochs;
    trainer.fit(
        &train_set,
        total,
        |m| {
            loss_sum.set(loss_sum.get() + m.loss);
            loss_count.set(loss_count.get() + 1);
            let line = StepLine { step: m.step, loss: m.loss, lr: m.learning_rate };
            let res = serde_json::to_string(&line)
                .map_err(io::Error::other)
                .and_then(|s| writeln!(metrics, "{s}"));
            if let Err(e) = res {
                io_error.get_or_insert(e);
            }
        },
        |epoch, t| {
            let mean_loss = loss_sum.replace(0.0) / loss_count.replace(0).max(1) as f64;
            let auc = match &eval_set {
                Some(d) => Some(evaluate(&Arc::new(t.model.clone()), d, options)?.overall_auc),
                None => None,
            };
            let auc_text = auc.map(|a| format!("\tauc {a:.4}")).unwrap_or_default();
            info!("epoch {}/{total}: mean loss {mean_loss:.4}{auc_text}", epoch + 1);
            let res = (|| -> Result<()> {
                writeln!(log_file, "epoch {}/{total}\tloss {mean_loss:.6}{auc_text}", epoch + 1)?;
                writeln!(epochs, "{}", serde_json::to_string(&EpochLine { epoch: epoch + 1, mean_loss, auc })?)?;
                Ok(())
            })();
            if let Err(e) = res {
                epoch_io_error.get_or_insert(e);
            }
            save_checkpoint(t, &checkpoint)
        },
    )?;
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    if let Some(e) = epoch_io_error {
        return Err(e);
    }
    for w in [&mut metrics, &mut epochs, &mut log_file] {
        w.flush()?;
    }
    info!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

fn print_summary(result: &EvalResult) {
    println!("overall_auc\t{:.6}", result.overall_auc);
    if let Some(m) = result.per_video_mean_auc {
        println!("per_video_mean_auc\t{m:.6}");
    }
    println!("frames\t{}", result.num_frames);
    let fmt = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("category\tego\tnon_ego");
    for (cat, auc) in &result.per_class {
        println!("{}\t{}\t{}", cat.code(), fmt(auc.ego), fmt(auc.non_ego));
    }
    for (id, e) in &result.failures {
        println!("failed\t{id}\t{e}");
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let expected = args.config.as_deref().map(load_config).transpose()?;
    let model = load_model(&args.checkpoint, expected.as_ref().map(|c| &c.model))
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let cfg = RunConfig { model: model.config().clone(), ..RunConfig::toy() };
    let dataset = load_dataset(&args.data, &cfg)?;
    let options = EvalOptions { exclude_warmup: args.exclude_warmup };
    let result = evaluate(&Arc::new(model), &dataset, options)?;
    print_summary(&result);
    if let Some(out) = &args.out {
        write_json(out, &result)?;
    }
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    if args.input.is_file() {
        bail!(
            "{} is a file; video containers are not decoded, extract the frames into an image directory",
            args.input.display()
        );
    }
    ensure!(args.every >= 1, "--every must be at least 1");
    let model = load_model(&args.checkpoint, None).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let source = ImageDirSource::open(&args.input)?;
    ensure!(!source.is_empty(), "no frame images in {}", args.input.display());
    let mut session = Session::for_model(Arc::new(model));
    if let Some(path) = &args.initial_state {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        session.set_state(RecurrentState::from_json(&text)?)?;
    }
    if let Some(dir) = &args.dump_state {
        fs::create_dir_all(dir)?;
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for i in 0..source.len() {
        let s = session.push_frame(&source.frame(i)?)?;
        writeln!(out, "{i}\t{}", s.value())?;
        if let Some(dir) = &args.dump_state {
            if (i + 1) % args.every == 0 {
                fs::write(dir.join(format!("state_{i:06}.json")), session.state().to_json()?)?;
            }
        }
    }
    out.flush()?;
    info!("scored {} frames", source.len());
    Ok(())
}

pub fn ablate(args: AblateArgs, seed: Option<u64>) -> Result<()> {
    let mut grid = match &args.grid {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<AblationGrid>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let base = load_config(&args.config)?;
            AblationGrid {
                axis: args.axis.unwrap_or(AblationAxis::MemoryOnoff),
                values: Vec::new(),
                epochs: base.train.epochs,
                base,
                seeds: vec![0, 1, 2],
                eval: EvalOptions::default(),
            }
        }
    };
    args.overrides.apply(&mut grid.base);
    if let Some(a) = args.axis {
        grid.axis = a;
    }
    if !args.values.is_empty() {
        grid.values = args.values.clone();
    }
    if !args.seeds.is_empty() {
        grid.seeds = args.seeds.clone();
    } else if let Some(s) = seed {
        grid.seeds = vec![s];
    }
    if let Some(e) = args.overrides.epochs {
        grid.epochs = e;
    }
    if args.exclude_warmup {
        grid.eval.exclude_warmup = true;
    }
    grid.base.data.train = Some(args.data.clone());
    grid.base.data.eval = args.eval_data.clone();
    grid.validate().context("invalid ablation grid")?;

    let train_set = load_dataset(&args.data, &grid.base)?;
    let eval_set = match &args.eval_data {
        Some(p) => load_dataset(p, &grid.base)?,
        None => {
            warn!("no --eval-data given; evaluating on the training set");
            train_set.clone()
        }
    };
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("grid.toml"), toml::to_string(&grid)?)?;
    let points = grid.points()?.len() * grid.seeds.len();
    let mut done = 0;
    let report = run_ablation(&grid, &train_set, &eval_set, |r| {
        done += 1;
        match (&r.error, r.best_auc) {
            (Some(e), _) => warn!("[{done}/{points}] {} seed {}: failed: {e}", r.value, r.seed),
            (None, Some(b)) => info!("[{done}/{points}] {} seed {}: best auc {b:.4}", r.value, r.seed),
            (None, None) => {}
        }
    })?;
    report.write(&args.out)?;
    print!("{}", report.summary_tsv());
    info!("report written to {}", args.out.display());
    Ok(())
}

