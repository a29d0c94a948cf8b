//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use occtrack::archive::{encode, load_archive};
use occtrack::eval::EvalReport;
use occtrack::memory::CellKind;
use occtrack::synth::{composites_as_sequences, generate_sequences, generate_static_composites, write_dataset, SequenceSample};
use occtrack::video::{evaluate_model, Direction, LogEntry, TrainConfig, TrainState, VideoDetector};
use serde_json::{json, Value};

use crate::config::{RunConfig, SPLITS};
use crate::error::{CliError, CliResult};
use crate::files::{dir_digest, file_digest, load_split, update_run_manifest, write_bytes, write_json, RUN_MANIFEST};
use crate::{figures, EvalArgs, GenArgs, Stage, TrainArgs, VizArgs, VERSION};

/// One generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub name: String,
    pub sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub sha256: String,
}

pub fn gen(cfg: &RunConfig, a: &GenArgs) -> CliResult<Vec<SplitSummary>> {
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !a.force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (pass --force to overwrite)",
                a.out.display()
            )));
        }
        for name in SPLITS.iter().copied().chain([RUN_MANIFEST]) {
            let p = a.out.join(name);
            let r = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else if p.exists() {
                fs::remove_file(&p)
            } else {
                Ok(())
            };
            r.map_err(|e| occtrack::Error::io(&p, e))?;
        }
    }
    let mut out = Vec::new();
    for split in SPLITS {
        let (scene, seed, n) = (cfg.split_scene(split), cfg.split_seed(split), cfg.split_size(split));
        let samples = if split == "composites" {
            composites_as_sequences(generate_static_composites(&scene, seed, n)?)
        } else {
            generate_sequences(&scene, seed, n)?
        };
        let dir = a.out.join(split);
        let info = json!({ "split": split, "seed": seed, "preset": cfg.preset, "scene": scene });
        write_dataset(&dir, &samples, info)?;
        let s = SplitSummary {
            name: split.to_string(),
            sequences: samples.len(),
            frames: samples.iter().map(SequenceSample::len).sum(),
            seed,
            sha256: dir_digest(&dir)?,
        };
        println!("{}: {} sequences, {} frames, seed {}, sha256 {}", s.name, s.sequences, s.frames, s.seed, s.sha256);
        out.push(s);
    }
    let artifacts: Vec<_> = out.iter().map(|s| (s.name.clone(), s.sha256.clone())).collect();
    update_run_manifest(&a.out, cfg, &artifacts)?;
    Ok(out)
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub weights: PathBuf,
    pub finished: bool,
    pub log: Vec<LogEntry>,
}

pub fn weights_name(kind: CellKind, direction: Direction) -> String {
    match direction {
        Direction::Forward => format!("{kind}.weights"),
        Direction::Bidirectional => format!("{kind}_bidirectional.weights"),
    }
}

pub const FRAME_WEIGHTS: &str = "frame.weights";

fn budget(base: &TrainConfig, a: &TrainArgs, bptt: bool) -> TrainConfig {
    TrainConfig {
        max_steps: a.max_steps.unwrap_or(base.max_steps),
        bptt_steps: if bptt { a.bptt.unwrap_or(base.bptt_steps) } else { base.bptt_steps },
        ..base.clone()
    }
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> CliResult<Vec<StageOutcome>> {
    if let Some(path) = &a.resume {
        return resume(cfg, a, path).map(|o| vec![o]);
    }
    if a.stop_after.is_some() && a.stage == Stage::All {
        return Err(CliError::Usage("--stop-after needs a single --stage".into()));
    }
    fs::create_dir_all(&a.run).map_err(|e| occtrack::Error::io(&a.run, e))?;
    let mut outcomes = Vec::new();
    let mut pretrained = None;
    if matches!(a.stage, Stage::Pretrain | Stage::All) {
        let data = load_split(&a.data, "composites")?;
        let mcfg = cfg.model_config(CellKind::None, Direction::Forward);
        let mut model = VideoDetector::<f32>::new(mcfg, cfg.model_seed(CellKind::None))?;
        let tcfg = budget(&cfg.pretrain, a, false);
        let out = match (&a.out, a.stage) {
            (Some(p), Stage::Pretrain) => p.clone(),
            _ => a.run.join(FRAME_WEIGHTS),
        };
        let meta = json!({ "stage": "pretrain", "init": "scratch" });
        let o = run_stage(cfg, &a.run, &out, &mut model, &data, &tcfg, None, a.stop_after, meta)?;
        if o.finished {
            pretrained = Some((model, file_digest(&o.weights)?));
        }
        outcomes.push(o);
    }
    if matches!(a.stage, Stage::Finetune | Stage::All) {
        let kind = a.cell.unwrap_or(cfg.model.cell.kind);
        let direction = a.direction.unwrap_or(cfg.model.direction);
        let mcfg = cfg.model_config(kind, direction);
        mcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let seed = cfg.model_seed(kind);
        let default_init = a.run.join(FRAME_WEIGHTS);
        let (mut model, init) = match (a.init.as_deref(), pretrained) {
            (Some("scratch"), _) => (VideoDetector::new(mcfg, seed)?, json!("scratch")),
            (Some(path), _) => from_frame_archive(Path::new(path), mcfg, seed)?,
            (None, Some((frame, digest))) => (
                VideoDetector::init_from_frame_detector(&frame.frame, mcfg, seed)?,
                json!({ "frame_weights_sha256": digest }),
            ),
            (None, None) if default_init.is_file() => from_frame_archive(&default_init, mcfg, seed)?,
            (None, None) => {
                log::warn!("no {} in the run directory; fine-tuning from scratch", FRAME_WEIGHTS);
                (VideoDetector::new(mcfg, seed)?, json!("scratch"))
            }
        };
        let data = load_split(&a.data, "train")?;
        let tcfg = budget(&cfg.finetune, a, true);
        let out = a.out.clone().unwrap_or_else(|| a.run.join(weights_name(kind, direction)));
        let meta = json!({ "stage": "finetune", "init": init });
        outcomes.push(run_stage(cfg, &a.run, &out, &mut model, &data, &tcfg, None, a.stop_after, meta)?);
    }
    Ok(outcomes)
}

fn from_frame_archive(
    path: &Path,
    mcfg: occtrack::video::ModelConfig,
    seed: u64,
) -> CliResult<(VideoDetector<f32>, Value)> {
    let arch = load_archive(path)?;
    let model = VideoDetector::init_from_frame_detector(&arch.model.frame, mcfg, seed)?;
    log::info!("initialised from the frame detector in {}", path.display());
    Ok((model, json!({ "frame_weights_sha256": file_digest(path)? })))
}

fn resume(cfg: &RunConfig, a: &TrainArgs, path: &Path) -> CliResult<StageOutcome> {
    let arch = load_archive(path)?;
    let state = arch.train.ok_or_else(|| {
        CliError::Usage(format!("{} holds a finished model; there is nothing to resume", path.display()))
    })?;
    let mut meta = arch.meta;
    let mut tcfg: TrainConfig = serde_json::from_value(meta["train"].clone())
        .map_err(|e| CliError::Data(format!("{}: unreadable training config: {e}", path.display())))?;
    if let Some(n) = a.max_steps {
        tcfg.max_steps = n;
    }
    let split = match meta["stage"].as_str() {
        Some("pretrain") => "composites",
        Some("finetune") => "train",
        other => return Err(CliError::Data(format!("{}: unknown stage {other:?}", path.display()))),
    };
    let data = load_split(&a.data, split)?;
    let out = a.out.clone().unwrap_or_else(|| path.to_path_buf());
    let mut model = arch.model;
    log::info!("resuming {} at step {}", path.display(), state.progress.step);
    meta.as_object_mut().map(|m| m.remove("finished"));
    run_stage(cfg, &a.run, &out, &mut model, &data, &tcfg, Some(state), a.stop_after, meta)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    cfg: &RunConfig,
    run_dir: &Path,
    out: &Path,
    model: &mut VideoDetector<f32>,
    data: &[SequenceSample],
    tcfg: &TrainConfig,
    state: Option<TrainState<f32>>,
    stop_after: Option<usize>,
    mut meta: Value,
) -> CliResult<StageOutcome> {
    let stage = meta["stage"].as_str().unwrap_or("train").to_string();
    log::info!(
        "{stage}: cell {} direction {}, {} sequences, {} steps",
        model.config.cell.kind,
        model.config.direction,
        data.len(),
        tcfg.max_steps
    );
    let st = occtrack::video::train(model, data, tcfg, state, stop_after, &mut |e| {
        log::info!("{stage} step {} epoch {} lr {:.1e} loss {:.4}", e.step, e.epoch, e.lr, e.loss)
    })?;
    let finished = st.is_finished(tcfg);
    meta["train"] = serde_json::to_value(tcfg).expect("train config serialises");
    meta["version"] = json!(VERSION);
    meta["finished"] = json!(finished);
    write_bytes(out, &encode(model, (!finished).then_some(&st), meta))?;

    let metrics_path = out.with_extension("metrics.jsonl");
    let mut lines = String::new();
    for e in &st.progress.log {
        lines.push_str(&serde_json::to_string(e).expect("log entry serialises"));
        lines.push('\n');
    }
    write_bytes(&metrics_path, lines.as_bytes())?;

    let rel = |p: &Path| {
        p.strip_prefix(run_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    update_run_manifest(
        run_dir,
        cfg,
        &[(rel(out), file_digest(out)?), (rel(&metrics_path), file_digest(&metrics_path)?)],
    )?;
    if finished {
        println!("{stage}: finished {} steps, wrote {}", st.progress.step, out.display());
    } else {
        println!("{stage}: stopped at step {}, resumable archive {}", st.progress.step, out.display());
    }
    Ok(StageOutcome {
        weights: out.to_path_buf(),
        finished,
        log: st.progress.log,
    })
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> CliResult<EvalReport> {
    let arch = load_archive(&a.weights)?;
    if arch.train.is_some() {
        log::warn!("{} is an interrupted run; evaluating its current weights", a.weights.display());
    }
    let data = load_split(&a.data, &a.split)?;
    let report = evaluate_model(&arch.model, &data, cfg.eval.iou_threshold, cfg.eval.score_threshold)?;
    write_json(&a.report, &report)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} on {}: mAP {} occluded recall {} visible recall {} persistence@20 {}",
        arch.model.config.cell.kind,
        a.split,
        fmt(report.map),
        fmt(report.occluded_recall),
        fmt(report.visible_recall),
        fmt(report.mean_persistence_at(20)),
    );
    Ok(report)
}

pub fn viz(cfg: &RunConfig, a: &VizArgs) -> CliResult<()> {
    let models: Vec<(String, PathBuf)> = if a.compare.is_empty() {
        let w = a
            .weights
            .clone()
            .ok_or_else(|| CliError::Usage("viz needs --weights or --compare".into()))?;
        vec![(String::new(), w)]
    } else {
        let dir = a
            .weights_dir
            .clone()
            .ok_or_else(|| CliError::Usage("--compare needs --weights-dir".into()))?;
        a.compare
            .iter()
            .map(|k| (k.to_string(), dir.join(weights_name(*k, cfg.model.direction))))
            .collect()
    };
    let data = load_split(&a.data, &a.split)?;
    let sample = data.get(a.sequence).ok_or_else(|| {
        CliError::Usage(format!("sequence {} out of range ({} in split {})", a.sequence, data.len(), a.split))
    })?;
    let end = a.count.map_or(sample.len(), |c| (a.start + c).min(sample.len()));
    if a.start >= end {
        return Err(CliError::Usage(format!("no frames in {}..{end}", a.start)));
    }
    let mut rows = Vec::new();
    for (name, path) in &models {
        let arch = load_archive(path)?;
        let out_dir = if name.is_empty() { a.out.clone() } else { a.out.join(name) };
        rows.push(figures::render_model(&arch.model, sample, a.start..end, &out_dir, cfg.eval.score_threshold)?);
    }
    let figure = figures::compare_figure(sample, a.start..end, &rows);
    let path = a.out.join(if a.compare.is_empty() { "strip.png" } else { "compare.png" });
    figures::save_png(&path, &figure)?;
    figures::write_persistence_csv(&a.out.join("persistence.csv"), &models, &rows)?;
    println!("wrote {} frames per model to {}", end - a.start, a.out.display());
    Ok(())
}
