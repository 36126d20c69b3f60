//! The subcommands, as library functions. Each writes human-readable progress
//! to `log` and its artifacts to disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protograph_core::gradcheck::{faulty_check, run_suite, suite, OpSummary};
use protograph_core::graph::{export_graph, GraphDocument};
use protograph_core::metrics::Metrics;
use protograph_core::train::{describe, evaluate, forward_values, Sample, Trainer};
use protograph_core::Tensor;

use crate::artifacts::{
    adjacency_csv, ensure_dir, write_json, JsonLines, RunRecord, ADJACENCY_FILE, CHECKPOINT_FILE, CONFIG_FILE,
    HIERARCHY_FILE, HISTORY_FILE, RUN_FILE,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{AppError, AppResult};
use crate::manifest::{load_manifest, Record, Split, MANIFEST_FILE};
use crate::run_config::{resolve_seed, RunConfig};
use crate::synth::{generate_dataset, SynthSpec};
use crate::volume::read_volume;

fn say(log: &mut dyn Write, line: &str) {
    // Progress output is best effort; a closed stdout must not abort a run.
    let _ = writeln!(log, "{line}");
}

/// Labelled volumes of one split, in manifest order.
pub struct LoadedSplit {
    pub records: Vec<Record>,
    pub volumes: Vec<Tensor>,
}

impl LoadedSplit {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.volumes.iter().zip(&self.records).map(|(v, r)| Sample { volume: v, label: r.label }).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reads every volume of `split` and checks it has `dims`.
pub fn load_split(data_dir: &Path, split: Split, dims: [usize; 3]) -> AppResult<LoadedSplit> {
    let manifest = load_manifest(&data_dir.join(MANIFEST_FILE))?.split(split);
    let mut volumes = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let path = data_dir.join(&r.path);
        let v = read_volume(&path)?;
        check_dims(&path, &v, dims)?;
        volumes.push(v);
    }
    Ok(LoadedSplit { records: manifest.records, volumes })
}

fn check_dims(path: &Path, volume: &Tensor, dims: [usize; 3]) -> AppResult<()> {
    if volume.shape()[1..] != dims {
        return Err(AppError::Data(format!(
            "{} has dims {:?} but the model expects {dims:?}",
            path.display(),
            &volume.shape()[1..]
        )));
    }
    Ok(())
}

pub fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: u64, log: &mut dyn Write) -> AppResult<()> {
    let mut inputs = Vec::new();
    let spec = match spec_path {
        Some(path) => {
            inputs.push(path.to_path_buf());
            let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| AppError::Usage(format!("{}: invalid synth spec: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    spec.validate()?;
    ensure_dir(out)?;
    let dataset = generate_dataset(&spec, seed, out)?;
    write_json(&out.join("spec.json"), &spec)?;
    say(log, &format!("wrote {} volumes to {}", dataset.volumes.len(), out.display()));
    say(log, "split  label  count");
    for (split, label, n) in dataset.manifest.summary() {
        say(log, &format!("{:<6} {label:>5}  {n:>5}", format!("{split:?}").to_lowercase()));
    }
    if let Some(check) = &dataset.mean_check {
        let worst = check.z.iter().fold(0.0_f64, |m, z| m.max(z.abs()));
        let verdict = if check.passed { "ok" } else { "WARNING: exceeds 3 standard errors" };
        say(log, &format!("class-mean check: max |z| = {worst:.2} over {} sites ({verdict})", check.z.len()));
    }
    let mut outputs: Vec<PathBuf> = dataset.volumes.iter().map(|v| out.join(&v.path)).collect();
    outputs.extend([out.join(MANIFEST_FILE), out.join("spec.json")]);
    write_json(&out.join(RUN_FILE), &RunRecord { command: "synth".into(), seed: Some(seed), inputs, outputs })
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub data: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub seed: Option<u64>,
    /// Value of `PROTOGRAPH_SEED`, if set.
    pub env_seed: Option<String>,
}

pub fn cmd_train(args: &TrainArgs<'_>, log: &mut dyn Write) -> AppResult<Checkpoint> {
    let (mut run, raw) = RunConfig::load(args.config)?;
    run.train.seed = resolve_seed(args.seed, args.env_seed.as_deref(), run.train.seed)?;
    let data_dir = args
        .data
        .map(Path::to_path_buf)
        .or_else(|| run.data.dir.clone())
        .ok_or_else(|| AppError::Usage("no data directory: pass --data or set data.dir".into()))?;
    let out = args
        .out
        .map(Path::to_path_buf)
        .or_else(|| run.output.clone())
        .ok_or_else(|| AppError::Usage("no output directory: pass --out or set output".into()))?;

    let dims = run.model.input_dims;
    let train = load_split(&data_dir, run.data.train_split, dims)?;
    if train.is_empty() {
        return Err(AppError::Data(format!("split {:?} of {} is empty", run.data.train_split, data_dir.display())));
    }
    let val = match run.data.val_split {
        Some(split) => Some(load_split(&data_dir, split, dims)?).filter(|s| !s.is_empty()),
        None => None,
    };

    let mut trainer = match args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model != run.model {
                return Err(AppError::Usage(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            say(log, &format!("resuming from {} at epoch {}", path.display(), ckpt.state.next_epoch));
            Trainer::resume(run.model.clone(), run.train.clone(), ckpt.state)?
        }
        None => Trainer::new(run.model.clone(), run.train.clone())?,
    };

    ensure_dir(&out)?;
    fs::write(out.join(CONFIG_FILE), &raw).map_err(|e| AppError::io(out.join(CONFIG_FILE), e))?;
    let mut history = JsonLines::create(&out.join(HISTORY_FILE), args.resume.is_some())?;
    if args.resume.is_none() {
        for record in &trainer.state.history {
            history.push(record)?;
        }
    }

    let train_samples = train.samples();
    let val_samples = val.as_ref().map(LoadedSplit::samples);
    let started = Instant::now();
    while trainer.state.next_epoch < trainer.config.epochs {
        let epoch = trainer.state.next_epoch;
        let record = trainer.run_epoch(&train_samples, val_samples.as_deref()).map_err(|e| match AppError::from(e) {
            AppError::Numerical(msg) => AppError::Numerical(format!("epoch {epoch}: {msg}")),
            other => other,
        })?;
        history.push(&record)?;
        say(log, &describe(&record));
    }
    trainer.ensure_hierarchy(&train_samples)?;
    say(log, &format!("trained {} epochs in {:.1?}", trainer.config.epochs, started.elapsed()));

    let ckpt = Checkpoint { model: trainer.model.clone(), train: trainer.config.clone(), state: trainer.state.clone() };
    let hierarchy = trainer.state.hierarchy.as_ref().expect("ensured above");
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ckpt)?;
    write_json(&out.join(HIERARCHY_FILE), hierarchy)?;

    let mut outputs = vec![out.join(CONFIG_FILE), out.join(HISTORY_FILE), out.join(CHECKPOINT_FILE), out.join(HIERARCHY_FILE)];
    let adjacency = mean_adjacency(&trainer, &train_samples)?;
    fs::write(out.join(ADJACENCY_FILE), adjacency_csv(&adjacency)).map_err(|e| AppError::io(out.join(ADJACENCY_FILE), e))?;
    outputs.push(out.join(ADJACENCY_FILE));
    if let Some(v) = &val_samples {
        let metrics = trainer.evaluate(v)?;
        say(log, &metrics_table(&metrics));
        write_json(&out.join("metrics_val.json"), &metrics)?;
        outputs.push(out.join("metrics_val.json"));
    }
    write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            command: "train".into(),
            seed: Some(trainer.config.seed),
            inputs: [Some(args.config.to_path_buf()), Some(data_dir.join(MANIFEST_FILE)), args.resume.map(Path::to_path_buf)]
                .into_iter()
                .flatten()
                .collect(),
            outputs,
        },
    )?;
    Ok(ckpt)
}

/// Mean effective adjacency over `data`.
fn mean_adjacency(trainer: &Trainer, data: &[Sample<'_>]) -> AppResult<Tensor> {
    let hierarchy = trainer.state.hierarchy.as_ref().expect("hierarchy built");
    let n = trainer.state.params.nodes();
    let mut acc = Tensor::zeros(&[n, n]);
    for s in data {
        let f = forward_values(&trainer.state.params, &trainer.model, hierarchy, s.volume)?;
        for (a, b) in acc.data_mut().iter_mut().zip(f.effective.data()) {
            *a += b / data.len() as f64;
        }
    }
    Ok(acc)
}

pub fn metrics_table(m: &Metrics) -> String {
    format!(
        "ACC    SEN    SPE    AUC\n{:.3}  {:.3}  {:.3}  {:.3}\n(tp {} fp {} tn {} fn {})",
        m.acc, m.sen, m.spe, m.auc, m.tp, m.fp, m.tn, m.fn_
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".run.json");
    path.with_file_name(name)
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> AppResult<Metrics> {
    let ckpt = load_checkpoint(checkpoint)?;
    let hierarchy = ckpt
        .state
        .hierarchy
        .as_ref()
        .ok_or_else(|| AppError::Data(format!("{} has no prototype hierarchy", checkpoint.display())))?;
    let loaded = load_split(data, split, ckpt.model.input_dims)?;
    if loaded.is_empty() {
        return Err(AppError::Data(format!("split {split:?} of {} is empty", data.display())));
    }
    let metrics = evaluate(&ckpt.state.params, &ckpt.model, hierarchy, &loaded.samples())?;
    say(log, &metrics_table(&metrics));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let split = format!("{split:?}").to_lowercase();
        checkpoint.with_file_name(format!("metrics_{split}.json"))
    });
    write_json(&out, &metrics)?;
    write_json(
        &sidecar(&out),
        &RunRecord {
            command: "eval".into(),
            seed: None,
            inputs: vec![checkpoint.to_path_buf(), data.join(MANIFEST_FILE)],
            outputs: vec![out.clone()],
        },
    )?;
    Ok(metrics)
}

pub fn cmd_export_graph(
    checkpoint: &Path,
    volume: &Path,
    out: &Path,
    threshold: f64,
    log: &mut dyn Write,
) -> AppResult<GraphDocument> {
    let ckpt = load_checkpoint(checkpoint)?;
    let hierarchy = ckpt
        .state
        .hierarchy
        .as_ref()
        .ok_or_else(|| AppError::Data(format!("{} has no prototype hierarchy", checkpoint.display())))?;
    let v = read_volume(volume)?;
    check_dims(volume, &v, ckpt.model.input_dims)?;
    let f = forward_values(&ckpt.state.params, &ckpt.model, hierarchy, &v)?;
    let doc = export_graph(&f.effective, hierarchy, &f.fh, threshold)?;
    write_json(out, &doc)?;
    write_json(
        &sidecar(out),
        &RunRecord {
            command: "export-graph".into(),
            seed: None,
            inputs: vec![checkpoint.to_path_buf(), volume.to_path_buf()],
            outputs: vec![out.to_path_buf()],
        },
    )?;
    say(log, &format!("{} nodes, {} edges -> {}", doc.nodes.len(), doc.edges.len(), out.display()));
    Ok(doc)
}

/// Runs the finite-difference suite; returns the per-op summaries.
pub fn cmd_gradcheck(scale: &str, seeds: usize, inject_fault: bool, log: &mut dyn Write) -> AppResult<Vec<OpSummary>> {
    if scale != "tiny" {
        return Err(AppError::Usage(format!("unknown gradcheck scale {scale:?}; only \"tiny\" is available")));
    }
    if seeds == 0 {
        return Err(AppError::Usage("--seeds must be positive".into()));
    }
    let mut checks = suite();
    if inject_fault {
        checks.push(faulty_check());
    }
    let started = Instant::now();
    let summaries = run_suite(&checks, seeds)?;
    say(log, &format!("{:<20} {:>5} {:>8} {:>6} {:>12} {:>8}  result", "op", "seeds", "checked", "kinks", "worst", "limit"));
    for s in &summaries {
        say(
            log,
            &format!(
                "{:<20} {:>5} {:>8} {:>6} {:>12.3e} {:>8.0e}  {}",
                s.name,
                s.seeds,
                s.checked,
                s.skipped_kinks,
                s.worst,
                s.tolerance,
                if s.passed() { "pass" } else { "FAIL" }
            ),
        );
    }
    say(log, &format!("finished in {:.1?}", started.elapsed()));
    Ok(summaries)
}
