use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use serde::Serialize;

use fim_core::bench::{
    ingest_jsonl, read_jsonl, run_sweep, Dataset, HashTokenizer, IngestOptions, MetricKind, SweepConfig, SweepReport,
    TaskSource, TaskStatus,
};
use fim_core::fisher::{
    aggregate_layer_scores, estimate_fim_diagonal, rank_layers, sample_probe, score_and_rank, LayerRanking, ScoreFile,
    SelectionEnd,
};
use fim_core::model::{build_reference_model, ModelConfig, ModelHandle, ParameterSnapshot, TaskKind};
use fim_core::stability::{deviation, track, TrajectoryFile};
use fim_core::surgery::{finetune as run_finetune, mask_for_variant, FreezeMask, MaskVariant, TrialManifest};

use crate::config::{file_digest, RunConfig};
use crate::{Common, DataArgs, Selection, UsageError};

const DEFAULT_K: usize = 5;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn resolve(command: &str, common: &Common, epochs: Option<usize>) -> anyhow::Result<RunConfig> {
    RunConfig::resolve(command, common.config.as_deref(), &common.overrides(epochs))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `manifest.json` listing the command's outputs and their digests
/// next to the resolved run config.
fn write_manifest(dir: &Path, rc: &RunConfig, outputs: &[PathBuf]) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        run_config: &'a RunConfig,
        outputs: BTreeMap<String, String>,
    }
    let mut digests = BTreeMap::new();
    for p in outputs {
        let name = p.strip_prefix(dir).unwrap_or(p).display().to_string();
        digests.insert(name, file_digest(p)?);
    }
    write_json(&dir.join("manifest.json"), &Manifest { run_config: rc, outputs: digests })
}

fn out_dir(rc: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = rc.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_model(rc: &mut RunConfig, path: Option<&Path>) -> anyhow::Result<ModelHandle> {
    match path {
        Some(p) => {
            rc.add_input(p)?;
            let (model, manifest) = ModelHandle::load(p).with_context(|| format!("loading model {}", p.display()))?;
            rc.model = Some(manifest.model_config);
            Ok(model)
        }
        None => {
            let cfg = rc
                .model
                .as_ref()
                .ok_or_else(|| usage("no --model given and the config has no `model` section"))?;
            Ok(build_reference_model(cfg)?)
        }
    }
}

fn ingest_options(data: &DataArgs, cfg: &ModelConfig) -> IngestOptions {
    IngestOptions {
        schema: data.schema,
        task: cfg.task,
        label_map: None,
        tokenizer: HashTokenizer {
            vocab_size: cfg.vocab_size,
            max_seq_len: cfg.max_seq_len,
        },
    }
}

fn check_classes(ds: &Dataset, model: &ModelHandle) -> anyhow::Result<()> {
    if model.task_kind() == TaskKind::Classification && ds.num_classes() > model.num_classes() {
        return Err(usage(format!(
            "data has {} classes but the model predicts {}",
            ds.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn read_dataset(rc: &mut RunConfig, data: &DataArgs, model: &ModelHandle) -> anyhow::Result<Dataset> {
    rc.add_input(&data.data)?;
    let ds = read_jsonl(&data.data, &ingest_options(data, model.config()))?;
    check_classes(&ds, model)?;
    if ds.examples.is_empty() {
        return Err(usage(format!("{} holds no examples", data.data.display())));
    }
    Ok(ds)
}

fn selection_mask(ranking: &LayerRanking, select: &Selection) -> anyhow::Result<(MaskVariant, FreezeMask)> {
    let k = select.k.unwrap_or(DEFAULT_K.min(ranking.len()));
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let variant = match select.end {
        SelectionEnd::Top => MaskVariant::Top(k),
        SelectionEnd::Bottom => MaskVariant::Bottom(k),
    };
    let (mask, _) = mask_for_variant(variant, ranking)?;
    Ok((variant, mask))
}

fn print_scores(file: &ScoreFile, select: &Selection) -> anyhow::Result<()> {
    println!("rank  layer  group         score");
    for (pos, &layer) in file.ranking.iter().enumerate() {
        let s = &file.scores[layer];
        println!("{:>4}  {:>5}  {:<12}  {:.6e}", pos + 1, layer, s.group, s.score);
    }
    let (variant, mask) = selection_mask(&file.ranking(), select)?;
    println!("{}: layers {:?} + head", variant.label(), mask.trainable_ranked());
    Ok(())
}

pub fn score(model: Option<PathBuf>, data: DataArgs, select: Selection, common: Common) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("score", &common, None)?;
    let model = load_model(&mut rc, model.as_deref())?;
    let ds = read_dataset(&mut rc, &data, &model)?;
    let (probe, info) = sample_probe(&ds.examples, rc.probe.size, rc.probe.seed);
    let fim = estimate_fim_diagonal(&model, &probe, &rc.fisher())?;
    let scores = aggregate_layer_scores(&fim, model.partition(), rc.probe.normalized)?;
    let ranking = rank_layers(&scores);
    let mut file = ScoreFile::new(&model, info, &scores, &ranking);
    file.run_config = Some(rc.to_value());
    let dir = out_dir(&rc)?;
    let path = dir.join("scores.json");
    write_json(&path, &file)?;
    print_scores(&file, &select)?;
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn rank(scores: PathBuf, select: Selection, common: Common) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("rank", &common, None)?;
    rc.add_input(&scores)?;
    let file: ScoreFile = serde_json::from_str(&fs::read_to_string(&scores)?)
        .map_err(|e| usage(format!("{}: not a score file: {e}", scores.display())))?;
    print_scores(&file, &select)?;
    let (variant, mask) = selection_mask(&file.ranking(), &select)?;

    #[derive(Serialize)]
    struct MaskFile {
        variant: MaskVariant,
        mask: FreezeMask,
        model_digest: String,
        run_config: RunConfig,
    }
    let dir = out_dir(&rc)?;
    let path = dir.join("mask.json");
    write_json(
        &path,
        &MaskFile {
            variant,
            mask,
            model_digest: file.model_digest.clone(),
            run_config: rc,
        },
    )?;
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub struct FinetuneArgs {
    pub model: Option<PathBuf>,
    pub data: DataArgs,
    pub eval_data: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub select: Selection,
    pub epochs: Option<usize>,
    pub metric: Option<MetricKind>,
    pub common: Common,
}

fn default_metric(task: TaskKind) -> MetricKind {
    match task {
        TaskKind::Classification => MetricKind::Accuracy,
        TaskKind::Regression => MetricKind::Pearson,
    }
}

pub fn finetune(args: FinetuneArgs) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("finetune", &args.common, args.epochs)?;
    let model = load_model(&mut rc, args.model.as_deref())?;
    rc.add_input(&args.data.data)?;
    if let Some(e) = &args.eval_data {
        rc.add_input(e)?;
    }
    let opts = ingest_options(&args.data, model.config());
    let (ds, splits) = ingest_jsonl(&args.data.data, args.eval_data.as_deref(), &opts, rc.seed)?;
    check_classes(&ds, &model)?;
    let metric = args.metric.unwrap_or_else(|| default_metric(model.task_kind()));

    let (variant, mask) = if args.select.k.is_none() && args.scores.is_none() {
        (MaskVariant::Full, FreezeMask::full(model.partition().num_ranked()))
    } else {
        let ranking = match &args.scores {
            Some(p) => {
                rc.add_input(p)?;
                let file: ScoreFile = serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| usage(format!("{}: not a score file: {e}", p.display())))?;
                if file.model_digest != model.content_digest() {
                    log::warn!("score file {} was computed on a different model", p.display());
                }
                file.ranking()
            }
            None => {
                let (probe, _) = sample_probe(&splits.eval, rc.probe.size, rc.probe.seed);
                score_and_rank(&model, &probe, &rc.fisher())?.1
            }
        };
        let (variant, mask) = selection_mask(&ranking, &args.select)?;
        (variant, mask)
    };

    let dir = out_dir(&rc)?;
    let trial = run_finetune(&model, &mask, &splits, &rc.train, metric, "finetune", &variant.label())?;
    let mut outputs = Vec::new();
    for (epoch, snap) in &trial.checkpoints {
        outputs.push(snap.write(&dir, &format!("ckpt_epoch{epoch}"), model.config())?);
    }
    outputs.push(trial.model.snapshot().write(&dir, "final", model.config())?);
    let trial_path = dir.join("trial.json");
    write_json(
        &trial_path,
        &TrialManifest {
            config: rc.train.clone(),
            result: trial.result.clone(),
            run_config: Some(rc.to_value()),
        },
    )?;
    outputs.push(trial_path);
    write_manifest(&dir, &rc, &outputs)?;
    println!(
        "{}: trained {:?}; {:?} {:.4} -> {:.4}",
        variant.label(),
        trial.result.trainable_groups,
        metric,
        trial.result.eval_metric[0],
        trial.result.final_metric
    );
    Ok(ExitCode::SUCCESS)
}

fn sweep_variants(only: Option<Vec<MaskVariant>>) -> Vec<MaskVariant> {
    let standard = MaskVariant::standard();
    match only {
        None => standard,
        Some(keep) => {
            let mut v: Vec<MaskVariant> = standard.iter().copied().filter(|s| keep.contains(s)).collect();
            for k in keep {
                if !v.contains(&k) {
                    v.push(k);
                }
            }
            v
        }
    }
}

fn write_sweep_outputs(dir: &Path, report: &SweepReport) -> anyhow::Result<Vec<PathBuf>> {
    let json = dir.join("sweep.json");
    let table = dir.join("sweep.csv");
    let relative = dir.join("relative.csv");
    write_json(&json, report)?;
    fs::write(&table, report.table_csv())?;
    fs::write(&relative, report.relative_csv())?;
    Ok(vec![json, table, relative])
}

pub fn sweep(only: Option<Vec<MaskVariant>>, epochs: Option<usize>, common: Common) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("sweep", &common, epochs)?;
    if rc.tasks.is_empty() {
        return Err(usage("the config lists no tasks"));
    }
    for t in rc.tasks.clone() {
        if let TaskSource::Jsonl { path, eval_path, .. } = t {
            for p in std::iter::once(path).chain(eval_path) {
                if p.exists() {
                    rc.add_input(&p)?;
                }
            }
        }
    }
    let config = SweepConfig {
        train: rc.train.clone(),
        fisher: rc.fisher(),
        variants: sweep_variants(only),
        ..SweepConfig::default()
    };
    let mut report = run_sweep(&rc.tasks, &config);
    report.run_config = Some(rc.to_value());
    let dir = out_dir(&rc)?;
    let outputs = write_sweep_outputs(&dir, &report)?;
    write_manifest(&dir, &rc, &outputs)?;
    print!("{}", report.table_csv());
    for t in &report.tasks {
        if let TaskStatus::Failed { error } = &t.status {
            eprintln!("task `{}` failed: {error}", t.task_id);
        }
    }
    Ok(if report.all_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// `ckpt_epoch<N>.json` manifests in `dir`, sorted by epoch.
fn checkpoint_manifests(dir: &Path) -> anyhow::Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Err(usage(format!("checkpoint directory {} does not exist", dir.display())));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(epoch) = name
            .strip_prefix("ckpt_epoch")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|e| e.parse::<usize>().ok())
        {
            found.push((epoch, path));
        }
    }
    found.sort();
    Ok(found)
}

pub fn stability(checkpoints: PathBuf, data: DataArgs, common: Common) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("stability", &common, None)?;
    let manifests = checkpoint_manifests(&checkpoints)?;
    if manifests.len() < 2 {
        return Err(usage(format!(
            "{} holds {} checkpoint(s); at least two are needed",
            checkpoints.display(),
            manifests.len()
        )));
    }
    let mut snaps = Vec::new();
    let mut configs = Vec::new();
    for (epoch, path) in &manifests {
        rc.add_input(path)?;
        let (snap, manifest) =
            ParameterSnapshot::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        rc.add_input(&path.with_file_name(&manifest.payload))?;
        snaps.push((*epoch, snap));
        configs.push((path.clone(), manifest.model_config));
    }
    let (first_path, first_cfg) = &configs[0];
    let first_digest = &snaps[0].1.architecture_digest;
    for ((path, _), (_, snap)) in configs.iter().zip(&snaps) {
        if &snap.architecture_digest != first_digest {
            return Err(fim_core::Error::Snapshot(format!(
                "{} has architecture {} but {} has {}",
                first_path.display(),
                first_digest,
                path.display(),
                snap.architecture_digest
            ))
            .into());
        }
    }
    let template = build_reference_model(first_cfg)?;
    rc.model = Some(first_cfg.clone());
    let ds = read_dataset(&mut rc, &data, &template)?;
    let (probe, _) = sample_probe(&ds.examples, rc.probe.size, rc.probe.seed);
    let fisher = rc.fisher();
    let trajectory = track(&snaps, &template, &probe, &fisher, fisher.exec)?;
    let dev = deviation(&trajectory);
    for ((epoch, disp), tau) in dev.epochs.iter().zip(&dev.displacement).zip(&dev.kendall_tau) {
        println!("epoch {epoch:>3}: displacement {disp:.3}  kendall tau {tau:.3}");
    }
    let file = TrajectoryFile {
        checkpoint_digests: snaps.iter().map(|(_, s)| s.content_digest.clone()).collect(),
        trajectory,
        deviation: dev,
        run_config: Some(rc.to_value()),
    };
    let dir = out_dir(&rc)?;
    let json = dir.join("trajectory.json");
    let csv = dir.join("trajectory.csv");
    write_json(&json, &file)?;
    fs::write(&csv, file.trajectory.plot_csv())?;
    write_manifest(&dir, &rc, &[json, csv])?;
    Ok(ExitCode::SUCCESS)
}

pub fn report(input: PathBuf, common: Common) -> anyhow::Result<ExitCode> {
    let mut rc = resolve("report", &common, None)?;
    rc.add_input(&input)?;
    let text = fs::read_to_string(&input)?;
    let dir = out_dir(&rc)?;
    let outputs = if let Ok(sweep) = serde_json::from_str::<SweepReport>(&text) {
        print!("{}", sweep.table_csv());
        let table = dir.join("sweep.csv");
        let relative = dir.join("relative.csv");
        fs::write(&table, sweep.table_csv())?;
        fs::write(&relative, sweep.relative_csv())?;
        vec![table, relative]
    } else if let Ok(traj) = serde_json::from_str::<TrajectoryFile>(&text) {
        print!("{}", traj.trajectory.plot_csv());
        let csv = dir.join("trajectory.csv");
        fs::write(&csv, traj.trajectory.plot_csv())?;
        vec![csv]
    } else {
        return Err(usage(format!("{} is neither a sweep report nor a trajectory file", input.display())));
    };
    write_manifest(&dir, &rc, &outputs)?;
    Ok(ExitCode::SUCCESS)
}
