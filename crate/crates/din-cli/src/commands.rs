//! Implementations of the `din` subcommands: thin orchestration over
//! the library, plus path resolution and progress/summary output.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use din_core::config::RunConfig;
use din_core::dsp::{extract_features, FrontendConfig, SpectrogramTensor};
use din_core::error::{DinError, Result};
use din_core::io::checkpoint::{load_checkpoint, Checkpoint};
use din_core::io::feature_cache::{read_feature_cache, write_feature_cache};
use din_core::io::wav::read_clip;
use din_core::io::atomic_write;
use din_core::gaussian::BonafideGaussian;
use din_core::manifest::{self, GroupPolicy, Key, ManifestEntry};
use din_core::metrics::{calibrate_threshold, evaluate as evaluate_records};
use din_core::model::{complexity, features_to_batch, DinModel, GroupLabel, Stage};
use din_core::score::{self, Aggregation, BinaryLabel};
use din_core::synth::{generate_synthetic_dataset, SyntheticDatasetSpec};
use din_core::train::{
    append_train_log, fit_bonafide_gaussian, train_stage1, train_stage2, TrainOutcome,
    TrainSample, TrainSet,
};

use crate::{
    AggregateArg, CountArgs, EvaluateArgs, ExportArgs, ExtractArgs, FitGaussianArgs,
    ScoreArgs, StageArg, SynthArgs, TrainArgs,
};

/// WAV directory precedence: explicit flag, then the config, then a
/// `wav/` directory next to the manifest.
fn resolve_wav_dir(
    flag: Option<PathBuf>,
    config: Option<&RunConfig>,
    manifest_path: &Path,
) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(cfg) = config {
        return cfg.paths.wav_dir.clone();
    }
    manifest_path.parent().unwrap_or_else(|| Path::new("")).join("wav")
}

fn load_model(path: &Path) -> Result<(Checkpoint, DinModel)> {
    let cp = load_checkpoint(path)?;
    let model = cp.build_model()?;
    Ok((cp, model))
}

/// Per-utterance feature tensors, extracted in parallel, order matching
/// `entries`. SpecAug is never applied here: caches and scoring inputs
/// are clean, augmentation happens per batch inside training.
fn extract_all(
    entries: &[ManifestEntry],
    frontend: &FrontendConfig,
) -> Result<Vec<Vec<SpectrogramTensor>>> {
    entries
        .par_iter()
        .map(|e| {
            let clip = read_clip(&e.wav_path)?;
            extract_features(&clip, frontend, false, 0)
        })
        .collect()
}

pub fn extract(args: ExtractArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let wav_dir = resolve_wav_dir(args.wav_dir, Some(&cfg), &args.manifest);
    let entries =
        manifest::parse_cm_protocol(&args.manifest, &wav_dir, &cfg.groups, GroupPolicy::Lenient)?;
    if entries.is_empty() {
        return Err(DinError::data(format!("{} lists no utterances", args.manifest.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| DinError::io(&args.out, e))?;
    let n_segments: usize = entries
        .par_iter()
        .map(|e| {
            let clip = read_clip(&e.wav_path)?;
            let feats = extract_features(&clip, &cfg.frontend, false, 0)?;
            write_feature_cache(&args.out.join(format!("{}.dinf", e.utt_id)), &feats)?;
            Ok(feats.len())
        })
        .sum::<Result<usize>>()?;
    println!(
        "extracted {} utterances ({} segments) -> {}",
        entries.len(),
        n_segments,
        args.out.display()
    );
    Ok(())
}

/// Assemble the training set from cached features, one sample per
/// segment, with stage-1 class labels induced by the group map.
fn load_train_set(cfg: &RunConfig) -> Result<TrainSet> {
    let entries = manifest::parse_cm_protocol(
        &cfg.paths.train_manifest,
        &cfg.paths.wav_dir,
        &cfg.groups,
        GroupPolicy::Strict,
    )?;
    let labels = manifest::class_label_map(&cfg.groups);
    let mut samples = Vec::new();
    for e in &entries {
        let cache = cfg.paths.features_dir.join(format!("{}.dinf", e.utt_id));
        if !cache.is_file() {
            return Err(DinError::data(format!(
                "no feature cache for {} at {} (run `din extract` on the training \
                 manifest first)",
                e.utt_id,
                cache.display()
            )));
        }
        let class_label = match &e.generator_id {
            None => 0,
            Some(id) => *labels.get(id).ok_or_else(|| {
                DinError::data(format!("generator {id} missing from the group map"))
            })?,
        };
        let group = e.group.ok_or_else(|| {
            DinError::data(format!("{}: training entries need a group", e.utt_id))
        })?;
        for (segment_index, data) in read_feature_cache(&cache)?.into_iter().enumerate() {
            samples.push(TrainSample {
                tensor: SpectrogramTensor {
                    data,
                    source_utt: e.utt_id.clone(),
                    segment_index,
                },
                class_label,
                group,
            });
        }
    }
    TrainSet::new(samples)
}

fn stage_summary(stage: &str, outcome: &TrainOutcome, checkpoint: &Path) {
    let first = outcome.records.first().map(|r| r.total);
    let last = outcome.records.last().map(|r| r.total);
    match (first, last) {
        (Some(a), Some(b)) => println!(
            "{stage}: {} steps, loss {a:.4} -> {b:.4}, checkpoint {}",
            outcome.records.len(),
            checkpoint.display()
        ),
        _ => println!("{stage}: 0 steps, checkpoint {}", checkpoint.display()),
    }
}

/// Replace any previous log so a re-run writes the same content rather
/// than appending to stale history.
fn write_stage_log(dir: &Path, name: &str, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DinError::io(dir, e))?;
    let path = dir.join(name);
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| DinError::io(&path, e))?;
    }
    append_train_log(&path, &outcome.records)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.validate_label_space()?;
    let set = load_train_set(&cfg)?;
    println!(
        "training set: {} segments ({} bonafide) from {}",
        set.len(),
        set.n_bonafide(),
        cfg.paths.train_manifest.display()
    );
    let ckpt_dir = &cfg.paths.checkpoint_dir;
    std::fs::create_dir_all(ckpt_dir).map_err(|e| DinError::io(ckpt_dir, e))?;
    let stage1_path = ckpt_dir.join("stage1.dinc");
    let stage2_path = ckpt_dir.join("stage2.dinc");
    let specaug = Some(&cfg.frontend.specaug);

    if matches!(args.stage, StageArg::One | StageArg::All) {
        let mut model = match &args.resume {
            Some(path) => {
                let (cp, model) = load_model(path)?;
                if cp.stage()? != Stage::Stage1 {
                    return Err(DinError::config(format!(
                        "--resume {} is not a stage-1 checkpoint",
                        path.display()
                    )));
                }
                model
            }
            None => DinModel::new_stage1(&cfg.model, cfg.train.seed)?,
        };
        let outcome = train_stage1(&mut model, &set, &cfg.train, specaug, Some(&stage1_path))?;
        write_stage_log(&cfg.paths.log_dir, "stage1.tsv", &outcome)?;
        stage_summary("stage 1", &outcome, &stage1_path);
    }

    if matches!(args.stage, StageArg::Two | StageArg::All) {
        // Stage 2 either continues a stage-2 checkpoint or transfers the
        // backbone out of a stage-1 checkpoint and adds a fresh head.
        let resume = match args.stage {
            StageArg::All => None, // stage 1 above already consumed --resume
            _ => args.resume.clone(),
        };
        let mut model = match resume {
            Some(path) => {
                let (cp, model) = load_model(&path)?;
                match cp.stage()? {
                    Stage::Stage2 => model,
                    Stage::Stage1 => {
                        let mut m2 = DinModel::new_stage2(&cfg.model, cfg.train.seed)?;
                        cp.load_backbone_into(&mut m2)?;
                        m2
                    }
                }
            }
            None => {
                if !stage1_path.is_file() {
                    return Err(DinError::config(format!(
                        "stage 2 needs a stage-1 checkpoint at {} (run --stage 1 \
                         first or pass --resume)",
                        stage1_path.display()
                    )));
                }
                let cp = load_checkpoint(&stage1_path)?;
                let mut m2 = DinModel::new_stage2(&cfg.model, cfg.train.seed)?;
                cp.load_backbone_into(&mut m2)?;
                m2
            }
        };
        let outcome = train_stage2(&mut model, &set, &cfg.train, specaug, Some(&stage2_path))?;
        write_stage_log(&cfg.paths.log_dir, "stage2.tsv", &outcome)?;
        stage_summary("stage 2", &outcome, &stage2_path);
    }
    Ok(())
}

pub fn fit_gaussian(args: FitGaussianArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let wav_dir = resolve_wav_dir(args.wav_dir, Some(&cfg), &args.manifest);
    let entries =
        manifest::parse_cm_protocol(&args.manifest, &wav_dir, &cfg.groups, GroupPolicy::Lenient)?;
    let bonafide: Vec<ManifestEntry> =
        entries.into_iter().filter(|e| e.key == Key::Bonafide).collect();
    if bonafide.is_empty() {
        return Err(DinError::data(format!(
            "{} has no bonafide utterances to fit on",
            args.manifest.display()
        )));
    }
    let (_, model) = load_model(&args.checkpoint)?;
    let features = extract_all(&bonafide, &cfg.frontend)?;
    let mut samples = Vec::new();
    for feats in features {
        for tensor in feats {
            samples.push(TrainSample { tensor, class_label: 0, group: GroupLabel::Bonafide });
        }
    }
    let n_segments = samples.len();
    let set = TrainSet::new(samples)?;
    let g = fit_bonafide_gaussian(&model, &set, None)?;
    let out = args.out.unwrap_or_else(|| cfg.paths.stats_path.clone());
    g.save(&out)?;
    println!(
        "fitted D={} Gaussian on {} bonafide segments ({} utterances) -> {}",
        g.dim(),
        n_segments,
        bonafide.len(),
        out.display()
    );
    if g.is_underdetermined() {
        eprintln!(
            "warning: fewer segments than dimensions; covariance relies on shrinkage"
        );
    }
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let wav_dir = resolve_wav_dir(args.wav_dir, Some(&cfg), &args.manifest);
    let entries =
        manifest::parse_cm_protocol(&args.manifest, &wav_dir, &cfg.groups, GroupPolicy::Lenient)?;
    if entries.is_empty() {
        return Err(DinError::data(format!("{} lists no utterances", args.manifest.display())));
    }
    let (_, model) = load_model(&args.checkpoint)?;
    let g = BonafideGaussian::load(&args.stats)?;
    let agg = match args.aggregate {
        AggregateArg::Mean => Aggregation::Mean,
        AggregateArg::Max => Aggregation::Max,
    };
    let records: Vec<_> = entries
        .par_iter()
        .map(|e| {
            let clip = read_clip(&e.wav_path)?;
            let mut record = score::score_utterance(&clip, &model, &g, &cfg.frontend, agg)?;
            record.label = Some(match e.key {
                Key::Bonafide => BinaryLabel::Bonafide,
                Key::Spoof => BinaryLabel::Fake,
            });
            record.generator_id = e.generator_id.clone();
            Ok(record)
        })
        .collect::<Result<_>>()?;
    let out = args.out.unwrap_or_else(|| cfg.paths.scores_path.clone());
    score::write_scores(&out, &records)?;
    println!("scored {} utterances -> {}", records.len(), out.display());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let records = score::read_scores(&args.scores)?;
    let threshold = match (args.threshold, &args.calibrate) {
        (Some(t), _) => Some(t),
        (None, Some(dev_path)) => {
            let dev = score::read_scores(dev_path)?;
            Some(calibrate_threshold(&dev)?)
        }
        (None, None) => None,
    };
    let report = evaluate_records(&records, threshold)?;
    print!("{}", report.to_text());
    if let Some(json_path) = &args.json {
        atomic_write(json_path, report.to_json()?.as_bytes())?;
    }
    Ok(())
}

pub fn export_embeddings(args: ExportArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => None,
    };
    let frontend =
        cfg.as_ref().map(|c| c.frontend.clone()).unwrap_or_else(FrontendConfig::default);
    let groups = cfg
        .as_ref()
        .map(|c| c.groups.clone())
        .unwrap_or_else(manifest::default_group_map);
    let wav_dir = resolve_wav_dir(args.wav_dir, cfg.as_ref(), &args.manifest);
    let entries =
        manifest::parse_cm_protocol(&args.manifest, &wav_dir, &groups, GroupPolicy::Lenient)?;
    if entries.is_empty() {
        return Err(DinError::data(format!("{} lists no utterances", args.manifest.display())));
    }
    let (_, model) = load_model(&args.checkpoint)?;
    // One embedding per utterance: mean of its segment embeddings.
    let mut lines: Vec<(String, String)> = entries
        .par_iter()
        .map(|e| {
            let clip = read_clip(&e.wav_path)?;
            let feats = extract_features(&clip, &frontend, false, 0)?;
            let tensors: Vec<Array3<f32>> = feats.into_iter().map(|t| t.data).collect();
            let refs: Vec<&Array3<f32>> = tensors.iter().collect();
            let emb = model.embed_eval(&features_to_batch(&refs)?)?;
            let mean = emb.mean_axis(Axis(0)).ok_or_else(|| {
                DinError::data(format!("{}: no segments to embed", e.utt_id))
            })?;
            let mut line = e.utt_id.clone();
            for v in mean.iter() {
                line.push('\t');
                line.push_str(&v.to_string());
            }
            Ok((e.utt_id.clone(), line))
        })
        .collect::<Result<_>>()?;
    lines.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::new();
    for (_, line) in &lines {
        text.push_str(line);
        text.push('\n');
    }
    atomic_write(&args.out, text.as_bytes())?;
    println!("exported {} embeddings -> {}", lines.len(), args.out.display());
    Ok(())
}

pub fn count(args: CountArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let input_hw = (cfg.frontend.n_filters, cfg.frontend.target_frames);
    let deployed = complexity::count_parameters(&cfg.model, Stage::Stage2)?;
    let stage1 = complexity::count_parameters(&cfg.model, Stage::Stage1)?;
    let flops = complexity::count_flops(&cfg.model, input_hw)?;
    println!("input\t{}x{}x{}", cfg.model.in_channels, input_hw.0, input_hw.1);
    println!("parameters\t{deployed}");
    println!("parameters_stage1\t{stage1}");
    println!("flops\t{flops}");
    println!(
        "summary\tdeployed {:.2}M parameters, {:.0}M FLOPs per segment",
        deployed as f64 / 1e6,
        flops as f64 / 1e6
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticDatasetSpec::load(&args.spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| DinError::io(&args.out, e))?;
    let out = generate_synthetic_dataset(&spec, &args.out)?;
    let (t, d, e) = out.split_sizes;
    println!(
        "generated {} WAVs ({} per class) -> {}",
        out.n_wavs,
        spec.n_per_class,
        out.wav_dir.display()
    );
    println!(
        "protocols: all {} rows; train/dev/eval {t}/{d}/{e}",
        out.n_wavs
    );
    Ok(())
}
