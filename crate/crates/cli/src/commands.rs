use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use lapse_core::augment::AugmentationPolicy;
use lapse_core::augment::{
    balance_classes, read_augmented_manifest, write_augmented_manifest, AugmentedEntry,
};
use lapse_core::clip::{FrameSource, ImageSequenceOpener, ImageSequenceSource};
use lapse_core::dataset::{
    build_binary_task, dataset_statistics, filter_min_duration, format_statistics_table,
    parse_annotations, read_split_manifest, split_train_test_with, write_split_manifest,
    CaseAnnotation, EventClass,
};
use lapse_core::evaluation::{build_report, predictions_from_probs, RunKey, RunPredictions};
use lapse_core::network::{
    load_checkpoint, BackboneKind, BackboneSpec, ClassifierConfig, HeadKind, HybridClassifier,
};
use lapse_core::timeline::{
    infer_timeline, smooth_timeline, write_timeline, EventModels, EventScorer, TimelineOptions,
};
use lapse_core::training::{
    evaluation_clips, predict_clips, train_binary_model, training_clips, VideoFeatures,
};

use crate::config::{FileConfig, PrepareRecord, LISTING_FILE, SPLIT_FILE};
use crate::{invalid, EvaluateArgs, GlobalArgs, PrepareArgs, StatsArgs, TimelineArgs, TrainArgs};

pub fn stats(_global: &GlobalArgs, args: StatsArgs) -> anyhow::Result<()> {
    let cases = filter_min_duration(&parse_annotations(&args.annotations)?, args.min_duration);
    let stats = dataset_statistics(&cases);
    if args.json {
        let by_name: BTreeMap<&str, _> = stats.iter().map(|(e, s)| (e.as_str(), s)).collect();
        println!("{}", serde_json::to_string_pretty(&by_name)?);
    } else {
        println!("{} videos", cases.len());
        print!("{}", format_statistics_table(&stats));
    }
    Ok(())
}

fn load_cases(path: &Path, min_duration: f64) -> anyhow::Result<Vec<CaseAnnotation>> {
    Ok(filter_min_duration(&parse_annotations(path)?, min_duration))
}

fn opener_for(
    global: &GlobalArgs,
    data_root: Option<&Path>,
    annotations: &Path,
) -> ImageSequenceOpener {
    ImageSequenceOpener {
        data_root: global
            .data_root
            .clone()
            .or_else(|| data_root.map(Path::to_path_buf)),
        fallback: annotations
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    }
}

pub fn prepare(global: &GlobalArgs, args: PrepareArgs) -> anyhow::Result<()> {
    let seed = global.seed.unwrap_or(0);
    let cases = load_cases(&args.annotations, args.min_duration)?;
    let task = build_binary_task(&cases, args.event)?;
    let split = split_train_test_with(&task, args.ratio, seed, args.split_mode.into())?;
    let train_task = split.train_task(args.event);
    let listing = if args.balance {
        balance_classes(&train_task, 1.0, seed).map_err(invalid)?
    } else {
        split
            .train
            .iter()
            .map(|s| AugmentedEntry {
                segment: s.clone(),
                policy: AugmentationPolicy::IDENTITY,
                copy_index: 0,
            })
            .collect()
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_split_manifest(&args.out.join(SPLIT_FILE), &split)?;
    write_augmented_manifest(&args.out.join(LISTING_FILE), &listing)?;
    let annotations = fs::canonicalize(&args.annotations).unwrap_or(args.annotations.clone());
    PrepareRecord {
        annotations,
        event: args.event,
        seed,
        ratio: args.ratio,
        split_mode: args.split_mode.into(),
        balance: args.balance,
        min_duration_sec: args.min_duration,
        train_segments: split.train.len(),
        test_segments: split.test.len(),
        listing_entries: listing.len(),
    }
    .save(&args.out)?;
    let positives = listing
        .iter()
        .filter(|e| e.segment.segment.label == args.event)
        .count();
    println!(
        "{}: {} train / {} test segments; listing has {} positive and {} negative entries",
        args.event,
        split.train.len(),
        split.test.len(),
        positives,
        listing.len() - positives
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn backbones(choice: &str) -> anyhow::Result<Vec<BackboneKind>> {
    if choice == "all" {
        return Ok(vec![BackboneKind::Resnet50, BackboneKind::EfficientNetB0]);
    }
    Ok(vec![choice.parse().map_err(invalid)?])
}

fn heads(choice: &str) -> anyhow::Result<Vec<HeadKind>> {
    if choice == "all" {
        return Ok(HeadKind::ALL.to_vec());
    }
    Ok(vec![choice.parse().map_err(invalid)?])
}

pub fn train(global: &GlobalArgs, args: TrainArgs) -> anyhow::Result<()> {
    let record = PrepareRecord::load(&args.manifest)?;
    let from_file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = FileConfig {
        seed: global.seed,
        workers: global.workers,
        data_root: global.data_root.clone(),
        backbone: args.backbone.clone(),
        head: args.head.clone(),
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        early_stop_patience: args.early_stop_patience,
        fine_tune_backbone: args.fine_tune_backbone.then_some(true),
        out: args.out.clone(),
        ..FileConfig::default()
    };
    let mut merged = from_file.overlay(flags);
    if let Some(event) = merged.event {
        if event != record.event {
            bail!(invalid(format!(
                "config asks for {event} but {} was prepared for {}",
                args.manifest.display(),
                record.event
            )));
        }
    }
    merged.event = Some(record.event);
    merged.annotations = Some(record.annotations.clone());
    let backbone_choice = merged.backbone.clone().unwrap_or_else(|| "resnet50".into());
    let head_choice = merged.head.clone().unwrap_or_else(|| "transformer".into());
    let kinds = backbones(&backbone_choice)?;
    let head_kinds = heads(&head_choice)?;
    let train_cfg = merged.train_config(record.event);
    train_cfg.validate()?;
    let out_root = merged.out.clone().unwrap_or_else(|| PathBuf::from("runs"));

    let cases = load_cases(&record.annotations, record.min_duration_sec)?;
    let split = read_split_manifest(&args.manifest.join(SPLIT_FILE), record.seed)?;
    let listing = read_augmented_manifest(&args.manifest.join(LISTING_FILE)).map_err(invalid)?;
    let train_clips = training_clips(&listing, &cases, record.event)?;
    let val_clips = evaluation_clips(&split.test, &cases, record.event)?;
    let opener = opener_for(global, merged.data_root.as_deref(), &record.annotations);

    for &backbone in &kinds {
        for &head in &head_kinds {
            let mut config = ClassifierConfig::new(BackboneSpec::new(backbone), head)?;
            config.fine_tune_backbone = merged.fine_tune_backbone.unwrap_or(false);
            let mut model = HybridClassifier::new(config, train_cfg.global_seed)?;
            let run_dir = out_root.join(record.event.as_str()).join(format!(
                "{}-{}",
                backbone.as_str(),
                head.as_str()
            ));
            fs::create_dir_all(&run_dir)
                .with_context(|| format!("creating {}", run_dir.display()))?;
            let resolved = FileConfig {
                backbone: Some(backbone.as_str().into()),
                head: Some(head.as_str().into()),
                seed: Some(train_cfg.global_seed),
                workers: Some(train_cfg.workers),
                learning_rate: Some(train_cfg.learning_rate),
                batch_size: Some(train_cfg.batch_size),
                max_epochs: Some(train_cfg.max_epochs),
                early_stop_patience: Some(train_cfg.early_stop_patience),
                fine_tune_backbone: Some(model.config().fine_tune_backbone),
                out: Some(out_root.clone()),
                ..merged.clone()
            };
            fs::write(
                run_dir.join("run_config.json"),
                serde_json::to_string_pretty(&resolved)?,
            )?;
            let provider = VideoFeatures::new(&cases, &opener, &model);
            let report = train_binary_model(
                &mut model,
                &train_clips,
                &val_clips,
                &provider,
                &train_cfg,
                Some(&run_dir),
            )
            .with_context(|| format!("training {}-{}", backbone.title(), head.title()))?;
            let best = report.best();
            println!(
                "{}-{} {}: best epoch {} of {}, val loss {:.4}, val acc {:.4} -> {}",
                backbone.title(),
                head.title(),
                record.event,
                best.epoch + 1,
                report.epochs.len(),
                best.val_loss,
                best.val_acc,
                run_dir.display()
            );
        }
    }
    Ok(())
}

pub fn evaluate(global: &GlobalArgs, args: EvaluateArgs) -> anyhow::Result<()> {
    let mut records: BTreeMap<EventClass, (PathBuf, PrepareRecord)> = BTreeMap::new();
    for dir in &args.manifest {
        let record = PrepareRecord::load(dir)?;
        if let Some((other, _)) = records.get(&record.event) {
            bail!(invalid(format!(
                "{} and {} were both prepared for {}",
                other.display(),
                dir.display(),
                record.event
            )));
        }
        records.insert(record.event, (dir.clone(), record));
    }
    let mut runs = Vec::new();
    for path in &args.checkpoints {
        let (model, meta) =
            load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let event = meta
            .event
            .ok_or_else(|| invalid(format!("{} does not record its event", path.display())))?;
        let (dir, record) = records.get(&event).ok_or_else(|| {
            invalid(format!(
                "no manifest given for {event} ({})",
                path.display()
            ))
        })?;
        let cases = load_cases(&record.annotations, record.min_duration_sec)?;
        let split = read_split_manifest(&dir.join(SPLIT_FILE), record.seed)?;
        let clips = evaluation_clips(&split.test, &cases, event)?;
        let opener = opener_for(global, None, &record.annotations);
        let provider = VideoFeatures::new(&cases, &opener, &model);
        let probs = predict_clips(&model, &clips, &provider)?;
        runs.push(RunPredictions {
            key: RunKey {
                backbone: model.config().backbone.kind,
                head: model.config().head.kind(),
                event,
            },
            predictions: predictions_from_probs(&probs),
            labels: clips.iter().map(|c| c.target).collect(),
        });
    }
    let report = build_report(&runs)?;
    fs::create_dir_all(&args.report)
        .with_context(|| format!("creating {}", args.report.display()))?;
    let table = report.format_table();
    fs::write(args.report.join("report.txt"), &table)?;
    report.write_csv(&args.report.join("report.csv"))?;
    report.write_precision_chart(&args.report.join("precision.svg"))?;
    print!("{table}");
    println!("wrote {}", args.report.display());
    Ok(())
}

pub fn timeline(_global: &GlobalArgs, args: TimelineArgs) -> anyhow::Result<()> {
    if !(args.fps.is_finite() && args.fps > 0.0) {
        bail!(invalid(format!("fps must be positive, got {}", args.fps)));
    }
    let mut loaded: BTreeMap<EventClass, HybridClassifier> = BTreeMap::new();
    for path in &args.models {
        let (model, meta) =
            load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let event = meta
            .event
            .ok_or_else(|| invalid(format!("{} does not record its event", path.display())))?;
        if loaded.insert(event, model).is_some() {
            bail!(invalid(format!("more than one model given for {event}")));
        }
    }
    let models: EventModels<'_> = loaded
        .iter()
        .map(|(e, m)| (*e, m as &dyn EventScorer))
        .collect();

    let mut source = ImageSequenceSource::open(&args.video)?;
    let case_id = args
        .video
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let case = CaseAnnotation {
        case_id: case_id.clone(),
        fps: args.fps,
        duration_sec: source.frame_count() as f64 / args.fps,
        video_path: args.video.display().to_string(),
        segments: Vec::new(),
    };
    let mut timeline = infer_timeline(&mut source, &models, &case, TimelineOptions::default())?;
    if let Some(width) = args.smooth {
        timeline = smooth_timeline(&timeline, width)?;
    }
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{case_id}.{}", args.format.extension())));
    write_timeline(&timeline, &out, args.format)?;
    println!(
        "{case_id}: {} windows ({} failed) -> {}",
        timeline.entries.len(),
        timeline.failed_windows(),
        out.display()
    );
    for event in EventClass::RELEVANT {
        let spans = timeline.intervals(event);
        if !spans.is_empty() {
            let text: Vec<String> = spans
                .iter()
                .map(|(a, b)| format!("{a:.1}-{b:.1}s"))
                .collect();
            println!("  {}: {}", event.title(), text.join(", "));
        }
    }
    Ok(())
}
