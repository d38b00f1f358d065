use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use demenscan::checkpoint;
use demenscan::data::{open_corpus, stratified_split, ClassLabel, DatasetIndex, DiskLoader, SplitSpec};
use demenscan::model::ConvBlock;
use demenscan::train::{evaluate as run_evaluation, kfold_run, reference, train_with_progress, Metrics};
use demenscan::xai;
use serde_json::json;

use crate::config::{resolve, write_json, EvalSplit, EvaluateRun, ExplainRun, FiltersRun, KFoldRun, TrainRun};
use crate::{Failure, TrainFlags};

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn resolve_or_usage<T>(path: Option<&Path>) -> Result<T, Failure>
where
    T: Default + serde::Serialize + serde::de::DeserializeOwned,
{
    resolve(path).map_err(|e| usage(format!("{e:#}")))
}

fn require_existing(path: Option<&PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = path.ok_or_else(|| usage(format!("{flag} is required")))?;
    if !path.exists() {
        return Err(usage(format!("{flag} {} does not exist", path.display())));
    }
    Ok(path.clone())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn apply_train_flags(run: &mut TrainRun, f: &TrainFlags) {
    let cfg = &mut run.train;
    if let Some(v) = &f.data_dir {
        run.data_dir = Some(v.clone());
    }
    if let Some(v) = &f.out_dir {
        run.out_dir = v.clone();
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.image_size {
        cfg.spec.input.height = v;
        cfg.spec.input.width = v;
    }
    if let Some(v) = &f.filters {
        cfg.spec.conv_blocks = v.iter().map(|&filters| ConvBlock { filters, kernel: 3 }).collect();
    }
    if let Some(v) = &f.fc_widths {
        cfg.spec.fc_widths = v.clone();
    }
    if let Some(v) = f.dropout {
        cfg.spec.dropout_rate = v;
    }
    if let Some(v) = f.train_fraction {
        run.train_fraction = v;
    }
}

fn validate_train_run(run: &TrainRun) -> Result<PathBuf, Failure> {
    let data_dir = require_existing(run.data_dir.as_ref(), "--data-dir")?;
    run.train.validate().map_err(usage)?;
    if !(run.train_fraction > 0.0 && run.train_fraction < 1.0) {
        return Err(usage(format!("train fraction {} outside (0, 1)", run.train_fraction)));
    }
    Ok(data_dir)
}

fn loader_for(spec: &demenscan::ModelSpec) -> DiskLoader {
    DiskLoader {
        height: spec.input.height,
        width: spec.input.width,
    }
}

fn counts(idx: &DatasetIndex) -> String {
    let c = idx.per_class_counts();
    format!("{} [{}, {}, {}, {}]", idx.len(), c[0], c[1], c[2], c[3])
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)
}

pub fn train(flags: TrainFlags, out: Option<PathBuf>) -> CmdResult {
    let mut run: TrainRun = resolve_or_usage(flags.config.as_deref())?;
    apply_train_flags(&mut run, &flags);
    if let Some(out) = out {
        run.checkpoint = Some(out);
    }
    let data_dir = validate_train_run(&run)?;
    create_dir(&run.out_dir)?;
    write_json(&run.out_dir.join("config.json"), &run)?;

    let index = open_corpus(&data_dir)?;
    let split = SplitSpec {
        train_fraction: run.train_fraction,
        seed: run.train.seed,
    };
    let (train_set, val_set) = stratified_split(&index, split)?;
    eprintln!("corpus {}  train {}  val {}", counts(&index), counts(&train_set), counts(&val_set));

    let loader = loader_for(&run.train.spec);
    let (params, metrics) = train_with_progress(&run.train, &train_set, &val_set, &loader, &mut |m| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        );
    })?;

    let ckpt = run.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(&ckpt, &run.train.spec, &params)?;
    write_text(&run.out_dir.join("metrics.jsonl"), &metrics.to_jsonl())?;

    let last = metrics.last().expect("at least one epoch");
    println!("checkpoint       {}", ckpt.display());
    println!("train accuracy   {:.4}  loss {:.4}", last.train_acc, last.train_loss);
    println!("val accuracy     {:.4}  loss {:.4}", last.val_acc, last.val_loss);
    println!(
        "reference (full-size model, 20 epochs): train {:.4}/{:.4}  val {:.4}/{:.4}",
        reference::TRAIN_ACCURACY,
        reference::TRAIN_LOSS,
        reference::VAL_ACCURACY,
        reference::VAL_LOSS
    );
    Ok(())
}

pub struct EvaluateFlags {
    pub model: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub split: Option<EvalSplit>,
    pub seed: Option<u64>,
    pub train_fraction: Option<f64>,
}

pub fn evaluate(f: EvaluateFlags) -> CmdResult {
    let mut run: EvaluateRun = resolve_or_usage(f.config.as_deref())?;
    run.model = f.model.or(run.model);
    run.data_dir = f.data_dir.or(run.data_dir);
    run.out_dir = f.out_dir.unwrap_or(run.out_dir);
    run.split = f.split.unwrap_or(run.split);
    run.seed = f.seed.unwrap_or(run.seed);
    run.train_fraction = f.train_fraction.unwrap_or(run.train_fraction);
    let model = require_existing(run.model.as_ref(), "--model")?;
    let data_dir = require_existing(run.data_dir.as_ref(), "--data-dir")?;
    create_dir(&run.out_dir)?;
    write_json(&run.out_dir.join("config.json"), &run)?;

    let (spec, params) = checkpoint::load(&model)?;
    let index = open_corpus(&data_dir)?;
    let subset = match run.split {
        EvalSplit::All => index,
        split => {
            let (tr, va) = stratified_split(
                &index,
                SplitSpec {
                    train_fraction: run.train_fraction,
                    seed: run.seed,
                },
            )?;
            if split == EvalSplit::Val {
                va
            } else {
                tr
            }
        }
    };
    let report = run_evaluation(&spec, &params, &subset, &loader_for(&spec))?;
    write_text(&run.out_dir.join("confusion.csv"), &report.confusion.to_csv())?;
    let per_class = report.confusion.per_class_accuracy();
    let per_class_json: serde_json::Map<String, serde_json::Value> = ClassLabel::ALL
        .iter()
        .map(|c| (c.name().to_string(), json!(per_class[c.index()])))
        .collect();
    write_json(&run.out_dir.join("per_class_accuracy.json"), &per_class_json)?;

    println!("samples   {}", counts(&subset));
    println!("accuracy  {:.4}", report.accuracy);
    println!("loss      {:.4}", report.loss);
    for c in ClassLabel::ALL {
        match per_class[c.index()] {
            Some(a) => println!("  {:<17} {:.4}", c.name(), a),
            None => println!("  {:<17} -", c.name()),
        }
    }
    println!(
        "reference per-class accuracy: NonDemented {:.2}, ModerateDemented {:.2}",
        reference::NON_DEMENTED_ACCURACY,
        reference::MODERATE_ACCURACY
    );
    Ok(())
}

pub fn kfold(flags: TrainFlags, folds: Option<usize>) -> CmdResult {
    let mut run: KFoldRun = resolve_or_usage(flags.config.as_deref())?;
    apply_train_flags(&mut run.run, &flags);
    if let Some(k) = folds {
        run.folds = k;
    }
    if run.folds < 2 {
        return Err(usage(format!("--folds {} (need at least 2)", run.folds)));
    }
    let data_dir = validate_train_run(&run.run)?;
    let out_dir = run.run.out_dir.clone();
    create_dir(&out_dir)?;
    write_json(&out_dir.join("config.json"), &run)?;

    let index = open_corpus(&data_dir)?;
    eprintln!("corpus {}  folds {}", counts(&index), run.folds);
    let loader = loader_for(&run.run.train.spec);
    let mut write_err = None;
    let report = kfold_run(&run.run.train, &index, &loader, run.folds, &mut |i, m: &Metrics| {
        let dir = out_dir.join(format!("fold_{i}"));
        let res = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("metrics.jsonl"), m.to_jsonl()));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
        if let Some(last) = m.last() {
            eprintln!("fold {i}: val acc {:.4} loss {:.4}", last.val_acc, last.val_loss);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Failure::Runtime(e.into()));
    }
    write_json(&out_dir.join("kfold_report.json"), &report)?;
    for f in &report.folds {
        println!("fold {}  val accuracy {:.4}", f.fold, f.val_accuracy);
    }
    println!("mean {:.4}  std {:.4}", report.mean, report.std);
    println!("reference: mean {:.2}  std {:.2}", reference::KFOLD_MEAN, reference::KFOLD_STD);
    Ok(())
}

pub struct ExplainFlags {
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub class: Option<usize>,
    pub maps: Option<usize>,
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn explain(f: ExplainFlags) -> CmdResult {
    let mut run: ExplainRun = resolve_or_usage(f.config.as_deref())?;
    run.model = f.model.or(run.model);
    run.image = f.image.or(run.image);
    run.class = f.class.or(run.class);
    run.maps = f.maps.unwrap_or(run.maps);
    run.out_dir = f.out_dir.unwrap_or(run.out_dir);
    let model = require_existing(run.model.as_ref(), "--model")?;
    let image = require_existing(run.image.as_ref(), "--image")?;
    if run.maps == 0 {
        return Err(usage("--maps must be at least 1"));
    }
    if let Some(c) = run.class {
        ClassLabel::from_index(c).map_err(usage)?;
    }

    let (spec, params) = checkpoint::load(&model)?;
    let x = demenscan::data::decode_image(&image, spec.input.height, spec.input.width)?;
    let exp = xai::explain(&spec, &params, &x, run.class, run.maps)?;

    let out = &run.out_dir;
    create_dir(out)?;
    let predicted = ClassLabel::from_index(exp.predicted)?;
    let target = ClassLabel::from_index(exp.saliency.target_class)?;
    write_json(
        &out.join("prediction.json"),
        &json!({
            "class_name": predicted.name(),
            "class_index": predicted.index(),
            "target_class_name": target.name(),
            "target_class_index": target.index(),
            "probabilities": exp.probabilities,
            "config": run,
        }),
    )?;

    let s = &exp.saliency;
    xai::save_png(out.join("saliency.png"), s.width, s.height, &s.pixels)?;
    for set in &exp.feature_maps {
        let dir = out.join(format!("feature_maps_layer_{}", set.layer));
        create_dir(&dir)?;
        for m in &set.maps {
            xai::save_png(dir.join(format!("filter_{:03}.png", m.filter)), m.width, m.height, &m.pixels)?;
        }
    }

    println!("prediction  {} ({})", predicted.name(), predicted.index());
    for (c, p) in ClassLabel::ALL.iter().zip(&exp.probabilities) {
        println!("  {:<17} {:.4}", c.name(), p);
    }
    println!("saliency target  {}", target.name());
    println!("outputs in {}", out.display());
    Ok(())
}

pub struct FiltersFlags {
    pub model: Option<PathBuf>,
    pub layer: Option<usize>,
    pub count: Option<usize>,
    pub scale: Option<usize>,
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn filters(f: FiltersFlags) -> CmdResult {
    let mut run: FiltersRun = resolve_or_usage(f.config.as_deref())?;
    run.model = f.model.or(run.model);
    run.layer = f.layer.unwrap_or(run.layer);
    run.count = f.count.unwrap_or(run.count);
    run.scale = f.scale.unwrap_or(run.scale);
    run.out_dir = f.out_dir.unwrap_or(run.out_dir);
    let model = require_existing(run.model.as_ref(), "--model")?;
    if run.count == 0 || run.scale == 0 {
        return Err(usage("--count and --scale must be at least 1"));
    }

    let (spec, params) = checkpoint::load(&model)?;
    if run.layer == 0 || run.layer > spec.conv_blocks.len() {
        return Err(usage(format!("--layer {} outside 1..={}", run.layer, spec.conv_blocks.len())));
    }
    let available = spec.conv_blocks[run.layer - 1].filters;
    if run.count > available {
        return Err(usage(format!("--count {} exceeds the {available} filters of layer {}", run.count, run.layer)));
    }
    let cells = xai::visualize_filters(&spec, &params, run.layer, run.count)?;

    let out = &run.out_dir;
    create_dir(&out.join("cells"))?;
    write_json(&out.join("config.json"), &run)?;
    let grid = xai::filter_grid(&cells, run.scale, 2);
    grid.save_png(out.join("grid.png"))?;
    let mut index = vec![json!({
        "file": "grid.png",
        "kind": "grid",
        "layer": run.layer,
        "rows": run.count,
        "columns": cells.iter().filter(|c| c.filter == 0).count(),
    })];
    for c in &cells {
        let file = format!("cells/filter_{:03}_channel_{:03}.png", c.filter, c.channel);
        xai::upscale(&c.pixels, c.size, run.scale).save_png(out.join(&file))?;
        index.push(json!({"file": file, "layer": c.layer, "filter": c.filter, "channel": c.channel, "weights": c.weights}));
    }
    write_json(&out.join("index.json"), &index)?;
    println!(
        "layer {}: {} filters × {} channels -> {}",
        run.layer,
        run.count,
        cells.len() / run.count,
        out.join("grid.png").display()
    );
    Ok(())
}
