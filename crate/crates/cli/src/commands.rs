use std::fs;
use std::io::BufReader;
use std::path::Path;

use afsm_core::afsm::{resting_weights, write_weights_csv, SelectionWeights};
use afsm_core::datakit::{casm_ratios_with_floor, class_names, gen_synthetic_dataset, load_dataset, save_dataset, Dataset};
use afsm_core::fsio::write_atomic;
use afsm_core::gradcheck::run_suite;
use afsm_core::infereval::{
    evaluate, infer_images, read_predictions_jsonl, write_predictions_jsonl, Detection, EvalResult, GroundTruth,
    InferOptions,
};
use afsm_core::sweep::lambda_size_sweep;
use afsm_core::traincore::{load_checkpoint, save_checkpoint, write_metrics_jsonl, ToyDetector, TrainData, Trainer};
use afsm_core::{Error, Result};

use crate::config::{load_config, load_synthetic_spec, SweepRunConfig, TrainRunConfig};
use crate::{EvalArgs, SweepArgs, Tool, TrainArgs};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_bytes(w: &SelectionWeights, levels: &[i32]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights_csv(w, levels, &mut buf).expect("writing to memory");
    buf
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Write everything a trainer has produced so far.
fn write_train_outputs(out: &Path, t: &Trainer<'_>) -> Result<()> {
    save_checkpoint(out.join("model.ckpt"), t.model(), Some(t.optim()))?;
    let mut log = Vec::new();
    write_metrics_jsonl(t.metrics(), &mut log).expect("writing to memory");
    write_atomic(out.join("metrics.jsonl"), &log)?;
    let levels = &t.model().config().pyramid.levels;
    let alpha_dir = out.join("alpha");
    create_dir(&alpha_dir)?;
    for s in t.snapshots() {
        write_atomic(alpha_dir.join(format!("iter_{:06}.csv", s.iter)), &csv_bytes(&s.weights, levels))?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (mut cfg, base): (TrainRunConfig, _) = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let dataset = cfg.dataset.load(&base)?;
    let model = ToyDetector::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(TrainData::Images(&dataset), model, cfg.train.clone())?;

    create_dir(&args.out)?;
    write_atomic(args.out.join("config.json"), pretty(&cfg).as_bytes())?;
    let outcome = trainer.run();
    write_train_outputs(&args.out, &trainer)?;
    outcome?;
    if let Some(last) = trainer.metrics().last() {
        println!("trained {} iterations, final loss {:.6}", trainer.iteration(), last.total);
    }
    Ok(())
}

fn load_predictions(path: &Path, dataset: &Dataset) -> Result<Vec<Vec<Detection>>> {
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut by_id = read_predictions_jsonl(BufReader::new(file))?;
    let preds: Vec<Vec<Detection>> = dataset
        .images
        .iter()
        .map(|img| by_id.remove(&img.id).unwrap_or_default())
        .collect();
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Incompatible(format!("predictions name image {id:?}, which is not in the dataset")));
    }
    Ok(preds)
}

fn print_summary(r: &EvalResult) {
    println!(
        "AP {:.4}  AP50 {:.4}  AP75 {:.4}  AR1 {:.4}  AR10 {:.4}  AR100 {:.4}  AR500 {:.4}",
        r.ap, r.ap50, r.ap75, r.ar1, r.ar10, r.ar100, r.ar500
    );
    for c in r.per_class.iter().filter(|c| c.num_gt > 0) {
        println!("  class {} ({} gt): AP {:.4}  AP50 {:.4}  AP75 {:.4}", c.class, c.num_gt, c.ap, c.ap50, c.ap75);
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let opts = InferOptions {
        top_k: args.top_k,
        score_thresh: args.score_thresh,
        nms_iou: args.iou_thresh,
    };
    opts.validate()?;
    if args.scales.is_empty() || args.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("scales must be positive: {:?}", args.scales)));
    }
    let dataset = load_dataset(&args.dataset)?;
    let preds = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), _) => {
            let (model, _) = load_checkpoint(ckpt)?;
            if model.num_classes() != dataset.num_classes() {
                return Err(Error::Incompatible(format!(
                    "checkpoint predicts {} classes, dataset has {}",
                    model.num_classes(),
                    dataset.num_classes()
                )));
            }
            infer_images(&model, &dataset.images, &args.scales, args.flip, &opts)?
        }
        (None, Some(p)) => load_predictions(p, &dataset)?,
        (None, None) => return Err(Error::Config("need --checkpoint or --predictions".into())),
    };
    let gts: Vec<GroundTruth> = dataset.images.iter().map(GroundTruth::from).collect();
    let result = evaluate(&preds, &gts, dataset.num_classes())?;

    if let Some(path) = &args.save_predictions {
        let ids: Vec<String> = dataset.images.iter().map(|i| i.id.clone()).collect();
        let mut buf = Vec::new();
        write_predictions_jsonl(&ids, &preds, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    if let Some(path) = &args.out {
        write_atomic(path, pretty(&result).as_bytes())?;
    }
    print_summary(&result);
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let (mut cfg, base): (SweepRunConfig, _) = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.sweep.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let train_set = cfg.train_dataset.load(&base)?;
    let test_set = cfg.test_dataset.load(&base)?;
    for (name, ds) in [("train_dataset", &train_set), ("test_dataset", &test_set)] {
        if ds.num_classes() != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "{name} has {} classes, model expects {}",
                ds.num_classes(),
                cfg.model.num_classes
            )));
        }
    }

    create_dir(&args.out)?;
    let report = lambda_size_sweep(&train_set, &test_set, &cfg.model, &cfg.train, &cfg.sweep, |lambda, run| {
        let last = run.metrics.last().map_or(f64::NAN, |m| m.total);
        eprintln!("lambda_size {lambda}: final loss {last:.6}");
    })?;
    let md = report.to_markdown();
    write_atomic(args.out.join("sweep.md"), md.as_bytes())?;
    write_atomic(args.out.join("sweep.csv"), report.to_csv().as_bytes())?;
    write_atomic(args.out.join("sweep.json"), pretty(&report).as_bytes())?;
    print!("{md}");
    Ok(())
}

pub fn tools(tool: &Tool) -> Result<()> {
    match tool {
        Tool::GenData { config, seed, out } => {
            let mut spec = load_synthetic_spec(config.as_deref())?;
            if let Some(seed) = seed {
                spec.seed = *seed;
            }
            let (images, manifest) = gen_synthetic_dataset(&spec)?;
            let ds = Dataset {
                classes: class_names(spec.num_classes),
                images,
            };
            save_dataset(&ds, out)?;
            eprintln!(
                "wrote {} images, {} objects",
                ds.images.len(),
                ds.images.iter().map(|i| i.boxes.len()).sum::<usize>()
            );
            if !manifest.placement_failures.is_empty() {
                eprintln!("{} objects could not be placed", manifest.placement_failures.len());
            }
            Ok(())
        }
        Tool::Gradcheck { seed, out } => {
            let report = run_suite(*seed)?;
            for c in &report.cases {
                println!(
                    "{:<28} {} max rel err {:.3e} (tol {:.0e})",
                    c.name,
                    if c.pass() { "ok  " } else { "FAIL" },
                    c.report.max_rel_error,
                    c.tol
                );
            }
            println!("max rel err {:.3e}", report.max_rel_error());
            if let Some(path) = out {
                write_atomic(path, pretty(&report).as_bytes())?;
            }
            if report.pass() {
                Ok(())
            } else {
                let failed = report.cases.iter().filter(|c| !c.pass()).count();
                Err(Error::Range(format!("{failed} gradient checks failed")))
            }
        }
        Tool::DumpWeights { checkpoint, out } => {
            let (model, _) = load_checkpoint(checkpoint)?;
            let w = resting_weights(&model.generator)?;
            write_atomic(out, &csv_bytes(&w, &model.config().pyramid.levels))
        }
        Tool::CasmTable { dataset, out, floor } => {
            let ds = load_dataset(dataset)?;
            let table = casm_ratios_with_floor(&ds.label_lists(), ds.num_classes(), *floor)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf).expect("writing to memory");
            write_atomic(out, &buf)
        }
    }
}
