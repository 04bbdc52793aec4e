use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use cfekit::bench::bench_all;
use cfekit::eval::{coco_metrics, EvalConfig, EvalReport, IouMode};
use cfekit::gradcheck::{check_config, toy_config};
use cfekit::network::{ArchConfig, ArchVariant, Detector};
use cfekit::pipeline::detect_dataset;
use cfekit::postprocess::{read_detections, write_detections, DetectionRecord, InferenceParams};
use cfekit::synth::{generate_dataset, Dataset, SceneSpec, Splits};
use cfekit::train::{train_with, write_loss_trace, TrainSchedule};

use crate::manifest::RunManifest;
use crate::{Command, Common, InferArgs};

/// Bad input from the command line or a config file (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Unusable data on disk (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct DataError(pub String);

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if e.downcast_ref::<DataError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<cfekit::Error>() {
        Some(cfekit::Error::InvalidArgument(_)) => 1,
        Some(cfekit::Error::Numeric(_) | cfekit::Error::Diverged { .. } | cfekit::Error::Graph(_)) => 3,
        _ => 2,
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, count } => gen(&common, count as usize),
        Command::Train {
            common,
            data,
            variant,
            train_config,
            split,
            epochs,
            batch_size,
            lr,
            widths,
        } => train(&common, &data, variant, train_config.as_deref(), &split, epochs, batch_size, lr, widths),
        Command::Eval {
            common,
            infer,
            iou_mode,
            detections,
            include_empty_categories,
        } => eval(&common, &infer, &iou_mode, detections.as_deref(), include_empty_categories),
        Command::Infer { common, infer } => infer_cmd(&common, &infer),
        Command::Gradcheck {
            common,
            eps,
            batch,
            tolerance,
            corrupt_gradient,
        } => gradcheck(&common, eps, batch, tolerance, corrupt_gradient),
        Command::Bench {
            common,
            input_size,
            iterations,
        } => bench(&common, input_size, iterations),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen(common: &Common, count: usize) -> Result<()> {
    let mut spec = match &common.config {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::toy(common.seed),
    };
    spec.seed = common.seed;
    let data = generate_dataset(&spec, count)?;
    let ids: Vec<u64> = data.annotations.images.iter().map(|i| i.id).collect();
    let splits = Splits::seven_one_two(&ids, common.seed);
    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("gen", common.seed, &common.out);
    m.config("scene_spec", common.config.as_deref());
    data.save(&common.out, &splits)?;
    write_json(&common.out.join("scene_spec.json"), &spec)?;
    m.artifact_tree("")?;
    m.finish()?;
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        data.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        common.out.display()
    );
    Ok(())
}

fn load_split(data_dir: &Path, split: &str) -> Result<Dataset> {
    let data = Dataset::load(data_dir)?;
    let ids = Splits::load_one(data_dir, split)?;
    let subset = data.subset(&ids);
    if subset.is_empty() {
        return Err(DataError(format!("split {split:?} of {} has no images", data_dir.display())).into());
    }
    Ok(subset)
}

#[allow(clippy::too_many_arguments)]
fn train(
    common: &Common,
    data_dir: &Path,
    variant: Option<ArchVariant>,
    train_config: Option<&Path>,
    split: &str,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    widths: Option<Vec<usize>>,
) -> Result<()> {
    let data = load_split(data_dir, split)?;
    let image_size = data.annotations.images[0].width as usize;
    let num_classes = data.annotations.categories.len();
    let mut arch = match &common.config {
        Some(p) => ArchConfig::load(p)?,
        None => ArchConfig::new(variant.unwrap_or(ArchVariant::CfenetFull), image_size, num_classes),
    };
    if let Some(v) = variant {
        arch.variant = v;
    }
    if let Some(w) = widths {
        if w.len() != 3 {
            bail!(UsageError(format!("--widths needs three values, got {}", w.len())));
        }
        arch.widths = [w[0], w[1], w[2]];
    }
    arch.validate()?;
    if arch.num_classes != num_classes {
        bail!(UsageError(format!(
            "architecture predicts {} classes but the dataset has {num_classes}",
            arch.num_classes
        )));
    }
    if arch.input_size != image_size {
        bail!(UsageError(format!(
            "architecture input size {} differs from the dataset's {image_size} px images",
            arch.input_size
        )));
    }
    let mut schedule = match train_config {
        Some(p) => {
            let mut s = TrainSchedule::load(p)?;
            if let Some(e) = epochs {
                s.epochs = e;
            }
            s
        }
        None => TrainSchedule::standard(epochs.unwrap_or(30), common.seed),
    };
    schedule.seed = common.seed;
    if let Some(b) = batch_size {
        schedule.batch_size = b;
    }
    if let Some(l) = lr {
        schedule.learning_rate = l;
    }
    schedule.validate()?;

    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("train", common.seed, &common.out);
    m.config("arch", common.config.as_deref());
    m.config("train", train_config);
    m.config("data", Some(data_dir));

    let mut det = Detector::<f32>::new(&arch, common.seed)?;
    println!(
        "training {} ({} params) on {} images for {} epochs",
        arch.variant,
        det.num_params(),
        data.len(),
        schedule.epochs
    );
    let samples = data.samples::<f32>();
    let result = train_with(&mut det, &samples, &schedule, |e| {
        println!("epoch {:>3}  loc {:.4}  conf {:.4}  total {:.4}", e.epoch, e.loc, e.conf, e.total);
    });
    let trace_path = common.out.join("loss.csv");
    let write_trace = |trace: &[cfekit::train::EpochLoss]| -> Result<()> {
        let mut f = fs::File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?;
        write_loss_trace(&mut f, trace)?;
        Ok(())
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if let cfekit::Error::Diverged { trace, .. } = &e {
                write_trace(trace)?;
            }
            return Err(e.into());
        }
    };
    write_trace(&report.trace)?;
    det.save_weights(&common.out.join("weights.bin"))?;
    fs::write(common.out.join("arch.json"), arch.to_json() + "\n")?;
    write_json(&common.out.join("schedule.json"), &schedule)?;
    write_json(
        &common.out.join("train_report.json"),
        &serde_json::json!({
            "steps": report.steps,
            "rejected_steps": report.rejected_steps,
            "empty_batches": report.empty_batches,
            "trace": report.trace,
        }),
    )?;
    for a in ["weights.bin", "arch.json", "schedule.json", "loss.csv", "train_report.json"] {
        m.artifact(a)?;
    }
    m.finish()?;
    println!("weights written to {}", common.out.join("weights.bin").display());
    Ok(())
}

fn load_model(args: &InferArgs) -> Result<Detector<f32>> {
    let weights = args
        .weights
        .as_ref()
        .ok_or_else(|| UsageError("--weights is required unless --detections is given".into()))?;
    let arch_path = match &args.arch {
        Some(p) => p.clone(),
        None => weights.parent().unwrap_or(Path::new(".")).join("arch.json"),
    };
    let arch = ArchConfig::load(&arch_path)?;
    let mut det = Detector::<f32>::new(&arch, 0)?;
    det.load_weights(weights)?;
    Ok(det)
}

fn inference_params(args: &InferArgs) -> Result<InferenceParams> {
    let mut p = InferenceParams::default();
    if let Some(s) = &args.multiscale {
        p.scales = s.clone();
    }
    if let Some(t) = args.score_threshold {
        p.score_threshold = t;
    }
    if let Some(t) = args.nms_iou {
        p.nms_iou = t;
    }
    p.validate()?;
    Ok(p)
}

fn run_model(args: &InferArgs, data: &Dataset, m: &mut RunManifest) -> Result<Vec<DetectionRecord>> {
    let det = load_model(args)?;
    m.config("arch", args.arch.as_deref());
    m.config("weights", args.weights.as_deref());
    let params = inference_params(args)?;
    Ok(detect_dataset(&det, data, &params)?)
}

fn save_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_detections(&mut f, dets)?;
    Ok(())
}

fn eval(
    common: &Common,
    args: &InferArgs,
    iou_mode: &str,
    detections: Option<&Path>,
    include_empty: bool,
) -> Result<()> {
    let iou_mode: IouMode = iou_mode.parse()?;
    let data = load_split(&args.data, &args.split)?;
    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("eval", common.seed, &common.out);
    m.config("data", Some(&args.data));
    let mut artifacts = vec!["report.json", "per_category.csv"];
    let dets = match detections {
        Some(p) => {
            m.config("detections", Some(p));
            let f = fs::File::open(p).map_err(|e| DataError(format!("{}: {e}", p.display())))?;
            read_detections(BufReader::new(f))?
        }
        None => {
            let d = run_model(args, &data, &mut m)?;
            save_detections(&common.out.join("detections.jsonl"), &d)?;
            artifacts.push("detections.jsonl");
            d
        }
    };
    let config = EvalConfig {
        iou_mode,
        include_empty_categories: include_empty,
        ..EvalConfig::default()
    };
    let report = coco_metrics(&dets, &data.annotations, &config)
        .map_err(|e| DataError(e.to_string()))?
        .to_percent();
    write_json(&common.out.join("report.json"), &report)?;
    let csv = common.out.join("per_category.csv");
    let mut f = fs::File::create(&csv).with_context(|| format!("writing {}", csv.display()))?;
    report.write_category_csv(&mut f)?;
    for a in artifacts {
        m.artifact(a)?;
    }
    m.finish()?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!("headline ({}): {:.2}", r.iou_mode, r.headline);
    println!(
        "AP50:95 {:.2}  AP50 {:.2}  AP75 {:.2}  AP@0.7 {:.2}",
        r.ap_5095, r.ap_50, r.ap_75, r.ap_iou70
    );
    println!(
        "AP small {}  medium {}  large {}  S-mAP {}",
        opt(r.ap_small),
        opt(r.ap_medium),
        opt(r.ap_large),
        opt(r.s_map)
    );
    for c in &r.per_category {
        println!("  {:>3} {:<14} gt {:>5}  AP@0.7 {:>6}  AP50 {:>6}", c.category_id, c.name, c.num_gt, opt(c.ap), opt(c.ap_50));
    }
}

fn infer_cmd(common: &Common, args: &InferArgs) -> Result<()> {
    let data = load_split(&args.data, &args.split)?;
    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("infer", common.seed, &common.out);
    m.config("data", Some(&args.data));
    let dets = run_model(args, &data, &mut m)?;
    save_detections(&common.out.join("detections.jsonl"), &dets)?;
    m.artifact("detections.jsonl")?;
    m.finish()?;
    println!("{} detections over {} images", dets.len(), data.len());
    Ok(())
}

fn arch_or(common: &Common, default: ArchConfig) -> Result<ArchConfig> {
    Ok(match &common.config {
        Some(p) => ArchConfig::load(p)?,
        None => default,
    })
}

fn gradcheck(common: &Common, eps: f64, batch: usize, tolerance: f64, corrupt: bool) -> Result<()> {
    let arch = arch_or(common, toy_config())?;
    if batch == 0 {
        bail!(UsageError("--batch must be positive".into()));
    }
    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("gradcheck", common.seed, &common.out);
    m.config("arch", common.config.as_deref());
    let report = check_config(&arch, batch, common.seed, eps, corrupt)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    m.artifact("gradcheck.json")?;
    m.finish()?;
    println!(
        "{} parameters, loss {:.6}, max relative error {:.3e} in {} [{}] (analytic {:.6e}, numeric {:.6e}), {:.1}s",
        report.num_params,
        report.loss,
        report.max_rel_error,
        report.worst.name,
        report.worst.worst_index,
        report.worst.analytic,
        report.worst.numeric,
        report.seconds
    );
    if !report.passed(tolerance) {
        return Err(anyhow!(cfekit::Error::Numeric(format!(
            "gradient check failed: {:.3e} ≥ {tolerance:e} in {}",
            report.max_rel_error, report.worst.name
        ))));
    }
    println!("gradient check passed (tolerance {tolerance:e})");
    Ok(())
}

fn bench(common: &Common, input_size: usize, iterations: usize) -> Result<()> {
    let mut base = arch_or(common, ArchConfig::new(ArchVariant::CfenetFull, input_size, 10))?;
    base.input_size = input_size;
    prepare_out(&common.out)?;
    let mut m = RunManifest::begin("bench", common.seed, &common.out);
    m.config("arch", common.config.as_deref());
    let report = bench_all(&base, iterations, common.seed)?;
    write_json(&common.out.join("bench.json"), &report)?;
    m.artifact("bench.json")?;
    m.finish()?;
    println!("{:<16} {:>9} {:>12} {:>9} {:>9} {:>9}", "variant", "params", "MACs", "mean ms", "median", "p95");
    for v in &report.variants {
        println!(
            "{:<16} {:>9} {:>12} {:>9.3} {:>9.3} {:>9.3}",
            v.variant.name(),
            v.params,
            v.macs,
            v.latency.mean_ms,
            v.latency.median_ms,
            v.latency.p95_ms
        );
    }
    let f = &report.factorization;
    println!(
        "CFE branch at {} channels, k={}: spatial MACs {} factorized vs {} dense (ratio {:.4}); whole branch {} vs {}",
        f.channels, f.k, f.spatial_factorized, f.spatial_dense, f.spatial_ratio, f.branch_factorized, f.branch_dense
    );
    Ok(())
}

