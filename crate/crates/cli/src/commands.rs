use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use shadowpc::completion::{baseline_upsample, Model, ModelConfig, RefinementPlan};
use shadowpc::data::{
    generate_dataset, mix_seed, read_cloud, with_suffix, write_cloud, Family, GenConfig, Manifest, PairConfig, Split,
    TierSizes,
};
use shadowpc::geometry::{OffsetConstraint, Point3};
use shadowpc::metrics::{aggregate, evaluate, EvalOptions, SampleReport};
use shadowpc::trainer::{
    load_checkpoint, noisy_camera, run_stage, CheckpointSink, Dataset, Stage, TrainConfig, TrainState,
};

use crate::{Cli, CliError, CompleteArgs, EvalArgs, GenDataArgs, TrainArgs};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("unknown split '{other}' (expected train or test)"))),
    }
}

fn parse_cam(s: &str) -> Result<Point3, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--cam '{s}': {e}")))?;
    match parts[..] {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Point3::new(x, y, z)),
        _ => Err(usage(format!("--cam needs three finite numbers x,y,z, got '{s}'"))),
    }
}

fn load_manifest(root: &Path) -> Result<Manifest, CliError> {
    Manifest::load(root).map_err(|e| runtime(format!("cannot load dataset at {}: {e}", root.display())))
}

pub fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let tiers = TierSizes {
        partial: a.partial,
        gt1: a.gt1,
        gt2: a.gt2,
        gt3: a.gt3,
    };
    if [tiers.partial, tiers.gt1, tiers.gt2, tiers.gt3, a.dense, a.bins].contains(&0) {
        return Err(usage("tier sizes, --dense and --bins must be positive"));
    }
    if !(a.cam_distance > 0.0) {
        return Err(usage("--cam-distance must be positive"));
    }
    let config = GenConfig {
        count: a.count,
        seed: cli.seed,
        families: if a.families.is_empty() { Family::ALL.to_vec() } else { a.families.clone() },
        pair: PairConfig {
            tiers,
            dense_points: a.dense,
            az_bins: a.bins,
            el_bins: a.bins,
            cam_distance: a.cam_distance,
            ..PairConfig::default()
        },
    };
    fs::create_dir_all(&a.out)?;
    let manifest = generate_dataset(&config, &a.out)?;
    let train = manifest.split(Split::Train).count();
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        manifest.samples.len(),
        train,
        manifest.samples.len() - train,
        a.out.display()
    );
    Ok(())
}

/// Refinement plan matching a dataset's tiers: FPS down to the middle
/// tier, then split up to the finest one.
pub fn plan_for(tiers: &TierSizes, alpha: f64) -> Result<RefinementPlan, CliError> {
    if tiers.gt2 == 0 || !tiers.gt3.is_multiple_of(tiers.gt2) {
        return Err(usage(format!(
            "finest tier {} must be a multiple of the middle tier {}",
            tiers.gt3, tiers.gt2
        )));
    }
    let plan = RefinementPlan {
        fps_count: tiers.gt2,
        split_factors: vec![1, tiers.gt3 / tiers.gt2],
        constraint: OffsetConstraint {
            alpha,
            ..OffsetConstraint::default()
        },
        fixed_bound: None,
    };
    plan.validate()?;
    Ok(plan)
}

fn stages(spec: &str) -> Result<Vec<Stage>, CliError> {
    match spec {
        "all" => Ok(Stage::ALL.to_vec()),
        n => n
            .parse::<u8>()
            .ok()
            .and_then(|n| Stage::from_number(n).ok())
            .map(|s| vec![s])
            .ok_or_else(|| usage(format!("--stage must be 1, 2, 3 or all, got '{n}'"))),
    }
}

/// Model to train: from a checkpoint when one is given, otherwise freshly
/// initialized for the dataset's tiers.
fn starting_model(cli: &Cli, a: &TrainArgs, tiers: &TierSizes) -> Result<(Model, Option<TrainState>), CliError> {
    let from = a.resume.as_ref().or(a.init.as_ref());
    let (mut model, state) = match from {
        Some(path) => {
            let (model, state) = load_checkpoint(path)?;
            if let Some(l) = a.points_per_ray.filter(|&l| l != model.config.points_per_ray) {
                return Err(usage(format!(
                    "--points-per-ray {l} differs from the checkpoint's {}",
                    model.config.points_per_ray
                )));
            }
            (model, if a.resume.is_some() { state } else { None })
        }
        None => {
            let config = ModelConfig {
                points_per_ray: a.points_per_ray.unwrap_or(4),
                plan: plan_for(tiers, a.alpha.unwrap_or(OffsetConstraint::default().alpha))?,
                ..ModelConfig::default()
            };
            (Model::new(config, cli.seed)?, None)
        }
    };
    if let Some(alpha) = a.alpha {
        model.config.plan.constraint.alpha = alpha;
    }
    if let Some(ab) = a.ablate {
        model.config = model.config.clone().with_ablation(ab);
    }
    model.config.validate()?;
    if a.resume.is_some() && state.is_none() {
        return Err(runtime("checkpoint has no optimizer state to resume from"));
    }
    Ok((model, state))
}

pub fn train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let plan = stages(&a.stage)?;
    if a.points_per_ray == Some(0) {
        return Err(usage("--points-per-ray must be positive"));
    }
    let base = TrainConfig {
        stage: plan[0],
        lr: a.lr,
        steps: a.steps,
        batch: a.batch,
        seed: cli.seed,
        cam_noise: a.cam_noise,
        parallel: cli.threads > 1,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    base.validate()?;
    let manifest = load_manifest(&a.data)?;
    let (mut model, resumed) = starting_model(cli, a, &manifest.config.pair.tiers)?;
    let needed = model.config.plan.fps_count;
    if manifest.config.pair.tiers.partial * model.config.points_per_ray < needed {
        return Err(usage(format!(
            "{} points per ray give fewer than the {needed} points the refiner samples",
            model.config.points_per_ray
        )));
    }
    let data = Dataset::load(&a.data, &manifest, Split::Train)?;

    let todo: Vec<Stage> = match &resumed {
        Some(s) => {
            let at = plan
                .iter()
                .position(|&p| p == s.stage)
                .ok_or_else(|| usage(format!("checkpoint is from {}, not part of --stage {}", s.stage.tag(), a.stage)))?;
            plan[at..].to_vec()
        }
        None => plan,
    };
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join(TRAIN_LOG);
    let log_file = if resumed.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log_file);
    let sink = CheckpointSink {
        dir: a.out.clone(),
        every: a.checkpoint_every,
    };
    let mut resumed = resumed;
    for stage in todo {
        let config = TrainConfig { stage, ..base.clone() };
        let mut state = match resumed.take() {
            Some(s) => s,
            None => TrainState::fresh(stage, &model),
        };
        let every = (config.steps / 10).max(1);
        eprintln!("{}: {} steps on {} samples", stage.tag(), config.steps, data.len());
        run_stage(&config, &mut model, &data, &mut state, Some(&sink), &mut |r| {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")?;
            if (r.step + 1) % every == 0 {
                eprintln!("{} step {}/{} loss {:.6}", stage.tag(), r.step + 1, config.steps, r.loss);
            }
            Ok(())
        })?;
        log.flush()?;
        let path = a.out.join(shadowpc::trainer::checkpoint_name(stage, config.steps));
        println!("{}", path.display());
    }
    Ok(())
}

fn write_completion(trace: &shadowpc::completion::CompletionTrace, out: &Path, emit: bool) -> Result<(), CliError> {
    write_cloud(&trace.p_final, out)?;
    if emit {
        write_cloud(&trace.p_first, &with_suffix(out, "_ofirst"))?;
        write_cloud(&trace.p_initial, &with_suffix(out, "_oinit"))?;
        write_cloud(&trace.p_mid, &with_suffix(out, "_mid"))?;
    }
    Ok(())
}

pub fn complete(cli: &Cli, a: &CompleteArgs) -> Result<(), CliError> {
    if !(a.cam_noise >= 0.0) {
        return Err(usage("--cam-noise must be non-negative"));
    }
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    match (&a.input, &a.data) {
        (Some(input), None) => {
            let cam = parse_cam(a.cam.as_deref().unwrap_or_default())?;
            let scan = read_cloud(input)?;
            let cam = noisy_camera(cam, a.cam_noise, mix_seed(cli.seed ^ 0xC0, 0));
            let trace = model.complete(&scan, cam)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_completion(&trace, &a.out, a.emit_trace)?;
            println!("wrote {} points to {}", trace.p_final.len(), a.out.display());
            Ok(())
        }
        (None, Some(root)) => {
            if a.cam.is_some() {
                return Err(usage("--cam applies to single-scan mode only"));
            }
            let split = parse_split(&a.split)?;
            let manifest = load_manifest(root)?;
            let entries: Vec<_> = manifest.split(split).collect();
            fs::create_dir_all(&a.out)?;
            entries
                .par_iter()
                .enumerate()
                .map(|(k, e)| -> Result<(), CliError> {
                    let scan = read_cloud(&root.join(&e.files.partial))?;
                    let cam = noisy_camera(e.cam, a.cam_noise, mix_seed(cli.seed ^ 0xC0, k as u64));
                    let trace = model.complete(&scan, cam).map_err(|err| runtime(format!("{}: {err}", e.sample_id)))?;
                    write_completion(&trace, &a.out.join(format!("{}.ply", e.sample_id)), a.emit_trace)
                })
                .collect::<Result<Vec<()>, CliError>>()?;
            println!("wrote {} completions to {}", entries.len(), a.out.display());
            Ok(())
        }
        _ => Err(usage("give either --input with --cam, or --data")),
    }
}

pub fn eval(_cli: &Cli, a: &EvalArgs) -> Result<(), CliError> {
    let opts = EvalOptions {
        tau: a.tau,
        temp: a.temp,
        radius: a.radius,
    };
    if !(opts.tau > 0.0 && opts.temp > 0.0 && opts.radius > 0.0) {
        return Err(usage("--tau, --temp and --radius must be positive"));
    }
    let split = parse_split(&a.split)?;
    let manifest = load_manifest(&a.data)?;
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(runtime(format!("split '{}' has no samples", a.split)));
    }
    let reports = entries
        .par_iter()
        .map(|e| -> Result<SampleReport, CliError> {
            let pair = e.load(&a.data).map_err(|err| runtime(format!("{}: {err}", e.sample_id)))?;
            let result = if a.self_check {
                pair.gt3.clone()
            } else if a.baseline {
                baseline_upsample(&pair.partial, pair.gt3.len())?
            } else {
                let dir = a.results.as_ref().ok_or_else(|| usage("--results is required"))?;
                let path = dir.join(format!("{}.ply", e.sample_id));
                read_cloud(&path).map_err(|err| runtime(format!("{}: {err}", e.sample_id)))?
            };
            Ok(SampleReport {
                sample_id: e.sample_id.clone(),
                category: e.category.name().to_string(),
                metrics: evaluate(&result, &pair.gt3, &pair.partial, &opts)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let agg = aggregate(&reports);
    if let Some(out) = out_dir(a) {
        fs::create_dir_all(&out)?;
        let mut w = BufWriter::new(File::create(out.join(METRICS_FILE))?);
        for r in &reports {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut text = serde_json::to_string_pretty(&agg)?;
        text.push('\n');
        fs::write(out.join(AGGREGATE_FILE), text)?;
    }
    print!("{}", agg.table());
    Ok(())
}

fn out_dir(a: &EvalArgs) -> Option<PathBuf> {
    a.out.clone().or_else(|| a.results.clone())
}
