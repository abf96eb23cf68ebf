use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use cryodiff::baselines::FilterSpec;
use cryodiff::checkpoint::{self, Checkpoint};
use cryodiff::diffusion::{self, DenoiserConfig, DenoiserModel, TrainConfig};
use cryodiff::map::Normalization;
use cryodiff::metrics::{self, MetricsReport};
use cryodiff::mrc::{self, MrcData};
use cryodiff::nn::{Adam, EpochEnd};
use cryodiff::postprocess::{self, PostConfig, PostModel, PostTrainConfig};
use cryodiff::simulate::{self, DatasetManifest, PairedDataset, SimulationConfig, Split};
use cryodiff::{phantom, recon, Image2D, ImageStack};

use crate::run::{io_err, read_config, usage, CliError, CliResult, RunDir};
use crate::{
    AdapterArgs, BaselineArgs, DenoiseArgs, EvalArgs, FilterKind, FscArgs, PhantomArgs, ReconArgs,
    SimulateArgs, StackSource, Stage, TrainArgs,
};

pub const LOSS_CSV_HEADER: [&str; 3] = ["step", "epoch", "loss"];

pub fn phantom(args: PhantomArgs) -> CliResult<()> {
    if args.side < 4 || !(args.voxel_size > 0.0) || args.blobs == 0 {
        return usage("phantom needs side >= 4, voxel_size > 0 and at least one blob");
    }
    let mut run = RunDir::create(&args.out, "phantom")?;
    run.config(json!({
        "side": args.side,
        "voxel_size": args.voxel_size,
        "blobs": args.blobs,
    }));
    run.seeds(json!({ "seed": args.seed }));
    let map = phantom::gaussian_blobs(args.side, args.voxel_size, args.blobs, args.seed);
    mrc::write_volume(&map, run.output("phantom.mrc"))?;
    run.finish()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    map: PathBuf,
    simulation: SimulationConfig,
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let (config, raw): (SimulateFile, Value) = read_config(&args.config)?;
    config.simulation.validate()?;
    let map = mrc::read_volume(&config.map)?;
    let mut run = RunDir::create(&args.out, "simulate")?;
    run.config(raw);
    run.seeds(json!({ "rng_seed": config.simulation.rng_seed }));
    run.input(&args.config);
    run.input(&config.map);
    let source = config.map.display().to_string();
    let dataset = simulate::build_dataset(&map, &config.simulation, &source)?;
    dataset.save(&run.dir)?;
    for name in [
        simulate::NOISY_FILE,
        simulate::CLEAN_FILE,
        simulate::MANIFEST_FILE,
    ] {
        run.output(name);
    }
    run.finish()
}

fn load_dataset(dir: &Path) -> CliResult<PairedDataset> {
    if !dir.join(simulate::MANIFEST_FILE).is_file() {
        return usage(format!(
            "{} is not a dataset directory (no {})",
            dir.display(),
            simulate::MANIFEST_FILE
        ));
    }
    Ok(PairedDataset::load(dir)?)
}

fn split_pair(dataset: &PairedDataset, split: Split) -> CliResult<(ImageStack, ImageStack)> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return usage(format!("dataset has no {split:?} images").to_lowercase());
    }
    Ok((dataset.noisy.select(&idx), dataset.clean.select(&idx)))
}

fn write_loss_csv(path: &Path, history: &[f64], steps_per_epoch: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(LOSS_CSV_HEADER).map_err(err)?;
    for (i, loss) in history.iter().enumerate() {
        let epoch = i / steps_per_epoch.max(1) + 1;
        w.write_record(&[(i + 1).to_string(), epoch.to_string(), loss.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionTrainFile {
    #[serde(default)]
    model: DenoiserConfig,
    train: TrainConfig,
    #[serde(default)]
    model_seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PostTrainFile {
    #[serde(default)]
    model: PostConfig,
    train: PostTrainConfig,
    #[serde(default)]
    model_seed: u64,
    /// Reverse-chain length used to produce the stage-1 training inputs.
    #[serde(default)]
    inference_steps: Option<usize>,
    #[serde(default)]
    sample_seed: u64,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    match args.stage {
        Stage::Diffusion => train_diffusion(args),
        Stage::Post => train_post(args),
    }
}

fn train_diffusion(args: TrainArgs) -> CliResult<()> {
    let (config, raw): (DiffusionTrainFile, Value) = read_config(&args.config)?;
    config.train.validate()?;
    let dataset = load_dataset(&args.dataset)?;
    let (noisy, clean) = split_pair(&dataset, Split::Train)?;
    let mut run = RunDir::create(&args.out, "train diffusion")?;
    run.config(raw);
    run.seeds(json!({ "model_seed": config.model_seed, "rng_seed": config.train.rng_seed }));
    run.input(&args.config);
    run.input(&args.dataset.join(simulate::NOISY_FILE));
    run.input(&args.dataset.join(simulate::CLEAN_FILE));

    let train_echo = serde_json::to_value(&config.train).expect("config serializes");
    let mut model =
        DenoiserModel::<f32>::new(config.model, config.train.schedule, config.model_seed)?;
    let mut adam = Adam::new(config.train.adam(), model.params());
    let every = config.train.checkpoint_every;
    let mut written = Vec::new();
    let result = diffusion::train(
        &mut model,
        &mut adam,
        &noisy,
        &clean,
        &config.train,
        |m, a, end: EpochEnd| {
            eprintln!("epoch {} mean loss {:.6}", end.epoch, end.mean_loss);
            if every > 0 && end.epoch % every == 0 {
                let name = format!("diffusion_epoch{:04}.ckpt", end.epoch);
                checkpoint::denoiser_checkpoint(m, Some(a), train_echo.clone())?
                    .save(run.path(&name))?;
                written.push(name);
            }
            Ok(())
        },
    );
    for name in &written {
        run.output(name);
    }
    let steps_per_epoch = noisy.len().div_ceil(config.train.batch_size);
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            let ckpt = checkpoint::denoiser_checkpoint(&model, Some(&adam), train_echo)?;
            ckpt.save(run.output("diffusion_last_good.ckpt"))?;
            run.finish()?;
            return Err(e.into());
        }
    };
    write_loss_csv(&run.output("loss.csv"), &history, steps_per_epoch)?;
    checkpoint::denoiser_checkpoint(&model, Some(&adam), train_echo)?
        .save(run.output("diffusion.ckpt"))?;
    run.finish()
}

fn load_denoiser(path: &Path) -> CliResult<DenoiserModel<f32>> {
    Ok(checkpoint::load_denoiser::<f32>(&Checkpoint::load(path)?)?.0)
}

fn load_post(path: &Path) -> CliResult<PostModel<f32>> {
    Ok(checkpoint::load_post::<f32>(&Checkpoint::load(path)?)?.0)
}

fn inference_schedule(
    model: &DenoiserModel<f32>,
    steps: Option<usize>,
) -> CliResult<diffusion::NoiseSchedule> {
    let full = model.schedule.build()?;
    Ok(match steps {
        Some(n) => full.respaced(n)?,
        None => full,
    })
}

fn train_post(args: TrainArgs) -> CliResult<()> {
    let Some(diffusion_path) = args.diffusion.as_deref() else {
        return usage(
            "the post stage refines diffusion outputs: pass --diffusion <checkpoint> \
             produced by `cryodiff train diffusion`",
        );
    };
    let (config, raw): (PostTrainFile, Value) = read_config(&args.config)?;
    config.train.validate()?;
    let dataset = load_dataset(&args.dataset)?;
    let (noisy, clean) = split_pair(&dataset, Split::Train)?;
    let dmodel = load_denoiser(diffusion_path)?;
    let schedule = inference_schedule(&dmodel, config.inference_steps)?;
    let mut run = RunDir::create(&args.out, "train post")?;
    run.config(raw);
    run.seeds(json!({
        "model_seed": config.model_seed,
        "rng_seed": config.train.rng_seed,
        "sample_seed": config.sample_seed,
    }));
    run.input(&args.config);
    run.input(diffusion_path);
    run.input(&args.dataset.join(simulate::NOISY_FILE));
    run.input(&args.dataset.join(simulate::CLEAN_FILE));

    eprintln!(
        "sampling {} training inputs with {} steps",
        noisy.len(),
        schedule.steps()
    );
    let stage1 =
        diffusion::sample_many(&dmodel, &noisy.images, &schedule, config.sample_seed, true)?;
    let stage1 = ImageStack::new(stage1, noisy.pixel_size)?;
    mrc::write_stack(&stage1, run.output("stage1_train.mrc"))?;

    let train_echo = serde_json::to_value(&config.train).expect("config serializes");
    let mut model = PostModel::<f32>::new(config.model, config.model_seed)?;
    let mut adam = Adam::new(config.train.adam(), model.params());
    let every = config.train.checkpoint_every;
    let mut written = Vec::new();
    let result = postprocess::train_post(
        &mut model,
        &mut adam,
        &stage1,
        &clean,
        &config.train,
        |m, a, end| {
            eprintln!("epoch {} mean loss {:.6}", end.epoch, end.mean_loss);
            if every > 0 && end.epoch % every == 0 {
                let name = format!("post_epoch{:04}.ckpt", end.epoch);
                checkpoint::post_checkpoint(m, Some(a), train_echo.clone())?
                    .save(run.path(&name))?;
                written.push(name);
            }
            Ok(())
        },
    );
    for name in &written {
        run.output(name);
    }
    let steps_per_epoch = stage1.len().div_ceil(config.train.batch_size);
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            checkpoint::post_checkpoint(&model, Some(&adam), train_echo)?
                .save(run.output("post_last_good.ckpt"))?;
            run.finish()?;
            return Err(e.into());
        }
    };
    write_loss_csv(&run.output("loss.csv"), &history, steps_per_epoch)?;
    checkpoint::post_checkpoint(&model, Some(&adam), train_echo)?.save(run.output("post.ckpt"))?;
    run.finish()
}

/// Loads the stack named by `source`, registering its files as run inputs.
fn load_source(source: &StackSource, run: &mut RunDir) -> CliResult<ImageStack> {
    match (&source.input, &source.dataset) {
        (Some(path), None) => {
            run.input(path);
            Ok(mrc::read_stack(path)?)
        }
        (None, Some(dir)) => {
            let dataset = load_dataset(dir)?;
            run.input(&dir.join(simulate::NOISY_FILE));
            Ok(split_pair(&dataset, source.split)?.0)
        }
        _ => usage("give either --input <stack.mrc> or --dataset <dir>"),
    }
}

fn zscore(image: &Image2D) -> Normalization {
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Normalization {
        offset: mean,
        scale: if var > 0.0 { var.sqrt() } else { 1.0 },
    }
}

pub fn denoise(args: DenoiseArgs) -> CliResult<()> {
    let mut run = RunDir::create(&args.out, "denoise")?;
    let input = load_source(&args.source, &mut run)?;
    let dmodel = load_denoiser(&args.diffusion)?;
    run.input(&args.diffusion);
    let pmodel = match &args.post {
        Some(p) => {
            run.input(p);
            Some(load_post(p)?)
        }
        None => None,
    };
    let schedule = inference_schedule(&dmodel, args.steps)?;
    let deterministic = !args.stochastic;
    run.config(json!({
        "inference_steps": schedule.steps(),
        "deterministic": deterministic,
        "post": args.post.is_some(),
    }));
    run.seeds(json!({ "seed": args.seed }));

    // Each image is standardized on its own statistics, as in training,
    // and mapped back afterwards.
    let norms: Vec<Normalization> = input.images.iter().map(zscore).collect();
    let standardized: Vec<Image2D> = input
        .images
        .iter()
        .zip(&norms)
        .map(|(im, n)| n.apply(im))
        .collect();
    let stage1 =
        diffusion::sample_many(&dmodel, &standardized, &schedule, args.seed, deterministic)?;
    let restore = |images: &[Image2D]| -> CliResult<ImageStack> {
        let restored = images
            .iter()
            .zip(&norms)
            .map(|(im, n)| n.invert(im))
            .collect();
        Ok(ImageStack::new(restored, input.pixel_size)?)
    };
    match &pmodel {
        Some(p) => {
            mrc::write_stack(&restore(&stage1)?, run.output("diffusion.mrc"))?;
            let refined = postprocess::apply_post_many(p, &stage1)?;
            mrc::write_stack(&restore(&refined)?, run.output("denoised.mrc"))?;
        }
        None => mrc::write_stack(&restore(&stage1)?, run.output("denoised.mrc"))?,
    }
    run.finish()
}

pub fn baseline(args: BaselineArgs) -> CliResult<()> {
    let spec = match args.method {
        FilterKind::Lowpass => FilterSpec::Lowpass { sigma: args.param },
        FilterKind::Wiener => FilterSpec::Wiener {
            noise_var: args.param,
        },
    };
    spec.validate()?;
    let mut run = RunDir::create(&args.out, "baseline")?;
    run.config(serde_json::to_value(spec).expect("filter serializes"));
    let input = load_source(&args.source, &mut run)?;
    let out = input
        .images
        .par_iter()
        .map(|im| spec.apply(im))
        .collect::<cryodiff::Result<Vec<_>>>()?;
    mrc::write_stack(
        &ImageStack::new(out, input.pixel_size)?,
        run.output("denoised.mrc"),
    )?;
    run.finish()
}

pub fn adapter(args: AdapterArgs) -> CliResult<()> {
    let mut run = RunDir::create(&args.out, "adapter")?;
    run.config(json!({ "exe": args.exe.display().to_string() }));
    let input = load_source(&args.source, &mut run)?;
    let in_path = run.output("adapter_input.mrc");
    mrc::write_stack(&input, &in_path)?;
    let out_path = run.output("denoised.mrc");
    let status = Command::new(&args.exe)
        .arg(&in_path)
        .arg(&out_path)
        .status()
        .map_err(|e| io_err(&args.exe, e))?;
    if !status.success() {
        return Err(CliError::Io(format!(
            "{} exited with {status}",
            args.exe.display()
        )));
    }
    if !out_path.is_file() {
        return Err(CliError::Io(format!(
            "{} did not write {}",
            args.exe.display(),
            out_path.display()
        )));
    }
    let expected = (input.len(), input.image_dim());
    let found = match mrc::read_mrc(&out_path)? {
        MrcData::Stack(s) => (s.len(), s.image_dim()),
        MrcData::Volume(v) => {
            let (z, y, x) = v.shape();
            return usage(format!(
                "adapter output is a {x}x{y}x{z} volume, expected a stack of {} images of {:?}",
                expected.0, expected.1
            ));
        }
    };
    if found != expected {
        return usage(format!(
            "adapter output holds {} images of {:?}, expected {} of {:?}",
            found.0, found.1, expected.0, expected.1
        ));
    }
    run.finish()
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let mut run = RunDir::create(&args.out, "eval")?;
    run.config(json!({ "method": args.method, "dataset": args.dataset_name }));
    run.input(&args.denoised);
    let denoised = mrc::read_stack(&args.denoised)?;
    let clean = match (&args.clean, &args.dataset) {
        (Some(path), None) => {
            run.input(path);
            mrc::read_stack(path)?
        }
        (None, Some(dir)) => {
            let dataset = load_dataset(dir)?;
            run.input(&dir.join(simulate::CLEAN_FILE));
            split_pair(&dataset, args.split)?.1
        }
        _ => return usage("give either --clean <stack.mrc> or --dataset <dir>"),
    };
    if denoised.image_dim() != clean.image_dim() {
        return usage(format!(
            "denoised images {:?} and clean images {:?} differ in shape",
            denoised.image_dim(),
            clean.image_dim()
        ));
    }
    let report = MetricsReport::evaluate(
        &args.dataset_name,
        &args.method,
        &denoised.images,
        &clean.images,
    )?;
    report.write_csv(run.output("metrics.csv"))?;
    report.write_json(run.output("metrics.json"))?;
    println!(
        "{} on {}: MSE {:.6}  PSNR {:.3} dB  SSIM {:.4}",
        report.method, report.dataset, report.mse.mean, report.psnr_db.mean, report.ssim.mean
    );
    run.finish()
}

pub fn recon(args: ReconArgs) -> CliResult<()> {
    if !args.dataset.join(simulate::MANIFEST_FILE).is_file() {
        return usage(format!(
            "reconstruction needs known poses: {} has no {}",
            args.dataset.display(),
            simulate::MANIFEST_FILE
        ));
    }
    let manifest = DatasetManifest::load(&args.dataset)?;
    let stack = mrc::read_stack(&args.stack)?;
    let idx = manifest.indices(args.split);
    if idx.len() != stack.len() {
        return usage(format!(
            "stack holds {} images but the {:?} split has {} poses",
            stack.len(),
            args.split,
            idx.len()
        ));
    }
    let mut run = RunDir::create(&args.out, "recon")?;
    run.config(json!({ "split": args.split, "weight_floor": args.weight_floor }));
    run.input(&args.stack);
    run.input(&args.dataset.join(simulate::MANIFEST_FILE));
    // Undo the per-image standardization so all views share one scale.
    let records: Vec<_> = idx.iter().map(|&i| &manifest.images[i]).collect();
    let images: Vec<Image2D> = stack
        .images
        .iter()
        .zip(&records)
        .map(|(im, r)| r.normalization.invert(im))
        .collect();
    let orientations: Vec<_> = records.iter().map(|r| r.orientation).collect();
    let map = recon::reconstruct(&images, &orientations, stack.pixel_size, args.weight_floor)?;
    mrc::write_volume(&map, run.output("recon.mrc"))?;
    run.finish()
}

pub fn fsc(args: FscArgs) -> CliResult<()> {
    let a = mrc::read_volume(&args.a)?;
    let b = mrc::read_volume(&args.b)?;
    let mut run = RunDir::create(&args.out, "fsc")?;
    run.config(json!({ "threshold": args.threshold }));
    run.input(&args.a);
    run.input(&args.b);
    let curve = metrics::fsc(&a, &b)?;
    let path = run.output("fsc.csv");
    fs::write(&path, curve.to_csv()).map_err(|e| io_err(&path, e))?;
    let res = metrics::resolution_at(&curve, args.threshold);
    let line = if res.crossed {
        format!("resolution_angstrom: {:.4}\n", res.angstrom)
    } else {
        format!("resolution: no-crossing (Nyquist {:.4} A)\n", res.angstrom)
    };
    print!("{line}");
    let path = run.output("resolution.txt");
    fs::write(&path, line).map_err(|e| io_err(&path, e))?;
    let path = run.output("resolution.json");
    let text = serde_json::to_string_pretty(&json!({
        "threshold": args.threshold,
        "angstrom": res.angstrom,
        "frequency_inv_angstrom": res.frequency,
        "crossed": res.crossed,
    }))
    .expect("resolution serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    run.finish()
}
