//! `cloudseg`: synthetic data, patch preparation, training, evaluation and
//! whole-scene segmentation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cloudseg::metrics::{emit_report, evaluate_split};
use cloudseg::net::{Architecture, ArchitectureConfig, Mode, Network, WeightFile};
use cloudseg::raster::{crop, read_msr, write_msr};
use cloudseg::segment::{plan_windows, segment_scene, SegmentOptions};
use cloudseg::synth::{generate_corpus, Manifest, ManifestEntry, SynthConfig, MANIFEST_NAME};
use cloudseg::train::{
    augment_all, augment_scene, load_samples, select, split_dataset, train, write_checkpoint, Sample,
    SplitPart, TrainConfig, TrainData, DEFAULT_RATIOS,
};

/// A problem with the invocation itself; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

const TRAIN_HELP: &str = "\
The config file holds `key = value` lines:

  learning_rate = 0.003
  beta1 = 0.9
  beta2 = 0.999
  epsilon = 1e-8
  batch_size = 8
  epochs = 300
  seed = 0
  checkpoint_every = 10
  arch_config_path = builtin:default
  data_dir = patches

Optional keys: output_dir (default `train_out`), augment (true expands the
training split eightfold in memory), group_size (8 for a corpus written by
`augment`), split (default 0.90,0.05,0.05).";

#[derive(Parser, Debug)]
#[command(name = "cloudseg", version, about = "Cloud segmentation for 4-band satellite scenes")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus of scenes with ground-truth masks.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes.
        #[arg(long)]
        scenes: usize,
        /// Scene size as WIDTHxHEIGHT.
        #[arg(long, default_value = "512x512")]
        size: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut every scene of a corpus into square patches.
    Patchify {
        /// Directory holding manifest.txt.
        #[arg(long)]
        data: PathBuf,
        /// Patch side in pixels.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Step between patches (default: the patch size).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the 8 rotations/flips of every pair of a corpus.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from a config file (defaults: learning rate 0.003, batch 8).
    #[command(after_help = TRAIN_HELP)]
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score weights on one split of a corpus and write a metrics report.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// val, test or train.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Training config to take seed, split ratios, group size and architecture from.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture file or builtin:default / builtin:tiny (default: inferred from the weights).
        #[arg(long)]
        arch: Option<String>,
        /// Split seed; must match the training seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Consecutive manifest entries per source.
        #[arg(long, default_value_t = 1)]
        group_size: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Method name in the report.
        #[arg(long, default_value = "proposed")]
        method: String,
    },
    /// Segment a whole scene with a sliding window.
    Segment {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output mask (MSR1, u8 0/255).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        window: usize,
        #[arg(long, default_value_t = 50)]
        overlap: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Also write the merged probability canvas (MSR1, f32).
        #[arg(long)]
        prob: Option<PathBuf>,
        #[arg(long)]
        arch: Option<String>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("--size: expected WIDTHxHEIGHT with positive sides, got '{s}'"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h): (usize, usize) = (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{flag}: {} does not exist", path.display())));
    }
    Ok(())
}

fn require_manifest(dir: &Path, flag: &str) -> Result<()> {
    if !dir.join(MANIFEST_NAME).is_file() {
        return Err(usage(format!("{flag}: {} has no {MANIFEST_NAME}", dir.display())));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Loads weights for `arch`, or for whichever builtin architecture they fit.
fn load_network(weights: &Path, arch: Option<&str>) -> Result<Network> {
    require_file(weights, "--weights")?;
    let file = WeightFile::read(weights)?;
    let candidates: Vec<&str> = match arch {
        Some(a) => vec![a],
        None => vec!["builtin:default", "builtin:tiny"],
    };
    let mut last = None;
    for spec in &candidates {
        let arch = Architecture::compile(ArchitectureConfig::load(spec)?)?;
        match Network::from_weights(arch, &file, Mode::Inference) {
            Ok(net) => return Ok(net),
            Err(e) => last = Some(e),
        }
    }
    match (arch, last) {
        (Some(_), Some(e)) => Err(e.into()),
        _ => Err(usage(format!(
            "{} matches neither builtin architecture; pass --arch",
            weights.display()
        ))),
    }
}

fn cmd_synth(seed: u64, scenes: usize, size: &str, out: &Path) -> Result<()> {
    let (w, h) = parse_size(size)?;
    let cfg = SynthConfig::for_size(seed, w, h);
    let manifest = generate_corpus(&cfg, scenes, out)?;
    info!("wrote {} scenes of {w}x{h} to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_patchify(data: &Path, size: usize, stride: Option<usize>, out: &Path) -> Result<()> {
    require_manifest(data, "--data")?;
    let stride = stride.unwrap_or(size);
    if size == 0 || stride == 0 {
        return Err(usage("--size and --stride must be positive"));
    }
    let manifest = Manifest::read_dir(data)?;
    create_dir(out)?;
    let mut entries = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let scene = read_msr(&e.scene)?;
        let mask = read_msr(&e.mask)?;
        if scene.width < size || scene.height < size {
            info!("skipping {}: smaller than {size}x{size}", e.scene.display());
            continue;
        }
        let mut k = 0;
        for y in (0..=scene.height - size).step_by(stride) {
            for x in (0..=scene.width - size).step_by(stride) {
                let tag = format!("{} patch x={x} y={y}", scene.tag);
                let p = crop(&scene, x, y, size, size, tag.clone())?;
                let m = crop(&mask, x, y, size, size, tag)?;
                let entry = ManifestEntry {
                    scene: PathBuf::from(format!("patch_{i:04}_{k:04}.msr")),
                    mask: PathBuf::from(format!("patch_{i:04}_{k:04}_mask.msr")),
                    cloud_fraction: m.cloud_fraction(),
                };
                write_msr(&p, out.join(&entry.scene))?;
                write_msr(&m, out.join(&entry.mask))?;
                entries.push(entry);
                k += 1;
            }
        }
    }
    info!("wrote {} patches to {}", entries.len(), out.display());
    Manifest { entries }.write(out.join(MANIFEST_NAME))?;
    Ok(())
}

fn cmd_augment(data: &Path, out: &Path) -> Result<()> {
    require_manifest(data, "--data")?;
    let manifest = Manifest::read_dir(data)?;
    create_dir(out)?;
    let mut entries = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let scene = read_msr(&e.scene)?;
        let mask = read_msr(&e.mask)?;
        for (k, (s, m)) in augment_scene(&scene, &mask)?.into_iter().enumerate() {
            let entry = ManifestEntry {
                scene: PathBuf::from(format!("aug_{i:05}_{k}.msr")),
                mask: PathBuf::from(format!("aug_{i:05}_{k}_mask.msr")),
                cloud_fraction: m.cloud_fraction(),
            };
            write_msr(&s, out.join(&entry.scene))?;
            write_msr(&m, out.join(&entry.mask))?;
            entries.push(entry);
        }
    }
    info!("wrote {} augmented pairs to {}", entries.len(), out.display());
    Manifest { entries }.write(out.join(MANIFEST_NAME))?;
    Ok(())
}

/// Splits a corpus by source and returns the requested part's samples.
fn split_part(samples: &[Sample], group: usize, ratios: [f64; 3], seed: u64, part: SplitPart) -> Result<Vec<Sample>> {
    if group == 0 || !samples.len().is_multiple_of(group) {
        return Err(usage(format!(
            "group size {group} does not divide the {} samples of the corpus",
            samples.len()
        )));
    }
    let split = split_dataset(samples.len() / group, ratios, seed)?;
    Ok(select(samples, split.part(part), group))
}

fn cmd_train(config: &Path) -> Result<()> {
    require_file(config, "--config")?;
    let cfg = TrainConfig::load(config)?;
    let o = &cfg.optimizer;
    println!(
        "training: learning_rate={} beta1={} beta2={} epsilon={:e} batch_size={} epochs={} seed={}",
        o.learning_rate, o.beta1, o.beta2, o.epsilon, o.batch_size, o.epochs, cfg.seed
    );
    require_manifest(&cfg.data_dir, "data_dir")?;
    let arch = ArchitectureConfig::load(&cfg.arch_config_path)?;
    let samples = load_samples(&cfg.data_dir)?;
    let mut train_set = split_part(&samples, cfg.group_size, cfg.split, cfg.seed, SplitPart::Train)?;
    let validation = split_part(&samples, cfg.group_size, cfg.split, cfg.seed, SplitPart::Validation)?;
    if cfg.augment {
        train_set = augment_all(&train_set)?;
    }
    info!("{} training and {} validation samples", train_set.len(), validation.len());
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("train_out"));
    let net = Network::build(arch, cfg.seed)?;
    info!("{} trainable parameters", net.count_params());
    let steps_per_epoch = train_set.len().div_ceil(o.batch_size) as u64;
    let data = TrainData {
        train: train_set,
        validation,
    };
    let started = Instant::now();
    let (net, history) = train(net, &data, &cfg, Some(&out))?;
    let last = history.records.last().ok_or_else(|| anyhow!("no epochs were run"))?;
    write_checkpoint(&net, &out, "final", last.epoch, last.epoch as u64 * steps_per_epoch)?;
    history.write_csv(out.join("history.csv"))?;
    println!(
        "final validation accuracy {:.4} after {} epochs ({:.1}s); outputs in {}",
        last.val_acc,
        last.epoch,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    weights: &Path,
    data: &Path,
    split: &str,
    report: &Path,
    config: Option<&Path>,
    arch: Option<&str>,
    seed: u64,
    group_size: usize,
    threshold: f32,
    method: &str,
) -> Result<()> {
    let part: SplitPart = split.parse().map_err(|e: cloudseg::Error| usage(format!("--split: {e}")))?;
    let (mut seed, mut group, mut ratios, mut arch) = (seed, group_size, DEFAULT_RATIOS, arch.map(str::to_string));
    if let Some(path) = config {
        require_file(path, "--config")?;
        let cfg = TrainConfig::load(path)?;
        (seed, group, ratios) = (cfg.seed, cfg.group_size, cfg.split);
        arch.get_or_insert(cfg.arch_config_path);
    }
    require_manifest(data, "--data")?;
    let net = load_network(weights, arch.as_deref())?;
    let samples = load_samples(data)?;
    let chosen = split_part(&samples, group, ratios, seed, part)?;
    let row = evaluate_split(method, &net, &chosen, threshold)?;
    emit_report(std::slice::from_ref(&row), report)?;
    println!("{}", row.to_csv_line());
    if !row.is_complete() {
        return Err(usage(format!(
            "some metrics are undefined on {} {split} samples (zero denominator); see {}",
            chosen.len(),
            report.display()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_segment(
    weights: &Path,
    scene: &Path,
    out: &Path,
    window: usize,
    overlap: usize,
    threshold: f32,
    prob: Option<&Path>,
    arch: Option<&str>,
) -> Result<()> {
    require_file(scene, "--scene")?;
    if overlap >= window {
        return Err(usage(format!("--overlap {overlap} must be smaller than --window {window}")));
    }
    let net = load_network(weights, arch)?;
    let raster = read_msr(scene)?;
    let plan = plan_windows(raster.width, raster.height, window, overlap)?;
    info!(
        "{}x{} scene: {} x {} = {} windows",
        raster.width,
        raster.height,
        plan.x_offsets.len(),
        plan.y_offsets.len(),
        plan.len()
    );
    let opts = SegmentOptions {
        window,
        overlap,
        threshold,
    };
    let started = Instant::now();
    let result = segment_scene(&raster, &net, &opts)?;
    write_msr(&result.mask, out)?;
    if let Some(p) = prob {
        write_msr(&result.canvas.to_scene(format!("probability of {}", raster.tag))?, p)?;
    }
    info!(
        "cloud fraction {:.4}, {:.1}s",
        result.mask.cloud_fraction(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth {
            seed,
            scenes,
            size,
            out,
        } => cmd_synth(seed, scenes, &size, &out),
        Command::Patchify {
            data,
            size,
            stride,
            out,
        } => cmd_patchify(&data, size, stride, &out),
        Command::Augment { data, out } => cmd_augment(&data, &out),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            weights,
            data,
            split,
            report,
            config,
            arch,
            seed,
            group_size,
            threshold,
            method,
        } => cmd_eval(
            &weights,
            &data,
            &split,
            &report,
            config.as_deref(),
            arch.as_deref(),
            seed,
            group_size,
            threshold,
            &method,
        ),
        Command::Segment {
            weights,
            scene,
            out,
            window,
            overlap,
            threshold,
            prob,
            arch,
        } => cmd_segment(
            &weights,
            &scene,
            &out,
            window,
            overlap,
            threshold,
            prob.as_deref(),
            arch.as_deref(),
        ),
    }
}

/// 1 for problems with the caller's input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<cloudseg::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
