use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use snowkit::dataset::{self, DatasetParams, Manifest, MANIFEST_FILE};
use snowkit::degrade::{list_images, PatchSet};
use snowkit::imagecore::{is_image_file, load_image, save_image, FileFormat};
use snowkit::metrics::{evaluate_pairs, MetricsReport};
use snowkit::models::{
    build_critic, build_generator, build_unet, generate_patches, load_weights, CriticConfig, FeatureNet, GeneratorConfig,
    Network, UnetConfig,
};
use snowkit::restore::{Denoiser, DenoiserRegistry, UnetDenoiser, CLASSICAL_METHODS};
use snowkit::rng::derive_seed;
use snowkit::train::{self, TrainConfig};
use snowkit::Image;

use crate::config::{resolve, write_snapshot, Mirrored, RunConfig, THREADS_ENV};
use crate::Usage;

type Layers = Vec<Map<String, Value>>;

/// Methods `baseline` runs when none is named.
const BASELINE_METHODS: [&str; 3] = ["median3", "median5", "adaptive"];

/// Collects flag overrides under their dotted keys.
#[derive(Default)]
struct Flags(Map<String, Value>);

impl Flags {
    fn put<T: Serialize>(mut self, key: &str, value: &Option<T>) -> Self {
        if let Some(v) = value {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }
}

fn settle<T>(defaults: T, mut layers: Layers, flags: Flags) -> anyhow::Result<RunConfig<T>>
where
    T: Serialize + DeserializeOwned + Mirrored,
{
    layers.push(flags.0);
    let base = RunConfig { seed: 0, deterministic: false, threads: None, command: defaults };
    let cfg = resolve(base, &layers)?;
    let threads = if cfg.deterministic {
        Some(1)
    } else {
        cfg.threads.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
    };
    if threads == Some(0) {
        return Err(Usage("threads must be at least 1".into()).into());
    }
    if let Some(n) = threads {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, problems: &mut Vec<String>) -> Option<&'a PathBuf> {
    if value.is_none() {
        problems.push(format!("`{key}` is required (flag --{})", key.replace('_', "-")));
    }
    value.as_ref()
}

fn existing_dir(value: &Option<PathBuf>, key: &str, problems: &mut Vec<String>) {
    if let Some(p) = required(value, key, problems) {
        if !p.is_dir() {
            problems.push(format!("`{key}`: {} is not a directory", p.display()));
        }
    }
}

fn check(problems: Vec<String>) -> anyhow::Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Usage(problems.join("\n")).into())
    }
}

fn note_problem(problems: &mut Vec<String>, r: snowkit::Result<impl Sized>) {
    if let Err(e) = r {
        problems.push(e.to_string());
    }
}

fn patch_set(dir: &Option<PathBuf>, procedural: usize, seed: u64) -> anyhow::Result<PatchSet> {
    match dir {
        Some(d) => PatchSet::load_dir(d).with_context(|| format!("loading patches from {}", d.display())),
        None => {
            eprintln!("no patch directory given; using {procedural} procedural placeholder patches");
            Ok(PatchSet::procedural(procedural, derive_seed(seed, 11))?)
        }
    }
}

// gen-snow

#[derive(Args)]
pub struct GenSnowArgs {
    /// Number of patches [default: 12]
    #[arg(long)]
    n: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator weights; without them procedural blobs are written
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenSnow {
    n: usize,
    out: Option<PathBuf>,
    weights: Option<PathBuf>,
    generator: GeneratorConfig,
}

impl Default for GenSnow {
    fn default() -> Self {
        Self { n: 12, out: None, weights: None, generator: GeneratorConfig::default() }
    }
}

impl Mirrored for GenSnow {}

pub fn gen_snow(layers: Layers, args: GenSnowArgs) -> anyhow::Result<()> {
    let flags = Flags::default().put("n", &args.n).put("out", &args.out).put("weights", &args.weights);
    let cfg = settle(GenSnow::default(), layers, flags)?;
    let c = &cfg.command;
    let mut problems = Vec::new();
    if c.n == 0 {
        problems.push("`n` must be at least 1".into());
    }
    required(&c.out, "out", &mut problems);
    note_problem(&mut problems, build_generator(c.generator));
    check(problems)?;
    let out = c.out.as_ref().expect("checked");

    let patches = match &c.weights {
        Some(path) => {
            let spec = build_generator(c.generator)?;
            let store = load_weights(path, &spec).with_context(|| format!("loading generator weights {}", path.display()))?;
            generate_patches(&Network::from_weights(spec, &store)?, c.n, cfg.seed)?
        }
        None => {
            eprintln!("no generator weights given; writing procedural placeholder patches");
            PatchSet::procedural(c.n, cfg.seed)?
        }
    };
    write_snapshot(&cfg, out)?;
    for (i, p) in patches.patches().iter().enumerate() {
        save_image(p, &out.join(format!("snow_{i:04}.png")), FileFormat::Png)?;
    }
    println!("wrote {} patches to {}", patches.len(), out.display());
    Ok(())
}

// build-dataset

#[derive(Args)]
pub struct BuildDatasetArgs {
    /// Directory of clean source images
    #[arg(long)]
    src: Option<PathBuf>,
    /// Directory of snow patches; procedural blobs when omitted
    #[arg(long)]
    patches: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Side of the square views [default: 384]
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct BuildDataset {
    src: Option<PathBuf>,
    patches: Option<PathBuf>,
    /// Placeholder patch count when no directory is given.
    procedural_patches: usize,
    out: Option<PathBuf>,
    dataset: DatasetParams,
}

impl Default for BuildDataset {
    fn default() -> Self {
        Self { src: None, patches: None, procedural_patches: 64, out: None, dataset: DatasetParams::default() }
    }
}

impl Mirrored for BuildDataset {}

pub fn build_dataset(layers: Layers, args: BuildDatasetArgs) -> anyhow::Result<()> {
    let flags = Flags::default()
        .put("src", &args.src)
        .put("patches", &args.patches)
        .put("out", &args.out)
        .put("dataset.target", &args.target);
    let cfg = settle(BuildDataset::default(), layers, flags)?;
    let c = &cfg.command;
    let mut problems = Vec::new();
    existing_dir(&c.src, "src", &mut problems);
    required(&c.out, "out", &mut problems);
    if c.patches.is_some() {
        existing_dir(&c.patches, "patches", &mut problems);
    } else if c.procedural_patches == 0 {
        problems.push("`procedural_patches` must be at least 1".into());
    }
    note_problem(&mut problems, c.dataset.validate());
    check(problems)?;
    let (src, out) = (c.src.as_ref().expect("checked"), c.out.as_ref().expect("checked"));

    let patches = patch_set(&c.patches, c.procedural_patches, cfg.seed)?;
    write_snapshot(&cfg, out)?;
    let manifest = dataset::build_dataset(src, &patches, &c.dataset, out, cfg.seed)?;
    let n = manifest.header.counts;
    println!(
        "{} pairs from {} sources (train {}, val {}, test {}); manifest {}",
        n.total(),
        manifest.header.sources,
        n.train,
        n.val,
        n.test,
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

// train-gan

#[derive(Args)]
pub struct TrainGanArgs {
    /// Directory of real snow patches; procedural blobs when omitted
    #[arg(long)]
    patches: Option<PathBuf>,
    /// Run directory for checkpoints and history
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Generator updates per epoch [default: one pass over the patches]
    #[arg(long)]
    steps_per_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainGan {
    patches: Option<PathBuf>,
    procedural_patches: usize,
    out: Option<PathBuf>,
    generator: GeneratorConfig,
    critic: CriticConfig,
    train: TrainConfig,
}

impl Default for TrainGan {
    fn default() -> Self {
        Self {
            patches: None,
            procedural_patches: 64,
            out: None,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            train: TrainConfig::wgan(),
        }
    }
}

const TRAIN_MIRRORS: &[(&str, &str)] = &[("train.seed", "seed"), ("train.deterministic", "deterministic")];

impl Mirrored for TrainGan {
    const MIRRORED: &'static [(&'static str, &'static str)] = TRAIN_MIRRORS;
}

fn train_flags(epochs: &Option<usize>, batch: &Option<usize>, steps: &Option<usize>) -> Flags {
    Flags::default()
        .put("train.epochs", epochs)
        .put("train.batch_size", batch)
        .put("train.steps_per_epoch", steps)
}

pub fn train_gan(layers: Layers, args: TrainGanArgs) -> anyhow::Result<()> {
    let flags = train_flags(&args.epochs, &args.batch_size, &args.steps_per_epoch)
        .put("patches", &args.patches)
        .put("out", &args.out);
    let cfg = settle(TrainGan::default(), layers, flags)?;
    let c = &cfg.command;
    let mut problems = Vec::new();
    required(&c.out, "out", &mut problems);
    if c.patches.is_some() {
        existing_dir(&c.patches, "patches", &mut problems);
    } else if c.procedural_patches == 0 {
        problems.push("`procedural_patches` must be at least 1".into());
    }
    note_problem(&mut problems, c.train.validate());
    note_problem(&mut problems, build_generator(c.generator));
    note_problem(&mut problems, build_critic(c.critic));
    check(problems)?;
    let out = c.out.as_ref().expect("checked");

    let patches = patch_set(&c.patches, c.procedural_patches, cfg.seed)?;
    write_snapshot(&cfg, out)?;
    let outcome = train::train_wgan(&patches, c.generator, c.critic, &c.train, Some(out), &mut |s| {
        if s.step == 1 || s.step % 10 == 0 {
            eprintln!(
                "epoch {} step {}: critic {:.5} generator {:.5}",
                s.epoch, s.step, s.critic_loss, s.generator_loss
            );
        }
    })?;
    let last = outcome.history.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs (critic {:.5}, generator {:.5}); generator weights {}",
        last.epoch,
        last.train_loss,
        last.val_loss,
        out.join("best.msnw").display()
    );
    Ok(())
}

// train-unet

#[derive(Args)]
pub struct TrainUnetArgs {
    /// Dataset directory holding manifest.jsonl
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for checkpoints and history
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature-extractor weights for the perceptual loss; random when omitted
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer steps per epoch [default: one pass over the training split]
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Weight of the perceptual term
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct TrainUnet {
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    features: Option<PathBuf>,
    unet: UnetConfig,
    train: TrainConfig,
}

impl Mirrored for TrainUnet {
    const MIRRORED: &'static [(&'static str, &'static str)] = TRAIN_MIRRORS;
}

pub fn train_unet(layers: Layers, args: TrainUnetArgs) -> anyhow::Result<()> {
    let flags = train_flags(&args.epochs, &args.batch_size, &args.steps_per_epoch)
        .put("train.gamma", &args.gamma)
        .put("dataset", &args.dataset)
        .put("out", &args.out)
        .put("features", &args.features);
    let cfg = settle(TrainUnet::default(), layers, flags)?;
    let c = &cfg.command;
    let mut problems = Vec::new();
    if let Some(d) = required(&c.dataset, "dataset", &mut problems) {
        if !d.join(MANIFEST_FILE).is_file() {
            problems.push(format!("`dataset`: no {MANIFEST_FILE} in {}", d.display()));
        }
    }
    required(&c.out, "out", &mut problems);
    note_problem(&mut problems, c.train.validate());
    note_problem(&mut problems, build_unet(c.unet));
    check(problems)?;
    let (root, out) = (c.dataset.as_ref().expect("checked"), c.out.as_ref().expect("checked"));

    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    let phi = match &c.features {
        Some(path) => FeatureNet::load(c.unet.channels, path)
            .with_context(|| format!("loading feature weights {}", path.display()))?,
        None => {
            eprintln!("no feature weights given; the perceptual loss uses a random frozen extractor");
            FeatureNet::random(c.unet.channels, derive_seed(cfg.seed, 5))?
        }
    };
    write_snapshot(&cfg, out)?;
    let outcome = train::train_unet(&manifest, root, c.unet, &phi, &c.train, Some(out), &mut |s| {
        if s.step == 1 || s.step % 10 == 0 {
            eprintln!("epoch {} step {}: loss {:.6} (mse {:.6})", s.epoch, s.step, s.loss, s.mse);
        }
    })?;
    let best = &outcome.history.records[outcome.best_epoch - 1];
    println!(
        "best epoch {} with validation loss {:.6} (initial {:.6}); weights {}",
        outcome.best_epoch,
        best.val_loss,
        outcome.initial_val_loss,
        out.join("best.msnw").display()
    );
    Ok(())
}

// denoise and baseline

#[derive(Args)]
pub struct DenoiseArgs {
    /// median3, median5, adaptive, adaptive3, adaptive5 or unet
    #[arg(long)]
    method: Option<String>,
    /// Input image or directory of images
    #[arg(long, alias = "in")]
    input: Option<PathBuf>,
    /// Output directory
    #[arg(long, alias = "out")]
    output: Option<PathBuf>,
    /// U-Net weights; the architecture is read from a config.json next to them when present
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct Denoise {
    method: Option<String>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    weights: Option<PathBuf>,
    unet: UnetConfig,
}

impl Mirrored for Denoise {}

/// U-Net settings stored by `train-unet` beside its checkpoints.
fn run_dir_unet(weights: &Path) -> Option<UnetConfig> {
    let text = std::fs::read_to_string(weights.parent()?.join("config.json")).ok()?;
    let value: Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(value.get("unet")?.clone()).ok()
}

fn input_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        if !is_image_file(input) {
            return Err(Usage(format!("{} is not a PNG or PNM image", input.display())).into());
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Usage(format!("no images in {}", input.display())).into());
    }
    Ok(files)
}

fn run_denoiser(d: &dyn Denoiser, files: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for f in files {
        let name = f.file_name().expect("listed files have names");
        let restored = d.denoise(&load_image(f)?)?;
        let target = out.join(name);
        save_image(&restored, &target, FileFormat::from_path(&target).unwrap_or(FileFormat::Png))?;
        eprintln!("{}: {}", d.name(), target.display());
    }
    println!("{}: {} images -> {}", d.name(), files.len(), out.display());
    Ok(())
}

pub fn denoise(layers: Layers, args: DenoiseArgs, baseline: bool) -> anyhow::Result<()> {
    let flags = Flags::default()
        .put("method", &args.method)
        .put("input", &args.input)
        .put("output", &args.output)
        .put("weights", &args.weights);
    let mut cfg = settle(Denoise::default(), layers.clone(), Flags(flags.0.clone()))?;
    if let Some(stored) = cfg.command.weights.as_deref().and_then(run_dir_unet) {
        // explicit unet.* settings still win over the stored architecture
        cfg = settle(Denoise { unet: stored, ..Denoise::default() }, layers, flags)?;
    }
    let c = &cfg.command;
    let mut problems = Vec::new();
    if let Some(p) = required(&c.input, "input", &mut problems) {
        if !p.exists() {
            problems.push(format!("`input`: {} does not exist", p.display()));
        }
    }
    required(&c.output, "output", &mut problems);
    let methods: Vec<String> = match (&c.method, baseline) {
        (Some(m), _) => vec![m.clone()],
        (None, true) => BASELINE_METHODS.iter().map(|m| m.to_string()).collect(),
        (None, false) => {
            problems.push("`method` is required (flag --method)".into());
            Vec::new()
        }
    };
    for m in &methods {
        let classical = CLASSICAL_METHODS.contains(&m.as_str());
        if baseline && !classical {
            problems.push(format!("baseline runs classical filters only ({}), got `{m}`", CLASSICAL_METHODS.join(", ")));
        } else if !classical && m != "unet" {
            problems.push(format!("unknown method `{m}` (expected unet or one of {})", CLASSICAL_METHODS.join(", ")));
        } else if m == "unet" && c.weights.is_none() {
            problems.push("method unet needs `weights` (flag --weights)".into());
        }
    }
    check(problems)?;
    let (input, out) = (c.input.as_ref().expect("checked"), c.output.as_ref().expect("checked"));

    let files = input_files(input)?;
    write_snapshot(&cfg, out)?;
    let mut registry = DenoiserRegistry::classical();
    if methods.iter().any(|m| m == "unet") {
        let path = c.weights.as_ref().expect("checked");
        let spec = build_unet(c.unet)?;
        let store = load_weights(path, &spec).with_context(|| format!("loading U-Net weights {}", path.display()))?;
        registry.register(Box::new(UnetDenoiser::new(Network::from_weights(spec, &store)?)))?;
    }
    let per_method_dirs = methods.len() > 1;
    for m in &methods {
        let d = registry.get(m).expect("validated method");
        let dir = if per_method_dirs { out.join(m) } else { out.clone() };
        run_denoiser(d, &files, &dir)?;
    }
    Ok(())
}

// evaluate

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of reference (clean) images
    #[arg(long = "ref", alias = "reference")]
    reference: Option<PathBuf>,
    /// Directory of candidate images with the same file names
    #[arg(long = "cand", alias = "candidate")]
    candidate: Option<PathBuf>,
    /// Label stored in the report [default: candidate]
    #[arg(long)]
    label: Option<String>,
    /// Output CSV; a JSON copy is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct Evaluate {
    reference: Option<PathBuf>,
    candidate: Option<PathBuf>,
    label: String,
    out: Option<PathBuf>,
}

impl Default for Evaluate {
    fn default() -> Self {
        Self { reference: None, candidate: None, label: "candidate".into(), out: None }
    }
}

impl Mirrored for Evaluate {}

fn names(dir: &Path) -> anyhow::Result<BTreeSet<String>> {
    Ok(list_images(dir)?
        .iter()
        .map(|p| p.file_name().expect("listed files have names").to_string_lossy().into_owned())
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

pub fn evaluate(layers: Layers, args: EvaluateArgs) -> anyhow::Result<()> {
    let flags = Flags::default()
        .put("reference", &args.reference)
        .put("candidate", &args.candidate)
        .put("label", &args.label)
        .put("out", &args.out);
    let cfg = settle(Evaluate::default(), layers, flags)?;
    let c = &cfg.command;
    let mut problems = Vec::new();
    existing_dir(&c.reference, "reference", &mut problems);
    existing_dir(&c.candidate, "candidate", &mut problems);
    required(&c.out, "out", &mut problems);
    check(problems)?;
    let (rdir, cdir) = (c.reference.as_ref().expect("checked"), c.candidate.as_ref().expect("checked"));
    let out = c.out.as_ref().expect("checked");

    let (rn, cn) = (names(rdir)?, names(cdir)?);
    if rn != cn {
        let list = |s: Vec<&String>| s.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(", ");
        let mut msg = String::from("reference and candidate file names differ");
        let only_ref: Vec<_> = rn.difference(&cn).collect();
        let only_cand: Vec<_> = cn.difference(&rn).collect();
        if !only_ref.is_empty() {
            msg += &format!("\n  only in reference: {}", list(only_ref));
        }
        if !only_cand.is_empty() {
            msg += &format!("\n  only in candidate: {}", list(only_cand));
        }
        return Err(Usage(msg).into());
    }
    if rn.is_empty() {
        return Err(Usage(format!("no images in {}", rdir.display())).into());
    }
    let pairs = rn
        .iter()
        .map(|n| -> anyhow::Result<(String, Image, Image)> {
            Ok((n.clone(), load_image(&rdir.join(n))?, load_image(&cdir.join(n))?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report: MetricsReport = evaluate_pairs(&pairs, &c.label)?;
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    write_snapshot(&cfg, &dir)?;
    report.write(out)?;
    let m = &report.mean;
    println!(
        "{} mean over {} images: mse {:.6} psnr {:.3} dB ssim {:.4} uiqm {} uciqe {}",
        report.label,
        report.rows.len(),
        m.mse,
        m.psnr_db,
        m.ssim,
        fmt_opt(m.uiqm),
        fmt_opt(m.uciqe)
    );
    if !report.infinite_psnr.is_empty() {
        println!("{} identical images have infinite psnr and are left out of its mean", report.infinite_psnr.len());
    }
    Ok(())
}
