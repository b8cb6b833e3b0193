use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bevdg::domains::{
    apply_domain, build_domain_suite, generate_dataset, load_scenes, save_scenes, DatasetSpec,
    DomainTag,
};
use bevdg::harness::{
    ablate, align_scene, evaluate, run_experiment, ExperimentConfig, ResultsRecord, Toggles,
};
use bevdg::image::{load_ppm, save_ppm};
use bevdg::model::ModelParams;
use bevdg::spectral::{ampaug_with_amplitude, AmplitudeBank, DEFAULT_MASK_RATIO};
use bevdg::Image;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain generalization for collaborative BEV segmentation on synthetic scenes.
#[derive(Parser)]
#[command(name = "bevdg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene directory, optionally corrupted into one domain.
    Gen(GenArgs),
    /// Restyle every PPM in a directory with amplitudes from a bank.
    Ampaug(AmpaugArgs),
    /// Align every non-ego CAV of each scene to the ego's LAB statistics.
    Align(AlignArgs),
    /// Run one experiment from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on shifted domains.
    Eval(EvalArgs),
    /// Run the toggle ablation.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    min_cavs: usize,
    #[arg(long, default_value_t = 4)]
    max_cavs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// clean, sunny, fog, rain or night.
    #[arg(long, default_value = "clean")]
    domain: DomainTag,
}

#[derive(Args)]
struct AmpaugArgs {
    /// Directory of source PPM images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// A saved amplitude bank file, or a directory of style PPMs.
    #[arg(long)]
    bank: PathBuf,
    /// Low-frequency half-extent as a fraction of each side.
    #[arg(long, default_value_t = DEFAULT_MASK_RATIO)]
    ratio: f64,
    /// Seed for picking one bank entry per image.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    ego_index: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Config supplying the architecture, test set and corruptions.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate a saved scene directory instead of the config's test set.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Comma-separated domains.
    #[arg(long, value_delimiter = ',', default_value = "sunny,fog,rain,night")]
    domains: Vec<DomainTag>,
    /// Align CAVs to CAV 0 before the forward pass.
    #[arg(long)]
    align: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// All 2^3 toggle combinations instead of only full vs vanilla.
    #[arg(long)]
    grid: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Ampaug(a) => ampaug(a),
        Command::Align(a) => align(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = ExperimentConfig::default();
    let spec = DatasetSpec {
        count: a.count,
        height: a.height,
        width: a.width,
        n_cavs: (a.min_cavs, a.max_cavs),
        seed: a.seed,
    };
    let scenes = generate_dataset(&spec, &cfg.corruption.jitter)?
        .iter()
        .map(|s| apply_domain(s, a.domain, &cfg.corruption))
        .collect::<bevdg::Result<Vec<_>>>()?;
    save_scenes(&a.out, &scenes)?;
    log::info!("wrote {} {} scenes to {}", scenes.len(), a.domain, a.out.display());
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    files.sort();
    Ok(files)
}

fn load_bank(path: &Path) -> Result<AmplitudeBank> {
    if path.is_dir() {
        let images = ppm_files(path)?
            .iter()
            .map(load_ppm)
            .collect::<bevdg::Result<Vec<Image>>>()?;
        Ok(AmplitudeBank::build(&images)?)
    } else {
        Ok(AmplitudeBank::load(path)?)
    }
}

fn ampaug(a: AmpaugArgs) -> Result<()> {
    let bank = load_bank(&a.bank)?;
    if bank.is_empty() {
        bail!("bank {} is empty", a.bank.display());
    }
    fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let files = ppm_files(&a.input)?;
    for file in &files {
        let img = load_ppm(file)?;
        let k = rng.gen_range(0..bank.len());
        let out = ampaug_with_amplitude(&img, &bank.entries()[k], a.ratio)
            .with_context(|| format!("augmenting {}", file.display()))?;
        save_ppm(&out, a.out.join(file.file_name().expect("listed files have names")))?;
    }
    log::info!("augmented {} images", files.len());
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?
        .iter()
        .map(|s| align_scene(s, a.ego_index))
        .collect::<bevdg::Result<Vec<_>>>()?;
    save_scenes(&a.out, &scenes)?;
    log::info!("aligned {} scenes", scenes.len());
    Ok(())
}

fn print_records(records: &[ResultsRecord]) -> Result<()> {
    for r in records {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    let out = run_experiment(&cfg)?;
    print_records(&out.records)
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let params = ModelParams::load(&a.ckpt, cfg.arch)?;
    let base = match &a.scenes {
        Some(dir) => load_scenes(dir)?,
        None => generate_dataset(&cfg.test, &cfg.corruption.jitter)?,
    };
    let suite = build_domain_suite(&base, &cfg.corruption)?;
    for tag in &a.domains {
        let scenes = match suite.get(tag) {
            Some(s) => s,
            None => &base,
        };
        let report = evaluate(&params, scenes, a.align)?;
        let line = serde_json::json!({
            "domain_tag": tag,
            "align": a.align,
            "iou": report.aggregate,
        });
        println!("{line}");
    }
    Ok(())
}

fn run_ablation(a: AblateArgs) -> Result<()> {
    let base = load_config(a.config.as_deref())?;
    let runs = if a.grid {
        ablate(&base, &a.out)?
    } else {
        [Toggles::all(false), Toggles::all(true)]
            .into_iter()
            .map(|toggles| {
                let cfg = ExperimentConfig {
                    name: format!("{}-{}", base.name, toggles.label()),
                    toggles,
                    output_dir: Some(a.out.join(toggles.label())),
                    ..base.clone()
                };
                Ok((toggles, run_experiment(&cfg)?.records))
            })
            .collect::<Result<Vec<_>>>()?
    };
    for (toggles, records) in &runs {
        let cells: Vec<String> = records
            .iter()
            .map(|r| format!("{}={:.4}", r.domain_tag, r.iou.average))
            .collect();
        println!("{} {}", toggles.label(), cells.join(" "));
    }
    Ok(())
}
