use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diff_retinex::data::{generate_synthetic, read_png, write_paired_dir, write_png, SynthConfig};
use diff_retinex::diffusion::posterior_mean_rules;
use diff_retinex::harness::{
    evaluate_paths, plot_trace, train_diffusion, train_tdn, DataSource, DiffusionCheckpoint, LossTrace, Stage,
    TdnCheckpoint, TrainConfig,
};
use diff_retinex::pipeline::{dump_intermediates, enhance_with, Models};
use diff_retinex::tdn::decompose;
use diff_retinex::{Error, Result};
use log::info;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "diffretinex", version, about = "Retinex decomposition and diffusion adjustment for low-light images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// RNG seed; falls back to the config, then DIFFRETINEX_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Train on `<DIR>/low` and `<DIR>/high` instead of the configured source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the resolved configuration here before training.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as `<out>/train` and `<out>/test`.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train the decomposition network.
    TrainTdn {
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train one diffusion adjustment path on a trained decomposition network.
    TrainDiff {
        #[arg(long, value_parser = ["rda", "ida"])]
        stage: String,
        #[arg(long)]
        tdn_checkpoint: Option<PathBuf>,
        #[arg(long)]
        gamma_ct: Option<f64>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Split images into reflectance and illumination maps.
    Decompose {
        #[arg(long)]
        tdn: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Enhance low-light images.
    Enhance {
        #[arg(long)]
        tdn: PathBuf,
        #[arg(long)]
        rda: PathBuf,
        #[arg(long)]
        ida: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the decomposition and adjusted maps of every image.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score candidate images against references.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Unenhanced inputs for the lightness-order error.
        #[arg(long)]
        original: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim,loe")]
        metrics: Vec<String>,
    },
    /// Plot a loss trace CSV as SVG.
    PlotTrace {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "loss trace")]
        title: String,
    },
}

fn load_config(common: &Common, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::profile(&common.profile, stage)?,
    };
    cfg.stage = stage;
    Ok(cfg)
}

fn apply(cfg: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = f.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = &f.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &f.data {
        cfg.data = DataSource::PairedDir { root: v.clone() };
    }
    if let Some(p) = &f.dump_config {
        std::fs::write(p, cfg.to_json()?).map_err(|e| Error::File { path: p.clone(), message: e.to_string() })?;
    }
    Ok(())
}

/// `(id, path)` of one PNG or of every PNG in a directory, sorted.
fn inputs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    if !path.is_dir() {
        return Ok(vec![(stem(path), path.to_path_buf())]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(path).map_err(|e| Error::File { path: path.into(), message: e.to_string() })?;
    for e in entries {
        let p = e.map_err(|e| Error::File { path: path.into(), message: e.to_string() })?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push((stem(&p), p));
        }
    }
    out.sort();
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::SynthData { out, train, test } => {
            let cfg = load_config(common, Stage::Tdn)?;
            let (mut synth, mut n_train, mut n_test) = match cfg.data.clone() {
                DataSource::Synthetic { synth, train, test } => (synth, train, test),
                DataSource::PairedDir { .. } => (SynthConfig::default(), 500, 50),
            };
            synth.seed = cfg.explicit_seed(common.seed)?.unwrap_or(synth.seed);
            n_train = train.unwrap_or(n_train);
            n_test = test.unwrap_or(n_test);
            let mut all = generate_synthetic(&synth, n_train + n_test)?;
            let held_out = all.split_off(n_train);
            write_paired_dir(&out.join("train"), &all)?;
            if !held_out.is_empty() {
                write_paired_dir(&out.join("test"), &held_out)?;
            }
            println!("wrote {} training and {} test pairs to {}", all.len(), held_out.len(), out.display());
        }
        Command::TrainTdn { flags } => {
            let mut cfg = load_config(common, Stage::Tdn)?;
            apply(&mut cfg, &flags)?;
            let seed = cfg.resolve_seed(common.seed)?;
            let out = train_tdn(&cfg, seed)?;
            println!("checkpoint {}\ntrace {}", out.checkpoint.display(), out.trace_path.display());
        }
        Command::TrainDiff { stage, tdn_checkpoint, gamma_ct, flags } => {
            let stage: Stage = stage.parse()?;
            let mut cfg = load_config(common, stage)?;
            apply(&mut cfg, &flags)?;
            if let Some(p) = tdn_checkpoint {
                cfg.tdn_checkpoint = Some(p);
            }
            if let Some(g) = gamma_ct {
                cfg.gamma_ct = g;
            }
            let seed = cfg.resolve_seed(common.seed)?;
            let out = train_diffusion(&cfg, seed)?;
            println!("checkpoint {}\ntrace {}", out.checkpoint.display(), out.trace_path.display());
        }
        Command::Decompose { tdn, input, output } => {
            let tdn = TdnCheckpoint::load(&tdn)?;
            for (id, path) in inputs(&input)? {
                let d = decompose(&read_png(&path, 3)?, &tdn.params)?;
                write_png(&output.join(format!("{id}_r.png")), &d.reflectance)?;
                write_png(&output.join(format!("{id}_l.png")), &d.illumination)?;
                info!("decomposed {id}");
            }
        }
        Command::Enhance { tdn, rda, ida, input, output, dump_intermediates: dump } => {
            let cfg = match &common.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::profile(&common.profile, Stage::Tdn)?,
            };
            let seed = cfg.resolve_seed(common.seed)?;
            let tdn = TdnCheckpoint::load(&tdn)?;
            let rda = DiffusionCheckpoint::load(&rda)?;
            let ida = DiffusionCheckpoint::load(&ida)?;
            if rda.stage != "rda" || ida.stage != "ida" {
                return Err(Error::Input(format!(
                    "expected rda and ida checkpoints, got {} and {}",
                    rda.stage, ida.stage
                )));
            }
            let rule = posterior_mean_rules().get(&rda.posterior_mean)?;
            let models = Models {
                tdn: &tdn.params,
                rda: &rda.denoiser,
                ida: &ida.denoiser,
                schedule_r: &rda.schedule,
                schedule_i: &ida.schedule,
                rule: rule.as_ref(),
            };
            for (id, path) in inputs(&input)? {
                let result = enhance_with(&read_png(&path, 3)?, &models, seed)?;
                write_png(&output.join(format!("{id}.png")), &result.enhanced)?;
                if dump {
                    dump_intermediates(&result, &output.join("intermediates"), &id)?;
                }
                info!("enhanced {id}");
            }
        }
        Command::Eval { reference, candidate, original, csv, metrics } => {
            let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
            let report = evaluate_paths(&reference, &candidate, original.as_deref(), &names)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                report.write_csv(&p)?;
            }
        }
        Command::PlotTrace { trace, output, title } => {
            plot_trace(&LossTrace::load(&trace)?, &output, &title)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
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
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
