//! Command-line interface: dataset generation, training, evaluation tables,
//! routed inference, benchmarking and gradient-check suites.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/data error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rare_unet::data::{self, PhantomSpec, Sample};
use rare_unet::error::{Error, Result};
use rare_unet::eval::{bench, bench_csv, evaluate, EvalProtocol};
use rare_unet::losses::LossWeights;
use rare_unet::model::{Model, ModelConfig, NormKind};
use rare_unet::optim::AdamWConfig;
use rare_unet::routing::{self, PrepareMode};
use rare_unet::suites;
use rare_unet::trainer::{self, TrainHyper, TrainMode};

#[derive(Parser)]
#[command(name = "rare-unet", about = "Resolution-adaptive 3D segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with an 80/20 train/test manifest.
    MakeData {
        /// Phantom preset: hippocampus | tumor
        #[arg(long, default_value = "hippocampus")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; all settings come from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the test split at the given scales.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (manifest.txt + .vvol files)
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated downsampling factors
        #[arg(long, default_value = "1,2,4,8")]
        scales: String,
        /// Input handling for plain-UNet checkpoints: pad | up
        #[arg(long, default_value = "pad")]
        handling: String,
        /// Report CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run routed inference on one volume.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output label volume (.vvol)
        #[arg(long)]
        out: PathBuf,
    },
    /// Steady-state forward timing and analytic MAC counts per scale.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "1,2,4,8")]
        scales: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional CSV output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks. Scope: all | <op name>.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad scale '{t}' (expect integers like 1,2,4,8)")))
        })
        .collect()
}

fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let manifest = data::read_manifest(&dir.join("manifest.txt"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (name, is_train) in manifest {
        let s = data::load_volume(&dir.join(&name))?;
        if is_train {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

fn cmd_make_data(preset: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = match preset {
        "hippocampus" => PhantomSpec::hippocampus_like(),
        "tumor" => PhantomSpec::tumor_like(),
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    if count < 2 {
        return Err(Error::Config("count must be at least 2 for an 80/20 split".into()));
    }
    std::fs::create_dir_all(out)?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
    let (train, _test) = data::split_dataset(&seeds, 0.8, seed)?;
    let mut entries = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        let sample = data::generate_phantom(s, &spec)?;
        let name = format!("sample_{i:04}.vvol");
        data::save_volume(&out.join(&name), &sample)?;
        entries.push((name, train.contains(&s)));
    }
    entries.sort();
    data::write_manifest(&out.join("manifest.txt"), &entries)?;
    let n_train = entries.iter().filter(|(_, t)| *t).count();
    println!("wrote {count} volumes to {} ({n_train} train / {} test)", out.display(), count - n_train);
    Ok(())
}

fn read_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn get_parsed<T: std::str::FromStr>(kv: &HashMap<String, String>, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'"))),
    }
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let kv = read_config(config_path)?;
    let data_dir = kv
        .get("data_dir")
        .ok_or_else(|| Error::Config("config needs data_dir".into()))?;
    let out_dir = kv
        .get("out_dir")
        .ok_or_else(|| Error::Config("config needs out_dir".into()))?;
    let mode = TrainMode::parse(kv.get("mode").map(String::as_str).unwrap_or("rare"))?;

    let (train_split, _) = load_dataset(Path::new(data_dir))?;
    if train_split.is_empty() {
        return Err(Error::Data("dataset has no train volumes".into()));
    }
    let probe = &train_split[0];

    let norm = match kv.get("norm").map(String::as_str).unwrap_or("instance") {
        "instance" => NormKind::Instance,
        "batch" => NormKind::Batch,
        other => return Err(Error::Config(format!("unknown norm '{other}'"))),
    };
    let model_config = ModelConfig {
        depth: get_parsed(&kv, "depth", 4)?,
        base_channels: get_parsed(&kv, "base_channels", 8)?,
        num_classes: probe.num_classes,
        in_channels: probe.channels,
        full_shape: probe.shape,
        norm,
        msb_enabled: mode == TrainMode::Rare,
    };
    let hyper = TrainHyper {
        optimizer: AdamWConfig {
            lr: get_parsed(&kv, "lr", 1e-3)?,
            weight_decay: get_parsed(&kv, "weight_decay", 1e-2)?,
            beta1: get_parsed(&kv, "beta1", 0.9)?,
            beta2: get_parsed(&kv, "beta2", 0.999)?,
            epsilon: get_parsed(&kv, "adam_epsilon", 1e-8)?,
        },
        epochs: get_parsed(&kv, "epochs", 20)?,
        batch_size: get_parsed(&kv, "batch_size", 2)?,
        loss: LossWeights {
            alpha: get_parsed(&kv, "alpha", 0.5)?,
            lambda_con: get_parsed(&kv, "lambda_con", 1.0)?,
            dice_epsilon: get_parsed(&kv, "dice_epsilon", 1e-5)?,
        },
        mode,
        aug_handling: PrepareMode::parse(
            kv.get("aug_handling").map(String::as_str).unwrap_or("pad"),
        )?,
        seed: get_parsed(&kv, "seed", 0)?,
    };

    let model = Model::build(&model_config, get_parsed(&kv, "init_seed", 0)?)?;
    let report = trainer::train(&model, &hyper, &train_split, Path::new(out_dir))?;
    println!(
        "trained {} epochs ({} steps), best validation DSC {:.4}; artifacts in {out_dir}",
        report.epochs_run, report.steps, report.best_val_dsc
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dir: &Path, scales: &str, handling: &str, out: &Path) -> Result<()> {
    let scales = parse_scales(scales)?;
    let ckpt = trainer::load_checkpoint(checkpoint, None)?;
    let (_, test) = load_dataset(dir)?;
    if test.is_empty() {
        return Err(Error::Data("dataset has no test volumes".into()));
    }
    let (protocol, variant) = if ckpt.model.config.msb_enabled {
        (EvalProtocol::Routed, "rare".to_string())
    } else {
        let m = PrepareMode::parse(handling)?;
        (EvalProtocol::Restored(m), format!("unet-{handling}"))
    };
    let report = evaluate(&ckpt.model, &test, &scales, protocol, &variant)?;
    std::fs::write(out, report.to_csv())?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ckpt = trainer::load_checkpoint(checkpoint, None)?;
    let sample = data::load_volume(input)?;
    let (labels, decision) = routing::infer(&ckpt.model, &sample)?;
    let shape = [labels.shape[0], labels.shape[1], labels.shape[2]];
    let out_sample = Sample {
        image: labels.data.iter().map(|&v| v as f32).collect(),
        channels: 1,
        shape,
        labels,
        num_classes: sample.num_classes,
        seed: sample.seed,
        native_shape: sample.native_shape,
    };
    data::save_volume(out, &out_sample)?;
    println!(
        "entry_depth={} expected_shape={},{},{} deltas={},{},{}",
        decision.entry_depth,
        decision.expected_shape[0],
        decision.expected_shape[1],
        decision.expected_shape[2],
        decision.deltas[0],
        decision.deltas[1],
        decision.deltas[2],
    );
    Ok(())
}

fn cmd_bench(checkpoint: &Path, scales: &str, repeats: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let scales = parse_scales(scales)?;
    let ckpt = trainer::load_checkpoint(checkpoint, None)?;
    let rows = bench(&ckpt.model, &scales, repeats, seed)?;
    let csv = bench_csv(&rows);
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(scope: &str) -> Result<bool> {
    let rows = suites::run_scope(scope)?;
    let mut all_pass = true;
    for (name, pass, worst) in rows {
        println!("{name}: {} (worst rel err {worst:.2e})", if pass { "pass" } else { "FAIL" });
        all_pass &= pass;
    }
    Ok(all_pass)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeData { preset, count, seed, out } => {
            cmd_make_data(&preset, count, seed, &out)?;
            Ok(true)
        }
        Command::Train { config } => {
            cmd_train(&config)?;
            Ok(true)
        }
        Command::Eval { checkpoint, data, scales, handling, out } => {
            cmd_eval(&checkpoint, &data, &scales, &handling, &out)?;
            Ok(true)
        }
        Command::Infer { checkpoint, input, out } => {
            cmd_infer(&checkpoint, &input, &out)?;
            Ok(true)
        }
        Command::Bench { checkpoint, scales, repeats, seed, out } => {
            cmd_bench(&checkpoint, &scales, repeats, seed, out.as_deref())?;
            Ok(true)
        }
        Command::Gradcheck { scope } => cmd_gradcheck(&scope),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
