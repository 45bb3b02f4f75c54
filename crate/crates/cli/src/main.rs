//! Single-binary command-line surface: pretrain, probe, ablate, and a
//! serialization inspector. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pointseq_core::backbone::AttentionMode;
use pointseq_core::config::Config;
use pointseq_core::data::{load_xyz, make_synthetic_dataset, Dataset};
use pointseq_core::geometry::make_patches;
use pointseq_core::rng::derive_seed;
use pointseq_core::serial::{serialize, OrderKind};
use pointseq_core::train::{
    format_ablation_table, linear_probe, run_ablation_suite, standard_variants, Trainer,
};
use pointseq_core::CoreError;

#[derive(Parser)]
#[command(name = "pointseq", version, about = "Causal latent next-token pretraining over serialized point-cloud patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a model and write a checkpoint plus a JSONL run log
    Pretrain {
        /// key = value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// output directory for checkpoint.bin and run.jsonl
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// override train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// override train.steps
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Linear-probe a frozen encoder on the synthetic 4-class task
    Probe {
        /// checkpoint to evaluate; omit with --random-init
        #[arg(long, conflicts_with = "random_init")]
        checkpoint: Option<PathBuf>,
        /// probe a freshly initialized encoder instead of a checkpoint
        #[arg(long)]
        random_init: bool,
        /// config file, used with --random-init or to override data keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// attention mode during probing
        #[arg(long, default_value = "causal")]
        attn: String,
        /// override train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// optional path for the probe record (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write the comparison table
    Ablate {
        /// grid file: one `name: key=value, key=value` line per variant;
        /// omit to run the standard grid
        #[arg(long)]
        grid: Option<PathBuf>,
        /// base config file shared by all variants
        #[arg(long)]
        config: Option<PathBuf>,
        /// output directory for table.tsv and outcomes.jsonl
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// override train.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Patchify an XYZ file and print (rank, index, center, code) rows
    SerializeDump {
        /// ASCII XYZ input file
        #[arg(long)]
        input: PathBuf,
        /// serialization order
        #[arg(long, default_value = "hilbert")]
        order: String,
        /// quantization bits per axis
        #[arg(long, default_value_t = pointseq_core::serial::DEFAULT_BITS)]
        bits: u32,
        /// number of patch centers (clamped to the cloud size)
        #[arg(long, default_value_t = 32)]
        patches: usize,
        /// root seed for sampling and the random order
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CoreError> {
    match path {
        Some(p) => Config::from_file(p),
        None => Ok(Config::default()),
    }
}

fn dataset_for(cfg: &Config) -> Result<Dataset, CoreError> {
    make_synthetic_dataset(&cfg.synthetic(), derive_seed(cfg.train_seed, "dataset"))
}

fn echo_config(cfg: &Config) {
    print!("{}", cfg.to_text());
    println!("---");
}

fn cmd_pretrain(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    if let Some(s) = steps {
        cfg.train_steps = s;
    }
    echo_config(&cfg);
    let data = dataset_for(&cfg)?;
    fs::create_dir_all(&out)?;
    let mut log = fs::File::create(out.join("run.jsonl"))?;
    let mut trainer = Trainer::new(cfg)?;
    let records = trainer.run(&data, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    trainer.save(&out.join("checkpoint.bin"))?;
    match records.last() {
        Some(last) => println!("final loss {:.6} at step {}", last.loss, last.step),
        None => println!("no training steps; wrote the initialization"),
    }
    println!("checkpoint written to {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_probe(
    checkpoint: Option<PathBuf>,
    random_init: bool,
    config: Option<PathBuf>,
    attn: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CoreError> {
    let mode = AttentionMode::parse(attn)?;
    let (mut cfg, state) = if random_init {
        let cfg = load_config(&config)?;
        let trainer = Trainer::new(cfg.clone())?;
        (cfg, trainer.state)
    } else {
        let path = checkpoint.ok_or_else(|| {
            CoreError::Config("either --checkpoint or --random-init is required".into())
        })?;
        let trainer = Trainer::load(&path)?;
        let mut cfg = trainer.cfg.clone();
        if let Some(p) = &config {
            let overrides = fs::read_to_string(p).map_err(|e| {
                CoreError::Config(format!("cannot read config file {}: {e}", p.display()))
            })?;
            cfg.apply_text(&overrides)?;
        }
        (cfg, trainer.state)
    };
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    echo_config(&cfg);
    let data = dataset_for(&cfg)?;
    let result = linear_probe(&cfg, &state, &data, mode)?;
    println!(
        "train accuracy {:.2}%  test accuracy {:.2}%",
        100.0 * result.train_accuracy,
        100.0 * result.test_accuracy
    );
    if let Some(p) = out {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, serde_json::to_string_pretty(&result).expect("result serializes"))?;
    }
    Ok(())
}

fn parse_grid(path: &Path, base: &Config) -> Result<Vec<(String, Config)>, CoreError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CoreError::Config(format!("cannot read grid file {}: {e}", path.display()))
    })?;
    let mut variants = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, rest) = line.split_once(':').ok_or_else(|| CoreError::Parse {
            line: lineno + 1,
            msg: format!("expected 'name: key=value, ...', got '{line}'"),
        })?;
        let mut cfg = base.clone();
        for pair in rest.split(',') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let (k, v) = pair.split_once('=').ok_or_else(|| CoreError::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got '{pair}'"),
            })?;
            cfg.set(k.trim(), v).map_err(|e| CoreError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        variants.push((name.trim().to_string(), cfg));
    }
    if variants.is_empty() {
        return Err(CoreError::EmptyInput(format!(
            "grid file {} defines no variants",
            path.display()
        )));
    }
    Ok(variants)
}

fn cmd_ablate(
    grid: Option<PathBuf>,
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    echo_config(&cfg);
    let variants = match grid {
        Some(p) => parse_grid(&p, &cfg)?,
        None => standard_variants(&cfg),
    };
    let data = dataset_for(&cfg)?;
    fs::create_dir_all(&out)?;
    let mut jsonl = fs::File::create(out.join("outcomes.jsonl"))?;
    let outcomes = run_ablation_suite(&variants, &data, |o| {
        match &o.error {
            Some(e) => println!("{}: failed ({e})", o.name),
            None => println!(
                "{}: loss {:.4}, collapsed {}, probe {:.2}%",
                o.name,
                o.final_loss,
                o.collapsed,
                100.0 * o.probe_test_accuracy
            ),
        }
        let _ = writeln!(jsonl, "{}", serde_json::to_string(o).expect("outcome serializes"));
    });
    let table = format_ablation_table(&outcomes);
    fs::write(out.join("table.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_serialize_dump(
    input: PathBuf,
    order: &str,
    bits: u32,
    patches: usize,
    seed: u64,
) -> Result<(), CoreError> {
    let kind = OrderKind::parse(order)?;
    let cloud = load_xyz(&input)?;
    let g = patches.clamp(1, cloud.len());
    let s = 1; // patch contents are irrelevant to the ordering
    let set = make_patches(&cloud, g, s, seed)?;
    let ord = serialize(&set.centers, kind, bits, seed)?;
    println!("rank\tindex\tcx\tcy\tcz\tcode");
    for (rank, &idx) in ord.permutation.iter().enumerate() {
        let c = set.centers[idx];
        println!(
            "{rank}\t{idx}\t{:.6}\t{:.6}\t{:.6}\t{}",
            c[0], c[1], c[2], ord.codes[idx]
        );
    }
    Ok(())
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::InvalidArgument(_)
        | CoreError::Parse { .. }
        | CoreError::EmptyInput(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // keep clap's help/version on stdout with success status
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Pretrain {
            config,
            out,
            seed,
            steps,
        } => cmd_pretrain(config, out, seed, steps),
        Command::Probe {
            checkpoint,
            random_init,
            config,
            attn,
            seed,
            out,
        } => cmd_probe(checkpoint, random_init, config, &attn, seed, out),
        Command::Ablate {
            grid,
            config,
            out,
            seed,
        } => cmd_ablate(grid, config, out, seed),
        Command::SerializeDump {
            input,
            order,
            bits,
            patches,
            seed,
        } => cmd_serialize_dump(input, &order, bits, patches, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
