//! Subcommands of the `fedmic` binary.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use fedmic_core::config::{parse_config, parse_data_source, parse_override, serialize_config};
use fedmic_core::data::{dirichlet_partition, read_fmic, read_header, split_tvt, synth_generate, write_fmic, FMIC_MAGIC};
use fedmic_core::gpd::{wire, Payload};
use fedmic_core::metrics::{emit_metrics, emit_summary, RunHistory};
use fedmic_core::runtime::{run_experiment, DataSource, SPLIT_RATIOS};
use fedmic_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fedmic", version, about = "Federated mutual distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every seed of an experiment and write metrics.csv and summary.csv.
    Run {
        config: PathBuf,
        /// `--key=value` settings that override the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Generate a synthetic dataset, e.g. `classes=8,per_class=400,shape=1x28x28`.
    Synth { spec: String, out: PathBuf },
    /// Split a dataset into per-client shards with a manifest.
    Partition {
        input: PathBuf,
        #[arg(allow_negative_numbers = true)]
        lambda: f64,
        n_clients: usize,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = fedmic_core::data::DEFAULT_MIN_PER_CLIENT)]
        min_per_client: usize,
    },
    /// Print an FMIC header or a GPD packet summary.
    Inspect { file: PathBuf },
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    let mut out = io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run { config, overrides } => run(&config, &overrides, out),
        Command::Synth { spec, out: path } => synth(&spec, &path, out),
        Command::Partition { input, lambda, n_clients, out_dir, seed, min_per_client } => {
            partition(&input, lambda, n_clients, &out_dir, seed, min_per_client, out)
        }
        Command::Inspect { file } => inspect(&file, out),
    }
}

fn run(config: &Path, overrides: &[String], out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let overrides = overrides.iter().map(|a| parse_override(a)).collect::<Result<Vec<_>>>()?;
    let exp = parse_config(&text, &overrides)?;
    fs::create_dir_all(&exp.out)?;
    fs::write(exp.out.join("config.txt"), serialize_config(&exp))?;
    let mut histories = Vec::new();
    for cfg in exp.runs() {
        let run_id = format!("{}-s{}", cfg.mode, cfg.seed);
        info!("starting {run_id}: {} rounds over {} clients", cfg.rounds, cfg.n_clients);
        let rounds = run_experiment(&cfg)?;
        if let Some(last) = rounds.last() {
            writeln!(out, "{run_id}: final weighted accuracy {:.4}, comm ratio {:.4}", last.weighted_acc, last.comm_ratio)?;
        }
        histories.push(RunHistory { run_id, mode: cfg.mode, rounds });
    }
    let metrics = exp.out.join("metrics.csv");
    emit_metrics(&histories, &metrics)?;
    emit_summary(&histories, &exp.out.join("summary.csv"))?;
    writeln!(out, "wrote {}", metrics.display())?;
    Ok(())
}

fn synth(spec: &str, path: &Path, out: &mut dyn Write) -> Result<()> {
    let text = if spec.starts_with("synth") { spec.to_string() } else { format!("synth:{spec}") };
    let DataSource::Synth(spec) = parse_data_source(&text).map_err(Error::Config)? else {
        return Err(Error::Config(format!("`{text}` is not a synth spec")));
    };
    let ds = synth_generate(&spec)?;
    write_fmic(&ds, path)?;
    writeln!(out, "wrote {} samples to {}", ds.len(), path.display())?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn partition(
    input: &Path,
    lambda: f64,
    n_clients: usize,
    out_dir: &Path,
    seed: u64,
    min_per_client: usize,
    out: &mut dyn Write,
) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let ds = read_fmic(input)?;
    let part = dirichlet_partition(&ds.labels, ds.n_classes, n_clients, lambda, seed, min_per_client)?;
    let part = split_tvt(&part, &ds.labels, SPLIT_RATIOS, seed)?;
    fs::create_dir_all(out_dir)?;
    // Shards hold train, then test, then val samples; the manifest keeps
    // the global indices in shard order.
    let mut manifest = String::from("client,file,n_train,n_test,n_val,global_indices\n");
    for (k, c) in part.clients.iter().enumerate() {
        let order: Vec<usize> = c.train.iter().chain(&c.test).chain(&c.val).copied().collect();
        let file = format!("client_{k:03}.fmic");
        write_fmic(&ds.subset(&order)?, &out_dir.join(&file))?;
        manifest.push_str(&format!(
            "{k},{file},{},{},{},{}\n",
            c.train.len(),
            c.test.len(),
            c.val.len(),
            join(&order)
        ));
    }
    fs::write(out_dir.join("manifest.csv"), manifest)?;
    writeln!(out, "wrote {n_clients} shards to {}", out_dir.display())?;
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let buf = fs::read(path)?;
    if buf.starts_with(FMIC_MAGIC) {
        let h = read_header(&buf)?;
        writeln!(out, "format: FMIC")?;
        writeln!(out, "samples: {}", h.n)?;
        writeln!(out, "channels: {}", h.channels)?;
        writeln!(out, "height: {}", h.height)?;
        writeln!(out, "width: {}", h.width)?;
        writeln!(out, "classes: {}", h.n_classes)?;
        return Ok(());
    }
    if buf.starts_with(wire::MAGIC) {
        let p = wire::read_packet(&buf)?;
        let stats = p.stats();
        writeln!(out, "format: GPD")?;
        writeln!(out, "sender: {}", p.sender)?;
        writeln!(out, "round: {}", p.round)?;
        writeln!(out, "samples: {}", p.n_samples)?;
        writeln!(out, "records: {}", p.records.len())?;
        for r in &p.records {
            let kind = match &r.payload {
                Payload::Raw(_) => "raw".to_string(),
                Payload::Gpd { r: rank, p, n } => format!("gpd r={rank} k={}/{}", p.rank(), n.rank()),
            };
            writeln!(out, "  tensor {} shape {:?} {kind} scalars {}/{}", r.id, r.shape, r.transmitted_count(), r.full_count())?;
        }
        writeln!(out, "transmitted: {}", stats.transmitted)?;
        writeln!(out, "full: {}", stats.full)?;
        writeln!(out, "ratio: {}", stats.ratio)?;
        writeln!(out, "bytes: {}", stats.bytes)?;
        return Ok(());
    }
    Err(Error::Format { offset: 0, msg: format!("{} is neither an FMIC file nor a GPD packet", path.display()) })
}
