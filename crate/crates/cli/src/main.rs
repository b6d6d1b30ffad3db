//! Experiment runner: reproduces each experiment shape as a subcommand,
//! emitting CSV files into the output directory and a short summary to
//! stdout. Runs are deterministic: identical config and seed produce
//! byte-identical output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use frontsim::config::KEY_DOCS;
use frontsim::eval::{self, ChannelReport, SweepOutcome};
use frontsim::fingerprint::{self, LabeledTraces, VictimTrace};
use frontsim::spectre::{self, SpectreScenario};
use frontsim::{rng, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "frontsim",
    about = "Frontend-path timing/power simulator and channel experiment runner",
    version
)]
struct Cli {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set channel.variant=mt_evict.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory (must exist).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-path timing histogram (CSV plus an ASCII rendering).
    Histogram,
    /// Calibrate the configured channel and transmit one message.
    Channel,
    /// Transmit once per receiver way count d = 1..=N.
    SweepD,
    /// Transient-execution disclosure of a 5-bit-chunk secret.
    Spectre {
        /// Secret as a hex string, or 'random' (overrides spectre.secret).
        #[arg(long)]
        secret: Option<String>,
    },
    /// Loop-buffer patch detection.
    Patch {
        /// Exit with status 2 when the verdict is inconclusive.
        #[arg(long)]
        strict: bool,
    },
    /// Victim application fingerprinting from the attacker's IPC trace.
    Fingerprint {
        /// Directory of victim trace CSVs (interval_s,demand_uops);
        /// synthetic victims are generated when absent.
        #[arg(long)]
        victims_dir: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

/// Keys each subcommand reads, rendered into its --help.
fn keys_help(prefixes: &[&str]) -> String {
    let mut s = String::from("Config keys read by this command:\n");
    for (key, doc) in KEY_DOCS {
        if prefixes.iter().any(|p| key.starts_with(p)) || *key == "seed" || *key == "output_dir" {
            s.push_str(&format!("  {key:38} {doc}\n"));
        }
    }
    s
}

fn main() -> ExitCode {
    let mut cmd = Cli::command();
    let geometry = ["dsb.", "lsd.", "l1i."];
    let costs = ["cost.", "noise."];
    for (name, extra) in [
        ("histogram", vec!["histogram."]),
        ("channel", vec!["channel."]),
        ("sweep-d", vec!["channel."]),
        ("spectre", vec!["spectre."]),
        ("patch", vec!["patch."]),
        ("fingerprint", vec!["fingerprint."]),
        ("config", vec![""]),
    ] {
        let mut prefixes: Vec<&str> = extra;
        if name != "config" {
            prefixes.extend_from_slice(&costs);
            if name != "histogram" {
                prefixes.extend_from_slice(&geometry);
            }
        }
        let help = keys_help(&prefixes);
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.overrides {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.display().to_string();
    }

    match cli.command {
        Command::Config => {
            print!("{}", config.to_text());
            return Ok(ExitCode::SUCCESS);
        }
        _ => {}
    }

    let out_dir = PathBuf::from(&config.output_dir);
    if !out_dir.is_dir() {
        bail!(
            "output directory '{}' does not exist (create it first or pass --output-dir)",
            out_dir.display()
        );
    }

    match cli.command {
        Command::Histogram => cmd_histogram(&config, &out_dir),
        Command::Channel => cmd_channel(&config, &out_dir),
        Command::SweepD => cmd_sweep_d(&config, &out_dir),
        Command::Spectre { secret } => cmd_spectre(&config, secret.as_deref(), &out_dir),
        Command::Patch { strict } => cmd_patch(&config, strict, &out_dir),
        Command::Fingerprint { victims_dir } => {
            cmd_fingerprint(&config, victims_dir.as_deref(), &out_dir)
        }
        Command::Config => unreachable!("handled above"),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_histogram(config: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let model = config.cost_model();
    model.validate()?;
    let mut r = rng::stream(config.seed, "histogram");
    let hist = frontsim::cost::PathHistogram::sample(&model, config.histogram_samples, &mut r);
    let path = out_dir.join("histogram.csv");
    write_csv(&path, frontsim::cost::PathHistogram::CSV_HEADER, &hist.csv_rows())?;

    // ASCII rendering, one bar per (bin, path).
    let max = hist.rows.iter().map(|(_, _, c, _)| *c).max().unwrap_or(1);
    println!("cycles  path   count");
    for (lo, _, count, label) in &hist.rows {
        let width = ((count * 50) / max) as usize;
        println!("{lo:>6}  {label:<5} {count:>7} |{}", "#".repeat(width));
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_channel(config: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let params = config.channel_params();
    let message = eval::gen_message(config.channel_pattern, config.channel_bits, config.seed);
    let report = eval::run_channel(
        &params,
        &message,
        &config.frontend_config(),
        &config.cost_model(),
        config.seed,
        "channel",
    )?;
    let path = out_dir.join("channel.csv");
    write_csv(&path, ChannelReport::CSV_HEADER, &[report.csv_row()])?;
    println!(
        "{}: {} bits, error rate {:.4}, {:.2} kbps",
        report.variant, report.bits_sent, report.error_rate, report.transmission_rate_kbps
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep_d(config: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let params = config.channel_params();
    let message = eval::gen_message(config.channel_pattern, config.channel_bits, config.seed);
    let outcomes = eval::sweep_d(
        &params,
        1..=config.dsb_ways,
        &config.frontend_config(),
        &config.cost_model(),
        &message,
        config.seed,
    );
    let mut rows = Vec::new();
    for outcome in &outcomes {
        match outcome {
            SweepOutcome::Report(r) => rows.push(r.csv_row()),
            SweepOutcome::Skipped { d, reason } => {
                eprintln!("skipped d={d}: {reason}");
            }
        }
    }
    let path = out_dir.join("sweep_d.csv");
    write_csv(&path, ChannelReport::CSV_HEADER, &rows)?;
    println!("{} sweep points, wrote {}", rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_spectre(
    config: &ExperimentConfig,
    secret_flag: Option<&str>,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let secret_spec = secret_flag.unwrap_or(&config.spectre_secret);
    let secret = if secret_spec == "random" {
        spectre::random_chunks(config.spectre_chunks, config.seed)
    } else {
        spectre::chunks_from_hex(secret_spec)?
    };
    let mut scenario = SpectreScenario::new(
        secret,
        config.spectre_train_iterations,
        &config.frontend_config(),
        &config.cost_model(),
        rng::stream(config.seed, "spectre"),
    )?;
    let trials = scenario.run()?;
    let rows: Vec<String> = trials.iter().map(spectre::csv_row).collect();
    let path = out_dir.join("spectre.csv");
    write_csv(&path, &spectre::csv_header(), &rows)?;
    let correct = trials
        .iter()
        .filter(|t| t.recovered == Some(t.true_value))
        .count();
    let misses: u64 = trials.iter().map(|t| t.added_l1i_misses).sum();
    println!(
        "recovered {correct}/{} chunks, added L1I misses: {misses}",
        trials.len()
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_patch(config: &ExperimentConfig, strict: bool, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let mut r = rng::stream(config.seed, "patch");
    let report = fingerprint::detect_patch(
        &config.frontend_config(),
        &config.cost_model(),
        config.patch_trials,
        &mut r,
    )?;
    let path = out_dir.join("patch.csv");
    write_csv(
        &path,
        "verdict,timing_gap_cycles_per_block,energy_gap_per_uop,trials",
        &[format!(
            "{},{:.6},{:.6},{}",
            report.verdict.label(),
            report.timing_gap,
            report.energy_gap,
            report.trials
        )],
    )?;
    println!(
        "verdict: {} (timing gap {:.2} cycles/block, energy gap {:.2}/uop over {} trials)",
        report.verdict.label(),
        report.timing_gap,
        report.energy_gap,
        report.trials
    );
    println!("wrote {}", path.display());
    if strict && report.verdict == fingerprint::PatchVerdict::Inconclusive {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fingerprint(
    config: &ExperimentConfig,
    victims_dir: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let victims: Vec<VictimTrace> = match victims_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no victim trace CSVs in {}", dir.display());
            }
            paths
                .iter()
                .map(|p| {
                    let name = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let text = std::fs::read_to_string(p)?;
                    Ok(VictimTrace::from_csv(name, &text)?)
                })
                .collect::<anyhow::Result<_>>()?
        }
        None => fingerprint::synthetic_victims(
            config.fingerprint_victims,
            config.fingerprint_intervals,
            config.fingerprint_interval_s,
        ),
    };

    let fe = config.frontend_config();
    let model = config.cost_model();
    let fp = config.fingerprint_model();

    let mut reference = Vec::new();
    for (vi, victim) in victims.iter().enumerate() {
        let traces = (0..config.fingerprint_runs_per_victim)
            .map(|k| {
                let mut r = rng::substream(
                    config.seed,
                    "fingerprint-ref",
                    (vi * config.fingerprint_runs_per_victim + k) as u64,
                );
                fingerprint::attacker_ipc_run(victim, &fe, &model, &fp, &mut r)
            })
            .collect::<Result<Vec<_>, _>>()?;
        reference.push(LabeledTraces {
            label: victim.name.clone(),
            traces,
        });
    }

    let mut rows = Vec::new();
    let mut correct = 0usize;
    for (vi, victim) in victims.iter().enumerate() {
        let mut r = rng::substream(config.seed, "fingerprint-probe", vi as u64);
        let probe = fingerprint::attacker_ipc_run(victim, &fe, &model, &fp, &mut r)?;
        let c = fingerprint::classify(&reference, &probe)?;
        let ok = c.label == victim.name;
        correct += usize::from(ok);
        rows.push(format!(
            "{},{},{:.6},{:.6},{}",
            victim.name, c.label, c.intra_mean, c.inter_mean, ok
        ));
    }
    let path = out_dir.join("fingerprint.csv");
    write_csv(&path, "probe_label,predicted,intra_mean,inter_mean,correct", &rows)?;
    println!("classified {correct}/{} probes correctly", victims.len());
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
