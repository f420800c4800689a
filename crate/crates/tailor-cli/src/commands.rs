//! Command implementations and their exit-code mapping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use tailor_core::config::PipelineConfig;
use tailor_core::cost::estimate_compute;
use tailor_core::dataset::{load_candidate_log, load_output_dataset, load_seed_dataset, BASE_PROVENANCE};
use tailor_core::pipeline::{build_gateway, run_pipeline, PipelineError, RunOptions};
use tailor_core::scoring::{compute_ifd, reselect_from_log};
use tailor_core::sim::{
    default_scenario, simulate_evolution, sweep, write_sweep_csv, write_trajectory_csv,
    SimConfig, SyntheticPairProfile,
};

use crate::{
    BankStatsArgs, EstimateCostArgs, InspectArgs, RunArgs, ScoreArgs, SimulateArgs,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RESUMABLE: i32 = 2;

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|entry| {
            entry
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .with_context(|| format!("--set `{entry}` is not of the form key=value"))
        })
        .collect()
}

fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<PipelineConfig> {
    let mut pairs = parse_overrides(overrides)?;
    if let Some(seed) = seed {
        pairs.push(("master_seed".into(), seed.to_string()));
    }
    let mut config = PipelineConfig::load(path, &pairs)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        config.rebase_outputs(dir);
    }
    Ok(config)
}

pub fn run(args: RunArgs, cancel: Arc<AtomicBool>) -> i32 {
    let config = match load_config(
        &args.config,
        &args.overrides,
        args.seed,
        args.out_dir.as_deref(),
    ) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err:#}");
            return EXIT_CONFIG;
        }
    };
    eprintln!("effective master seed: {}", config.master_seed);

    let options = RunOptions {
        resume: args.resume,
        stop_after: args.max_seeds,
        cancel: Some(cancel),
    };
    match run_pipeline(&config, options) {
        Ok(outcome) if outcome.completed => {
            println!(
                "processed {} seeds ({} base fallbacks, {} referee parse failures, {} dropped \
                 candidates)",
                outcome.counts.processed,
                outcome.counts.base_fallbacks,
                outcome.counts.referee_parse_failures,
                outcome.counts.dropped_candidates
            );
            println!("output: {}", config.paths.output.display());
            EXIT_OK
        }
        Ok(outcome) => {
            eprintln!(
                "stopped at seed {}/{} (resumable; continue with --resume)",
                outcome.cursor, outcome.total_seeds
            );
            EXIT_RESUMABLE
        }
        Err(PipelineError::Aborted { detail }) => {
            eprintln!("error: {detail}");
            eprintln!("checkpoint written; continue with --resume");
            EXIT_RESUMABLE
        }
        Err(err @ PipelineError::ExistingState(_)) => {
            eprintln!("error: {err}");
            EXIT_CONFIG
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_CONFIG
        }
    }
}

fn score_inner(args: &ScoreArgs) -> Result<()> {
    let config = load_config(&args.config, &args.overrides, None, None)?;
    let samples = load_seed_dataset(&args.input)?;
    let gateway = build_gateway(&config)?;
    let small = config.scorer_small()?;
    let large = config.scorer_large()?;

    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let ifd_small = compute_ifd(&gateway, &small, &sample.instruction, &sample.response)?;
        let ifd_large = compute_ifd(&gateway, &large, &sample.instruction, &sample.response)?;
        rows.push((sample.id.clone(), ifd_small, ifd_large, ifd_small - ifd_large));
    }
    if args.rank {
        rows.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap_or(std::cmp::Ordering::Equal));
    }

    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&args.output)
            .with_context(|| format!("cannot create {}", args.output.display()))?,
    );
    for (id, ifd_small, ifd_large, diff) in &rows {
        let line = serde_json::json!({
            "id": id,
            "ifd_small": ifd_small,
            "ifd_large": ifd_large,
            "diff": diff,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    println!("scored {} samples -> {}", rows.len(), args.output.display());
    Ok(())
}

pub fn score(args: ScoreArgs) -> i32 {
    match score_inner(&args) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG
        }
    }
}

#[derive(serde::Deserialize)]
struct ProfileFile {
    #[serde(default)]
    name: Option<String>,
    profiles: Vec<SyntheticPairProfile>,
}

fn load_profile_sets(args: &SimulateArgs) -> Result<Vec<(String, Vec<SyntheticPairProfile>)>> {
    if args.profile_files.is_empty() {
        return Ok(vec![("default".to_string(), default_scenario())]);
    }
    args.profile_files
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let file: ProfileFile = toml::from_str(&text)
                .with_context(|| format!("invalid profile file {}", path.display()))?;
            let name = file.name.unwrap_or_else(|| {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            Ok((name, file.profiles))
        })
        .collect()
}

fn simulate_inner(args: &SimulateArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let sets = load_profile_sets(args)?;
    eprintln!("effective seed: {}", args.seed);

    if args.sweep {
        let betas = if args.betas.is_empty() { vec![args.beta] } else { args.betas.clone() };
        let (rows, aggregates) = sweep(
            &betas,
            &sets,
            args.iterations,
            args.sweep_seeds,
            args.seed,
            args.pairs_per_iteration,
        )?;
        let path = args.out_dir.join("sweep.csv");
        write_sweep_csv(&rows, std::fs::File::create(&path)?)?;
        println!("{} rows -> {}", rows.len(), path.display());
        println!("aggregate means per (profile set, beta):");
        for agg in aggregates {
            println!(
                "  {:12} beta={:<6} seeds={:<3} mean max final {:.4}, mean min final {:.4}",
                agg.profile_set, agg.beta, agg.seeds, agg.mean_max_final, agg.mean_min_final
            );
        }
        return Ok(());
    }

    let (set_name, profiles) = &sets[0];
    let config = SimConfig {
        iterations: args.iterations,
        beta: args.beta,
        stride: args.stride,
        pairs_per_iteration: args.pairs_per_iteration,
    };
    let trajectory = simulate_evolution(profiles, &config, args.seed)?;
    let path = args.out_dir.join("trajectory.csv");
    write_trajectory_csv(&trajectory, std::fs::File::create(&path)?)?;
    println!(
        "simulated `{set_name}`: {} pairs, {} iterations, beta {} -> {}",
        profiles.len(),
        args.iterations,
        args.beta,
        path.display()
    );
    println!("final probabilities:");
    let mut ranked: Vec<(&String, &f64)> =
        trajectory.pair_names.iter().zip(&trajectory.finals).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap_or(std::cmp::Ordering::Equal));
    for (name, prob) in ranked {
        println!("  {name:12} {prob:.4}");
    }
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> i32 {
    match simulate_inner(&args) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG
        }
    }
}

fn inspect_inner(args: &InspectArgs) -> Result<()> {
    let log = load_candidate_log(&args.log)?;
    let records = reselect_from_log(&log);

    let mut per_pair: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    let mut base_count = 0usize;
    for candidate in &log {
        if candidate.is_base {
            base_count += 1;
            continue;
        }
        let entry = per_pair.entry(candidate.pair.clone()).or_insert((0, 0, 0.0));
        entry.0 += 1;
        entry.2 += candidate.pi_composite;
    }
    for record in &records {
        if record.provenance != BASE_PROVENANCE {
            if let Some(entry) = per_pair.get_mut(&record.provenance) {
                entry.1 += 1;
            }
        }
    }
    let fallbacks = records.iter().filter(|r| r.provenance == BASE_PROVENANCE).count();

    if args.json {
        let value = serde_json::json!({
            "candidates": log.len(),
            "base_candidates": base_count,
            "seeds": records.len(),
            "base_fallbacks": fallbacks,
            "per_pair": per_pair
                .iter()
                .map(|(pair, (count, wins, total))| {
                    serde_json::json!({
                        "pair": pair,
                        "candidates": count,
                        "wins": wins,
                        "mean_composite": if *count > 0 { total / *count as f64 } else { 0.0 },
                    })
                })
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{} candidates", log.len());
        if !log.is_empty() {
            println!("{} seeds, {base_count} base candidates, {fallbacks} base fallbacks", records.len());
            println!("{:24} {:>10} {:>6} {:>14}", "pair", "candidates", "wins", "mean composite");
            for (pair, (count, wins, total)) in &per_pair {
                println!(
                    "{pair:24} {count:>10} {wins:>6} {:>14.4}",
                    if *count > 0 { total / *count as f64 } else { 0.0 }
                );
            }
        }
    }

    if let Some(output_path) = &args.verify {
        let outputs = load_output_dataset(output_path)?;
        if outputs.len() != records.len() {
            bail!(
                "{} output records vs {} re-derived from the log",
                outputs.len(),
                records.len()
            );
        }
        for (got, want) in outputs.iter().zip(&records) {
            if got.seed_id != want.seed_id
                || got.provenance != want.provenance
                || got.score != want.score
                || got.instruction != want.instruction
                || got.response != want.response
            {
                bail!("seed `{}`: output record differs from the log-derived winner", want.seed_id);
            }
        }
        println!("verified: output matches the log-derived selection for every seed");
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> i32 {
    match inspect_inner(&args) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG
        }
    }
}

fn parse_macs(raw: &str) -> Result<BTreeMap<String, f64>> {
    let mut macs = BTreeMap::new();
    if let Ok(value) = raw.parse::<f64>() {
        macs.insert("model".to_string(), value);
        return Ok(macs);
    }
    for part in raw.split(',') {
        let (name, value) = part
            .split_once('=')
            .with_context(|| format!("`{part}` is neither a number nor model=macs"))?;
        macs.insert(name.trim().to_string(), value.trim().parse::<f64>()?);
    }
    Ok(macs)
}

pub fn estimate_cost(args: EstimateCostArgs) -> i32 {
    match parse_macs(&args.macs) {
        Ok(macs) => {
            let total = estimate_compute(&macs, args.pairs, args.samples);
            println!("{total:e} MACs");
            EXIT_OK
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG
        }
    }
}

fn bank_stats_inner(args: &BankStatsArgs) -> Result<()> {
    let checkpoint = tailor_core::PipelineCheckpoint::load(&args.checkpoint)?;
    let stats = checkpoint.bank.stats();
    let labeled: Vec<(String, usize)> = stats
        .per_pair
        .iter()
        .map(|(pair, count)| (checkpoint.matrix.pair_label(*pair), *count))
        .collect();

    if args.json {
        let value = serde_json::json!({
            "size": stats.size,
            "capacity": stats.capacity,
            "admitted": stats.admitted,
            "rejected": stats.rejected,
            "per_pair": labeled
                .iter()
                .map(|(pair, count)| serde_json::json!({"pair": pair, "entries": count}))
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!(
            "bank: {} entries (capacity {}), {} admitted, {} rejected",
            stats.size, stats.capacity, stats.admitted, stats.rejected
        );
        for (pair, count) in labeled {
            println!("  {pair:24} {count}");
        }
    }
    Ok(())
}

pub fn bank_stats(args: BankStatsArgs) -> i32 {
    match bank_stats_inner(&args) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG
        }
    }
}
