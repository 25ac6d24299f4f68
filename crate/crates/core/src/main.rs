use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use satcn::baselines::make_scenario;
use satcn::config::ExperimentConfig;
use satcn::experiment::run_scenario;
use satcn::graph::SensorSet;
use satcn::io::{
    format_metric_table, read_id_list_file, read_panel_csv, read_sensors_csv, write_estimates_csv,
    write_history_csv, write_metrics_csv, write_panel_csv, write_sensors_csv, ArtifactMeta, MetricRow,
};
use satcn::model::{gradient_check, krige, train, GradCheckSpec, SatcnModel};
use satcn::sampling::TimeSeriesPanel;
use satcn::synthetic::{generate_synthetic, SyntheticFieldSpec};
use satcn::{Result, SatcnError};

/// Spatiotemporal kriging with masked spatial aggregation and temporal convolution.
#[derive(Debug, Parser)]
#[command(name = "satcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// Experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps.
    #[arg(long)]
    iterations: Option<usize>,
    /// Samples per step.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Scenario name such as 7T8S or 5T5S5M.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.satcn and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Estimate unobserved sensors with a trained model.
    Krige {
        #[arg(long)]
        model: PathBuf,
        /// Panel CSV with the observed sensors.
        #[arg(long)]
        observed: PathBuf,
        /// Sensor table covering observed and target sensors.
        #[arg(long)]
        sensors: PathBuf,
        /// Target sensor ids, one per line.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a scenario end to end and write a metric table.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic dataset (panel.csv, sensors.csv, truth.csv).
    Synth {
        /// Optional TOML file with a SyntheticFieldSpec.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_sensors: Option<usize>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long)]
        n_basis: Option<usize>,
        #[arg(long)]
        length_scale: Option<f64>,
        /// Noise std relative to the signal std.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        h: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Probe at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<()> {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = &o.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &o.scenario {
        cfg.scenario = Some(satcn::config::ScenarioConfig {
            name: Some(v.clone()),
            ..Default::default()
        });
    }
    cfg.validate()
}

fn load_data(cfg: &ExperimentConfig) -> Result<(TimeSeriesPanel, SensorSet)> {
    if let Some(spec) = cfg.synthetic_spec() {
        let f = generate_synthetic(&spec)?;
        return Ok((f.panel, f.sensors));
    }
    let d = cfg.data.as_ref().ok_or_else(|| SatcnError::Config("no data source".into()))?;
    let sensors = read_sensors_csv(&d.sensors)?;
    let panel = read_panel_csv(&d.panel)?;
    for id in &panel.ids {
        if sensors.index_of(id).is_none() {
            return Err(SatcnError::invalid(format!("panel sensor {id:?} is missing from the sensor table")));
        }
    }
    Ok((panel, sensors))
}

fn meta_for(cfg: &ExperimentConfig) -> ArtifactMeta {
    ArtifactMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn cmd_train(config: &Path, o: &Overrides) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, o)?;
    let (panel, sensors) = load_data(&cfg)?;
    let (panel, sensors) = if cfg.scenario.is_some() {
        let sc = make_scenario(&panel, &sensors, &cfg.scenario_spec()?)?;
        (sc.train_panel, sc.train_sensors)
    } else {
        (panel.align_to(&sensors), sensors)
    };
    let meta = meta_for(&cfg);
    let (mut model, history) = train(&panel, &sensors, &cfg.train_config(), &cfg.arch)?;
    model.config_hash = Some(meta.config_hash.clone());
    std::fs::create_dir_all(&cfg.output_dir)?;
    let model_path = cfg.output_dir.join("model.satcn");
    model.save(&model_path)?;
    write_history_csv(&cfg.output_dir.join("history.csv"), &history.to_csv_rows(), Some(&meta))?;
    println!(
        "trained {} iterations; final loss {:.6}; model written to {}",
        history.train_loss.len(),
        history.train_loss.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    if let Some((it, v)) = history.best_iteration.and_then(|b| history.validation.iter().find(|(i, _)| *i == b)) {
        println!("best validation MAE {v:.6} at iteration {it}");
    }
    Ok(())
}

fn cmd_krige(model: &Path, observed: &Path, sensors: &Path, targets: &Path, output: &Path) -> Result<()> {
    let m = SatcnModel::load(model)?;
    let panel = read_panel_csv(observed)?;
    let sensors = read_sensors_csv(sensors)?;
    let targets = read_id_list_file(targets)?;
    let mut unknown = Vec::with_capacity(targets.len());
    for id in &targets {
        unknown.push(
            sensors
                .index_of(id)
                .ok_or_else(|| SatcnError::invalid(format!("target {id:?} is not in the sensor table")))?,
        );
    }
    for id in &panel.ids {
        if sensors.index_of(id).is_none() {
            return Err(SatcnError::invalid(format!("observed sensor {id:?} is not in the sensor table")));
        }
    }
    let est = krige(&m, &panel, &sensors, &unknown)?;
    let u = m.temporal_reduction().min(panel.n_steps());
    let meta = ArtifactMeta {
        config_hash: m.config_hash.clone().unwrap_or_else(|| "none".into()),
        seed: m.seed.unwrap_or(0),
    };
    let stamps: Vec<String> = if targets.is_empty() { Vec::new() } else { panel.timestamps[u..].to_vec() };
    let est = if targets.is_empty() { ndarray::Array2::zeros((0, 0)) } else { est };
    write_estimates_csv(output, &targets, &stamps, &est, Some(&meta))?;
    println!("wrote {} target series to {}", targets.len(), output.display());
    Ok(())
}

fn cmd_evaluate(config: &Path, o: &Overrides) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if cfg.scenario.is_none() && o.scenario.is_none() {
        cfg.scenario = Some(satcn::config::ScenarioConfig {
            name: Some("7T8S".into()),
            ..Default::default()
        });
    }
    apply_overrides(&mut cfg, o)?;
    let (panel, sensors) = load_data(&cfg)?;
    let spec = cfg.scenario_spec()?;
    let out = run_scenario(&panel, &sensors, &spec, &cfg.arch, &cfg.train_config(), &cfg.baseline.k)?;
    let mut rows = vec![MetricRow {
        method: "satcn".into(),
        seed: cfg.seed,
        report: out.satcn,
    }];
    for (k, r) in &out.knn {
        rows.push(MetricRow {
            method: format!("knn-{k}"),
            seed: cfg.seed,
            report: *r,
        });
    }
    let meta = meta_for(&cfg);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("metrics.csv");
    write_metrics_csv(&path, &rows, Some(&meta))?;
    write_history_csv(&cfg.output_dir.join("history.csv"), &out.history.to_csv_rows(), Some(&meta))?;
    print!("{}", format_metric_table(&rows));
    println!("metrics written to {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    config: Option<&Path>,
    n_sensors: Option<usize>,
    n_steps: Option<usize>,
    n_basis: Option<usize>,
    length_scale: Option<f64>,
    noise: Option<f64>,
    seed: Option<u64>,
    output_dir: &Path,
) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SatcnError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SyntheticFieldSpec>(&text).map_err(|e| SatcnError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticFieldSpec::default(),
    };
    if let Some(v) = n_sensors {
        spec.n_sensors = v;
    }
    if let Some(v) = n_steps {
        spec.n_steps = v;
    }
    if let Some(v) = n_basis {
        spec.n_basis = v;
    }
    if let Some(v) = length_scale {
        spec.length_scale = v;
    }
    if let Some(v) = noise {
        spec.noise_std = v;
        spec.noise_relative = true;
    }
    if let Some(v) = seed {
        spec.seed = v;
    }
    spec.validate().map_err(|e| SatcnError::Config(e.to_string()))?;
    let f = generate_synthetic(&spec)?;
    let json = serde_json::to_vec(&spec).expect("spec serializes");
    use sha2::Digest;
    let meta = ArtifactMeta {
        config_hash: hex::encode(sha2::Sha256::digest(&json))[..16].to_string(),
        seed: spec.seed,
    };
    std::fs::create_dir_all(output_dir)?;
    write_panel_csv(&output_dir.join("panel.csv"), &f.panel, Some(&meta))?;
    write_sensors_csv(&output_dir.join("sensors.csv"), &f.sensors, Some(&meta))?;
    let truth = TimeSeriesPanel::new(
        f.panel.ids.clone(),
        f.panel.timestamps.clone(),
        f.truth.clone(),
        ndarray::Array2::from_elem(f.truth.dim(), true),
    )?;
    write_panel_csv(&output_dir.join("truth.csv"), &truth, Some(&meta))?;
    println!(
        "wrote {} sensors x {} steps to {} (noise std {:.6})",
        spec.n_sensors,
        spec.n_steps,
        output_dir.display(),
        f.noise_std
    );
    Ok(())
}

fn cmd_gradcheck(n: usize, h: usize, seed: u64, step: f64, max_coords: Option<usize>, tol: f64) -> Result<()> {
    let mut spec = GradCheckSpec {
        n,
        seed,
        step,
        max_coords,
        ..GradCheckSpec::default()
    };
    spec.arch.h = h;
    let report = gradient_check(&spec)?;
    println!(
        "checked {} coordinates; max relative error {:.3e}",
        report.coordinates_checked, report.max_rel_error
    );
    if report.max_rel_error < tol {
        Ok(())
    } else {
        Err(SatcnError::Numerical(format!(
            "max relative error {:.3e} exceeds {tol:.0e} (worst coordinate {:?})",
            report.max_rel_error, report.worst
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Krige {
            model,
            observed,
            sensors,
            targets,
            output,
        } => cmd_krige(&model, &observed, &sensors, &targets, &output),
        Command::Evaluate { config, overrides } => cmd_evaluate(&config, &overrides),
        Command::Synth {
            config,
            n_sensors,
            n_steps,
            n_basis,
            length_scale,
            noise,
            seed,
            output_dir,
        } => cmd_synth(
            config.as_deref(),
            n_sensors,
            n_steps,
            n_basis,
            length_scale,
            noise,
            seed,
            &output_dir,
        ),
        Command::Gradcheck {
            n,
            h,
            seed,
            step,
            max_coords,
            tolerance,
        } => cmd_gradcheck(n, h, seed, step, max_coords, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
