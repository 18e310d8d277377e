//! `dvoc` command-line front end.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dvoc::analysis::{
    blackstart_analytic, blackstart_compare, check_setpoint_consistency, closed_form_point,
    droop_sweep_closed_form, droop_sweep_simulated, sync_metrics, ConsistencyStatus, DroopAxis,
    DroopCurve, SetPoint, CONSISTENCY_TOLERANCE,
};
use dvoc::scenario::{builtin, parse_scenario_str, ModelFile, ScenarioFile, BUILTINS};
use dvoc::sim::{run_scenario, EventKind};
use dvoc::{Controller, Error};
use serde_json::json;

use output::{columns_csv, curves_csv, sha256_hex, trace_csv, write_all, Metrics};

#[derive(Parser, Debug)]
#[command(name = "dvoc", version, about = "Dispatchable virtual oscillator control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Network {
    Quasistatic,
    Dynamic,
}

#[derive(clap::Args, Debug, Clone)]
struct Overrides {
    /// End time (s).
    #[arg(long)]
    t_end: Option<f64>,
    /// Plant step (s).
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step noise amplitude relative to v*.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum)]
    network: Option<Network>,
    #[arg(long)]
    decimation: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write trace, metrics and manifest.
    Simulate {
        /// Scenario file or built-in name.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Synchronization threshold relative to v*.
        #[arg(long, default_value_t = 0.02)]
        sync_threshold: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Simulated droop curve of a single-inverter scenario against the closed form.
    DroopSweep {
        scenario: String,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Grid as `start:stop:count`.
        #[arg(long)]
        range: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare a black-start transient with the analytic envelope.
    BlackstartCheck {
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        inverter: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check whether the set-points admit a power-flow solution.
    Consistency {
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = CONSISTENCY_TOLERANCE)]
        tolerance: f64,
    },
    /// List built-in scenarios.
    ListScenarios,
}

enum Failure {
    Core(Error),
    Usage(String),
    Output(std::io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) | Failure::Usage(_) => 2,
            Failure::Output(_) => 1,
        }
    }

    fn summary(&self) -> serde_json::Value {
        let (kind, message, details) = match self {
            Failure::Core(Error::Schema(list)) => ("schema", "scenario failed validation".to_string(), list.clone()),
            Failure::Core(e) => {
                let kind = match e {
                    Error::InvalidParams(_) => "invalid_params",
                    Error::Topology(_) => "topology",
                    Error::NonFinite { .. } => "non_finite",
                    Error::Degenerate(_) => "degenerate",
                    Error::Analysis(_) => "analysis",
                    Error::Io(_) => "io",
                    _ => "error",
                };
                (kind, e.to_string(), vec![])
            }
            Failure::Usage(m) => ("usage", m.clone(), vec![]),
            Failure::Output(e) => ("output", e.to_string(), vec![]),
        };
        let mut v = json!({ "error": { "kind": kind, "exit_code": self.exit_code(), "message": message } });
        if let Failure::Core(Error::NonFinite { time, inverter, magnitude }) = self {
            v["error"]["time_s"] = json!(time);
            v["error"]["inverter"] = json!(inverter);
            v["error"]["magnitude"] = json!(if magnitude.is_finite() { Some(*magnitude) } else { None });
        }
        if !details.is_empty() {
            v["error"]["details"] = json!(details);
        }
        v
    }
}

type Outcome = Result<(), Failure>;

/// A scenario document plus where it came from.
struct Loaded {
    file: ScenarioFile,
    source: String,
    input_hash: String,
}

fn load(spec: &str, overrides: Option<&Overrides>) -> Result<Loaded, Failure> {
    let path = Path::new(spec);
    let (mut file, source, raw) = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io(e)))?;
        (parse_scenario_str(&text)?, path.display().to_string(), text)
    } else if let Some(f) = builtin(spec) {
        let text = f.to_json();
        (f, format!("builtin:{spec}"), text)
    } else {
        return Err(Failure::Core(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("'{spec}' is neither a readable file nor a built-in scenario"),
        ))));
    };
    if let Some(o) = overrides {
        let sim = &mut file.sim;
        if let Some(x) = o.t_end {
            sim.t_end_s = x;
        }
        if let Some(x) = o.dt {
            sim.dt_s = x;
        }
        if let Some(x) = o.seed {
            sim.noise_seed = x;
        }
        if let Some(x) = o.noise {
            sim.noise_amplitude = x;
        }
        if let Some(x) = o.decimation {
            sim.record_decimation = x;
        }
        if let Some(n) = o.network {
            sim.network_model = match n {
                Network::Quasistatic => ModelFile::Quasistatic,
                Network::Dynamic => ModelFile::Dynamic,
            };
        }
    }
    Ok(Loaded {
        input_hash: sha256_hex(raw.as_bytes()),
        file,
        source,
    })
}

fn manifest(loaded: &Loaded, command: &str, files: &[(String, String)]) -> String {
    let resolved = loaded.file.to_json();
    let outputs: Vec<_> = files
        .iter()
        .map(|(name, body)| json!({ "file": name, "sha256": sha256_hex(body.as_bytes()) }))
        .collect();
    let m = json!({
        "tool": "dvoc",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "scenario_source": loaded.source,
        "input_sha256": loaded.input_hash,
        "resolved_scenario_file": "scenario.resolved.json",
        "resolved_scenario_sha256": sha256_hex(resolved.as_bytes()),
        "seed": loaded.file.sim.noise_seed,
        "sim": serde_json::to_value(loaded.file.sim).expect("sim settings serialize"),
        "outputs": outputs,
    });
    serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n"
}

fn finish(out: &Path, loaded: &Loaded, command: &str, mut files: Vec<(String, String)>) -> Outcome {
    files.push(("scenario.resolved.json".into(), loaded.file.to_json() + "\n"));
    let m = manifest(loaded, command, &files);
    files.push(("manifest.json".into(), m));
    write_all(out, &files).map_err(Failure::Output)?;
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn simulate(spec: &str, out: &Path, threshold: f64, overrides: &Overrides) -> Outcome {
    let loaded = load(spec, Some(overrides))?;
    let (scenario, config) = loaded.file.resolve()?;
    let trace = run_scenario(&scenario, &config)?;
    let t_from = trace.last_event(EventKind::Connect).unwrap_or(0.0);
    let mut metrics = Metrics::default();
    match sync_metrics(&trace, threshold, t_from) {
        Ok(m) => {
            if trace.inverters.len() >= 2 {
                metrics.push_opt("sync_time_s", "all", m.sync_time);
                metrics.push("sync_residual_v", "all", m.residual);
            }
            metrics.push_text("settled", "all", if m.settled { "true" } else { "false" });
            for (k, inv) in trace.inverters.iter().enumerate() {
                metrics.push("steady_freq_rad_s", &inv.id, m.steady_freq[k]);
                metrics.push("steady_freq_hz", &inv.id, m.steady_freq[k] / std::f64::consts::TAU);
                metrics.push("steady_vmag_v", &inv.id, m.steady_amplitudes[k]);
                metrics.push("steady_p_w", &inv.id, m.steady_p[k]);
                metrics.push("steady_q_var", &inv.id, m.steady_q[k]);
                metrics.push("sharing_ratio", &inv.id, m.sharing_ratios[k]);
            }
        }
        Err(e) => {
            log::warn!("steady-state metrics unavailable: {e}");
            metrics.push_text("settled", "all", "undefined");
        }
    }
    if let Ok(Some(cmp)) = blackstart_compare(&trace, 0) {
        metrics.push("blackstart_max_rel_deviation", &trace.inverters[0].id, cmp.max_rel_deviation);
    }
    let files = vec![
        ("trace.csv".to_string(), trace_csv(&trace)),
        ("metrics.csv".to_string(), metrics.to_csv()),
    ];
    finish(out, &loaded, "simulate", files)
}

fn parse_range(text: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Usage(format!("range '{text}' is not start:stop:count"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() || (n > 1 && b <= a) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect())
}

fn droop_sweep(spec: &str, axis: Axis, range: &str, out: &Path, overrides: &Overrides) -> Outcome {
    let grid = parse_range(range)?;
    let loaded = load(spec, Some(overrides))?;
    let (template, config) = loaded.file.resolve()?;
    let params = match template.inverters.as_slice() {
        [only] => match only.controller {
            Controller::Dvoc(p) => p,
            Controller::Droop(_) => return Err(Failure::Usage("droop sweep needs a dVOC inverter".into())),
        },
        _ => return Err(Failure::Usage("droop sweep needs a single-inverter scenario".into())),
    };
    let axis = match axis {
        Axis::P => DroopAxis::P,
        Axis::Q => DroopAxis::Q,
    };
    let simulated = droop_sweep_simulated(&template, axis, &grid, &config)?;
    if simulated.points.is_empty() {
        return Err(Failure::Core(Error::Analysis("no sweep point reached steady state".into())));
    }
    let closed = droop_sweep_closed_form(&params, axis, &grid)?;
    let mut metrics = Metrics::default();
    metrics.push("points_settled", "all", simulated.points.len() as f64);
    for x in &simulated.excluded {
        metrics.push("excluded_grid_value", "all", *x);
    }
    let worst = |c: &DroopCurve| -> Result<f64, Error> {
        let mut w: f64 = 0.0;
        for &(x, y) in &c.points {
            let e = closed_form_point(&params, axis, x)?;
            w = w.max((y - e).abs() / e.abs());
        }
        Ok(w)
    };
    metrics.push("max_rel_error_vs_closed_form", "inv", worst(&simulated)?);
    let files = vec![
        (
            "curve.csv".to_string(),
            curves_csv(&[
                ("simulated", &simulated),
                ("closed_form", &closed.exact),
                ("linear", &closed.linear),
                ("taylor", &closed.taylor),
            ]),
        ),
        ("metrics.csv".to_string(), metrics.to_csv()),
    ];
    finish(out, &loaded, "droop-sweep", files)
}

fn blackstart_check(spec: &str, out: &Path, inverter: usize, overrides: &Overrides) -> Outcome {
    let loaded = load(spec, Some(overrides))?;
    let (scenario, config) = loaded.file.resolve()?;
    let trace = run_scenario(&scenario, &config)?;
    let cmp = blackstart_compare(&trace, inverter)?
        .ok_or_else(|| Error::Analysis("trace has no 5%-95% black-start rise".into()))?;
    let Controller::Dvoc(params) = trace.inverters[inverter].controller else {
        unreachable!("blackstart_compare accepts dVOC inverters only")
    };
    let k0 = trace.index_at(cmp.t_anchor);
    let col = &trace.inverters[inverter];
    let rel: Vec<f64> = trace.time[k0..].iter().map(|t| t - cmp.t_anchor).collect();
    let analytic = blackstart_analytic(col.vmag[k0], &params, &rel)?;
    let mut metrics = Metrics::default();
    metrics.push("max_rel_deviation", &col.id, cmp.max_rel_deviation);
    metrics.push("t_anchor_s", &col.id, cmp.t_anchor);
    metrics.push("t_rise_end_s", &col.id, cmp.t_rise_end);
    metrics.push("h0", &col.id, analytic.h0);
    let files = vec![
        ("trace.csv".to_string(), trace_csv(&trace)),
        (
            "curve.csv".to_string(),
            columns_csv(
                &["t", "vmag_simulated", "vmag_analytic"],
                &[&trace.time[k0..], &col.vmag[k0..], &analytic.magnitudes],
            ),
        ),
        ("metrics.csv".to_string(), metrics.to_csv()),
    ];
    finish(out, &loaded, "blackstart-check", files)
}

fn consistency(spec: &str, out: Option<&Path>, tolerance: f64) -> Outcome {
    let loaded = load(spec, None)?;
    let (scenario, _) = loaded.file.resolve()?;
    let mut topo = scenario.topology.clone();
    for ev in &scenario.events {
        topo = dvoc::network::apply_event(&topo, &ev.event)?.topology;
    }
    let mut set_points: Vec<SetPoint> = scenario.inverters.iter().map(|i| SetPoint::from(&i.controller)).collect();
    for ev in &scenario.events {
        if let dvoc::Event::SetPoint { inverter, p_star, q_star, v_star } = ev.event {
            let sp = &mut set_points[inverter];
            sp.p_star = p_star.unwrap_or(sp.p_star);
            sp.q_star = q_star.unwrap_or(sp.q_star);
            sp.v_star = v_star.unwrap_or(sp.v_star);
        }
    }
    let report = check_setpoint_consistency(&topo, scenario.network_omega, &set_points, tolerance)?;
    let status = match report.status {
        ConsistencyStatus::Consistent => "consistent",
        ConsistencyStatus::Inconsistent => "inconsistent",
        ConsistencyStatus::Unsolved => "unsolved",
    };
    println!(
        "{}",
        json!({
            "status": status,
            "residual": report.residual,
            "residual_pu": report.residual_pu,
            "power_base": report.power_base,
            "angles_rad": report.angles,
            "iterations": report.iterations,
        })
    );
    if let Some(out) = out {
        let mut metrics = Metrics::default();
        metrics.push_text("status", "all", status);
        metrics.push("residual", "all", report.residual);
        metrics.push("residual_pu", "all", report.residual_pu);
        metrics.push("power_base", "all", report.power_base);
        for (inv, a) in scenario.inverters.iter().zip(&report.angles) {
            metrics.push("angle_rad", &inv.id, *a);
        }
        finish(out, &loaded, "consistency", vec![("metrics.csv".into(), metrics.to_csv())])?;
    }
    Ok(())
}

fn list_scenarios() -> Outcome {
    for (name, description) in BUILTINS {
        println!("{name:<12} {description}");
    }
    println!("{:<12} alias of paper-fig4", "blackstart");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out, sync_threshold, overrides } => {
            simulate(scenario, out, *sync_threshold, overrides)
        }
        Command::DroopSweep { scenario, axis, range, out, overrides } => {
            droop_sweep(scenario, *axis, range, out, overrides)
        }
        Command::BlackstartCheck { scenario, out, inverter, overrides } => {
            blackstart_check(scenario, out, *inverter, overrides)
        }
        Command::Consistency { scenario, out, tolerance } => consistency(scenario, out.as_deref(), *tolerance),
        Command::ListScenarios => list_scenarios(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.summary());
            ExitCode::from(f.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0:1:3").ok(), Some(vec![0.0, 0.5, 1.0]));
        assert_eq!(parse_range("0.2:0.2:1").ok(), Some(vec![0.2]));
        for bad in ["0:1", "1:0:3", "a:b:c", "0:1:0"] {
            assert!(parse_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Core(Error::Schema(vec![])).exit_code(), 2);
        assert_eq!(
            Failure::Core(Error::NonFinite { time: 0.0, inverter: "a".into(), magnitude: f64::NAN }).exit_code(),
            3
        );
        assert_eq!(Failure::Usage("x".into()).exit_code(), 2);
    }

    #[test]
    fn csv_uses_round_trip_formatting() {
        let mut m = Metrics::default();
        m.push("x", "a", 0.1 + 0.2);
        let text = m.to_csv();
        assert_eq!(text, "metric,inverter,value\nx,a,0.30000000000000004\n");
    }
}
