//! Closed-form oracles and trace post-processing.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::{droop_approx_freq, droop_approx_vmag_ss, droop_linearized_vmag_ss, DvocParams};
use crate::error::{Error, Result};
use crate::network::{QuasiStaticNetwork, Topology};
use crate::sim::{run_many, Controller, InitialCondition, Scenario, SimConfig, Trace};

/// Analytic black-start amplitude samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackStartCurve {
    pub times: Vec<f64>,
    pub magnitudes: Vec<f64>,
    /// Integration constant `‖v(0)‖/√|‖v(0)‖² − v*²|`; infinite when `v0 = v*`.
    pub h0: f64,
}

/// Solution of `d‖v‖/dt = (ηα/v*²)(v*² − ‖v‖²)‖v‖` from `v0` at `t = 0`.
pub fn blackstart_magnitude(t: f64, v0: f64, v_star: f64, eta_alpha: f64) -> f64 {
    let y0 = v0 / v_star;
    // y(t)⁻² = 1 + c e^{−2ηαt}, c = (1 − y0²)/y0² (signed, so v0 > v* works too)
    let c = (1.0 - y0 * y0) / (y0 * y0);
    v_star / (1.0 + c * (-2.0 * eta_alpha * t).exp()).sqrt()
}

pub fn blackstart_analytic(v0: f64, params: &DvocParams, times: &[f64]) -> Result<BlackStartCurve> {
    params.validate()?;
    if v0 == 0.0 {
        return Err(Error::Degenerate(
            "v0 = 0 stays at the origin for all time".into(),
        ));
    }
    if !(v0 > 0.0 && v0.is_finite()) {
        return Err(Error::InvalidParams(format!("v0 must be > 0, got {v0}")));
    }
    let v_star = params.v_star;
    if v0 == v_star {
        return Ok(BlackStartCurve {
            times: times.to_vec(),
            magnitudes: vec![v_star; times.len()],
            h0: f64::INFINITY,
        });
    }
    let h0 = v0 / (v0 * v0 - v_star * v_star).abs().sqrt();
    let ea = params.eta * params.alpha;
    Ok(BlackStartCurve {
        times: times.to_vec(),
        magnitudes: times
            .iter()
            .map(|&t| blackstart_magnitude(t, v0, v_star, ea))
            .collect(),
        h0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlackStartComparison {
    pub max_rel_deviation: f64,
    /// Time at which the analytic curve is anchored (first sample ≥ 5% of `v*`).
    pub t_anchor: f64,
    /// Time the envelope first reaches 95% of `v*`.
    pub t_rise_end: f64,
}

/// Largest relative deviation of the recorded envelope of `inverter` from the
/// analytic curve over the 5%–95% rise. `None` when there is no such rise.
pub fn blackstart_compare(trace: &Trace, inverter: usize) -> Result<Option<BlackStartComparison>> {
    let col = trace
        .inverters
        .get(inverter)
        .ok_or_else(|| Error::Analysis(format!("no inverter {inverter} in trace")))?;
    let params = match col.controller {
        Controller::Dvoc(p) => p,
        Controller::Droop(_) => {
            return Err(Error::Analysis("black-start oracle needs a dVOC inverter".into()))
        }
    };
    let v_star = params.v_star;
    if col.vmag.first().is_none_or(|&v| v >= 0.05 * v_star) {
        return Ok(None);
    }
    let Some(start) = col.vmag.iter().position(|&v| v >= 0.05 * v_star) else {
        return Ok(None);
    };
    let Some(len) = col.vmag[start..].iter().position(|&v| v >= 0.95 * v_star) else {
        return Ok(None);
    };
    let end = start + len;
    let (t0, v0) = (trace.time[start], col.vmag[start]);
    let ea = params.eta * params.alpha;
    let max_rel_deviation = (start..=end)
        .map(|k| {
            let a = blackstart_magnitude(trace.time[k] - t0, v0, v_star, ea);
            (col.vmag[k] - a).abs() / a
        })
        .fold(0.0, f64::max);
    Ok(Some(BlackStartComparison {
        max_rel_deviation,
        t_anchor: t0,
        t_rise_end: trace.time[end],
    }))
}

fn unwrap_angles(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    let mut prev = 0.0;
    for (k, (&x, &y)) in a.iter().zip(b).enumerate() {
        let raw = y.atan2(x);
        let th = if k == 0 {
            raw
        } else {
            let d = (raw - prev + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            prev + d
        };
        out.push(th);
        prev = th;
    }
    out
}

fn window(trace: &Trace, t_from: f64, t_to: f64) -> Result<(usize, usize)> {
    if !(t_from < t_to) || trace.is_empty() {
        return Err(Error::Analysis(format!("empty window [{t_from}, {t_to}]")));
    }
    let s = trace.index_at(t_from);
    let e = trace.index_at(t_to + 0.5 * trace.sample_dt).min(trace.len());
    if e < s + 3 {
        return Err(Error::Analysis(format!(
            "window [{t_from}, {t_to}] holds fewer than 3 samples"
        )));
    }
    Ok((s, e))
}

/// Mean of `dθ/dt` over `[t_from, t_to]` for every inverter, by central differences.
pub fn estimate_frequency(trace: &Trace, t_from: f64, t_to: f64) -> Result<Vec<f64>> {
    let (s, e) = window(trace, t_from, t_to)?;
    let h = trace.sample_dt;
    trace
        .inverters
        .iter()
        .map(|col| {
            let floor = 1e-6 * col.controller.v_star();
            if col.vmag[s..e].iter().any(|&m| m < floor) {
                return Err(Error::Analysis(format!(
                    "amplitude of '{}' too small for a phase estimate",
                    col.id
                )));
            }
            let th = unwrap_angles(&col.v_alpha[s..e], &col.v_beta[s..e]);
            let n = th.len();
            let sum: f64 = (1..n - 1).map(|k| (th[k + 1] - th[k - 1]) / (2.0 * h)).sum();
            Ok(sum / (n - 2) as f64)
        })
        .collect()
}

/// Time after `t_from` at which all pairwise voltage differences fall below
/// `threshold·v*` and stay there for one nominal period.
pub fn sync_time(trace: &Trace, threshold: f64, t_from: f64) -> Result<Option<f64>> {
    if trace.inverters.len() < 2 {
        return Err(Error::Analysis("sync time needs at least two inverters".into()));
    }
    let v_star = trace.inverters[0].controller.v_star();
    let bound = threshold * v_star;
    let hold = (trace.nominal_period() / trace.sample_dt).ceil() as usize;
    let start = trace.index_at(t_from);
    let mut run_start = None;
    for k in start..trace.len() {
        if max_pairwise_distance(trace, k) < bound {
            let first = *run_start.get_or_insert(k);
            if k - first >= hold {
                return Ok(Some(trace.time[first] - trace.time[start]));
            }
        } else {
            run_start = None;
        }
    }
    Ok(None)
}

fn max_pairwise_distance(trace: &Trace, k: usize) -> f64 {
    let vs: Vec<_> = trace.inverters.iter().map(|c| c.voltage(k)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            worst = worst.max((vs[i] - vs[j]).norm());
        }
    }
    worst
}

/// Averages over the final window and whether it counts as settled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub settled: bool,
    pub omega: Vec<f64>,
    pub vmag: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Largest peak-to-peak amplitude drift over the window, relative to `v*`.
    pub amplitude_drift: f64,
    /// Largest peak-to-peak drift of per-period frequency, relative to `ω₀`.
    pub frequency_drift: f64,
}

pub const STEADY_PERIODS: usize = 5;
pub const STEADY_TOLERANCE: f64 = 1e-4;

/// Steady-state check on the last [`STEADY_PERIODS`] nominal periods.
pub fn steady_state(trace: &Trace) -> Result<SteadyState> {
    let period = trace.nominal_period();
    let t_end = *trace
        .time
        .last()
        .ok_or_else(|| Error::Analysis("empty trace".into()))?;
    let t_from = t_end - STEADY_PERIODS as f64 * period;
    if t_from < 0.0 {
        return Err(Error::Analysis("trace shorter than the steady-state window".into()));
    }
    let (s, e) = window(trace, t_from, t_end)?;
    let omega = estimate_frequency(trace, t_from, t_end)?;
    let mut per_period: Vec<Vec<f64>> = Vec::new();
    for m in 0..STEADY_PERIODS {
        let a = t_from + m as f64 * period;
        per_period.push(estimate_frequency(trace, a, a + period)?);
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let mut amplitude_drift: f64 = 0.0;
    let mut frequency_drift: f64 = 0.0;
    for (i, col) in trace.inverters.iter().enumerate() {
        let w = &col.vmag[s..e];
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        amplitude_drift = amplitude_drift.max((hi - lo) / col.controller.v_star());
        let (lo, hi) = per_period
            .iter()
            .map(|f| f[i])
            .fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
        frequency_drift = frequency_drift.max((hi - lo) / col.controller.omega0());
    }
    Ok(SteadyState {
        settled: amplitude_drift < STEADY_TOLERANCE && frequency_drift < STEADY_TOLERANCE,
        omega,
        vmag: trace.inverters.iter().map(|c| mean(&c.vmag[s..e])).collect(),
        p: trace.inverters.iter().map(|c| mean(&c.p[s..e])).collect(),
        q: trace.inverters.iter().map(|c| mean(&c.q[s..e])).collect(),
        amplitude_drift,
        frequency_drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncMetrics {
    pub sync_time: Option<f64>,
    /// Largest pairwise voltage difference at the last sample (V).
    pub residual: f64,
    /// Each inverter's share of the total active power.
    pub sharing_ratios: Vec<f64>,
    pub steady_freq: Vec<f64>,
    pub steady_amplitudes: Vec<f64>,
    pub steady_p: Vec<f64>,
    pub steady_q: Vec<f64>,
    pub settled: bool,
}

pub fn sync_metrics(trace: &Trace, threshold: f64, t_from: f64) -> Result<SyncMetrics> {
    let ss = steady_state(trace)?;
    let total: f64 = ss.p.iter().sum();
    let sync = if trace.inverters.len() >= 2 {
        sync_time(trace, threshold, t_from)?
    } else {
        None
    };
    Ok(SyncMetrics {
        sync_time: sync,
        residual: max_pairwise_distance(trace, trace.len() - 1),
        sharing_ratios: ss
            .p
            .iter()
            .map(|p| if total != 0.0 { p / total } else { f64::NAN })
            .collect(),
        steady_freq: ss.omega.clone(),
        steady_amplitudes: ss.vmag.clone(),
        steady_p: ss.p,
        steady_q: ss.q,
        settled: ss.settled,
    })
}

/// Stationary magnitude `‖v‖` with `d‖v‖/dt = 0` under measured powers `(p, q)`.
///
/// Takes the largest root in `[0.2 v*, 2 v*]`: a downward scan brackets it,
/// bisection narrows it and Newton polishes.
pub fn stationary_magnitude(params: &DvocParams, p: f64, q: f64) -> Result<f64> {
    let vs = params.v_star;
    let vs2 = vs * vs;
    let (s, c) = params.kappa.sin_cos();
    let c1 = (c * params.p_star + s * params.q_star) / vs2;
    let c0 = c * p + s * q;
    let a = params.alpha;
    // r²·(cosκ·a + sinκ·b + α(1 − r²/v*²))
    let g = |r: f64| r * r * c1 - c0 + a * r * r * (1.0 - r * r / vs2);
    let dg = |r: f64| 2.0 * r * c1 + 2.0 * a * r - 4.0 * a * r * r * r / vs2;
    let (lo_end, hi_end) = (0.2 * vs, 2.0 * vs);
    const SCAN: usize = 400;
    let mut hi = hi_end;
    let mut g_hi = g(hi);
    if g_hi > 0.0 {
        return Err(Error::Analysis(format!(
            "no stationary magnitude below 2 v* for p = {p}, q = {q}"
        )));
    }
    let mut bracket = None;
    for k in 1..=SCAN {
        let r = hi_end - (hi_end - lo_end) * k as f64 / SCAN as f64;
        let gr = g(r);
        if gr >= 0.0 {
            bracket = Some((r, hi));
            break;
        }
        hi = r;
        g_hi = gr;
    }
    let _ = g_hi;
    let (mut lo, mut hi) = bracket.ok_or_else(|| {
        Error::Analysis(format!(
            "no stationary magnitude in [0.2 v*, 2 v*] for p = {p}, q = {q}"
        ))
    })?;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut r = 0.5 * (lo + hi);
    for _ in 0..4 {
        let d = dg(r);
        if d == 0.0 {
            break;
        }
        let next = r - g(r) / d;
        if !(next.is_finite() && (next - r).abs() < 1e-6 * vs) {
            break;
        }
        r = next;
    }
    Ok(r)
}

/// Frequency of the stationary rotation at magnitude `r` under powers `(p, q)`.
pub fn stationary_frequency(params: &DvocParams, p: f64, q: f64, r: f64) -> f64 {
    let vs2 = params.v_star * params.v_star;
    let r2 = r * r;
    let (s, c) = params.kappa.sin_cos();
    let a = params.p_star / vs2 - p / r2;
    let b = params.q_star / vs2 - q / r2;
    params.omega0 + params.eta * (s * a - c * b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DroopAxis {
    /// Frequency against active power.
    P,
    /// Magnitude against reactive power.
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    ClosedForm,
    /// First-order approximation overlay.
    Linear,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopCurve {
    pub axis: DroopAxis,
    pub provenance: Provenance,
    /// `(p, ω)` or `(q, ‖v‖)`, abscissa strictly increasing.
    pub points: Vec<(f64, f64)>,
    /// Abscissae (requested grid values) dropped because they failed.
    pub excluded: Vec<f64>,
}

/// Exact stationary curve plus two linear overlays.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormSweep {
    pub exact: DroopCurve,
    /// `ω₀ + (η/v*²)(p* − p)` or `v* + (q* − q)/(α v*)`.
    pub linear: DroopCurve,
    /// Taylor expansion of the exact magnitude (the frequency overlay is unchanged).
    pub taylor: DroopCurve,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Analysis("empty sweep grid".into()));
    }
    if grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Analysis("sweep grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Ordinate of the exact stationary curve at one abscissa; the other power
/// is held at its set-point.
pub fn closed_form_point(params: &DvocParams, axis: DroopAxis, x: f64) -> Result<f64> {
    match axis {
        DroopAxis::P => {
            let r = stationary_magnitude(params, x, params.q_star)?;
            Ok(stationary_frequency(params, x, params.q_star, r))
        }
        DroopAxis::Q => stationary_magnitude(params, params.p_star, x),
    }
}

pub fn droop_sweep_closed_form(params: &DvocParams, axis: DroopAxis, grid: &[f64]) -> Result<ClosedFormSweep> {
    params.validate()?;
    check_grid(grid)?;
    let mut exact = Vec::new();
    let mut linear = Vec::new();
    let mut taylor = Vec::new();
    let mut excluded = Vec::new();
    for &x in grid {
        match closed_form_point(params, axis, x) {
            Ok(y) => {
                exact.push((x, y));
                let (l, t) = match axis {
                    DroopAxis::P => {
                        let w = droop_approx_freq(x, params);
                        (w, w)
                    }
                    DroopAxis::Q => (
                        droop_approx_vmag_ss(x, params),
                        droop_linearized_vmag_ss(x, params),
                    ),
                };
                linear.push((x, l));
                taylor.push((x, t));
            }
            Err(_) => excluded.push(x),
        }
    }
    let curve = |provenance, points| DroopCurve {
        axis,
        provenance,
        points,
        excluded: excluded.clone(),
    };
    Ok(ClosedFormSweep {
        exact: curve(Provenance::ClosedForm, exact),
        linear: curve(Provenance::Linear, linear),
        taylor: curve(Provenance::Linear, taylor),
    })
}

/// Conductance of load 0 for which the inverter delivers `p` at magnitude `v`.
fn calibrate_load(topo: &Topology, omega: f64, v: f64, p: f64) -> Result<f64> {
    let mut topo = topo.clone();
    let vs = crate::control::AlphaBetaVec::new(v, 0.0);
    let mut g = p / (v * v);
    for _ in 0..100 {
        if g == 0.0 {
            break;
        }
        topo.loads[0].conductance = g;
        let i = QuasiStaticNetwork::new(&topo, omega)?.currents(&[vs])[0];
        let (delivered, _) = crate::network::measure_power(vs, i);
        if !(delivered > 0.0) {
            return Err(Error::Analysis("load is not reachable from the inverter".into()));
        }
        let next = g * p / delivered;
        if (next - g).abs() <= 1e-15 * g {
            break;
        }
        g = next;
    }
    Ok(g)
}

/// Scenario variant realizing one sweep point on a single-inverter template.
///
/// Axis `P` sizes load 0 so the inverter delivers `x` at `v*`. Axis `Q` keeps the template load
/// and adds a reactive element at the inverter: extra shunt capacitance for
/// `x < 0`, an inductor to the return for `x > 0`.
pub fn droop_sweep_variant(template: &Scenario, axis: DroopAxis, x: f64) -> Result<Scenario> {
    if template.inverters.len() != 1 || template.topology.loads.is_empty() {
        return Err(Error::Analysis(
            "sweep template needs exactly one inverter and a load node".into(),
        ));
    }
    let Controller::Dvoc(params) = template.inverters[0].controller else {
        return Err(Error::Analysis("sweep template inverter must use dVOC".into()));
    };
    let vs2 = params.v_star * params.v_star;
    let omega = template.network_omega;
    let mut sc = template.clone();
    sc.name = format!("{}-{:?}={x}", template.name, axis);
    match axis {
        DroopAxis::P => {
            if x < 0.0 {
                return Err(Error::Analysis("active-power sweep needs p >= 0".into()));
            }
            sc.topology.loads[0].conductance = calibrate_load(&sc.topology, omega, params.v_star, x)?;
        }
        DroopAxis::Q => {
            if x < 0.0 {
                sc.topology.inverters[0].shunt_c += -x / (omega * vs2);
            } else if x > 0.0 {
                sc.topology.branches.push(crate::network::Branch {
                    id: "sweep-reactor".into(),
                    from: crate::network::NodeRef::Inverter(0),
                    to: crate::network::NodeRef::Ground,
                    r: 0.0,
                    l: vs2 / (omega * x),
                    connected: true,
                });
            }
        }
    }
    sc.inverters[0].initial = InitialCondition::Voltage {
        magnitude: params.v_star,
        theta: 0.0,
    };
    Ok(sc)
}

/// One simulation per grid point (in parallel); steady `(p, ω)` or `(q, ‖v‖)`.
/// Points that fail or do not settle are listed in `excluded`.
pub fn droop_sweep_simulated(
    template: &Scenario,
    axis: DroopAxis,
    grid: &[f64],
    config: &SimConfig,
) -> Result<DroopCurve> {
    check_grid(grid)?;
    let jobs = grid
        .iter()
        .map(|&x| droop_sweep_variant(template, axis, x).map(|s| (s, *config)))
        .collect::<Result<Vec<_>>>()?;
    let traces = run_many(&jobs);
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for (&x, tr) in grid.iter().zip(traces) {
        let point = tr.and_then(|tr| steady_state(&tr)).ok().filter(|ss| ss.settled);
        match point {
            Some(ss) => points.push(match axis {
                DroopAxis::P => (ss.p[0], ss.omega[0]),
                DroopAxis::Q => (ss.q[0], ss.vmag[0]),
            }),
            None => excluded.push(x),
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|b, a| b.0 <= a.0);
    Ok(DroopCurve {
        axis,
        provenance: Provenance::Simulated,
        points,
        excluded,
    })
}

/// How far measured steady values are from the stationary conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityResidual {
    /// `|‖v‖ − ‖v‖_ss(p, q)| / v*`.
    pub magnitude: f64,
    /// `|ω − ω_ss(p, q, ‖v‖)| / ω₀`.
    pub frequency: f64,
}

pub fn stationarity_residual(
    params: &DvocParams,
    p: f64,
    q: f64,
    vmag: f64,
    omega: f64,
) -> Result<StationarityResidual> {
    let r = stationary_magnitude(params, p, q)?;
    Ok(StationarityResidual {
        magnitude: (vmag - r).abs() / params.v_star,
        frequency: (omega - stationary_frequency(params, p, q, vmag)).abs() / params.omega0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsistencyStatus {
    Consistent,
    /// The solver converged to a minimum that leaves a residual.
    Inconsistent,
    /// The solver did not converge.
    Unsolved,
}

/// Target of one inverter in the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetPoint {
    pub p_star: f64,
    pub q_star: f64,
    pub v_star: f64,
}

impl From<&Controller> for SetPoint {
    fn from(c: &Controller) -> Self {
        Self {
            p_star: c.p_star(),
            q_star: c.q_star(),
            v_star: c.v_star(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub status: ConsistencyStatus,
    /// Euclidean norm of all `(p_i − p_i*, q_i − q_i*)` (W, var).
    pub residual: f64,
    /// `residual` divided by the power base.
    pub residual_pu: f64,
    pub power_base: f64,
    /// Angles relative to inverter 0 (rad).
    pub angles: Vec<f64>,
    pub iterations: usize,
}

pub const CONSISTENCY_TOLERANCE: f64 = 1e-6;

fn powers(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    (0..v.len())
        .map(|i| {
            let current: Complex64 = (0..v.len()).map(|k| y[(i, k)] * v[k]).sum();
            v[i] * current.conj()
        })
        .collect()
}

fn mismatch(s: &[Complex64], set: &[SetPoint]) -> DVector<f64> {
    DVector::from_iterator(
        2 * s.len(),
        s.iter()
            .zip(set)
            .flat_map(|(s, t)| [s.re - t.p_star, s.im - t.q_star]),
    )
}

/// Fixes each magnitude at `v*` and fits the relative angles to the power
/// set-points by Levenberg–Marquardt on the quasi-static network.
pub fn check_setpoint_consistency(
    topo: &Topology,
    omega: f64,
    set_points: &[SetPoint],
    tolerance: f64,
) -> Result<ConsistencyReport> {
    let n = topo.inverters.len();
    if set_points.len() != n {
        return Err(Error::Analysis(format!(
            "{} set-points for {n} inverters",
            set_points.len()
        )));
    }
    let power_base = set_points
        .iter()
        .flat_map(|s| [s.p_star.abs(), s.q_star.abs()])
        .chain(topo.loads.iter().map(|l| {
            let v = set_points.iter().map(|s| s.v_star).fold(0.0, f64::max);
            l.conductance * v * v
        }))
        .fold(1.0, f64::max);
    if n == 0 {
        return Ok(ConsistencyReport {
            status: ConsistencyStatus::Consistent,
            residual: 0.0,
            residual_pu: 0.0,
            power_base,
            angles: vec![],
            iterations: 0,
        });
    }
    let y = QuasiStaticNetwork::new(topo, omega)?.reduced;
    let voltages = |theta: &[f64]| -> Vec<Complex64> {
        set_points
            .iter()
            .zip(std::iter::once(&0.0).chain(theta))
            .map(|(s, &t)| Complex64::from_polar(s.v_star, t))
            .collect()
    };
    let mut theta = vec![0.0; n - 1];
    let mut v = voltages(&theta);
    let mut s = powers(&y, &v);
    let mut r = mismatch(&s, set_points);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = n == 1;
    let scale = power_base * power_base;
    while !converged && iterations < 200 {
        iterations += 1;
        // ∂S_i/∂θ_k = −j V_i conj(Y_ik V_k) for k ≠ i, j S_i − j V_i conj(Y_ii V_i) for k = i
        let mut jac = DMatrix::<f64>::zeros(2 * n, n - 1);
        let j = Complex64::i();
        for i in 0..n {
            for k in 1..n {
                let d = if i == k {
                    j * s[i] - j * v[i] * (y[(i, i)] * v[i]).conj()
                } else {
                    -j * v[i] * (y[(i, k)] * v[k]).conj()
                };
                jac[(2 * i, k - 1)] = d.re;
                jac[(2 * i + 1, k - 1)] = d.im;
            }
        }
        let jt = jac.transpose();
        let grad = &jt * &r;
        if grad.norm() <= 1e-12 * scale {
            converged = true;
            break;
        }
        let jtj = &jt * &jac;
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..n - 1 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12 * scale);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
            let tv = voltages(&trial);
            let ts = powers(&y, &tv);
            let tr = mismatch(&ts, set_points);
            let tc = tr.norm_squared();
            if tc < cost {
                let small = step.amax() < 1e-13 || (cost - tc) <= 1e-15 * cost;
                theta = trial;
                v = tv;
                s = ts;
                r = tr;
                cost = tc;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: a (local) minimum.
            converged = true;
        }
        if cost.sqrt() / power_base < 1e-3 * tolerance {
            converged = true;
        }
    }
    let residual = cost.sqrt();
    let residual_pu = residual / power_base;
    let status = if residual_pu < tolerance {
        ConsistencyStatus::Consistent
    } else if converged {
        ConsistencyStatus::Inconsistent
    } else {
        ConsistencyStatus::Unsolved
    };
    let mut angles = vec![0.0];
    angles.extend(theta);
    Ok(ConsistencyReport {
        status,
        residual,
        residual_pu,
        power_base,
        angles,
        iterations,
    })
}

/// Set-points that a quasi-static network realizes exactly at the given
/// magnitudes and angles.
pub fn forward_power_flow(
    topo: &Topology,
    omega: f64,
    magnitudes: &[f64],
    angles: &[f64],
) -> Result<Vec<SetPoint>> {
    let y = QuasiStaticNetwork::new(topo, omega)?.reduced;
    if magnitudes.len() != y.nrows() || angles.len() != y.nrows() {
        return Err(Error::Analysis("magnitudes/angles do not match inverter count".into()));
    }
    let v: Vec<Complex64> = magnitudes
        .iter()
        .zip(angles)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    Ok(powers(&y, &v)
        .into_iter()
        .zip(magnitudes)
        .map(|(s, &m)| SetPoint {
            p_star: s.re,
            q_star: s.im,
            v_star: m,
        })
        .collect())
}
