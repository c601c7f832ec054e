//! Diagonal covariance, exact sampling of the stochastic convolution
//! `W_A(t) = ∫₀ᵗ e^{(t−r)A} √G dW(r)`, and numeric checks of the trace and
//! `L^q` conditions on `G`.

pub mod rng;

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::{gamma, gamma_lr};

use crate::error::{check_len, Error, Result};
use crate::spectral::{sup_norm, EigenSystem, Scratch};
pub use rng::{Purpose, RngStream, MODE_BLOCK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `g_k = 1`.
    White,
    /// `g_k = k^{-ρ}`.
    PowerDecay { exponent: f64 },
    /// Arbitrary weights with no tail model.
    Custom,
}

/// Diagonal covariance `G e_k = g_k e_k` with `g_k = amplitude · base_k`, plus
/// the exponents used by the trace and `L^q` checkers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: NoiseKind,
    pub amplitude: f64,
    weights: Vec<f64>,
    pub delta: f64,
    pub delta1: f64,
    pub theta: f64,
    pub q: f64,
}

impl CovarianceSpec {
    pub fn white(modes: usize) -> Self {
        Self::from_kind(modes, NoiseKind::White, 1.0)
    }

    pub fn power_decay(modes: usize, exponent: f64) -> Self {
        Self::from_kind(modes, NoiseKind::PowerDecay { exponent }, 1.0)
    }

    /// White noise with zero amplitude: every weight vanishes and the tail model is exact.
    pub fn zero(modes: usize) -> Self {
        Self::from_kind(modes, NoiseKind::White, 0.0)
    }

    pub fn custom(weights: Vec<f64>) -> Result<Self> {
        if let Some(k) = weights.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::invalid("weights", format!("g_{} must be finite and ≥ 0", k + 1)));
        }
        Ok(Self {
            kind: NoiseKind::Custom,
            amplitude: 1.0,
            weights,
            delta: 0.2,
            delta1: 0.2,
            theta: 0.3,
            q: 5.0,
        })
    }

    pub fn from_kind(modes: usize, kind: NoiseKind, amplitude: f64) -> Self {
        let weights = (1..=modes)
            .map(|k| amplitude * base_weight(kind, k))
            .collect();
        Self {
            kind,
            amplitude,
            weights,
            delta: 0.2,
            delta1: 0.2,
            theta: 0.3,
            q: 5.0,
        }
    }

    pub fn with_trace_exponents(mut self, delta: f64, delta1: f64) -> Self {
        self.delta = delta;
        self.delta1 = delta1;
        self
    }

    pub fn with_g1_exponents(mut self, theta: f64, q: f64) -> Self {
        self.theta = theta;
        self.q = q;
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn modes(&self) -> usize {
        self.weights.len()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|g| *g == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::invalid("amplitude", "must be finite and ≥ 0"));
        }
        if let NoiseKind::PowerDecay { exponent } = self.kind {
            if !exponent.is_finite() {
                return Err(Error::invalid("exponent", "must be finite"));
            }
        }
        if self.weights.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::invalid("weights", "must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Decay exponent `ρ` of `g_k ≍ k^{-ρ}` when a tail model exists.
    /// `Some(∞)` stands for a vanishing tail.
    fn tail_exponent(&self) -> Option<f64> {
        if self.amplitude == 0.0 && self.kind != NoiseKind::Custom {
            return Some(f64::INFINITY);
        }
        match self.kind {
            NoiseKind::White => Some(0.0),
            NoiseKind::PowerDecay { exponent } => Some(exponent),
            NoiseKind::Custom => None,
        }
    }
}

fn base_weight(kind: NoiseKind, k: usize) -> f64 {
    match kind {
        NoiseKind::White | NoiseKind::Custom => 1.0,
        NoiseKind::PowerDecay { exponent } => (k as f64).powf(-exponent),
    }
}

/// `Σ_{k>N} k^p ≤ ∫_N^∞ x^p dx` for `p < -1`; `None` when the series diverges.
fn integral_test_tail(n: usize, p: f64) -> Option<f64> {
    if p == f64::NEG_INFINITY {
        return Some(0.0);
    }
    (p < -1.0).then(|| (n as f64).powf(p + 1.0) / (-p - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    /// Partial sums over `k ≤ N` of the two integrals.
    pub first_partial: f64,
    pub second_partial: f64,
    pub finite_partial_sum: f64,
    /// Integral-test bound on `Σ_{k>N}`; infinite when the series diverges,
    /// `None` without a tail model.
    pub tail_bound: Option<f64>,
    pub verdict: Verdict,
}

/// Checks `∫₀ᵀ Σ g_k λ_k^{2δ} e^{−2λ_k r} dr < ∞` and
/// `∫₀¹ r^{−2δ₁} Σ g_k e^{−2λ_k r} dr < ∞` in per-mode closed form.
pub fn check_trace_condition(
    spec: &CovarianceSpec,
    horizon: f64,
    es: &EigenSystem,
) -> Result<TraceReport> {
    check_len(es.modes(), spec.modes())?;
    spec.validate()?;
    let (delta, delta1) = (spec.delta, spec.delta1);
    if !(delta > 0.0 && delta1 > 0.0) {
        return Err(Error::invalid("delta", "δ and δ₁ must be positive"));
    }
    if !(horizon > 0.0) {
        return Err(Error::invalid("T", "horizon must be positive"));
    }

    let first_partial: f64 = spec
        .weights()
        .iter()
        .zip(es.lambdas())
        .map(|(g, l)| g * l.powf(2.0 * delta) * -(-2.0 * l * horizon).exp_m1() / (2.0 * l))
        .sum();

    // ∫₀¹ r^{-2δ₁} e^{-2λr} dr = (2λ)^{2δ₁-1} Γ(1-2δ₁) P(1-2δ₁, 2λ), finite iff δ₁ < 1/2.
    let s = 1.0 - 2.0 * delta1;
    let any_noise = spec.weights().iter().any(|g| *g > 0.0);
    let second_partial = if s > 0.0 {
        let gs = gamma(s);
        spec.weights()
            .iter()
            .zip(es.lambdas())
            .map(|(g, l)| g * (2.0 * l).powf(-s) * gs * gamma_lr(s, 2.0 * l))
            .sum()
    } else if any_noise {
        f64::INFINITY
    } else {
        0.0
    };

    let n = es.modes();
    let tail_bound = spec.tail_exponent().map(|rho| {
        if rho == f64::INFINITY {
            return 0.0;
        }
        // g_k λ_k^{2δ}/(2λ_k) = amp π^{4δ-2}/2 · k^{4δ-2-ρ}
        let first = integral_test_tail(n, 4.0 * delta - 2.0 - rho)
            .map(|t| spec.amplitude * PI.powf(4.0 * delta - 2.0) / 2.0 * t);
        // g_k (2λ_k)^{2δ₁-1} Γ(1-2δ₁) = amp (2π²)^{-s} Γ(s) k^{-2s-ρ}
        let second = (s > 0.0)
            .then(|| integral_test_tail(n, -2.0 * s - rho))
            .flatten()
            .map(|t| spec.amplitude * (2.0 * PI * PI).powf(-s) * gamma(s) * t);
        match (first, second) {
            (Some(a), Some(b)) => a + b,
            _ => f64::INFINITY,
        }
    });

    let finite_partial_sum = first_partial + second_partial;
    let verdict = match tail_bound {
        _ if !finite_partial_sum.is_finite() => Verdict::Violated,
        Some(t) if t.is_finite() => Verdict::Satisfied,
        Some(_) => Verdict::Violated,
        None => Verdict::Inconclusive,
    };
    Ok(TraceReport {
        first_partial,
        second_partial,
        finite_partial_sum,
        tail_bound,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct G1Report {
    /// `‖(Σ_{k≤N} λ_k^{-2θ} g_k e_k²)^{1/2}‖_{L^q}` by quadrature.
    pub value: f64,
    /// The same norm with the pointwise tail bound `2 Σ_{k>N} λ_k^{-2θ} g_k` added under the root.
    pub upper_bound: Option<f64>,
    pub verdict: Verdict,
}

/// Checks `‖(Σ_k λ_k^{-2θ} g_k e_k(ξ)²)^{1/2}‖_{L^q} < ∞` for diagonal `G`.
pub fn check_g1(spec: &CovarianceSpec, es: &EigenSystem) -> Result<G1Report> {
    check_len(es.modes(), spec.modes())?;
    spec.validate()?;
    let (theta, q) = (spec.theta, spec.q);
    if !(theta >= 0.0 && q > 0.0) || 1.0 / (2.0 * q) + 2.0 * theta >= 1.0 {
        return Err(Error::invalid(
            "theta",
            format!("need θ ≥ 0, q > 0 and 1/(2q) + 2θ < 1, got θ = {theta}, q = {q}"),
        ));
    }

    let coeffs: Vec<f64> = spec
        .weights()
        .iter()
        .zip(es.lambdas())
        .map(|(g, l)| g * l.powf(-2.0 * theta))
        .collect();
    let density: Vec<f64> = es
        .grid_points()
        .iter()
        .map(|&xi| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * EigenSystem::basis_value(k + 1, xi).powi(2))
                .sum()
        })
        .collect();
    let lq = |shift: f64| -> f64 {
        let w = es.quadrature_weight();
        let integral: f64 = density.iter().map(|s| (s + shift).powf(q / 2.0)).sum::<f64>() * w;
        integral.powf(1.0 / q)
    };
    let value = lq(0.0);

    let n = es.modes();
    let tail = spec.tail_exponent().map(|rho| {
        if rho == f64::INFINITY {
            return Some(0.0);
        }
        integral_test_tail(n, -4.0 * theta - rho)
            .map(|t| 2.0 * spec.amplitude * PI.powf(-4.0 * theta) * t)
    });
    let (upper_bound, verdict) = match tail {
        Some(Some(t)) => (Some(lq(t)), Verdict::Satisfied),
        Some(None) => (Some(f64::INFINITY), Verdict::Violated),
        None => (None, Verdict::Inconclusive),
    };
    Ok(G1Report {
        value,
        upper_bound,
        verdict,
    })
}

/// `⟨W_A(t), e_k⟩` for each retained mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionState {
    pub time: f64,
    pub modes: Vec<f64>,
}

impl ConvolutionState {
    pub fn zero(modes: usize) -> Self {
        Self {
            time: 0.0,
            modes: vec![0.0; modes],
        }
    }
}

/// Per-mode decay `e^{-λΔt}` and innovation deviation
/// `√(g(1−e^{-2λΔt})/(2λ))` of the exact OU recursion at a fixed step.
#[derive(Clone, Debug, PartialEq)]
pub struct OuStep {
    pub dt: f64,
    pub decay: Vec<f64>,
    pub std_dev: Vec<f64>,
}

impl OuStep {
    pub fn new(es: &EigenSystem, spec: &CovarianceSpec, dt: f64) -> Result<Self> {
        check_len(es.modes(), spec.modes())?;
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "time step must be positive"));
        }
        let decay = es.lambdas().iter().map(|l| (-l * dt).exp()).collect();
        let std_dev = es
            .lambdas()
            .iter()
            .zip(spec.weights())
            .map(|(l, g)| (g * -(-2.0 * l * dt).exp_m1() / (2.0 * l)).sqrt())
            .collect();
        Ok(Self { dt, decay, std_dev })
    }

    /// `w ← e^{-λΔt} w + σ ξ`; `normals` must hold one standard normal per mode.
    pub fn advance(&self, state: &mut ConvolutionState, normals: &[f64]) {
        for ((w, (d, s)), z) in state
            .modes
            .iter_mut()
            .zip(self.decay.iter().zip(&self.std_dev))
            .zip(normals)
        {
            *w = d * *w + s * z;
        }
        state.time += self.dt;
    }
}

/// One exact OU step of the stochastic convolution, drawing its normals from
/// `stream` at counter `step`.
pub fn sample_convolution_step(
    state: &ConvolutionState,
    ou: &OuStep,
    stream: &RngStream,
    step: u64,
) -> ConvolutionState {
    let mut normals = vec![0.0; state.modes.len()];
    stream.fill_normals(step, &mut normals);
    let mut next = state.clone();
    ou.advance(&mut next, &normals);
    next
}

/// Cylindrical Wiener increments `√(g_k Δt) ξ_k`.
pub fn wiener_mode_increments(
    spec: &CovarianceSpec,
    dt: f64,
    stream: &RngStream,
    step: u64,
) -> Result<Vec<f64>> {
    if !(dt >= 0.0) {
        return Err(Error::invalid("dt", "time step must be non-negative"));
    }
    let mut out = vec![0.0; spec.modes()];
    stream.fill_normals(step, &mut out);
    for (z, g) in out.iter_mut().zip(spec.weights()) {
        *z *= (g * dt).sqrt();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionMoment {
    /// `max_t Ê|(−A)^δ W_A(t)|²` over the step grid.
    pub sup_estimate: f64,
    pub stderr_at_sup: f64,
    /// `Σ_k g_k λ_k^{2δ}(1−e^{−2λ_kT})/(2λ_k)`, the exact second moment at `T`.
    pub bound: f64,
    pub pass: bool,
}

/// Monte Carlo estimate of `sup_{t≤T} E|(−A)^δ W_A(t)|²` compared with its closed form.
pub fn estimate_convolution_moment(
    spec: &CovarianceSpec,
    es: &EigenSystem,
    delta: f64,
    horizon: f64,
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<ConvolutionMoment> {
    // The checker needs δ > 0; δ = 0 is dominated by any positive δ.
    let probe = spec.clone().with_trace_exponents(delta.max(1e-12), spec.delta1);
    let trace = check_trace_condition(&probe, horizon, es)?;
    if trace.verdict == Verdict::Violated {
        return Err(Error::TraceViolation(format!(
            "first trace integral diverges at δ = {delta}"
        )));
    }
    if paths < 2 || steps == 0 {
        return Err(Error::invalid("paths", "need at least 2 paths and 1 step"));
    }
    let ou = OuStep::new(es, spec, horizon / steps as f64)?;
    let weights: Vec<f64> = es.lambdas().iter().map(|l| l.powf(2.0 * delta)).collect();

    let per_path: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let stream = RngStream::new(seed, p, Purpose::Convolution);
            let mut state = ConvolutionState::zero(es.modes());
            let mut normals = vec![0.0; es.modes()];
            (0..steps as u64)
                .map(|n| {
                    stream.fill_normals(n, &mut normals);
                    ou.advance(&mut state, &normals);
                    state.modes.iter().zip(&weights).map(|(w, c)| c * w * w).sum()
                })
                .collect()
        })
        .collect();

    let m = paths as f64;
    let (mut sup_estimate, mut stderr_at_sup) = (0.0, 0.0);
    for n in 0..steps {
        let (mean, se) = mean_stderr(per_path.iter().map(|v| v[n]), m);
        if mean > sup_estimate {
            sup_estimate = mean;
            stderr_at_sup = se;
        }
    }
    let bound: f64 = spec
        .weights()
        .iter()
        .zip(es.lambdas())
        .zip(&weights)
        .map(|((g, l), c)| g * c * -(-2.0 * l * horizon).exp_m1() / (2.0 * l))
        .sum();
    Ok(ConvolutionMoment {
        sup_estimate,
        stderr_at_sup,
        bound,
        pass: sup_estimate <= bound * (1.0 + 3.0 / m.sqrt()),
    })
}

/// Mean and standard error of the mean, accumulated in iteration order.
pub(crate) fn mean_stderr(values: impl Iterator<Item = f64> + Clone, m: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / m;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (mean, (var / m).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub r: f64,
    pub exceedances: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FerniqueReport {
    pub rows: Vec<TailRow>,
    /// Fitted `ε` in `log P(sup|W_A|_∞ > r) ≤ a − εr²`; `None` when fewer than
    /// three informative points exist.
    pub epsilon: Option<f64>,
    pub epsilon_ci: Option<(f64, f64)>,
    /// Smallest `a` making the fitted envelope hold at every informative point.
    pub intercept: Option<f64>,
    pub fit_points: usize,
    /// No path exceeded any positive radius (vanishing noise).
    pub degenerate: bool,
    pub pass: bool,
}

/// Minimum exceedance count for a radius to enter the tail fit.
const MIN_EXCEEDANCES: usize = 5;

/// Empirical `P(sup_{t≤T} |W_A(t)|_{L^∞} > r)` on `r_grid`, with a weighted
/// least-squares fit of `log P` against `r²`.
#[allow(clippy::too_many_arguments)]
pub fn fernique_tail_probe(
    spec: &CovarianceSpec,
    es: &EigenSystem,
    horizon: f64,
    paths: usize,
    steps: usize,
    r_grid: &[f64],
    seed: u64,
) -> Result<FerniqueReport> {
    if paths < 2 || steps == 0 {
        return Err(Error::invalid("paths", "need at least 2 paths and 1 step"));
    }
    let ou = OuStep::new(es, spec, horizon / steps as f64)?;
    let sups: Vec<f64> = (0..paths as u64)
        .into_par_iter()
        .map_init(
            || (es.scratch(), vec![0.0; es.grid_size()]),
            |(scratch, grid): &mut (Scratch, Vec<f64>), p| {
                let stream = RngStream::new(seed, p, Purpose::Convolution);
                let mut state = ConvolutionState::zero(es.modes());
                let mut normals = vec![0.0; es.modes()];
                let mut sup: f64 = 0.0;
                for n in 0..steps as u64 {
                    stream.fill_normals(n, &mut normals);
                    ou.advance(&mut state, &normals);
                    es.synthesize(&state.modes, grid, scratch);
                    sup = sup.max(sup_norm(grid));
                }
                sup
            },
        )
        .collect();

    let m = paths as f64;
    let rows: Vec<TailRow> = r_grid
        .iter()
        .map(|&r| {
            // P(sup > r) is taken as 1 for r ≤ 0, also when sup ≡ 0.
            let exceedances = if r <= 0.0 {
                paths
            } else {
                sups.iter().filter(|s| **s > r).count()
            };
            TailRow {
                r,
                exceedances,
                probability: exceedances as f64 / m,
            }
        })
        .collect();

    let degenerate = rows.iter().all(|row| row.r <= 0.0 || row.exceedances == 0);
    let informative: Vec<&TailRow> = rows
        .iter()
        .filter(|row| row.r > 0.0 && row.exceedances >= MIN_EXCEEDANCES && row.exceedances < paths)
        .collect();

    let mut report = FerniqueReport {
        rows: rows.clone(),
        epsilon: None,
        epsilon_ci: None,
        intercept: None,
        fit_points: informative.len(),
        degenerate,
        pass: degenerate,
    };
    if degenerate || informative.len() < 3 {
        return Ok(report);
    }

    // Delta-method variance of log p̂ is (1−p)/(Mp).
    let xs: Vec<f64> = informative.iter().map(|r| r.r * r.r).collect();
    let ys: Vec<f64> = informative.iter().map(|r| r.probability.ln()).collect();
    let ws: Vec<f64> = informative
        .iter()
        .map(|r| m * r.probability / (1.0 - r.probability))
        .collect();
    let sw: f64 = ws.iter().sum();
    let xbar = ws.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ybar = ws.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = ws.iter().zip(&xs).map(|(w, x)| w * (x - xbar).powi(2)).sum();
    let sxy: f64 = ws
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let dof = (xs.len() - 2) as f64;
    let rss: f64 = ws
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (y - ybar - slope * (x - xbar)).powi(2))
        .sum();
    // Binomial weights fix the scale; inflate by the residual dispersion when it exceeds one.
    let dispersion = if dof > 0.0 { (rss / dof).max(1.0) } else { 1.0 };
    let se = (dispersion / sxx).sqrt();
    let t = if dof > 0.0 {
        StudentsT::new(0.0, 1.0, dof)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.96)
    } else {
        1.96
    };
    let epsilon = -slope;
    let intercept = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y + epsilon * x)
        .fold(f64::NEG_INFINITY, f64::max);
    report.epsilon = Some(epsilon);
    report.epsilon_ci = Some((epsilon - t * se, epsilon + t * se));
    report.intercept = Some(intercept);
    report.pass = epsilon - t * se > 0.0;
    Ok(report)
}
