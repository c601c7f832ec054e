//! Exponential-Euler time stepping of the Galerkin system
//!
//! ```text
//! da_k = (−λ_k a_k + ⟨F^α(t, X), e_k⟩) dt + √g_k dβ_k
//! ```
//!
//! The linear part and the stochastic convolution are integrated exactly;
//! the drift is frozen at the left endpoint of each step. Along a step
//! `Y = X − W_A` then follows `y(τ) = F/λ + (y₀ − F/λ)e^{−λτ}` exactly, and the
//! running integrals `∫|Y|²_V` and `∫⟨F, Y⟩` are accumulated from that
//! interpolant in closed form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::drift::{check_alpha, DriftModel, DriftWork};
use crate::error::{check_len, Error, Result};
use crate::noise::{ConvolutionState, CovarianceSpec, OuStep, Purpose, RngStream};
use crate::spectral::{sup_norm, EigenSystem, Scratch, SpectralField, TransformKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Advance `X` directly.
    #[default]
    ExponentialEulerX,
    /// Advance `Y = X − W_A` and recover `X = Y + W_A`.
    ShiftedY,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub modes: usize,
    pub grid_size: usize,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// `0` leaves `F₁` unregularized.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_blowup")]
    pub blowup_threshold: f64,
    /// Steps between stored samples.
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    #[serde(default)]
    pub transform: TransformKind,
}

fn default_blowup() -> f64 {
    1e4
}

fn default_sample_every() -> usize {
    10
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            modes: 64,
            grid_size: 256,
            dt: 1e-3,
            horizon: 0.25,
            start_time: 0.0,
            scheme: Scheme::default(),
            alpha: 0.0,
            blowup_threshold: default_blowup(),
            sample_every: default_sample_every(),
            transform: TransformKind::Auto,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "time step must be positive"));
        }
        if !(self.start_time >= 0.0 && self.start_time <= self.horizon) {
            return Err(Error::invalid("start_time", "need 0 ≤ s ≤ T"));
        }
        check_alpha(self.alpha)?;
        if !(self.blowup_threshold > 0.0) {
            return Err(Error::invalid("blowup_threshold", "must be positive"));
        }
        if self.sample_every == 0 {
            return Err(Error::invalid("sample_every", "must be at least 1"));
        }
        let steps = (self.horizon - self.start_time) / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::invalid(
                "dt",
                format!("T − s = {} is not a whole number of steps", self.horizon - self.start_time),
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon - self.start_time) / self.dt).round() as usize
    }

    /// Step indices (from 0) at which samples are stored: every
    /// `sample_every` steps plus the final step.
    pub fn sample_steps(&self) -> Vec<usize> {
        let n = self.steps();
        let mut out: Vec<usize> = (0..=n).step_by(self.sample_every).collect();
        if *out.last().unwrap() != n {
            out.push(n);
        }
        out
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.sample_steps()
            .into_iter()
            .map(|n| self.start_time + n as f64 * self.dt)
            .collect()
    }
}

/// Current state of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub step_index: u64,
    pub x: SpectralField,
    pub wa: ConvolutionState,
    pub y: SpectralField,
}

/// Integrals over `[s, t]` accumulated along a path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningIntegrals {
    /// `∫|Y|²_V`, exact along the step interpolant.
    pub y_v_sq: f64,
    /// `∫ J²(r, X(r)) dr`, left endpoint.
    pub j_sq: f64,
    /// `∫ |X|^{2m}_{L^{2m}}`, left endpoint.
    pub moment_2m: f64,
    /// `∫ |F^α(r, X(r))|²_{V*}` with the frozen drift, i.e. left endpoint.
    pub f_v_star_sq: f64,
    /// `∫ ⟨F^α, Y⟩`, exact along the step interpolant.
    pub f_dot_y: f64,
}

impl RunningIntegrals {
    pub const COLUMNS: [&'static str; 5] = ["y_v_sq", "j_sq", "moment_2m", "f_v_star_sq", "f_dot_y"];

    fn as_array(&self) -> [f64; 5] {
        [self.y_v_sq, self.j_sq, self.moment_2m, self.f_v_star_sq, self.f_dot_y]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            y_v_sq: a[0],
            j_sq: a[1],
            moment_2m: a[2],
            f_v_star_sq: a[3],
            f_dot_y: a[4],
        }
    }
}

/// Observables at a stored sample time.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<'a> {
    pub index: usize,
    pub t: f64,
    pub x: &'a SpectralField,
    pub y: &'a SpectralField,
    /// `X` on the grid.
    pub grid: &'a [f64],
    pub integrals: RunningIntegrals,
}

/// Snapshots of one path with the running integrals at each sample time.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub modes: usize,
    pub dt: f64,
    pub seed: u64,
    pub path: u64,
    pub model_hash: String,
    pub sample_times: Vec<f64>,
    pub states: Vec<SpectralField>,
    /// `|Y(t)|²` at each sample.
    pub y_norm_sq: Vec<f64>,
    pub integrals: Vec<RunningIntegrals>,
}

const RECORD_MAGIC: &[u8; 8] = b"SPDETRJ1";

impl TrajectoryRecord {
    /// Binary layout, all integers and floats little-endian:
    ///
    /// ```text
    /// magic "SPDETRJ1" | N: u64 | samples: u64 | dt: f64 | seed: u64 | path: u64
    /// | hash length: u64 | model hash (UTF-8)
    /// | t[samples] | a_1[samples] | … | a_N[samples] | |Y|²[samples]
    /// | y_v_sq[samples] | j_sq[…] | moment_2m[…] | f_v_star_sq[…] | f_dot_y[…]
    /// ```
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let n = self.sample_times.len();
        w.write_all(RECORD_MAGIC)?;
        for v in [self.modes as u64, n as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        for v in [self.seed, self.path, self.model_hash.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(self.model_hash.as_bytes())?;
        let mut put = |v: f64| w.write_all(&v.to_le_bytes());
        for &t in &self.sample_times {
            put(t)?;
        }
        for k in 0..self.modes {
            for s in &self.states {
                put(s.coeffs()[k])?;
            }
        }
        for &v in &self.y_norm_sq {
            put(v)?;
        }
        for c in 0..RunningIntegrals::COLUMNS.len() {
            for r in &self.integrals {
                put(r.as_array()[c])?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::Archive("not a trajectory record".into()));
        }
        let mut word = [0u8; 8];
        let mut u64_at = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let modes = u64_at(&mut r)? as usize;
        let n = u64_at(&mut r)? as usize;
        let dt = f64::from_bits(u64_at(&mut r)?);
        let seed = u64_at(&mut r)?;
        let path = u64_at(&mut r)?;
        let hash_len = u64_at(&mut r)? as usize;
        if hash_len > 1024 || modes > 1 << 20 || n > 1 << 28 {
            return Err(Error::Archive("corrupt trajectory header".into()));
        }
        let mut hash = vec![0u8; hash_len];
        r.read_exact(&mut hash)?;
        let model_hash =
            String::from_utf8(hash).map_err(|_| Error::Archive("model hash is not UTF-8".into()))?;
        let column = |r: &mut dyn Read| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let sample_times = column(&mut r)?;
        let mut states = vec![vec![0.0; modes]; n];
        for k in 0..modes {
            for (s, v) in states.iter_mut().zip(column(&mut r)?) {
                s[k] = v;
            }
        }
        let y_norm_sq = column(&mut r)?;
        let mut cols = [(); 5].map(|_| Vec::new());
        for c in cols.iter_mut() {
            *c = column(&mut r)?;
        }
        let integrals = (0..n)
            .map(|i| RunningIntegrals::from_array([cols[0][i], cols[1][i], cols[2][i], cols[3][i], cols[4][i]]))
            .collect();
        Ok(Self {
            modes,
            dt,
            seed,
            path,
            model_hash,
            sample_times,
            states: states.into_iter().map(SpectralField::new).collect(),
            y_norm_sq,
            integrals,
        })
    }

    pub fn initial_state(&self) -> &SpectralField {
        &self.states[0]
    }

    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("record holds the initial state")
    }
}

/// Per-worker buffers for stepping.
pub struct StepWork {
    grid: Vec<f64>,
    drift: Vec<f64>,
    normals: Vec<f64>,
    drift_work: DriftWork,
    scratch: Scratch,
}

/// A configured integrator: eigensystem, exact OU coefficients, `φ₁` weights
/// and the drift model.
#[derive(Debug)]
pub struct Solver {
    config: SolverConfig,
    es: EigenSystem,
    model: DriftModel,
    noise: CovarianceSpec,
    ou: OuStep,
    /// `φ₁(λΔt)Δt = (1 − e^{−λΔt})/λ`.
    phi1_dt: Vec<f64>,
    /// `1 − e^{−λΔt}` and `1 − e^{−2λΔt}`.
    e1: Vec<f64>,
    e2: Vec<f64>,
    model_hash: String,
}

impl Solver {
    pub fn new(config: SolverConfig, model: DriftModel, noise: CovarianceSpec) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        noise.validate()?;
        let es = EigenSystem::with_transform(config.modes, config.grid_size, config.transform)?;
        check_len(config.modes, noise.modes())?;
        let ou = OuStep::new(&es, &noise, config.dt)?;
        let dt = config.dt;
        let e1: Vec<f64> = es.lambdas().iter().map(|l| -(-l * dt).exp_m1()).collect();
        let e2 = es.lambdas().iter().map(|l| -(-2.0 * l * dt).exp_m1()).collect();
        let phi1_dt = es.lambdas().iter().zip(&e1).map(|(l, e)| e / l).collect();
        let model_hash = model.model_hash();
        Ok(Self {
            config,
            es,
            model,
            noise,
            ou,
            phi1_dt,
            e1,
            e2,
            model_hash,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn eigensystem(&self) -> &EigenSystem {
        &self.es
    }

    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn noise(&self) -> &CovarianceSpec {
        &self.noise
    }

    pub fn work(&self) -> StepWork {
        StepWork {
            grid: vec![0.0; self.es.grid_size()],
            drift: vec![0.0; self.es.modes()],
            normals: vec![0.0; self.es.modes()],
            drift_work: DriftWork::new(&self.es),
            scratch: self.es.scratch(),
        }
    }

    pub fn initial_state(&self, x0: &SpectralField) -> Result<PathState> {
        check_len(self.es.modes(), x0.len())?;
        if !x0.is_finite() {
            return Err(Error::invalid("x0", "initial state must be finite"));
        }
        Ok(PathState {
            t: self.config.start_time,
            step_index: 0,
            x: x0.clone(),
            wa: ConvolutionState {
                time: self.config.start_time,
                modes: vec![0.0; self.es.modes()],
            },
            y: x0.clone(),
        })
    }

    /// Refreshes `work.grid` from `state.x` and applies the blow-up guard.
    fn load_grid(&self, state: &PathState, work: &mut StepWork) -> Result<()> {
        self.es.synthesize(state.x.coeffs(), &mut work.grid, &mut work.scratch);
        let sup = sup_norm(&work.grid);
        if !(sup <= self.config.blowup_threshold) {
            return Err(Error::BlowUp {
                time: state.t,
                sup_norm: sup,
                threshold: self.config.blowup_threshold,
                last_state: Box::new(state.x.clone()),
            });
        }
        Ok(())
    }

    /// One step from `state.t` to `state.t + Δt`. `work.grid` must hold `X(t)`
    /// on entry and holds `X(t + Δt)` on successful return. Returns the
    /// increments of the running integrals over the step.
    fn advance(&self, state: &mut PathState, stream: &RngStream, work: &mut StepWork) -> Result<RunningIntegrals> {
        let t = state.t;
        let dt = self.config.dt;
        let alpha = self.config.alpha;
        let lambdas = self.es.lambdas();

        let j = self.model.lyapunov_j_values(t, &work.grid);
        let moment = self.model.moment_2m(&work.grid);

        match self.config.scheme {
            Scheme::ExponentialEulerX => {
                self.model
                    .assemble(t, alpha, &self.es, &work.grid, &mut work.drift_work, &mut work.drift)?;
            }
            Scheme::ShiftedY => {
                // Evaluate the drift at Y + W_A rather than reusing X.
                for ((g, y), w) in work.drift.iter_mut().zip(state.y.coeffs()).zip(&state.wa.modes) {
                    *g = y + w;
                }
                self.es.synthesize(&work.drift, &mut work.grid, &mut work.scratch);
                self.model
                    .assemble(t, alpha, &self.es, &work.grid, &mut work.drift_work, &mut work.drift)?;
            }
        }

        let mut inc = RunningIntegrals {
            j_sq: j * j * dt,
            moment_2m: moment * dt,
            ..Default::default()
        };
        for (k, (&f, &y0)) in work.drift.iter().zip(state.y.coeffs()).enumerate() {
            let l = lambdas[k];
            let c = f / l;
            let d = y0 - c;
            let (e1, e2) = (self.e1[k], self.e2[k]);
            inc.y_v_sq += l * c * c * dt + 2.0 * c * d * e1 + 0.5 * d * d * e2;
            inc.f_dot_y += f * (c * dt + d * e1 / l);
            inc.f_v_star_sq += f * f / l * dt;
        }

        if self.noise.is_zero() {
            work.normals.fill(0.0);
        } else {
            stream.fill_normals(state.step_index, &mut work.normals);
        }
        let decay = &self.ou.decay;
        let sd = &self.ou.std_dev;
        match self.config.scheme {
            Scheme::ExponentialEulerX => {
                let x = state.x.coeffs_mut();
                for k in 0..x.len() {
                    let eta = sd[k] * work.normals[k];
                    x[k] = decay[k] * x[k] + self.phi1_dt[k] * work.drift[k] + eta;
                    state.wa.modes[k] = decay[k] * state.wa.modes[k] + eta;
                }
                for ((y, x), w) in state.y.coeffs_mut().iter_mut().zip(state.x.coeffs()).zip(&state.wa.modes) {
                    *y = x - w;
                }
            }
            Scheme::ShiftedY => {
                let y = state.y.coeffs_mut();
                for k in 0..y.len() {
                    y[k] = decay[k] * y[k] + self.phi1_dt[k] * work.drift[k];
                    state.wa.modes[k] = decay[k] * state.wa.modes[k] + sd[k] * work.normals[k];
                }
                for ((x, y), w) in state.x.coeffs_mut().iter_mut().zip(state.y.coeffs()).zip(&state.wa.modes) {
                    *x = y + w;
                }
            }
        }
        state.step_index += 1;
        state.t = self.config.start_time + state.step_index as f64 * dt;
        state.wa.time = state.t;
        if !state.x.is_finite() {
            return Err(Error::BlowUp {
                time: state.t,
                sup_norm: f64::INFINITY,
                threshold: self.config.blowup_threshold,
                last_state: Box::new(state.x.clone()),
            });
        }
        self.load_grid(state, work)?;
        Ok(inc)
    }

    /// One exponential-Euler step with the path's convolution stream.
    pub fn step(&self, state: &PathState, stream: &RngStream) -> Result<PathState> {
        let mut work = self.work();
        let mut next = state.clone();
        self.load_grid(&next, &mut work)?;
        self.advance(&mut next, stream, &mut work)?;
        Ok(next)
    }

    /// Integrates one path from `x0`, calling `observe` at every sample time.
    pub fn integrate_with<F>(
        &self,
        x0: &SpectralField,
        stream: &RngStream,
        work: &mut StepWork,
        mut observe: F,
    ) -> Result<PathState>
    where
        F: FnMut(&Sample<'_>),
    {
        let mut state = self.initial_state(x0)?;
        let steps = self.config.steps();
        let every = self.config.sample_every;
        let mut acc = RunningIntegrals::default();
        let mut index = 0;
        self.load_grid(&state, work)?;
        observe(&Sample {
            index,
            t: state.t,
            x: &state.x,
            y: &state.y,
            grid: &work.grid,
            integrals: acc,
        });
        for n in 1..=steps {
            let inc = self.advance(&mut state, stream, work)?;
            for (a, i) in [
                (&mut acc.y_v_sq, inc.y_v_sq),
                (&mut acc.j_sq, inc.j_sq),
                (&mut acc.moment_2m, inc.moment_2m),
                (&mut acc.f_v_star_sq, inc.f_v_star_sq),
                (&mut acc.f_dot_y, inc.f_dot_y),
            ] {
                *a += i;
            }
            if n % every == 0 || n == steps {
                index += 1;
                observe(&Sample {
                    index,
                    t: state.t,
                    x: &state.x,
                    y: &state.y,
                    grid: &work.grid,
                    integrals: acc,
                });
            }
        }
        Ok(state)
    }

    pub fn stream(seed: u64, path: u64) -> RngStream {
        RngStream::new(seed, path, Purpose::Convolution)
    }

    /// Full trajectory of path `path` under `seed`.
    pub fn integrate_path(&self, x0: &SpectralField, seed: u64, path: u64) -> Result<TrajectoryRecord> {
        let mut record = self.empty_record(seed, path);
        let mut work = self.work();
        self.integrate_with(x0, &Self::stream(seed, path), &mut work, |s| push_sample(&mut record, s))?;
        Ok(record)
    }

    /// Two trajectories driven by the same noise realization.
    pub fn integrate_pair_shared_noise(
        &self,
        x0: &SpectralField,
        x0_prime: &SpectralField,
        seed: u64,
        path: u64,
    ) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
        Ok((self.integrate_path(x0, seed, path)?, self.integrate_path(x0_prime, seed, path)?))
    }

    fn empty_record(&self, seed: u64, path: u64) -> TrajectoryRecord {
        TrajectoryRecord {
            modes: self.es.modes(),
            dt: self.config.dt,
            seed,
            path,
            model_hash: self.model_hash.clone(),
            sample_times: Vec::new(),
            states: Vec::new(),
            y_norm_sq: Vec::new(),
            integrals: Vec::new(),
        }
    }
}

fn push_sample(record: &mut TrajectoryRecord, s: &Sample<'_>) {
    record.sample_times.push(s.t);
    record.states.push(s.x.clone());
    record.y_norm_sq.push(s.y.norm_sq());
    record.integrals.push(s.integrals);
}

/// One row of [`pathwise_energy_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub t: f64,
    /// `|Y(t)|² + ∫|Y|²_V`.
    pub lhs: f64,
    /// `|x|² + ∫|F_α|²_{V*}`.
    pub rhs: f64,
    pub slack: f64,
    /// `|x|² + 2∫⟨F,Y⟩ − |Y(t)|² − 2∫|Y|²_V`, which vanishes for the exact
    /// interpolant and measures accumulated roundoff.
    pub balance_defect: f64,
}

/// Energy inequality `|Y(t)|² + ∫|Y|²_V ≤ |x|² + ∫|F_α|²_{V*}` along a record.
pub fn pathwise_energy_check(record: &TrajectoryRecord) -> Vec<EnergyRow> {
    let x0 = record.initial_state().norm_sq();
    record
        .sample_times
        .iter()
        .zip(&record.y_norm_sq)
        .zip(&record.integrals)
        .map(|((&t, &y2), i)| {
            let lhs = y2 + i.y_v_sq;
            let rhs = x0 + i.f_v_star_sq;
            EnergyRow {
                t,
                lhs,
                rhs,
                slack: rhs - lhs,
                balance_defect: x0 + 2.0 * i.f_dot_y - y2 - 2.0 * i.y_v_sq,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::Preset;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn config(modes: usize, dt: f64, horizon: f64) -> SolverConfig {
        SolverConfig {
            modes,
            grid_size: 4 * modes,
            dt,
            horizon,
            ..Default::default()
        }
    }

    fn solver(preset: Preset, noise: bool, cfg: SolverConfig) -> Solver {
        let n = cfg.modes;
        let spec = if noise { CovarianceSpec::white(n) } else { CovarianceSpec::zero(n) };
        Solver::new(cfg, DriftModel::preset(preset), spec).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { dt: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { start_time: 0.3, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { dt: 0.0007, ..Default::default() }.validate().is_err());
        let c = SolverConfig { sample_every: 100, ..Default::default() };
        assert_eq!(c.sample_steps(), vec![0, 100, 200, 250]);
    }

    #[test]
    fn heat_flow_is_exact() {
        let s = solver(Preset::Linear, false, config(8, 1e-3, 0.1));
        let r = s.integrate_path(&SpectralField::single_mode(8, 1, 1.0), 0, 0).unwrap();
        assert_abs_diff_eq!(r.final_state().coeffs()[0], (-PI * PI * 0.1).exp(), epsilon = 1e-12);
    }

    #[test]
    fn empty_horizon_keeps_initial_state() {
        let cfg = SolverConfig { start_time: 0.25, ..config(4, 1e-3, 0.25) };
        let s = solver(Preset::Combined, true, cfg);
        let x0 = SpectralField::single_mode(4, 2, 0.5);
        let r = s.integrate_path(&x0, 1, 0).unwrap();
        assert_eq!(r.states, vec![x0]);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let s = solver(Preset::Combined, true, config(16, 1e-3, 0.05));
        let x0 = SpectralField::single_mode(16, 1, 1.0);
        assert_eq!(s.integrate_path(&x0, 3, 7).unwrap(), s.integrate_path(&x0, 3, 7).unwrap());
        assert_ne!(s.integrate_path(&x0, 3, 7).unwrap(), s.integrate_path(&x0, 3, 8).unwrap());
    }

    #[test]
    fn schemes_agree() {
        let mut cfg = config(16, 1e-3, 0.05);
        let x0 = SpectralField::single_mode(16, 1, 1.0);
        let a = solver(Preset::Combined, true, cfg.clone()).integrate_path(&x0, 5, 0).unwrap();
        cfg.scheme = Scheme::ShiftedY;
        let b = solver(Preset::Combined, true, cfg).integrate_path(&x0, 5, 0).unwrap();
        for (u, v) in a.final_state().coeffs().iter().zip(b.final_state().coeffs()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_pair_contracts_like_heat_flow() {
        let s = solver(Preset::Linear, true, config(16, 1e-3, 0.25));
        let x0 = SpectralField::single_mode(16, 1, 1.0);
        let x1 = SpectralField::single_mode(16, 1, 1.0 + 1e-4);
        let (a, b) = s.integrate_pair_shared_noise(&x0, &x1, 11, 0).unwrap();
        let ratio = a.final_state().sub(b.final_state()).norm() / 1e-4;
        assert_abs_diff_eq!(ratio, (-PI * PI * 0.25).exp(), epsilon = 1e-10);
        let (c, d) = s.integrate_pair_shared_noise(&x0, &x0, 11, 0).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn burgers_self_convergence() {
        let x0 = SpectralField::single_mode(32, 1, 1.0);
        let run = |dt: f64, grid: usize| {
            let cfg = SolverConfig {
                grid_size: grid,
                sample_every: 1_000_000,
                ..config(32, dt, 0.1)
            };
            solver(Preset::Burgers, false, cfg).integrate_path(&x0, 0, 0).unwrap()
        };
        let reference = run(1e-3 / 16.0, 256);
        let e1 = run(1e-3, 128).final_state().sub(reference.final_state()).norm();
        let e2 = run(5e-4, 128).final_state().sub(reference.final_state()).norm();
        let ratio = e1 / e2;
        assert!((1.7..2.4).contains(&ratio), "{e1} {e2} {ratio}");
    }

    #[test]
    fn linear_moments_match_ou_law() {
        let s = solver(Preset::Linear, true, config(8, 1e-3, 0.1));
        let x0 = SpectralField::single_mode(8, 1, 1.0);
        let m = 4000;
        let finals: Vec<f64> = (0..m)
            .map(|p| s.integrate_path(&x0, 21, p).unwrap().final_state().coeffs()[0])
            .collect();
        let l = PI * PI;
        let mean_exact = (-l * 0.1).exp();
        let var_exact = (1.0 - (-2.0 * l * 0.1).exp()) / (2.0 * l);
        let mean = finals.iter().sum::<f64>() / m as f64;
        let var = finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((mean - mean_exact).abs() < 3.0 * (var_exact / m as f64).sqrt());
        assert!((var - var_exact).abs() < 3.0 * var_exact * (2.0 / m as f64).sqrt());
    }

    #[test]
    fn energy_identity_and_inequality() {
        let s = solver(Preset::Linear, false, config(16, 1e-3, 0.25));
        let x0 = SpectralField::new((0..16).map(|k| 1.0 / (k + 1) as f64).collect());
        let rows = pathwise_energy_check(&s.integrate_path(&x0, 0, 0).unwrap());
        for r in &rows {
            assert!(r.balance_defect.abs() < 1e-12, "{r:?}");
        }
        // Closed form: slack = ∫|e^{rA}x|²_V = Σ a_k²(1 − e^{−2λt})/2.
        let es = s.eigensystem();
        let last = rows.last().unwrap();
        let expected: f64 = x0
            .coeffs()
            .iter()
            .zip(es.lambdas())
            .map(|(a, l)| a * a * (1.0 - (-2.0 * l * 0.25).exp()) / 2.0)
            .sum();
        assert_abs_diff_eq!(last.slack, expected, epsilon = 1e-12);

        let zero = pathwise_energy_check(&s.integrate_path(&SpectralField::zeros(16), 0, 0).unwrap());
        assert!(zero.iter().all(|r| r.lhs == 0.0 && r.rhs == 0.0 && r.slack == 0.0));

        let cfg = SolverConfig { scheme: Scheme::ShiftedY, alpha: 0.1, ..config(32, 1e-3, 0.1) };
        let c = solver(Preset::Combined, true, cfg);
        for p in 0..5 {
            let rows = pathwise_energy_check(&c.integrate_path(&SpectralField::single_mode(32, 1, 1.0), 2, p).unwrap());
            for r in rows {
                assert!(r.slack >= -1e-10 * (1.0 + r.rhs), "{r:?}");
                assert!(r.balance_defect.abs() < 1e-9 * (1.0 + r.rhs), "{r:?}");
            }
        }
    }

    #[test]
    fn running_integrals_nondecreasing() {
        let s = solver(Preset::Combined, true, config(16, 1e-3, 0.1));
        let r = s.integrate_path(&SpectralField::single_mode(16, 1, 1.0), 4, 0).unwrap();
        for w in r.integrals.windows(2) {
            assert!(w[1].y_v_sq >= w[0].y_v_sq);
            assert!(w[1].j_sq >= w[0].j_sq);
            assert!(w[1].moment_2m >= w[0].moment_2m);
            assert!(w[1].f_v_star_sq >= w[0].f_v_star_sq);
        }
    }

    #[test]
    fn blow_up_is_reported_with_last_state() {
        let cfg = SolverConfig { blowup_threshold: 1e-6, ..config(8, 1e-3, 0.01) };
        let s = solver(Preset::Linear, true, cfg);
        let x0 = SpectralField::zeros(8);
        match s.integrate_path(&x0, 0, 0) {
            Err(Error::BlowUp { last_state, sup_norm, .. }) => {
                assert!(last_state.is_finite() && sup_norm > 1e-6);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn regularized_drift_is_bounded_per_step() {
        // |⟨F₁^α, e_k⟩| ≤ √2/α regardless of the state.
        let cfg = SolverConfig { alpha: 0.1, ..config(16, 1e-3, 0.001) };
        let s = solver(Preset::AllenCahn, false, cfg);
        let x0 = SpectralField::new((0..16).map(|k| 50.0 / (k + 1) as f64).collect());
        let r = s.integrate_path(&x0, 0, 0).unwrap();
        let es = s.eigensystem();
        for (k, (a1, a0)) in r.final_state().coeffs().iter().zip(x0.coeffs()).enumerate() {
            let l = es.lambdas()[k];
            let jump = a1 - (-l * 1e-3).exp() * a0;
            let envelope = (1.0 - (-l * 1e-3).exp()) / l * std::f64::consts::SQRT_2 / 0.1;
            assert!(jump.abs() <= envelope * (1.0 + 1e-12));
        }
    }

    #[test]
    fn record_round_trip() {
        let s = solver(Preset::Combined, true, config(8, 1e-3, 0.02));
        let r = s.integrate_path(&SpectralField::single_mode(8, 1, 1.0), 9, 2).unwrap();
        let bytes = r.to_bytes();
        let back = TrajectoryRecord::read_from(&bytes[..]).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_bytes(), bytes);
        assert!(TrajectoryRecord::read_from(&bytes[1..]).is_err());
    }
}
