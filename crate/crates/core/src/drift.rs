//! Nonlinearities `f` and `g = g₁ + g₂`, the drift operators
//! `F₁(t,x)(ξ) = f(ξ,t,x(ξ))` and `F₂(t,x) = ∂_ξ g(ξ,t,x(ξ))`, the bounded
//! regularization `F₁^α = F₁/(1+α|F₁|)`, the Lyapunov weight
//! `J(t,x) = 2(c₁(t)+K)(1+|x|^m_{L^{2m}})`, and lattice audits of the growth,
//! monotonicity and Lipschitz conditions a model declares.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::noise::{Purpose, RngStream};
use crate::spectral::{lp_power_integral, EigenSystem, GridField, Scratch, SpectralField};

/// Polynomial with ascending coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial(vec![c])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().skip(1).all(|c| *c == 0.0)
    }

    pub fn eval_derivative(&self, x: f64) -> f64 {
        self.0
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, c)| acc * x + i as f64 * c)
    }

    pub fn derivative(&self) -> Polynomial {
        let d: Vec<f64> = self.0.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect();
        if d.is_empty() {
            Polynomial::constant(0.0)
        } else {
            Polynomial(d)
        }
    }
}

impl Default for Polynomial {
    fn default() -> Self {
        Polynomial::constant(1.0)
    }
}

/// `coeff · time(t) · space(ξ) · z^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTerm {
    pub coeff: f64,
    pub power: u32,
    #[serde(default)]
    pub time: Polynomial,
    #[serde(default)]
    pub space: Polynomial,
}

impl PolyTerm {
    pub fn monomial(coeff: f64, power: u32) -> Self {
        Self {
            coeff,
            power,
            time: Polynomial::default(),
            space: Polynomial::default(),
        }
    }

    #[inline]
    fn prefactor(&self, xi: f64, t: f64) -> f64 {
        self.coeff * self.time.eval(t) * self.space.eval(xi)
    }
}

/// Finite sum of [`PolyTerm`]s: a polynomial in `z` with polynomial `(t, ξ)` multipliers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyField {
    pub terms: Vec<PolyTerm>,
}

impl PolyField {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomials(pairs: &[(f64, u32)]) -> Self {
        Self {
            terms: pairs.iter().map(|&(c, p)| PolyTerm::monomial(c, p)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == 0.0)
    }

    pub fn eval(&self, xi: f64, t: f64, z: f64) -> f64 {
        self.terms
            .iter()
            .map(|term| term.prefactor(xi, t) * z.powi(term.power as i32))
            .sum()
    }

    pub fn deriv_z(&self, xi: f64, t: f64, z: f64) -> f64 {
        self.terms
            .iter()
            .filter(|term| term.power > 0)
            .map(|term| term.prefactor(xi, t) * term.power as f64 * z.powi(term.power as i32 - 1))
            .sum()
    }

    pub fn depends_on_xi(&self) -> bool {
        self.terms.iter().any(|t| !t.space.is_constant())
    }

    pub fn depends_on_t(&self) -> bool {
        self.terms.iter().any(|t| !t.time.is_constant())
    }
}

/// Smooth clamp: identity on `|r| ≤ n`, zero beyond `2n`, a C¹ cubic in between.
pub fn clamp_chi(n: f64, r: f64) -> f64 {
    let a = r.abs();
    if a <= n {
        r
    } else if a >= 2.0 * n {
        0.0
    } else {
        let u = a / n - 1.0;
        r.signum() * n * (((3.0 * u - 5.0) * u + 1.0) * u + 1.0)
    }
}

/// `sup |χ_n'|`, attained at `u = 5/9` where `χ' = 9u² − 10u + 1 = −16/9`.
pub const CHI_SLOPE_BOUND: f64 = 16.0 / 9.0;

/// Stencil points per smoothed direction.
const BUMP_POINTS: usize = 8;

fn bump_stencil(n: u32) -> Vec<(f64, f64)> {
    let h = 2.0 / BUMP_POINTS as f64;
    let raw: Vec<(f64, f64)> = (0..BUMP_POINTS)
        .map(|i| {
            let u = -1.0 + (i as f64 + 0.5) * h;
            (u / n as f64, (-1.0 / (1.0 - u * u)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / total)).collect()
}

/// `φ_n * χ_n(g)`, with the bump `φ_n` supported on `[−1/n, 1/n]` in `z` and,
/// when `smooth_xi` is set, also in `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mollified {
    pub base: PolyField,
    pub n: u32,
    pub smooth_xi: bool,
}

impl Mollified {
    pub fn eval(&self, xi: f64, t: f64, z: f64) -> f64 {
        let n = self.n as f64;
        let stencil = bump_stencil(self.n);
        let xi_stencil: &[(f64, f64)] = if self.smooth_xi { &stencil } else { &[(0.0, 1.0)] };
        let mut acc = 0.0;
        for (dx, wx) in xi_stencil {
            for (dz, wz) in &stencil {
                acc += wx * wz * clamp_chi(n, self.base.eval(xi - dx, t, z - dz));
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ScalarField {
    Poly(PolyField),
    Mollified(Mollified),
}

impl ScalarField {
    pub fn eval(&self, xi: f64, t: f64, z: f64) -> f64 {
        match self {
            ScalarField::Poly(p) => p.eval(xi, t, z),
            ScalarField::Mollified(m) => m.eval(xi, t, z),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ScalarField::Poly(p) => p.is_zero(),
            ScalarField::Mollified(m) => m.base.is_zero(),
        }
    }

    fn depends_on_xi(&self) -> bool {
        match self {
            ScalarField::Poly(p) => p.depends_on_xi(),
            ScalarField::Mollified(m) => m.base.depends_on_xi(),
        }
    }

    fn depends_on_t(&self) -> bool {
        match self {
            ScalarField::Poly(p) => p.depends_on_t(),
            ScalarField::Mollified(m) => m.base.depends_on_t(),
        }
    }
}

impl From<PolyField> for ScalarField {
    fn from(p: PolyField) -> Self {
        ScalarField::Poly(p)
    }
}

/// Split `f = f₁ + f₂` with `∂_z f₁ ≤ C`, `f₂ z ≤ C(1+z²)`, `|f₂| ≤ C(1+|z|^{2−1/m})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decomposition {
    pub f1: PolyField,
    pub f2: PolyField,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionSpec {
    pub f: PolyField,
    /// Growth degree in `|f| ≤ c₁(t)(1+|z|^m)`.
    pub m: u32,
    /// Exponent in `(f(z₁+z₂)−f(z₁))z₂ ≤ c₂(t)(z₂²+|z₁|^{m₁}+1)`.
    pub m1: f64,
    pub c1: Polynomial,
    pub c2: Polynomial,
    #[serde(default)]
    pub decomposition: Option<Decomposition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    /// `g₁(ξ,t,z)` with `|g₁| ≤ K(1+|z|)`.
    pub g1: ScalarField,
    /// `g₂(t,z)` with `|g₂| ≤ K(1+z²)`; any `ξ` dependence is ignored.
    pub g2: ScalarField,
    pub k: f64,
    /// Slope in `|g(z₁)−g(z₂)| ≤ L(1+|z₁|+|z₂|)|z₁−z₂|`.
    pub l: f64,
}

impl TransportSpec {
    pub fn eval(&self, xi: f64, t: f64, z: f64) -> f64 {
        self.g1.eval(xi, t, z) + self.g2.eval(0.5, t, z)
    }

    pub fn is_zero(&self) -> bool {
        self.g1.is_zero() && self.g2.is_zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Burgers: `f = 0`, `g = z²/2`.
    #[serde(rename = "a", alias = "burgers")]
    Burgers,
    /// Allen-Cahn type: `f = z − z³`, `g = 0`.
    #[serde(rename = "b", alias = "allen-cahn")]
    AllenCahn,
    /// `f = z − z³`, `g = z²/2`.
    #[serde(rename = "c", alias = "combined")]
    Combined,
    /// `f = g = 0`.
    #[serde(rename = "d", alias = "linear")]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub name: String,
    pub reaction: ReactionSpec,
    pub transport: TransportSpec,
    /// `L` in `(f(z₁)−f(z₂))(z₁−z₂) ≤ L(1+|z₁|^{m−1}+|z₂|^{m−1})|z₁−z₂|²`.
    #[serde(default)]
    pub one_sided_l: Option<f64>,
}

impl DriftModel {
    pub fn preset(p: Preset) -> Self {
        let cubic = PolyField::monomials(&[(1.0, 1), (-1.0, 3)]);
        let burgers: ScalarField = PolyField::monomials(&[(0.5, 2)]).into();
        let none: ScalarField = PolyField::zero().into();
        let cubic_split = Decomposition {
            f1: cubic.clone(),
            f2: PolyField::zero(),
            c: 1.0,
        };
        let (name, reaction, transport, one_sided_l) = match p {
            Preset::Burgers => (
                "a",
                ReactionSpec {
                    f: PolyField::zero(),
                    m: 2,
                    m1: 2.0,
                    c1: Polynomial::constant(0.0),
                    c2: Polynomial::constant(0.0),
                    decomposition: None,
                },
                TransportSpec {
                    g1: none,
                    g2: burgers,
                    k: 0.5,
                    l: 0.5,
                },
                Some(0.0),
            ),
            Preset::AllenCahn => (
                "b",
                ReactionSpec {
                    f: cubic,
                    m: 3,
                    m1: 1.0,
                    c1: Polynomial::constant(1.0),
                    c2: Polynomial::constant(1.0),
                    decomposition: Some(cubic_split),
                },
                TransportSpec {
                    g1: none.clone(),
                    g2: none,
                    k: 0.0,
                    l: 0.0,
                },
                Some(1.0),
            ),
            Preset::Combined => (
                "c",
                ReactionSpec {
                    f: cubic,
                    m: 3,
                    m1: 1.0,
                    c1: Polynomial::constant(1.0),
                    c2: Polynomial::constant(1.0),
                    decomposition: Some(cubic_split),
                },
                TransportSpec {
                    g1: none,
                    g2: burgers,
                    k: 0.5,
                    l: 0.5,
                },
                Some(1.0),
            ),
            Preset::Linear => (
                "d",
                ReactionSpec {
                    f: PolyField::zero(),
                    m: 2,
                    m1: 2.0,
                    c1: Polynomial::constant(0.0),
                    c2: Polynomial::constant(0.0),
                    decomposition: None,
                },
                TransportSpec {
                    g1: none.clone(),
                    g2: none,
                    k: 0.5,
                    l: 0.0,
                },
                Some(0.0),
            ),
        };
        DriftModel {
            name: name.to_string(),
            reaction,
            transport,
            one_sided_l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reaction;
        if r.m < 2 {
            return Err(Error::invalid("m", "growth degree must be at least 2"));
        }
        if !(r.m1 > 0.0) {
            return Err(Error::invalid("m1", "must be positive"));
        }
        if !(self.transport.k >= 0.0 && self.transport.l >= 0.0) {
            return Err(Error::invalid("k", "K and L must be non-negative"));
        }
        Ok(())
    }

    pub fn c1(&self, t: f64) -> f64 {
        self.reaction.c1.eval(t)
    }

    pub fn has_reaction(&self) -> bool {
        !self.reaction.f.is_zero()
    }

    pub fn has_transport(&self) -> bool {
        !self.transport.is_zero()
    }

    /// Short hex digest of the canonical JSON form.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("drift model serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// `out_j = f(ξ_j, t, v_j)`.
    pub fn fill_f1(&self, t: f64, xi: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        for (j, ((o, &x), &z)) in out.iter_mut().zip(xi).zip(v).enumerate() {
            *o = self.reaction.f.eval(x, t, z);
            if !o.is_finite() {
                return Err(Error::NonFinite { index: j, time: t });
            }
        }
        Ok(())
    }

    pub fn eval_f1(&self, t: f64, v: &GridField, es: &EigenSystem) -> Result<GridField> {
        check_len(es.grid_size(), v.len())?;
        let mut out = vec![0.0; v.len()];
        self.fill_f1(t, es.grid_points(), v.values(), &mut out)?;
        Ok(GridField::new(out))
    }

    /// `F₁^α` at grid points. `α = 0` returns `F₁` unchanged.
    pub fn regularize_f1(
        &self,
        alpha: f64,
        t: f64,
        v: &GridField,
        es: &EigenSystem,
    ) -> Result<GridField> {
        check_alpha(alpha)?;
        let mut u = self.eval_f1(t, v, es)?;
        regularize_in_place(alpha, u.values_mut());
        Ok(u)
    }

    /// `⟨F₂(t,v), e_k⟩ = −∫ g(ξ,t,v) ∂_ξ e_k dξ` for `k = 1..=N`.
    pub fn pair_f2(&self, t: f64, v: &GridField, es: &EigenSystem) -> Result<SpectralField> {
        check_len(es.grid_size(), v.len())?;
        let mut g_full = vec![0.0; es.grid_size() + 2];
        let mut out = vec![0.0; es.modes()];
        self.fill_f2_pairing(t, es, v.values(), &mut g_full, &mut out, &mut es.scratch());
        Ok(SpectralField::new(out))
    }

    pub(crate) fn fill_f2_pairing(
        &self,
        t: f64,
        es: &EigenSystem,
        v: &[f64],
        g_full: &mut [f64],
        out: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let last = g_full.len() - 1;
        g_full[0] = self.transport.eval(0.0, t, 0.0);
        g_full[last] = self.transport.eval(1.0, t, 0.0);
        for ((g, &xi), &z) in g_full[1..last].iter_mut().zip(es.grid_points()).zip(v) {
            *g = self.transport.eval(xi, t, z);
        }
        es.weak_derivative_pairing(g_full, out, scratch);
    }

    /// `J(t,v) = 2(c₁(t)+K)(1+|v|^m_{L^{2m}})`.
    pub fn lyapunov_j(&self, t: f64, v: &GridField) -> f64 {
        self.lyapunov_j_values(t, v.values())
    }

    pub(crate) fn lyapunov_j_values(&self, t: f64, v: &[f64]) -> f64 {
        let m = self.reaction.m;
        let norm_m = lp_power_integral(v, 2 * m).sqrt();
        2.0 * (self.c1(t) + self.transport.k) * (1.0 + norm_m)
    }

    /// `|v|^{2m}_{L^{2m}}` with this model's `m`.
    pub fn moment_2m(&self, v: &[f64]) -> f64 {
        lp_power_integral(v, 2 * self.reaction.m)
    }

    /// `⟨F^α(t,x), e_k⟩` assembled into `out`: the projection of `F₁^α` plus the weak `F₂` pairing.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        &self,
        t: f64,
        alpha: f64,
        es: &EigenSystem,
        grid: &[f64],
        work: &mut DriftWork,
        out: &mut [f64],
    ) -> Result<()> {
        out.fill(0.0);
        if self.has_reaction() {
            self.fill_f1(t, es.grid_points(), grid, &mut work.f1)?;
            regularize_in_place(alpha, &mut work.f1);
            es.analyze(&work.f1, &mut work.modes, &mut work.scratch);
            for (o, a) in out.iter_mut().zip(&work.modes) {
                *o += a;
            }
        }
        if self.has_transport() {
            self.fill_f2_pairing(t, es, grid, &mut work.g_full, &mut work.modes, &mut work.scratch);
            for (o, a) in out.iter_mut().zip(&work.modes) {
                *o += a;
            }
        }
        if let Some(k) = out.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite { index: k, time: t });
        }
        Ok(())
    }

    /// `(|F₁|_H λ₁^{-1/2}, |F₂|_{V*}, |F|_{V*}, J)` at a grid state.
    pub fn bound_chain(&self, t: f64, v: &GridField, es: &EigenSystem) -> Result<BoundChain> {
        let f1 = self.eval_f1(t, v, es)?;
        let f1_modes = es.to_spectral(&f1)?;
        let f2 = self.pair_f2(t, v, es)?;
        let f = f1_modes.add(&f2);
        Ok(BoundChain {
            f1_term: lp_power_integral(f1.values(), 2).sqrt() / es.lambdas()[0].sqrt(),
            f2_v_star: es.v_star_norm_sq(f2.coeffs()).sqrt(),
            f_v_star: es.v_star_norm_sq(f.coeffs()).sqrt(),
            j: self.lyapunov_j(t, v),
        })
    }

    /// Declared constants for the pathwise contraction bound
    /// `|X₁−X₂|(t) ≤ |X₁−X₂|(0) exp(Ĉ ∫(1+|X₁|^{2m}_{L^{2m}}+|X₂|^{2m}_{L^{2m}}))`.
    ///
    /// With `D = X₁−X₂`, `‖D‖²_∞ ≤ ‖D‖‖∂D‖`, and `|x|_{L^p} ≤ |x|_{L^{2m}}` for
    /// `p ≤ 2m`:
    /// the reaction term is at most `2L_f A ‖D‖^{3/2}‖∂D‖^{1/2}` with
    /// `A = 1+|X₁|^{m−1}+|X₂|^{m−1}`, `A^{4/3} ≤ 3^{4/3}Φ`; the transport term is at
    /// most `2L_g B ‖D‖^{1/2}‖∂D‖^{3/2}` with `B = 1+|X₁|+|X₂|`, `B⁴ ≤ 81Φ`.
    /// Young's inequality absorbs both gradient factors into `2‖∂D‖²`.
    pub fn gronwall_constant(&self) -> Option<f64> {
        let lf = self.one_sided_l?;
        let lg = self.transport.l;
        // ab ≤ a^p + C b^q with C = p^{-q/p}/q.
        let young = |p: f64, q: f64| p.powf(-q / p) / q;
        let reaction = young(4.0, 4.0 / 3.0) * (2.0 * lf).powf(4.0 / 3.0) * 3f64.powf(4.0 / 3.0);
        let transport = young(4.0 / 3.0, 4.0) * (2.0 * lg).powi(4) * 81.0;
        Some(0.5 * (reaction + transport))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundChain {
    pub f1_term: f64,
    pub f2_v_star: f64,
    pub f_v_star: f64,
    pub j: f64,
}

impl BoundChain {
    pub fn holds(&self) -> bool {
        let tol = 1e-12 * (1.0 + self.j);
        self.f_v_star <= self.f1_term + self.f2_v_star + tol && self.f1_term + self.f2_v_star <= self.j + tol
    }
}

/// Reusable buffers for [`DriftModel::assemble`].
pub struct DriftWork {
    f1: Vec<f64>,
    g_full: Vec<f64>,
    modes: Vec<f64>,
    scratch: Scratch,
}

impl DriftWork {
    pub fn new(es: &EigenSystem) -> Self {
        Self {
            f1: vec![0.0; es.grid_size()],
            g_full: vec![0.0; es.grid_size() + 2],
            modes: vec![0.0; es.modes()],
            scratch: es.scratch(),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in [0, 1], got {alpha}")))
    }
}

#[inline]
pub fn regularize_value(alpha: f64, u: f64) -> f64 {
    u / (1.0 + alpha * u.abs())
}

fn regularize_in_place(alpha: f64, values: &mut [f64]) {
    if alpha > 0.0 {
        for u in values {
            *u = regularize_value(alpha, *u);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub alpha: f64,
    /// `c(h) = sup_j |h(ξ_j)|`.
    pub c_h: f64,
    /// Per sample `|⟨F₁ − F₁^α, h⟩| / (α J²)`.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Indices of samples whose ratio exceeds `c(h)`.
    pub failures: Vec<usize>,
    pub pass: bool,
}

/// Measures `|⟨F − F_α, h⟩| ≤ α c(h) J²` on sample states. Only `F₁` is
/// regularized, so the difference reduces to `⟨F₁ − F₁^α, h⟩_H`.
pub fn check_approximation_bound(
    model: &DriftModel,
    alpha: f64,
    h: &SpectralField,
    samples: &[(f64, GridField)],
    es: &EigenSystem,
) -> Result<ApproximationReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    let h_grid = es.to_grid(h)?;
    let c_h = h_grid.sup_norm();
    let w = es.quadrature_weight();
    let mut ratios = Vec::with_capacity(samples.len());
    for (t, v) in samples {
        let u = model.eval_f1(*t, v, es)?;
        let diff: f64 = u
            .values()
            .iter()
            .zip(h_grid.values())
            .map(|(u, h)| (u - regularize_value(alpha, *u)) * h)
            .sum::<f64>()
            * w;
        let j = model.lyapunov_j(*t, v);
        ratios.push(if diff == 0.0 { 0.0 } else { diff.abs() / (alpha * j * j) });
    }
    let failures: Vec<usize> = ratios
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > c_h)
        .map(|(i, _)| i)
        .collect();
    Ok(ApproximationReport {
        alpha,
        c_h,
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
        pass: failures.is_empty(),
        ratios,
        failures,
    })
}

/// Band-limited random states `a_k ~ N(0, (σ/k)²)` for `k ≤ min(8, N)`.
pub fn random_states(es: &EigenSystem, count: usize, sigma: f64, seed: u64) -> Vec<SpectralField> {
    let active = es.modes().min(8);
    (0..count as u64)
        .map(|i| {
            let z = RngStream::new(seed, i, Purpose::Audit).normals(0, active);
            let mut a = vec![0.0; es.modes()];
            for (k, (a, z)) in a.iter_mut().zip(z).enumerate() {
                *a = sigma / (k + 1) as f64 * z;
            }
            SpectralField::new(a)
        })
        .collect()
}

/// Sampling plan for condition audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditLattice {
    pub z_min: f64,
    pub z_max: f64,
    pub z_points: usize,
    pub t_points: usize,
    pub xi_points: usize,
    pub horizon: f64,
}

impl Default for AuditLattice {
    fn default() -> Self {
        Self {
            z_min: -10.0,
            z_max: 10.0,
            z_points: 401,
            t_points: 41,
            xi_points: 33,
            horizon: 0.25,
        }
    }
}

impl AuditLattice {
    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n <= 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    fn zs(&self) -> Vec<f64> {
        Self::axis(self.z_min, self.z_max, self.z_points)
    }

    /// Collapses to a single point when the audited fields ignore that coordinate.
    fn ts(&self, depends: bool) -> Vec<f64> {
        if depends {
            Self::axis(0.0, self.horizon, self.t_points)
        } else {
            vec![0.0]
        }
    }

    fn xis(&self, depends: bool) -> Vec<f64> {
        if depends {
            Self::axis(0.0, 1.0, self.xi_points)
        } else {
            vec![0.5]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub xi: f64,
    pub t: f64,
    pub z1: f64,
    pub z2: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionStatus {
    Holds,
    Violated,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub status: ConditionStatus,
    /// `min(rhs − lhs)` over the lattice.
    pub worst_margin: f64,
    pub worst_point: Option<Witness>,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model: String,
    pub conditions: Vec<ConditionResult>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.conditions
            .iter()
            .all(|c| c.status != ConditionStatus::Violated)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn first_violation(&self) -> Option<&ConditionResult> {
        self.conditions
            .iter()
            .find(|c| c.status == ConditionStatus::Violated)
    }
}

/// Relative slack below which a negative margin counts as roundoff.
const AUDIT_RTOL: f64 = 1e-10;

struct Scan {
    name: &'static str,
    worst: f64,
    point: Option<Witness>,
    violated: bool,
    count: usize,
}

impl Scan {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            worst: f64::INFINITY,
            point: None,
            violated: false,
            count: 0,
        }
    }

    fn record(&mut self, xi: f64, t: f64, z1: f64, z2: Option<f64>, lhs: f64, rhs: f64) {
        self.count += 1;
        let margin = rhs - lhs;
        let bad = !margin.is_finite() || margin < -AUDIT_RTOL * (1.0 + lhs.abs() + rhs.abs());
        // Prefer a genuine violation as witness over a larger roundoff-level negative margin.
        if (bad && !self.violated) || (bad == self.violated && margin < self.worst) {
            self.worst = margin;
            self.point = Some(Witness { xi, t, z1, z2, lhs, rhs });
        }
        self.violated |= bad;
    }

    fn finish(self) -> ConditionResult {
        ConditionResult {
            name: self.name.to_string(),
            status: if self.violated {
                ConditionStatus::Violated
            } else {
                ConditionStatus::Holds
            },
            worst_margin: self.worst,
            worst_point: self.point,
            evaluations: self.count,
        }
    }

    fn skipped(name: &'static str) -> ConditionResult {
        ConditionResult {
            name: name.to_string(),
            status: ConditionStatus::Skipped,
            worst_margin: f64::INFINITY,
            worst_point: None,
            evaluations: 0,
        }
    }
}

/// Audits the declared constants of `model` on `lattice`. Each entry reports
/// the worst margin `rhs − lhs` and where it occurs.
pub fn audit_conditions(model: &DriftModel, lattice: &AuditLattice) -> Result<AuditReport> {
    model.validate()?;
    if lattice.z_points < 2 || !(lattice.z_max > lattice.z_min) {
        return Err(Error::invalid("lattice", "need at least two z points on a proper interval"));
    }
    let r = &model.reaction;
    let tr = &model.transport;
    let m = r.m as f64;
    let zs = lattice.zs();

    let f_t = r.f.depends_on_t() || !r.c1.is_constant() || !r.c2.is_constant();
    let f_xi = r.f.depends_on_xi();
    let (f_ts, f_xis) = (lattice.ts(f_t), lattice.xis(f_xi));

    let mut conditions = Vec::new();

    let mut f1 = Scan::new("f1");
    for &t in &f_ts {
        let c1 = r.c1.eval(t);
        for &xi in &f_xis {
            for &z in &zs {
                f1.record(xi, t, z, None, r.f.eval(xi, t, z).abs(), c1 * (1.0 + z.abs().powf(m)));
            }
        }
    }
    conditions.push(f1.finish());

    let mut f2 = Scan::new("f2");
    for &t in &f_ts {
        let c2 = r.c2.eval(t);
        for &xi in &f_xis {
            for &z1 in &zs {
                let base = r.f.eval(xi, t, z1);
                let tail = z1.abs().powf(r.m1) + 1.0;
                for &z2 in &zs {
                    let lhs = (r.f.eval(xi, t, z1 + z2) - base) * z2;
                    f2.record(xi, t, z1, Some(z2), lhs, c2 * (z2 * z2 + tail));
                }
            }
        }
    }
    conditions.push(f2.finish());

    let g_t = tr.g1.depends_on_t() || tr.g2.depends_on_t();
    let (g_ts, g_xis) = (lattice.ts(g_t), lattice.xis(tr.g1.depends_on_xi()));

    let mut g1 = Scan::new("g1");
    for &t in &g_ts {
        for &xi in &g_xis {
            for &z in &zs {
                g1.record(xi, t, z, None, tr.g1.eval(xi, t, z).abs(), tr.k * (1.0 + z.abs()));
                g1.record(xi, t, z, None, tr.g2.eval(0.5, t, z).abs(), tr.k * (1.0 + z * z));
            }
        }
    }
    conditions.push(g1.finish());

    let mut g2 = Scan::new("g2");
    for &t in &g_ts {
        for &xi in &g_xis {
            let gz: Vec<f64> = zs.iter().map(|&z| tr.eval(xi, t, z)).collect();
            for (i, &z1) in zs.iter().enumerate() {
                for (j, &z2) in zs.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let lhs = (gz[i] - gz[j]).abs();
                    g2.record(xi, t, z1, Some(z2), lhs, tr.l * (1.0 + z1.abs() + z2.abs()) * (z1 - z2).abs());
                }
            }
        }
    }
    conditions.push(g2.finish());

    match model.one_sided_l {
        Some(l) => {
            let mut os = Scan::new("one-sided-lipschitz");
            for &t in &f_ts {
                for &xi in &f_xis {
                    let fz: Vec<f64> = zs.iter().map(|&z| r.f.eval(xi, t, z)).collect();
                    for (i, &z1) in zs.iter().enumerate() {
                        for (j, &z2) in zs.iter().enumerate() {
                            if i == j {
                                continue;
                            }
                            let d = z1 - z2;
                            let rhs = l * (1.0 + z1.abs().powf(m - 1.0) + z2.abs().powf(m - 1.0)) * d * d;
                            os.record(xi, t, z1, Some(z2), (fz[i] - fz[j]) * d, rhs);
                        }
                    }
                }
            }
            conditions.push(os.finish());
        }
        None => conditions.push(Scan::skipped("one-sided-lipschitz")),
    }

    match &r.decomposition {
        Some(dec) => {
            let mut ex = Scan::new("decomposition");
            let c = dec.c;
            for &t in &f_ts {
                for &xi in &f_xis {
                    for &z in &zs {
                        let (a, b) = (dec.f1.eval(xi, t, z), dec.f2.eval(xi, t, z));
                        let f = r.f.eval(xi, t, z);
                        let mismatch = (a + b - f).abs();
                        ex.record(xi, t, z, None, mismatch, AUDIT_RTOL * (1.0 + f.abs()));
                        ex.record(xi, t, z, None, dec.f1.deriv_z(xi, t, z), c);
                        ex.record(xi, t, z, None, b * z, c * (1.0 + z * z));
                        ex.record(xi, t, z, None, b.abs(), c * (1.0 + z.abs().powf(2.0 - 1.0 / m)));
                    }
                }
            }
            conditions.push(ex.finish());
        }
        None => conditions.push(Scan::skipped("decomposition")),
    }

    Ok(AuditReport {
        model: model.name.clone(),
        conditions,
    })
}

/// `g_n = φ_n * χ_n(g)` for both transport parts, with the constants `2K` and
/// `3·sup|χ'|·L` declared for the smoothed field.
pub fn mollify_transport(model: &DriftModel, n: u32) -> Result<TransportSpec> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let wrap = |field: &ScalarField, smooth_xi: bool| -> Result<ScalarField> {
        match field {
            ScalarField::Poly(p) => Ok(ScalarField::Mollified(Mollified {
                base: p.clone(),
                n,
                smooth_xi,
            })),
            ScalarField::Mollified(_) => Err(Error::invalid("transport", "already mollified")),
        }
    };
    let tr = &model.transport;
    Ok(TransportSpec {
        g1: wrap(&tr.g1, true)?,
        g2: wrap(&tr.g2, false)?,
        k: 2.0 * tr.k,
        l: 3.0 * CHI_SLOPE_BOUND * tr.l,
    })
}

/// `√2 kπ`, the sup of `|∂_ξ e_k|`.
pub fn basis_slope(k: usize) -> f64 {
    std::f64::consts::SQRT_2 * k as f64 * PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::SQRT_2;

    fn es() -> EigenSystem {
        EigenSystem::new(64, 256).unwrap()
    }

    fn single(es: &EigenSystem, k: usize) -> GridField {
        es.to_grid(&SpectralField::single_mode(es.modes(), k, 1.0)).unwrap()
    }

    #[test]
    fn f1_examples() {
        let es = EigenSystem::new(4, 8).unwrap();
        let b = DriftModel::preset(Preset::AllenCahn);
        let z = b.eval_f1(0.0, &GridField::zeros(8), &es).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
        let mut v = vec![0.0; 8];
        v[3] = 2.0;
        let u = b.eval_f1(0.0, &GridField::new(v), &es).unwrap();
        assert_eq!(u.values()[3], -6.0);
        let mut bad = vec![0.0; 8];
        bad[1] = 1e200;
        assert!(matches!(
            b.eval_f1(0.0, &GridField::new(bad), &es),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn f1_projection_of_negative_cube() {
        // ⟨−e₁³, e₁⟩ = −∫ 4 sin⁴(πξ) dξ = −3/2.
        let es = es();
        let mut m = DriftModel::preset(Preset::Linear);
        m.reaction.f = PolyField::monomials(&[(-1.0, 3)]);
        let u = m.eval_f1(0.0, &single(&es, 1), &es).unwrap();
        assert_abs_diff_eq!(es.to_spectral(&u).unwrap().coeffs()[0], -1.5, epsilon = 1e-12);
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(regularize_value(0.5, 2.0), 1.0);
        assert_eq!(regularize_value(0.3, 0.0), 0.0);
        let mut rng = RngStream::new(1, 0, Purpose::Audit);
        for i in 0..10_000 {
            rng.path = i;
            let u = 100.0 * (rng.uniform(0) - 0.5);
            let a = rng.uniform(1).max(1e-6);
            let w = regularize_value(a, u);
            assert!(w.abs() <= u.abs() && w.abs() < 1.0 / a);
        }
        assert!(check_alpha(1.5).is_err());
    }

    #[test]
    fn burgers_pairing() {
        // ∂_ξ(e₁²/2) = π sin(2πξ) = (π/√2) e₂.
        let es = es();
        let a = DriftModel::preset(Preset::Burgers);
        let p = a.pair_f2(0.0, &single(&es, 1), &es).unwrap();
        assert_abs_diff_eq!(p.coeffs()[1], PI / SQRT_2, epsilon = 1e-6);
        assert_abs_diff_eq!(PI / SQRT_2, 2.22144, epsilon = 1e-5);
        for (k, c) in p.coeffs().iter().enumerate() {
            if k != 1 {
                assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-6);
            }
        }
        let d = DriftModel::preset(Preset::Linear);
        assert!(d.pair_f2(0.0, &single(&es, 1), &es).unwrap().coeffs().iter().all(|c| *c == 0.0));

        let mut lin = DriftModel::preset(Preset::Linear);
        lin.transport.g2 = PolyField::monomials(&[(1.0, 1)]).into();
        let p = lin.pair_f2(0.0, &single(&es, 1), &es).unwrap();
        assert_abs_diff_eq!(p.coeffs()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn weak_pairing_matches_strong_derivative() {
        // Oracle: differentiate g(v(ξ)) analytically and project.
        let es = es();
        let a = DriftModel::preset(Preset::Burgers);
        let x = SpectralField::new((0..64).map(|k| if k < 5 { 0.3 / (k + 1) as f64 } else { 0.0 }).collect());
        let v = es.to_grid(&x).unwrap();
        let dv: Vec<f64> = es
            .grid_points()
            .iter()
            .map(|&xi| {
                x.coeffs()
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * basis_slope(k + 1) * ((k + 1) as f64 * PI * xi).cos())
                    .sum()
            })
            .collect();
        let strong: Vec<f64> = v.values().iter().zip(&dv).map(|(v, d)| v * d).collect();
        let s = es.to_spectral(&GridField::new(strong)).unwrap();
        let w = a.pair_f2(0.0, &v, &es).unwrap();
        for (a, b) in s.coeffs().iter().zip(w.coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let es = es();
        let c = DriftModel::preset(Preset::Combined);
        assert_abs_diff_eq!(c.lyapunov_j(0.0, &GridField::zeros(256)), 3.0);
        let mut m = DriftModel::preset(Preset::Burgers);
        m.reaction.c1 = Polynomial::constant(1.0);
        m.transport.k = 1.0;
        // |v|_{L⁴} = 1 for constant v ≡ 1 (trapezoid with implicit zero ends is G/(G+1), so rescale).
        let s = (257.0f64 / 256.0).powf(0.25);
        let j = m.lyapunov_j(0.0, &GridField::new(vec![s; 256]));
        assert_abs_diff_eq!(j, 8.0, epsilon = 1e-12);
        let _ = es;
    }

    #[test]
    fn bound_chain_on_random_states() {
        let es = es();
        for preset in [Preset::Burgers, Preset::AllenCahn, Preset::Combined, Preset::Linear] {
            let model = DriftModel::preset(preset);
            for x in random_states(&es, 1000, 2.0, 17) {
                let v = es.to_grid(&x).unwrap();
                let chain = model.bound_chain(0.1, &v, &es).unwrap();
                assert!(chain.holds(), "{preset:?} {chain:?}");
                // |F₂|_{V*} ≤ 2K(1+|v|²_{L⁴}) ≤ J.
                let l4 = lp_power_integral(v.values(), 4).sqrt();
                assert!(chain.f2_v_star <= 2.0 * model.transport.k * (1.0 + l4) + 1e-12);
            }
        }
    }

    #[test]
    fn burgers_orthogonality() {
        let es = es();
        let a = DriftModel::preset(Preset::Burgers);
        for x in random_states(&es, 200, 3.0, 4) {
            let p = a.pair_f2(0.0, &es.to_grid(&x).unwrap(), &es).unwrap();
            assert!(x.dot(&p).abs() < 1e-8);
        }
    }

    #[test]
    fn approximation_bound() {
        let es = es();
        let h = SpectralField::single_mode(64, 1, 1.0);
        let b = DriftModel::preset(Preset::AllenCahn);
        // Small amplitudes keep α|F₁| ≪ 1, the regime where the defect is linear in α.
        let samples: Vec<(f64, GridField)> = random_states(&es, 200, 0.05, 8)
            .iter()
            .map(|x| (0.0, es.to_grid(x).unwrap()))
            .collect();
        let r1 = check_approximation_bound(&b, 1.0, &h, &samples, &es).unwrap();
        let r2 = check_approximation_bound(&b, 0.1, &h, &samples, &es).unwrap();
        assert!(r1.pass && r2.pass);
        assert_abs_diff_eq!(r1.c_h, SQRT_2, epsilon = 1e-4);
        for (a, b) in r1.ratios.iter().zip(&r2.ratios) {
            if *b > 0.0 {
                assert!((0.8..=1.25).contains(&(a / b)), "{a} {b}");
            }
        }
        let a = DriftModel::preset(Preset::Burgers);
        let r = check_approximation_bound(&a, 0.5, &h, &samples, &es).unwrap();
        assert_eq!(r.max_ratio, 0.0);
        assert!(check_approximation_bound(&a, 0.0, &h, &samples, &es).is_err());
    }

    #[test]
    fn presets_pass_audit() {
        let lattice = AuditLattice {
            z_points: 201,
            ..AuditLattice::default()
        };
        for preset in [Preset::Burgers, Preset::AllenCahn, Preset::Combined, Preset::Linear] {
            let report = audit_conditions(&DriftModel::preset(preset), &lattice).unwrap();
            assert!(report.pass(), "{preset:?}: {:?}", report.first_violation());
        }
        let b = audit_conditions(&DriftModel::preset(Preset::AllenCahn), &lattice).unwrap();
        let os = b.get("one-sided-lipschitz").unwrap();
        assert_eq!(os.status, ConditionStatus::Holds);
        assert!(os.worst_margin >= 0.0);
    }

    #[test]
    fn wrong_constant_yields_witness() {
        let mut b = DriftModel::preset(Preset::AllenCahn);
        b.reaction.c1 = Polynomial::constant(0.5);
        let report = audit_conditions(&b, &AuditLattice { z_points: 41, ..Default::default() }).unwrap();
        let v = report.first_violation().unwrap();
        assert_eq!(v.name, "f1");
        let w = v.worst_point.unwrap();
        assert!(w.lhs > w.rhs);
    }

    #[test]
    fn chi_shape() {
        let n = 10.0;
        assert_eq!(clamp_chi(n, 7.0), 7.0);
        assert_eq!(clamp_chi(n, -10.0), -10.0);
        assert_eq!(clamp_chi(n, 25.0), 0.0);
        assert_abs_diff_eq!(clamp_chi(n, 20.0 - 1e-12), 0.0, epsilon = 1e-9);
        let mut max_slope: f64 = 0.0;
        let mut prev = clamp_chi(n, 0.0);
        let h = 1e-4;
        for i in 1..300_000 {
            let r = i as f64 * h;
            let c = clamp_chi(n, r);
            max_slope = max_slope.max(((c - prev) / h).abs());
            prev = c;
        }
        assert!(max_slope <= CHI_SLOPE_BOUND + 1e-3);
        assert!(max_slope >= CHI_SLOPE_BOUND - 1e-2);
    }

    #[test]
    fn mollifier_examples() {
        let a = DriftModel::preset(Preset::Burgers);
        let g10 = mollify_transport(&a, 10).unwrap();
        // Clamp active: g = 5000 ≫ 2n.
        let far = g10.eval(0.5, 0.0, 100.0);
        assert_eq!(far, 0.0);
        assert!(g10.eval(0.5, 0.0, 4.4).abs() <= 2.0 * 10.0 * 1.06);
        for z in [-3.0, 0.0, 3.0] {
            let exact = z * z / 2.0;
            let errs: Vec<f64> = [10u32, 100, 1000]
                .iter()
                .map(|&n| (mollify_transport(&a, n).unwrap().eval(0.5, 0.0, z) - exact).abs())
                .collect();
            assert!(errs[2] <= errs[0] && errs[2] < 1e-5, "{z}: {errs:?}");
        }
        let mut m = a.clone();
        m.transport = g10;
        assert_eq!(m.transport.k, 1.0);
        let report = audit_conditions(&m, &AuditLattice { z_points: 101, ..Default::default() }).unwrap();
        assert!(report.pass(), "{:?}", report.first_violation());
    }

    #[test]
    fn gronwall_constant_values() {
        assert!(DriftModel::preset(Preset::Combined).gronwall_constant().unwrap() > 0.0);
        assert_eq!(DriftModel::preset(Preset::Linear).gronwall_constant(), Some(0.0));
        let mut no = DriftModel::preset(Preset::Combined);
        no.one_sided_l = None;
        assert_eq!(no.gronwall_constant(), None);
    }

    proptest! {
        #[test]
        fn regularization_monotone_in_alpha(u in -1e3f64..1e3, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let d_lo = (u - regularize_value(lo, u)).abs();
            let d_hi = (u - regularize_value(hi, u)).abs();
            prop_assert!(d_lo <= d_hi * (1.0 + 1e-15) + 1e-300);
            prop_assert!(d_hi <= hi * u * u * (1.0 + 1e-12));
        }

        #[test]
        fn burgers_energy_orthogonality(coeffs in proptest::collection::vec(-3.0f64..3.0, 21)) {
            let es = EigenSystem::new(21, 64).unwrap();
            let x = SpectralField::new(coeffs);
            let p = DriftModel::preset(Preset::Burgers).pair_f2(0.0, &es.to_grid(&x).unwrap(), &es).unwrap();
            prop_assert!(x.dot(&p).abs() < 1e-8);
        }
    }
}
