//! Dirichlet-Laplacian eigensystem on (0,1) and the transforms between
//! sine coefficients and grid values.
//!
//! The basis is `e_k(ξ) = √2 sin(kπξ)` with `λ_k = (kπ)²`. Grid values live on
//! the interior lattice `ξ_j = j/(G+1)`, `j = 1..=G`; the Dirichlet zeros at
//! both ends are implicit. Integrals use the composite trapezoid rule on that
//! lattice (weight `1/(G+1)` per interior node), under which the sines are
//! exactly orthonormal for `k ≤ G`. That makes [`EigenSystem::to_spectral`] the
//! exact inverse of [`EigenSystem::to_grid`] whenever `N ≤ G`.
//!
//! Two transform backends exist: dense tables (cheap for the default
//! `N = 64, G = 256`) and an FFT-based sine/cosine transform for larger sizes.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Coefficients `a_k = ⟨x, e_k⟩`, `k = 1..=N`, stored zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(modes: usize) -> Self {
        Self {
            coeffs: vec![0.0; modes],
        }
    }

    /// `amplitude · e_k` with `k` one-based.
    pub fn single_mode(modes: usize, k: usize, amplitude: f64) -> Self {
        assert!(k >= 1 && k <= modes, "mode {k} outside 1..={modes}");
        let mut coeffs = vec![0.0; modes];
        coeffs[k - 1] = amplitude;
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|a| a.is_finite())
    }

    /// `|x|_H²` by Parseval.
    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &SpectralField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Zero-pads or truncates to `modes` coefficients.
    pub fn resized(&self, modes: usize) -> SpectralField {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(modes, 0.0);
        SpectralField { coeffs }
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Values `x(ξ_j)` on the interior lattice. Boundary zeros are never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridField {
    values: Vec<f64>,
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(grid_size: usize) -> Self {
        Self {
            values: vec![0.0; grid_size],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

pub(crate) fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `(|x|_H, |x|_V, |x|_{V*})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormTriple {
    pub h: f64,
    pub v: f64,
    pub v_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    /// Dense tables below a size threshold, FFT above it.
    #[default]
    Auto,
    Dense,
    Fft,
}

/// Above this many table entries the FFT path wins on one core.
const DENSE_TABLE_LIMIT: usize = 1 << 15;

enum Backend {
    Dense {
        /// `modes × G`, row k holds `√2 sin(kπξ_j)`.
        sine: Vec<f64>,
        /// `modes × (G+2)`, row k holds the weak-derivative weights
        /// `-√2 kπ w_j cos(kπξ_j)` including both endpoints at half weight.
        cosine: Vec<f64>,
    },
    Fft(Arc<dyn Fft<f64>>),
}

/// Dirichlet eigensystem truncated at `N` modes with a `G`-point interior grid.
pub struct EigenSystem {
    modes: usize,
    grid_size: usize,
    lambdas: Vec<f64>,
    grid_points: Vec<f64>,
    backend: Backend,
}

impl fmt::Debug for EigenSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EigenSystem")
            .field("modes", &self.modes)
            .field("grid_size", &self.grid_size)
            .field("backend", &self.transform_kind())
            .finish()
    }
}

/// Reusable buffers for the FFT backend. Empty for the dense backend.
#[derive(Default)]
pub struct Scratch {
    buf: Vec<Complex<f64>>,
    fft: Vec<Complex<f64>>,
}

impl EigenSystem {
    pub fn new(modes: usize, grid_size: usize) -> Result<Self> {
        Self::with_transform(modes, grid_size, TransformKind::Auto)
    }

    pub fn with_transform(modes: usize, grid_size: usize, kind: TransformKind) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("modes", "need at least one mode"));
        }
        if grid_size < 2 * modes {
            return Err(Error::invalid(
                "grid_size",
                format!("grid size {grid_size} below dealiasing margin 2N = {}", 2 * modes),
            ));
        }
        let lambdas = (1..=modes).map(|k| (k as f64 * PI).powi(2)).collect();
        let h = 1.0 / (grid_size + 1) as f64;
        let grid_points = (1..=grid_size).map(|j| j as f64 * h).collect();

        let use_fft = match kind {
            TransformKind::Dense => false,
            TransformKind::Fft => true,
            TransformKind::Auto => modes * grid_size > DENSE_TABLE_LIMIT,
        };
        let backend = if use_fft {
            let len = 2 * (grid_size + 1);
            Backend::Fft(FftPlanner::new().plan_fft_forward(len))
        } else {
            Self::dense_tables(modes, grid_size)
        };

        Ok(Self {
            modes,
            grid_size,
            lambdas,
            grid_points,
            backend,
        })
    }

    fn dense_tables(modes: usize, grid_size: usize) -> Backend {
        let period = 2 * (grid_size + 1);
        let h = 1.0 / (grid_size + 1) as f64;
        // Reduce k·j modulo the period so that symmetric nodes agree bit-for-bit.
        let angle = |k: usize, j: usize| PI * ((k * j) % period) as f64 * h;

        let mut sine = Vec::with_capacity(modes * grid_size);
        for k in 1..=modes {
            sine.extend((1..=grid_size).map(|j| SQRT_2 * angle(k, j).sin()));
        }

        let mut cosine = Vec::with_capacity(modes * (grid_size + 2));
        for k in 1..=modes {
            let scale = -SQRT_2 * k as f64 * PI * h;
            cosine.extend((0..=grid_size + 1).map(|j| {
                let end = if j == 0 || j == grid_size + 1 { 0.5 } else { 1.0 };
                scale * end * angle(k, j).cos()
            }));
        }
        Backend::Dense { sine, cosine }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// `λ_k`, zero-based storage.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn grid_points(&self) -> &[f64] {
        &self.grid_points
    }

    /// `ω = -λ_1`.
    pub fn spectral_gap(&self) -> f64 {
        -self.lambdas[0]
    }

    pub fn quadrature_weight(&self) -> f64 {
        1.0 / (self.grid_size + 1) as f64
    }

    pub fn transform_kind(&self) -> TransformKind {
        match self.backend {
            Backend::Dense { .. } => TransformKind::Dense,
            Backend::Fft(_) => TransformKind::Fft,
        }
    }

    pub fn scratch(&self) -> Scratch {
        match &self.backend {
            Backend::Dense { .. } => Scratch::default(),
            Backend::Fft(fft) => Scratch {
                buf: vec![Complex::default(); 2 * (self.grid_size + 1)],
                fft: vec![Complex::default(); fft.get_inplace_scratch_len()],
            },
        }
    }

    /// `e_k(ξ)` evaluated in closed form; `k` one-based.
    pub fn basis_value(k: usize, xi: f64) -> f64 {
        SQRT_2 * (k as f64 * PI * xi).sin()
    }

    pub fn to_grid(&self, x: &SpectralField) -> Result<GridField> {
        check_len(self.modes, x.len())?;
        let mut out = vec![0.0; self.grid_size];
        self.synthesize(x.coeffs(), &mut out, &mut self.scratch());
        Ok(GridField::new(out))
    }

    pub fn to_spectral(&self, v: &GridField) -> Result<SpectralField> {
        check_len(self.grid_size, v.len())?;
        let mut out = vec![0.0; self.modes];
        self.analyze(v.values(), &mut out, &mut self.scratch());
        Ok(SpectralField::new(out))
    }

    /// `out_j = Σ_k a_k e_k(ξ_j)`. Slices must have lengths `N` and `G`.
    pub fn synthesize(&self, coeffs: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        debug_assert_eq!(coeffs.len(), self.modes);
        debug_assert_eq!(out.len(), self.grid_size);
        match &self.backend {
            Backend::Dense { sine, .. } => {
                out.fill(0.0);
                for (a, row) in coeffs.iter().zip(sine.chunks_exact(self.grid_size)) {
                    if *a == 0.0 {
                        continue;
                    }
                    for (o, s) in out.iter_mut().zip(row) {
                        *o += a * s;
                    }
                }
            }
            Backend::Fft(fft) => {
                let g = self.grid_size;
                let len = 2 * (g + 1);
                let buf = &mut scratch.buf;
                buf.fill(Complex::default());
                for (k, a) in coeffs.iter().enumerate() {
                    let b = SQRT_2 * a;
                    buf[k + 1] = Complex::new(b, 0.0);
                    buf[len - k - 1] = Complex::new(-b, 0.0);
                }
                fft.process_with_scratch(buf, &mut scratch.fft);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = -0.5 * buf[j + 1].im;
                }
            }
        }
    }

    /// `out_k = Σ_j w v_j e_k(ξ_j)`, the trapezoid projection onto the first `N` modes.
    pub fn analyze(&self, values: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        debug_assert_eq!(values.len(), self.grid_size);
        debug_assert_eq!(out.len(), self.modes);
        let w = self.quadrature_weight();
        match &self.backend {
            Backend::Dense { sine, .. } => {
                for (o, row) in out.iter_mut().zip(sine.chunks_exact(self.grid_size)) {
                    *o = w * dot(row, values);
                }
            }
            Backend::Fft(fft) => {
                let g = self.grid_size;
                let len = 2 * (g + 1);
                let buf = &mut scratch.buf;
                buf.fill(Complex::default());
                for (j, v) in values.iter().enumerate() {
                    buf[j + 1] = Complex::new(*v, 0.0);
                    buf[len - j - 1] = Complex::new(-v, 0.0);
                }
                fft.process_with_scratch(buf, &mut scratch.fft);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = -0.5 * SQRT_2 * w * buf[k + 1].im;
                }
            }
        }
    }

    /// Weak derivative pairing `out_k = -∫ g ∂_ξ e_k dξ`, i.e. `⟨∂_ξ g, e_k⟩`
    /// for Dirichlet test functions. `g_full` holds `g` at `ξ_0 = 0`, the `G`
    /// interior nodes and `ξ_{G+1} = 1` (length `G + 2`).
    pub fn weak_derivative_pairing(&self, g_full: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        debug_assert_eq!(g_full.len(), self.grid_size + 2);
        debug_assert_eq!(out.len(), self.modes);
        match &self.backend {
            Backend::Dense { cosine, .. } => {
                for (o, row) in out.iter_mut().zip(cosine.chunks_exact(self.grid_size + 2)) {
                    *o = dot(row, g_full);
                }
            }
            Backend::Fft(fft) => {
                let g = self.grid_size;
                let len = 2 * (g + 1);
                let w = self.quadrature_weight();
                let buf = &mut scratch.buf;
                for (j, v) in g_full.iter().enumerate() {
                    buf[j] = Complex::new(*v, 0.0);
                }
                for j in 1..=g {
                    buf[len - j] = Complex::new(g_full[j], 0.0);
                }
                fft.process_with_scratch(buf, &mut scratch.fft);
                for (k, o) in out.iter_mut().enumerate() {
                    let kk = (k + 1) as f64;
                    *o = -SQRT_2 * kk * PI * w * 0.5 * buf[k + 1].re;
                }
            }
        }
    }

    pub fn norm_triple(&self, x: &SpectralField) -> Result<NormTriple> {
        check_len(self.modes, x.len())?;
        let (mut h, mut v, mut vs) = (0.0, 0.0, 0.0);
        for (a, l) in x.coeffs().iter().zip(&self.lambdas) {
            let a2 = a * a;
            h += a2;
            v += l * a2;
            vs += a2 / l;
        }
        Ok(NormTriple {
            h: h.sqrt(),
            v: v.sqrt(),
            v_star: vs.sqrt(),
        })
    }

    /// `|x|_V²`.
    pub fn v_norm_sq(&self, coeffs: &[f64]) -> f64 {
        coeffs.iter().zip(&self.lambdas).map(|(a, l)| l * a * a).sum()
    }

    /// `|x|_{V*}²`.
    pub fn v_star_norm_sq(&self, coeffs: &[f64]) -> f64 {
        coeffs.iter().zip(&self.lambdas).map(|(a, l)| a * a / l).sum()
    }

    /// `(-A)^δ x`; `δ` may be negative.
    pub fn apply_fractional(&self, x: &SpectralField, delta: f64) -> Result<SpectralField> {
        check_len(self.modes, x.len())?;
        Ok(SpectralField::new(
            x.coeffs()
                .iter()
                .zip(&self.lambdas)
                .map(|(a, l)| l.powf(delta) * a)
                .collect(),
        ))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler keep independent FMA chains in flight.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `Σ_j w v_j^p` for even `p`: the trapezoid value of `∫ v^p dξ`.
pub fn lp_power_integral(values: &[f64], p: u32) -> f64 {
    let w = 1.0 / (values.len() + 1) as f64;
    w * values.iter().map(|v| v.powi(p as i32)).sum::<f64>()
}

/// `|v|_{L^p}` by trapezoid quadrature. Only even `p ≥ 2` is accepted.
pub fn norm_lp(v: &GridField, p: u32) -> Result<f64> {
    if p < 2 || p % 2 != 0 {
        return Err(Error::invalid("p", format!("expected an even exponent ≥ 2, got {p}")));
    }
    Ok(lp_power_integral(v.values(), p).powf(1.0 / p as f64))
}
