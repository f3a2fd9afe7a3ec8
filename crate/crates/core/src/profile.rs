//! Full-pattern synthesis: Thompson-Cox-Hastings pseudo-Voigt peaks with a
//! one-parameter asymmetry correction, Chebyshev background, Poisson noise,
//! and weighted-profile agreement statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::{PatternGrid, PowderPattern};
use crate::xtal::Reflection;

/// TCH fifth-power mixing coefficients.
const TCH_A: f64 = 2.69269;
const TCH_B: f64 = 2.42843;
const TCH_C: f64 = 4.47163;
const TCH_D: f64 = 0.07842;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("Gaussian variance U·tan²θ + V·tanθ + W = {0} is negative at 2θ = {1}°")]
    NegativeGaussianVariance(f64, f64),
    #[error("Lorentzian width X·tanθ + Y/cosθ = {0} is negative at 2θ = {1}°")]
    NegativeLorentzianWidth(f64, f64),
    #[error("total peak width is zero at 2θ = {0}°")]
    ZeroWidth(f64),
    #[error("2θ = {0}° outside the open interval (0°, 180°)")]
    ThetaOutOfRange(f64),
    #[error("background model needs exactly 10 coefficients, got {0}")]
    BadBackgroundLength(usize),
    #[error("grid mismatch between observed and calculated patterns")]
    GridMismatch,
    #[error("not enough points: N = {n} with {n_params} parameters")]
    TooFewPoints { n: usize, n_params: usize },
    #[error(transparent)]
    Pattern(#[from] crate::pattern::PatternError),
}

/// Peak-shape parameters. U, V, W in deg² of 2θ; X, Y in deg; asym and
/// zero_shift as in the synthesis model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub asym: f64,
    pub zero_shift: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            u: 0.0,
            v: 0.0,
            w: 0.004,
            x: 0.0,
            y: 0.02,
            asym: 0.0,
            zero_shift: 0.0,
        }
    }
}

/// Width state of one peak at a given 2θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TchWidths {
    pub gamma_g: f64,
    pub gamma_l: f64,
    pub gamma: f64,
    pub eta: f64,
}

/// Evaluate the TCH width mix at a peak position (degrees 2θ).
pub fn tch_widths(p: &ProfileParams, two_theta: f64) -> Result<TchWidths, ProfileError> {
    if !(two_theta > 0.0 && two_theta < 180.0) {
        return Err(ProfileError::ThetaOutOfRange(two_theta));
    }
    let theta = (two_theta / 2.0).to_radians();
    let t = theta.tan();
    let var_g = p.u * t * t + p.v * t + p.w;
    if var_g < 0.0 {
        return Err(ProfileError::NegativeGaussianVariance(var_g, two_theta));
    }
    let gamma_g = var_g.sqrt();
    let gamma_l = p.x * t + p.y / theta.cos();
    if gamma_l < 0.0 {
        return Err(ProfileError::NegativeLorentzianWidth(gamma_l, two_theta));
    }
    let g = gamma_g;
    let l = gamma_l;
    let gamma5 = g.powi(5)
        + TCH_A * g.powi(4) * l
        + TCH_B * g.powi(3) * l * l
        + TCH_C * g * g * l.powi(3)
        + TCH_D * g * l.powi(4)
        + l.powi(5);
    let gamma = gamma5.powf(0.2);
    if !(gamma > 0.0) {
        return Err(ProfileError::ZeroWidth(two_theta));
    }
    let q = l / gamma;
    let eta = 1.36603 * q - 0.47719 * q * q + 0.11116 * q * q * q;
    Ok(TchWidths {
        gamma_g,
        gamma_l,
        gamma,
        eta,
    })
}

/// Pseudo-Voigt value at offset `delta` (degrees) from the peak center with
/// FWHM `gamma`, mixing `eta`, and the single-parameter asymmetry factor
/// A(Δ) = max(0, 1 − asym·sign(Δ)·Δ²/tanθ_c).
pub fn peak_value(delta: f64, gamma: f64, eta: f64, asym: f64, two_theta_center: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    let lorentz = (2.0 / (std::f64::consts::PI * gamma)) / (1.0 + 4.0 * delta * delta / (gamma * gamma));
    let gauss = (2.0 / gamma) * (LN2 / std::f64::consts::PI).sqrt()
        * (-4.0 * LN2 * delta * delta / (gamma * gamma)).exp();
    let pv = eta * lorentz + (1.0 - eta) * gauss;
    if asym == 0.0 {
        return pv;
    }
    let t = (two_theta_center / 2.0).to_radians().tan();
    let a = 1.0 - asym * delta.signum() * delta * delta / t;
    pv * a.max(0.0)
}

/// Chebyshev background, exactly 10 coefficients on x̄ ∈ [−1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    coeffs: [f64; 10],
}

impl BackgroundModel {
    pub fn new(coeffs: &[f64]) -> Result<Self, ProfileError> {
        let arr: [f64; 10] = coeffs
            .try_into()
            .map_err(|_| ProfileError::BadBackgroundLength(coeffs.len()))?;
        Ok(BackgroundModel { coeffs: arr })
    }

    pub fn zero() -> Self {
        BackgroundModel { coeffs: [0.0; 10] }
    }

    pub fn constant(level: f64) -> Self {
        let mut coeffs = [0.0; 10];
        coeffs[0] = level;
        BackgroundModel { coeffs }
    }

    pub fn coeffs(&self) -> &[f64; 10] {
        &self.coeffs
    }
}

/// Chebyshev series of arbitrary order at x̄ via the three-term recurrence.
pub(crate) fn chebyshev_series(coeffs: &[f64], xbar: f64) -> f64 {
    let mut t_prev = 1.0;
    let mut t_cur = xbar;
    let mut acc = coeffs.first().copied().unwrap_or(0.0);
    for (n, &c) in coeffs.iter().enumerate().skip(1) {
        if n == 1 {
            acc += c * t_cur;
        } else {
            let t_next = 2.0 * xbar * t_cur - t_prev;
            t_prev = t_cur;
            t_cur = t_next;
            acc += c * t_cur;
        }
    }
    acc
}

pub(crate) fn normalized_abscissa(t: f64, min: f64, max: f64) -> f64 {
    2.0 * (t - min) / (max - min) - 1.0
}

/// Background values over a grid: value_i = Σ coeffs[n]·Tₙ(x̄_i).
pub fn background_curve(b: &BackgroundModel, grid: &PatternGrid) -> Vec<f64> {
    background_at(
        b.coeffs(),
        &grid.positions(),
        grid.two_theta_min,
        grid.two_theta_max,
    )
}

/// Background values at explicit positions, normalized to [min, max].
pub fn background_at(coeffs: &[f64], positions: &[f64], min: f64, max: f64) -> Vec<f64> {
    positions
        .iter()
        .map(|&t| chebyshev_series(coeffs, normalized_abscissa(t, min, max)))
        .collect()
}

/// Broad amorphous bump from the polyimide sample support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KaptonParams {
    /// degrees 2θ
    pub center: f64,
    /// degrees
    pub fwhm: f64,
    /// fraction of the tallest Bragg peak
    pub height_frac: f64,
}

impl Default for KaptonParams {
    fn default() -> Self {
        KaptonParams {
            center: 6.0,
            fwhm: 3.0,
            height_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// Poisson noise seed; noiseless when absent.
    pub noise_seed: Option<u64>,
    /// Kapton bump; off when absent.
    pub kapton: Option<KaptonParams>,
}

/// Poisson draw with mean `mean`, keyed by (seed, point index) so the result
/// is independent of evaluation order.
pub fn poisson_draw(seed: u64, index: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    Poisson::new(mean).expect("positive mean").sample(&mut rng)
}

/// Synthesize a full pattern: background + Bragg peaks (+ optional Kapton
/// bump), then an optional deterministic Poisson draw per point.
pub fn synthesize(
    reflections: &[Reflection],
    p: &ProfileParams,
    b: &BackgroundModel,
    grid: &PatternGrid,
    opts: &SynthOptions,
) -> Result<PowderPattern, ProfileError> {
    let positions = grid.positions();
    if positions.is_empty() {
        return Err(ProfileError::Pattern(crate::pattern::PatternError::Empty));
    }
    let mut y = background_curve(b, grid);
    let mut bragg = vec![0.0; positions.len()];
    for r in reflections {
        let widths = tch_widths(p, r.two_theta)?;
        let center = r.two_theta + p.zero_shift;
        let weight = r.intensity * r.multiplicity as f64;
        if weight == 0.0 {
            continue;
        }
        for (i, &t) in positions.iter().enumerate() {
            bragg[i] += weight * peak_value(t - center, widths.gamma, widths.eta, p.asym, r.two_theta);
        }
    }
    if let Some(kapton) = &opts.kapton {
        let tallest = bragg.iter().cloned().fold(0.0, f64::max);
        let height = kapton.height_frac * tallest;
        if height > 0.0 {
            let c = 4.0 * LN2 / (kapton.fwhm * kapton.fwhm);
            for (i, &t) in positions.iter().enumerate() {
                let d = t - kapton.center;
                bragg[i] += height * (-c * d * d).exp();
            }
        }
    }
    for i in 0..y.len() {
        y[i] += bragg[i];
    }
    let sigma = match opts.noise_seed {
        Some(seed) => {
            let mut s = Vec::with_capacity(y.len());
            for (i, yi) in y.iter_mut().enumerate() {
                let drawn = poisson_draw(seed, i as u64, *yi);
                *yi = drawn;
                s.push(drawn.max(1.0).sqrt());
            }
            Some(s)
        }
        None => None,
    };
    Ok(PowderPattern::new(positions, y, sigma)?)
}

/// Weighted-profile agreement between two patterns on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// weighted-profile residual, percent
    pub rwp: f64,
    /// statistical floor of Rwp, percent
    pub rexp: f64,
    /// (Rwp/Rexp)²
    pub chi2: f64,
}

pub fn agreement(
    observed: &PowderPattern,
    calculated: &PowderPattern,
    n_params: usize,
) -> Result<Agreement, ProfileError> {
    if !observed.same_grid(calculated) {
        return Err(ProfileError::GridMismatch);
    }
    let n = observed.len();
    if n <= n_params {
        return Err(ProfileError::TooFewPoints { n, n_params });
    }
    let w = observed.weights();
    let yo = observed.intensities();
    let yc = calculated.intensities();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let d = yo[i] - yc[i];
        num += w[i] * d * d;
        den += w[i] * yo[i] * yo[i];
    }
    let rwp = 100.0 * (num / den).sqrt();
    let rexp = 100.0 * (((n - n_params) as f64) / den).sqrt();
    let chi2 = (rwp / rexp).powi(2);
    Ok(Agreement { rwp, rexp, chi2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eta_limits() {
        // pure Gaussian: q = 0 -> eta = 0
        let p = ProfileParams {
            u: 0.0,
            v: 0.0,
            w: 0.01,
            x: 0.0,
            y: 0.0,
            ..Default::default()
        };
        let w = tch_widths(&p, 20.0).unwrap();
        assert_eq!(w.eta, 0.0);
        assert_relative_eq!(w.gamma, 0.1, epsilon = 1e-12);
        assert_relative_eq!(w.gamma_g, 0.1, epsilon = 1e-12);

        // pure Lorentzian: q = 1 -> eta = 1.36603 - 0.47719 + 0.11116 = 1
        let p = ProfileParams {
            u: 0.0,
            v: 0.0,
            w: 0.0,
            x: 0.0,
            y: 0.05,
            ..Default::default()
        };
        let w = tch_widths(&p, 20.0).unwrap();
        assert_relative_eq!(w.eta, 1.0, epsilon = 1e-10);
        assert_relative_eq!(w.gamma, w.gamma_l, epsilon = 1e-12);
    }

    #[test]
    fn negative_variance_is_domain_error() {
        let p = ProfileParams {
            u: 0.0,
            v: 0.0,
            w: -0.01,
            ..Default::default()
        };
        assert!(matches!(
            tch_widths(&p, 20.0),
            Err(ProfileError::NegativeGaussianVariance(..))
        ));
    }

    #[test]
    fn eta_bounded_and_gamma_dominates_components() {
        for i in 0..=100 {
            let y = 0.001 * i as f64; // sweep Lorentzian fraction
            let p = ProfileParams {
                u: 0.0,
                v: 0.0,
                w: 0.004,
                x: 0.0,
                y,
                ..Default::default()
            };
            let w = tch_widths(&p, 25.0).unwrap();
            assert!(w.eta >= 0.0 && w.eta <= 1.0000001, "eta = {}", w.eta);
            assert!(w.gamma >= w.gamma_g - 1e-12);
            assert!(w.gamma >= w.gamma_l - 1e-12);
        }
    }

    #[test]
    fn gaussian_apex_closed_form() {
        let gamma = 0.1;
        let apex = peak_value(0.0, gamma, 0.0, 0.0, 20.0);
        let expect = (2.0 / gamma) * (LN2 / std::f64::consts::PI).sqrt();
        assert_relative_eq!(apex, expect, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_when_asym_zero() {
        for eta in [0.0, 0.3, 1.0] {
            for d in [0.01, 0.07, 0.5] {
                assert_eq!(
                    peak_value(d, 0.1, eta, 0.0, 20.0),
                    peak_value(-d, 0.1, eta, 0.0, 20.0)
                );
            }
        }
    }

    fn trapezoid_area(gamma: f64, eta: f64, half_width_gammas: f64) -> f64 {
        let n = 80_000;
        let lo = -half_width_gammas * gamma;
        let hi = half_width_gammas * gamma;
        let h = (hi - lo) / n as f64;
        let mut area = 0.0;
        for i in 0..=n {
            let d = lo + i as f64 * h;
            let v = peak_value(d, gamma, eta, 0.0, 20.0);
            area += if i == 0 || i == n { 0.5 * v } else { v };
        }
        area * h
    }

    #[test]
    fn unit_area_by_quadrature() {
        let gamma = 0.12;
        // Gaussian tails beyond ±20Γ are negligible: the window integral is 1
        let area = trapezoid_area(gamma, 0.0, 20.0);
        assert!((area - 1.0).abs() < 1e-3, "gaussian window area {area}");
        // for eta > 0 the Lorentzian keeps (1 - (2/π)atan(2a)) of its mass
        // outside ±aΓ; the window integral must match the analytic truncated
        // mass, which proves both components are unit-area over the real line
        for eta in [0.25, 0.4, 1.0] {
            let a: f64 = 20.0;
            let truncated = eta * (2.0 / std::f64::consts::PI) * (2.0 * a).atan() + (1.0 - eta);
            let area = trapezoid_area(gamma, eta, a);
            assert!(
                (area - truncated).abs() < 1e-6,
                "area {area} vs analytic {truncated} at eta {eta}"
            );
        }
    }

    #[test]
    fn asymmetry_factor_clamped_nonnegative() {
        // large asym drives the factor negative on one side; output must clamp to 0
        let v = peak_value(1.0, 0.1, 0.5, 100.0, 20.0);
        assert_eq!(v, 0.0);
        let v = peak_value(-1.0, 0.1, 0.5, 100.0, 20.0);
        assert!(v > 0.0);
    }

    #[test]
    fn background_basis_values() {
        let grid = PatternGrid::new(4.0, 40.0, 0.5).unwrap();
        let mut c = [0.0; 10];
        c[0] = 5.0;
        let b = BackgroundModel::new(&c).unwrap();
        let v = background_curve(&b, &grid);
        assert!(v.iter().all(|&x| (x - 5.0).abs() < 1e-12));

        let mut c = [0.0; 10];
        c[1] = 1.0;
        let b = BackgroundModel::new(&c).unwrap();
        let v = background_curve(&b, &grid);
        assert_relative_eq!(v[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(*v.last().unwrap(), 1.0, epsilon = 1e-9);

        // T2(0) = -1 at the window midpoint
        let mut c = [0.0; 10];
        c[2] = 1.0;
        assert_relative_eq!(chebyshev_series(&c, 0.0), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn background_length_enforced() {
        assert!(BackgroundModel::new(&[1.0; 9]).is_err());
        assert!(BackgroundModel::new(&[1.0; 11]).is_err());
    }

    #[test]
    fn synth_empty_inputs() {
        let grid = PatternGrid::new(4.0, 40.0, 0.013).unwrap();
        let p = synthesize(
            &[],
            &ProfileParams::default(),
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions::default(),
        )
        .unwrap();
        assert_eq!(p.len(), 2770);
        assert!(p.intensities().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn synth_single_peak_apex_near_center() {
        let grid = PatternGrid::new(4.0, 40.0, 0.013).unwrap();
        let r = Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 8.0,
            two_theta: 20.0,
            multiplicity: 2,
            intensity: 100.0,
        };
        let p = synthesize(
            &[r],
            &ProfileParams::default(),
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions::default(),
        )
        .unwrap();
        let (imax, _) = p
            .intensities()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!((p.two_theta()[imax] - 20.0).abs() <= grid.step + 1e-12);
    }

    #[test]
    fn synth_deterministic_and_linear() {
        let grid = PatternGrid::new(4.0, 20.0, 0.013).unwrap();
        let mk = |tt: f64, i: f64| Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 5.0,
            two_theta: tt,
            multiplicity: 1,
            intensity: i,
        };
        let ra = mk(8.0, 40.0);
        let rb = mk(12.5, 70.0);
        let prof = ProfileParams::default();
        let bg = BackgroundModel::constant(3.0);
        let both = synthesize(&[ra, rb], &prof, &bg, &grid, &SynthOptions::default()).unwrap();
        let only_a = synthesize(&[ra], &prof, &bg, &grid, &SynthOptions::default()).unwrap();
        let only_b = synthesize(&[rb], &prof, &bg, &grid, &SynthOptions::default()).unwrap();
        let bgc = background_curve(&bg, &grid);
        for i in 0..both.len() {
            let lin = only_a.intensities()[i] + only_b.intensities()[i] - bgc[i];
            assert_relative_eq!(both.intensities()[i], lin, max_relative = 1e-10, epsilon = 1e-12);
        }
        // determinism with a seed
        let opts = SynthOptions {
            noise_seed: Some(42),
            kapton: None,
        };
        let n1 = synthesize(&[ra, rb], &prof, &bg, &grid, &opts).unwrap();
        let n2 = synthesize(&[ra, rb], &prof, &bg, &grid, &opts).unwrap();
        assert_eq!(n1, n2);
        let n3 = synthesize(
            &[ra, rb],
            &prof,
            &bg,
            &grid,
            &SynthOptions {
                noise_seed: Some(43),
                kapton: None,
            },
        )
        .unwrap();
        assert_ne!(n1, n3);
    }

    #[test]
    fn kapton_bump_appears_near_six_degrees() {
        let grid = PatternGrid::new(4.0, 40.0, 0.013).unwrap();
        let r = Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 5.0,
            two_theta: 20.0,
            multiplicity: 1,
            intensity: 1000.0,
        };
        let plain = synthesize(
            &[r],
            &ProfileParams::default(),
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions::default(),
        )
        .unwrap();
        let with = synthesize(
            &[r],
            &ProfileParams::default(),
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions {
                noise_seed: None,
                kapton: Some(KaptonParams::default()),
            },
        )
        .unwrap();
        let at = |p: &PowderPattern, t: f64| {
            let i = p
                .two_theta()
                .iter()
                .position(|&x| (x - t).abs() < 0.0066)
                .unwrap();
            p.intensities()[i]
        };
        let bump = at(&with, 6.0) - at(&plain, 6.0);
        let apex = plain.max_intensity();
        assert!(bump > 0.04 * apex && bump < 0.06 * apex, "bump = {bump}");
    }

    #[test]
    fn agreement_trivial_cases() {
        let grid = PatternGrid::new(4.0, 10.0, 0.1).unwrap();
        let tt = grid.positions();
        let n = tt.len();
        let yo: Vec<f64> = (0..n).map(|i| 50.0 + (i % 7) as f64).collect();
        let obs = PowderPattern::new(tt.clone(), yo.clone(), None).unwrap();
        let same = PowderPattern::new(tt.clone(), yo, None).unwrap();
        let a = agreement(&obs, &same, 0).unwrap();
        assert_eq!(a.rwp, 0.0);
        assert_eq!(a.chi2, 0.0);

        let zero = PowderPattern::new(tt, vec![0.0; n], None).unwrap();
        let a = agreement(&obs, &zero, 0).unwrap();
        assert_relative_eq!(a.rwp, 100.0, epsilon = 1e-9);

        let other_grid = PatternGrid::new(4.0, 10.0, 0.2).unwrap();
        let m = other_grid.n_points();
        let other = PowderPattern::new(other_grid.positions(), vec![1.0; m], None).unwrap();
        assert!(matches!(agreement(&obs, &other, 0), Err(ProfileError::GridMismatch)));
        let few = PowderPattern::new(vec![1.0], vec![1.0], None).unwrap();
        assert!(agreement(&few, &few, 5).is_err());
    }
}
