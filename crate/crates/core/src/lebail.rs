//! Le Bail whole-pattern decomposition: alternate reflection-intensity
//! partitioning with damped least-squares refinement of cell, zero shift,
//! profile, and background; report the fitted cell with uncertainties.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::PowderPattern;
use crate::profile::{
    background_at, peak_value, tch_widths, BackgroundModel, ProfileParams,
};
use crate::xtal::{d_spacing, reflection_list, Reflection, SpaceGroupRules, UnitCell, Wavelength, XtalError};

#[derive(Debug, Error)]
pub enum LebailError {
    #[error("invalid refinement problem: {0}")]
    InvalidProblem(String),
    #[error("calculated pattern is zero everywhere in the fit range")]
    AllZeroCalculated,
    #[error("singular normal matrix; degenerate parameter(s): {0}")]
    SingularNormalMatrix(String),
    #[error(transparent)]
    Xtal(#[from] XtalError),
    #[error(transparent)]
    Profile(#[from] crate::profile::ProfileError),
    #[error(transparent)]
    Pattern(#[from] crate::pattern::PatternError),
}

/// Which parameter groups the refinement may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub cell: bool,
    pub zero: bool,
    pub u: bool,
    pub v: bool,
    pub w: bool,
    pub x: bool,
    pub y: bool,
    pub asym: bool,
    pub background: bool,
}

impl Default for FreeParams {
    fn default() -> Self {
        FreeParams {
            cell: true,
            zero: true,
            u: true,
            v: true,
            w: true,
            x: true,
            y: true,
            asym: true,
            background: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementProblem {
    pub observed: PowderPattern,
    pub cell0: UnitCell,
    pub rules: SpaceGroupRules,
    pub lambda: Wavelength,
    /// 2θ fit window in degrees.
    pub fit_range: (f64, f64),
    pub free: FreeParams,
    pub max_cycles: usize,
    /// relative Rwp change below which a stage has converged
    pub tol: f64,
    pub start_profile: ProfileParams,
    /// release parameters in three stages (background+zero+cell, then peak
    /// widths, then asymmetry) instead of all at once
    pub staged: bool,
}

impl RefinementProblem {
    pub fn new(observed: PowderPattern, cell0: UnitCell, rules: SpaceGroupRules) -> Self {
        RefinementProblem {
            observed,
            cell0,
            rules,
            lambda: Wavelength::default(),
            fit_range: (10.0, 40.0),
            free: FreeParams::default(),
            max_cycles: 50,
            tol: 1e-6,
            start_profile: ProfileParams::default(),
            staged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractedIntensity {
    pub h: i32,
    pub k: i32,
    pub l: i32,
    pub two_theta: f64,
    pub intensity: f64,
}

/// Standard uncertainties of the cell parameters (0 for fixed ones).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellEsd {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementResult {
    pub cell: UnitCell,
    pub cell_esd: CellEsd,
    /// (name, esd) for every refined nonlinear parameter
    pub param_esds: Vec<(String, f64)>,
    pub extracted_intensities: Vec<ExtractedIntensity>,
    pub profile: ProfileParams,
    /// background coefficients over the fit window abscissa
    pub background: BackgroundModel,
    pub rwp: f64,
    pub rexp: f64,
    pub chi2: f64,
    pub cycles_used: usize,
    pub converged: bool,
    /// Rwp after every accepted least-squares step
    pub rwp_history: Vec<f64>,
}

/// "13.6000(5)"-style value with the esd in units of the last digit.
pub fn format_value_esd(value: f64, esd: f64) -> String {
    if !(esd > 0.0) || !esd.is_finite() {
        return format!("{value}");
    }
    let mut exponent = esd.log10().floor() as i32;
    let mut digit = (esd / 10f64.powi(exponent)).round() as i64;
    if digit >= 10 {
        digit = 1;
        exponent += 1;
    }
    if exponent >= 0 {
        let unit = 10f64.powi(exponent);
        let rounded = (value / unit).round() * unit;
        format!("{}({})", rounded, digit * 10i64.pow(exponent as u32))
    } else {
        let decimals = (-exponent) as usize;
        format!("{:.*}({})", decimals, value, digit)
    }
}

/// One Rietveld-style decomposition sweep: repartition observed intensity
/// among the reflections in proportion to their current profile contributions.
///
/// `background` must hold one value per observed point; reflections outside
/// the window still receive tail contributions from inside it.
pub fn partition_intensities(
    observed: &PowderPattern,
    window: (f64, f64),
    reflections: &mut [Reflection],
    profile: &ProfileParams,
    background: &[f64],
) -> Result<(), LebailError> {
    if background.len() != observed.len() {
        return Err(LebailError::InvalidProblem(format!(
            "background has {} values for {} observed points",
            background.len(),
            observed.len()
        )));
    }
    let idx: Vec<usize> = observed
        .two_theta()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.0 && t <= window.1)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(LebailError::InvalidProblem("empty fit window".into()));
    }
    let yo = observed.intensities();
    let tt = observed.two_theta();
    let max_obs = idx.iter().map(|&i| yo[i]).fold(0.0, f64::max);
    let floor = 1e-10 * max_obs.max(1.0);

    // per-reflection unit-intensity profiles over the window
    let mut omega: Vec<Vec<f64>> = Vec::with_capacity(reflections.len());
    for r in reflections.iter() {
        let widths = tch_widths(profile, r.two_theta)?;
        let center = r.two_theta + profile.zero_shift;
        let mult = r.multiplicity as f64;
        omega.push(
            idx.iter()
                .map(|&i| mult * peak_value(tt[i] - center, widths.gamma, widths.eta, profile.asym, r.two_theta))
                .collect(),
        );
    }
    let mut y_peaks = vec![0.0; idx.len()];
    for (r, om) in reflections.iter().zip(&omega) {
        for (yp, o) in y_peaks.iter_mut().zip(om) {
            *yp += r.intensity * o;
        }
    }
    if y_peaks.iter().all(|&v| v <= 0.0) {
        return Err(LebailError::AllZeroCalculated);
    }
    for (r, om) in reflections.iter_mut().zip(&omega) {
        let mut numer = 0.0;
        let mut denom = 0.0;
        for ((&o, &yp), &i) in om.iter().zip(&y_peaks).zip(&idx) {
            numer += o * (yo[i] - background[i]) / yp.max(floor);
            denom += o;
        }
        if denom > 0.0 {
            r.intensity = (r.intensity * numer / denom).max(floor);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// parameter bookkeeping

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamId {
    A,
    B,
    C,
    Alpha,
    Beta,
    Gamma,
    Zero,
    U,
    V,
    W,
    X,
    Y,
    Asym,
}

impl ParamId {
    fn name(&self) -> &'static str {
        match self {
            ParamId::A => "a",
            ParamId::B => "b",
            ParamId::C => "c",
            ParamId::Alpha => "alpha",
            ParamId::Beta => "beta",
            ParamId::Gamma => "gamma",
            ParamId::Zero => "zero_shift",
            ParamId::U => "u",
            ParamId::V => "v",
            ParamId::W => "w",
            ParamId::X => "x",
            ParamId::Y => "y",
            ParamId::Asym => "asym",
        }
    }

    fn get(&self, cell: &UnitCell, p: &ProfileParams) -> f64 {
        match self {
            ParamId::A => cell.a,
            ParamId::B => cell.b,
            ParamId::C => cell.c,
            ParamId::Alpha => cell.alpha,
            ParamId::Beta => cell.beta,
            ParamId::Gamma => cell.gamma,
            ParamId::Zero => p.zero_shift,
            ParamId::U => p.u,
            ParamId::V => p.v,
            ParamId::W => p.w,
            ParamId::X => p.x,
            ParamId::Y => p.y,
            ParamId::Asym => p.asym,
        }
    }

    fn set(&self, cell: &mut UnitCell, p: &mut ProfileParams, value: f64) {
        match self {
            ParamId::A => cell.a = value,
            ParamId::B => cell.b = value,
            ParamId::C => cell.c = value,
            ParamId::Alpha => cell.alpha = value,
            ParamId::Beta => cell.beta = value,
            ParamId::Gamma => cell.gamma = value,
            ParamId::Zero => p.zero_shift = value,
            ParamId::U => p.u = value,
            ParamId::V => p.v = value,
            ParamId::W => p.w = value,
            ParamId::X => p.x = value,
            ParamId::Y => p.y = value,
            ParamId::Asym => p.asym = value,
        }
    }

    /// Cell axes ±10% of the start, angles ±5°, loose boxes elsewhere.
    fn bounds(&self, cell0: &UnitCell) -> (f64, f64) {
        match self {
            ParamId::A => (0.9 * cell0.a, 1.1 * cell0.a),
            ParamId::B => (0.9 * cell0.b, 1.1 * cell0.b),
            ParamId::C => (0.9 * cell0.c, 1.1 * cell0.c),
            ParamId::Alpha => (cell0.alpha - 5.0, cell0.alpha + 5.0),
            ParamId::Beta => (cell0.beta - 5.0, cell0.beta + 5.0),
            ParamId::Gamma => (cell0.gamma - 5.0, cell0.gamma + 5.0),
            ParamId::Zero => (-0.5, 0.5),
            ParamId::U => (-1.0, 1.0),
            ParamId::V => (-1.0, 1.0),
            ParamId::W => (0.0, 1.0),
            ParamId::X => (0.0, 1.0),
            ParamId::Y => (0.0, 1.0),
            ParamId::Asym => (-20.0, 20.0),
        }
    }

    fn fd_step(&self) -> f64 {
        match self {
            ParamId::A | ParamId::B | ParamId::C => 1e-4,
            ParamId::Alpha | ParamId::Beta | ParamId::Gamma => 2e-4,
            ParamId::Zero => 2e-4,
            ParamId::U | ParamId::V | ParamId::W => 1e-5,
            ParamId::X | ParamId::Y => 1e-5,
            ParamId::Asym => 1e-3,
        }
    }
}

fn cell_params_for(rules: &SpaceGroupRules) -> Vec<ParamId> {
    use crate::xtal::CrystalSystem::*;
    match rules.system {
        Orthorhombic => vec![ParamId::A, ParamId::B, ParamId::C],
        Monoclinic => vec![ParamId::A, ParamId::B, ParamId::C, ParamId::Beta],
        Triclinic => vec![
            ParamId::A,
            ParamId::B,
            ParamId::C,
            ParamId::Alpha,
            ParamId::Beta,
            ParamId::Gamma,
        ],
    }
}

fn profile_params_for(free: &FreeParams) -> Vec<ParamId> {
    let mut v = Vec::new();
    if free.u {
        v.push(ParamId::U);
    }
    if free.v {
        v.push(ParamId::V);
    }
    if free.w {
        v.push(ParamId::W);
    }
    if free.x {
        v.push(ParamId::X);
    }
    if free.y {
        v.push(ParamId::Y);
    }
    v
}

// ---------------------------------------------------------------------------
// refinement workspace

struct Workspace<'a> {
    problem: &'a RefinementProblem,
    /// indices of observed points inside the fit window
    idx: Vec<usize>,
    /// window abscissa
    tw: Vec<f64>,
    /// window observed intensities
    yo: Vec<f64>,
    sqrt_w: Vec<f64>,
    /// Σ w·yo² over the window
    den_rwp: f64,
    /// Chebyshev design matrix (n × 10) over the window, or empty when the
    /// background is fixed
    design: DMatrix<f64>,
    design_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    fixed_background: Vec<f64>,
    reflections: Vec<Reflection>,
}

#[derive(Clone)]
struct EvalState {
    residuals: DVector<f64>,
    chi2: f64,
    background: [f64; 10],
    y_calc: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a RefinementProblem) -> Result<Self, LebailError> {
        let (lo, hi) = problem.fit_range;
        let obs = &problem.observed;
        let grid = obs.nominal_grid();
        // tolerate a sub-step overhang (a 4-40 grid at 0.013 deg ends at 39.997)
        if lo < grid.two_theta_min - grid.step || hi > grid.two_theta_max + grid.step || lo >= hi {
            return Err(LebailError::InvalidProblem(format!(
                "fit range [{lo}, {hi}] outside observed grid [{}, {}]",
                grid.two_theta_min, grid.two_theta_max
            )));
        }
        problem.rules.validate_cell(&problem.cell0)?;
        let idx: Vec<usize> = obs
            .two_theta()
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= lo && t <= hi)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 20 {
            return Err(LebailError::InvalidProblem(format!(
                "only {} points in the fit window",
                idx.len()
            )));
        }
        let weights = obs.weights();
        let tw: Vec<f64> = idx.iter().map(|&i| obs.two_theta()[i]).collect();
        let yo: Vec<f64> = idx.iter().map(|&i| obs.intensities()[i]).collect();
        let sqrt_w: Vec<f64> = idx.iter().map(|&i| weights[i].sqrt()).collect();
        let den_rwp = idx
            .iter()
            .map(|&i| weights[i] * obs.intensities()[i] * obs.intensities()[i])
            .sum();

        // enumerate reflections once from the starting cell, with a margin so
        // tails reaching into the window are modeled
        let margin = 1.0;
        let reflections = reflection_list(
            &problem.cell0,
            &problem.rules,
            problem.lambda,
            ((lo - margin).max(1.0), (hi + margin).min(179.0)),
        )?;
        if reflections.is_empty() {
            return Err(LebailError::InvalidProblem(
                "no reflections inside the fit range".into(),
            ));
        }

        let n = idx.len();
        let (design, design_chol, fixed_background) = {
            let mut m = DMatrix::zeros(n, 10);
            for (row, &t) in tw.iter().enumerate() {
                let xbar = crate::profile::normalized_abscissa(t, lo, hi);
                let mut basis = [0.0; 10];
                for (j, b) in basis.iter_mut().enumerate() {
                    let mut coeffs = [0.0; 10];
                    coeffs[j] = 1.0;
                    *b = crate::profile::chebyshev_series(&coeffs, xbar);
                }
                for j in 0..10 {
                    m[(row, j)] = basis[j];
                }
            }
            if problem.free.background {
                // weighted normal matrix TᵀWT, factored once
                let mut ata = DMatrix::zeros(10, 10);
                for r in 0..n {
                    let w = sqrt_w[r] * sqrt_w[r];
                    for i in 0..10 {
                        for j in i..10 {
                            ata[(i, j)] += w * m[(r, i)] * m[(r, j)];
                        }
                    }
                }
                for i in 0..10 {
                    for j in 0..i {
                        ata[(i, j)] = ata[(j, i)];
                    }
                }
                let chol = Cholesky::new(ata).ok_or_else(|| {
                    LebailError::SingularNormalMatrix("background basis".into())
                })?;
                (m, Some(chol), vec![0.0; n])
            } else {
                (m, None, vec![0.0; n])
            }
        };

        Ok(Workspace {
            problem,
            idx,
            tw,
            yo,
            sqrt_w,
            den_rwp,
            design,
            design_chol,
            fixed_background,
            reflections,
        })
    }

    /// Bragg contribution of all reflections at the window points for a trial
    /// cell/profile; peak positions are regenerated from the cell.
    fn peaks_curve(&self, cell: &UnitCell, profile: &ProfileParams, refl: &[Reflection]) -> Result<Vec<f64>, LebailError> {
        let mut y = vec![0.0; self.tw.len()];
        for r in refl {
            let d = d_spacing(cell, (r.h, r.k, r.l))?;
            let s = self.problem.lambda.angstrom() / (2.0 * d);
            if s > 1.0 {
                continue;
            }
            let tt = 2.0 * s.asin().to_degrees();
            let widths = tch_widths(profile, tt)?;
            let center = tt + profile.zero_shift;
            let weight = r.intensity * r.multiplicity as f64;
            for (yi, &t) in y.iter_mut().zip(&self.tw) {
                *yi += weight * peak_value(t - center, widths.gamma, widths.eta, profile.asym, tt);
            }
        }
        Ok(y)
    }

    /// Full objective: peaks, separable background solve, weighted residuals.
    fn evaluate(&self, cell: &UnitCell, profile: &ProfileParams, refl: &[Reflection]) -> Result<EvalState, LebailError> {
        cell.validate()?;
        let peaks = self.peaks_curve(cell, profile, refl)?;
        let n = self.tw.len();
        let mut bg_coeffs = [0.0; 10];
        let background: Vec<f64> = if let Some(chol) = &self.design_chol {
            let mut rhs = DVector::zeros(10);
            for r in 0..n {
                let w = self.sqrt_w[r] * self.sqrt_w[r];
                let d = self.yo[r] - peaks[r];
                for j in 0..10 {
                    rhs[j] += w * self.design[(r, j)] * d;
                }
            }
            let c = chol.solve(&rhs);
            for j in 0..10 {
                bg_coeffs[j] = c[j];
            }
            (0..n)
                .map(|r| (0..10).map(|j| c[j] * self.design[(r, j)]).sum())
                .collect()
        } else {
            self.fixed_background.clone()
        };
        let mut residuals = DVector::zeros(n);
        let mut chi2 = 0.0;
        let mut y_calc = vec![0.0; n];
        for r in 0..n {
            let yc = peaks[r] + background[r];
            y_calc[r] = yc;
            let res = self.sqrt_w[r] * (self.yo[r] - yc);
            residuals[r] = res;
            chi2 += res * res;
        }
        Ok(EvalState {
            residuals,
            chi2,
            background: bg_coeffs,
            y_calc,
        })
    }

    fn rwp_of(&self, chi2: f64) -> f64 {
        100.0 * (chi2 / self.den_rwp).sqrt()
    }
}

fn apply_params(
    ids: &[ParamId],
    values: &[f64],
    cell0: &UnitCell,
    profile0: &ProfileParams,
) -> (UnitCell, ProfileParams) {
    let mut cell = *cell0;
    let mut profile = *profile0;
    for (id, &v) in ids.iter().zip(values) {
        id.set(&mut cell, &mut profile, v);
    }
    (cell, profile)
}

/// Central-difference Jacobian of the weighted residual vector; columns are
/// evaluated in parallel and assembled by index.
fn numerical_jacobian(
    ws: &Workspace,
    ids: &[ParamId],
    x: &[f64],
    cell0: &UnitCell,
    profile0: &ProfileParams,
    refl: &[Reflection],
    n_res: usize,
) -> Result<DMatrix<f64>, LebailError> {
    let cols: Vec<Result<DVector<f64>, LebailError>> = ids
        .par_iter()
        .enumerate()
        .map(|(j, id)| {
            let h = id.fd_step();
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (cp, pp) = apply_params(ids, &xp, cell0, profile0);
            let (cm, pm) = apply_params(ids, &xm, cell0, profile0);
            let ep = ws.evaluate(&cp, &pp, refl);
            let em = ws.evaluate(&cm, &pm, refl);
            match (ep, em) {
                (Ok(p), Ok(m)) => Ok((p.residuals - m.residuals) / (2.0 * h)),
                (Ok(p), Err(_)) => {
                    let (bc, bp) = apply_params(ids, x, cell0, profile0);
                    let base = ws.evaluate(&bc, &bp, refl)?;
                    Ok((p.residuals - base.residuals) / h)
                }
                (Err(_), Ok(m)) => {
                    let (bc, bp) = apply_params(ids, x, cell0, profile0);
                    let base = ws.evaluate(&bc, &bp, refl)?;
                    Ok((base.residuals - m.residuals) / h)
                }
                (Err(e), Err(_)) => Err(e),
            }
        })
        .collect();
    let mut j_mat = DMatrix::zeros(n_res, ids.len());
    for (j, col) in cols.into_iter().enumerate() {
        let col = col?;
        j_mat.set_column(j, &col);
    }
    Ok(j_mat)
}

struct LmPassResult {
    x: Vec<f64>,
    state: EvalState,
    accepted_rwp: Vec<f64>,
}

/// A bounded Levenberg-Marquardt pass with frozen reflection intensities.
fn lm_pass(
    ws: &Workspace,
    ids: &[ParamId],
    x0: Vec<f64>,
    refl: &[Reflection],
    max_iters: usize,
) -> Result<LmPassResult, LebailError> {
    let cell0 = ws.problem.cell0;
    let profile0 = ws.problem.start_profile;
    let bounds: Vec<(f64, f64)> = ids.iter().map(|id| id.bounds(&cell0)).collect();
    let clamp = |x: &mut [f64]| {
        for (v, (lo, hi)) in x.iter_mut().zip(&bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut x = x0;
    clamp(&mut x);
    let (c, p) = apply_params(ids, &x, &cell0, &profile0);
    let mut state = ws.evaluate(&c, &p, refl)?;
    let mut lambda = 1e-3;
    let mut accepted_rwp = Vec::new();
    let n_res = ws.tw.len();

    for _ in 0..max_iters {
        let j = numerical_jacobian(ws, ids, &x, &cell0, &profile0, refl, n_res)?;
        let a = j.transpose() * &j;
        let g = j.transpose() * &state.residuals;
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = a.clone();
            for i in 0..ids.len() {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-30);
            }
            let Some(chol) = Cholesky::new(damped) else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let mut x_new = x.clone();
            for i in 0..ids.len() {
                x_new[i] += delta[i];
            }
            clamp(&mut x_new);
            let (cn, pn) = apply_params(ids, &x_new, &cell0, &profile0);
            match ws.evaluate(&cn, &pn, refl) {
                Ok(s) if s.chi2 < state.chi2 => {
                    x = x_new;
                    state = s;
                    lambda = (lambda / 3.0).max(1e-14);
                    accepted_rwp.push(ws.rwp_of(state.chi2));
                    improved = true;
                    break;
                }
                _ => {
                    lambda *= 10.0;
                }
            }
            if lambda > 1e9 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(LmPassResult {
        x,
        state,
        accepted_rwp,
    })
}

/// esd_j = sqrt(chi2_red · [JᵀWJ]⁻¹_jj) from the (already weighted) normal
/// matrix. Fails with the degenerate parameter names when the matrix is
/// singular.
pub fn estimate_esds(
    normal: &DMatrix<f64>,
    chi2_red: f64,
    names: &[String],
) -> Result<Vec<f64>, LebailError> {
    let svd = normal.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin / smax < 1e-12 {
        // name the parameters dominating the null direction
        let vt = svd.v_t.as_ref();
        let mut culprits: Vec<String> = Vec::new();
        if let Some(vt) = vt {
            let null_row = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut comps: Vec<(usize, f64)> = (0..names.len())
                .map(|j| (j, vt[(null_row, j)].abs()))
                .collect();
            comps.sort_by(|a, b| b.1.total_cmp(&a.1));
            culprits = comps
                .iter()
                .take_while(|(_, c)| *c > 0.3)
                .map(|(j, _)| names[*j].clone())
                .collect();
        }
        if culprits.is_empty() {
            culprits = names.to_vec();
        }
        return Err(LebailError::SingularNormalMatrix(culprits.join(", ")));
    }
    let inv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| LebailError::SingularNormalMatrix(e.to_string()))?;
    Ok((0..names.len())
        .map(|j| (chi2_red * inv[(j, j)]).max(0.0).sqrt())
        .collect())
}

/// Run the full staged Le Bail refinement.
pub fn refine(problem: &RefinementProblem) -> Result<RefinementResult, LebailError> {
    let ws = Workspace::new(problem)?;
    let free = &problem.free;

    let mut stage_sets: Vec<Vec<ParamId>> = Vec::new();
    let mut base: Vec<ParamId> = Vec::new();
    if free.cell {
        base.extend(cell_params_for(&problem.rules));
    }
    if free.zero {
        base.push(ParamId::Zero);
    }
    let widths = profile_params_for(free);
    if problem.staged {
        if !base.is_empty() {
            stage_sets.push(base.clone());
        }
        if !widths.is_empty() {
            let mut s = base.clone();
            s.extend(widths.iter().cloned());
            stage_sets.push(s);
        }
        if free.asym {
            let mut s = stage_sets.last().cloned().unwrap_or_else(|| base.clone());
            s.push(ParamId::Asym);
            stage_sets.push(s);
        }
    } else {
        let mut s = base.clone();
        s.extend(widths.iter().cloned());
        if free.asym {
            s.push(ParamId::Asym);
        }
        if !s.is_empty() {
            stage_sets.push(s);
        }
    }
    if stage_sets.is_empty() && !free.background {
        return Err(LebailError::InvalidProblem("no free parameters".into()));
    }
    if stage_sets.is_empty() {
        // background only: a single empty nonlinear stage still runs the
        // partition/linear-solve alternation
        stage_sets.push(Vec::new());
    }

    let mut cell = problem.cell0;
    let mut profile = problem.start_profile;
    let mut reflections = ws.reflections.clone();
    // scale starting intensities to the observed magnitude
    let obs_max = ws.yo.iter().cloned().fold(1.0, f64::max);
    let start_i = obs_max / reflections.len().max(1) as f64;
    for r in &mut reflections {
        r.intensity = start_i;
    }

    let mut cycles_used = 0usize;
    let mut converged = false;
    let mut rwp_history = Vec::new();
    let mut last_state = ws.evaluate(&cell, &profile, &reflections)?;

    'stages: for ids in &stage_sets {
        let mut stage_prev_rwp = f64::INFINITY;
        loop {
            if cycles_used >= problem.max_cycles {
                break 'stages;
            }
            cycles_used += 1;

            // (a) intensity partition under the current model
            let bg_full = window_background_to_full(&ws, &last_state);
            for _ in 0..2 {
                reposition(&mut reflections, &cell, problem)?;
                partition_intensities(
                    &problem.observed,
                    problem.fit_range,
                    &mut reflections,
                    &profile,
                    &bg_full,
                )?;
            }

            // (b) damped least-squares on the nonlinear parameters
            if ids.is_empty() {
                last_state = ws.evaluate(&cell, &profile, &reflections)?;
            } else {
                let x0: Vec<f64> = ids.iter().map(|id| id.get(&cell, &profile)).collect();
                let pass = lm_pass(&ws, ids, x0, &reflections, 6)?;
                for (id, &v) in ids.iter().zip(&pass.x) {
                    id.set(&mut cell, &mut profile, v);
                }
                last_state = pass.state;
                rwp_history.extend(pass.accepted_rwp);
            }

            let rwp = ws.rwp_of(last_state.chi2);
            let rel = if stage_prev_rwp.is_finite() {
                (stage_prev_rwp - rwp).abs() / stage_prev_rwp.max(1e-12)
            } else {
                f64::INFINITY
            };
            stage_prev_rwp = rwp;
            if rwp < 1e-9 || rel < problem.tol {
                converged = true;
                continue 'stages;
            }
            converged = false;
        }
    }

    // final statistics and uncertainties over the last stage's parameter set
    let final_ids = stage_sets.last().cloned().unwrap_or_default();
    let n = ws.tw.len();
    let n_params = final_ids.len() + if free.background { 10 } else { 0 };
    if n <= n_params {
        return Err(LebailError::InvalidProblem(format!(
            "{n} points for {n_params} parameters"
        )));
    }
    let chi2_red = last_state.chi2 / (n - n_params) as f64;
    let rwp = ws.rwp_of(last_state.chi2);
    let rexp = 100.0 * ((n - n_params) as f64 / ws.den_rwp).sqrt();
    let chi2 = (rwp / rexp).powi(2);

    let mut names: Vec<String> = final_ids.iter().map(|id| id.name().to_string()).collect();
    let mut esds: Vec<f64> = vec![0.0; names.len()];
    if !final_ids.is_empty() {
        let x: Vec<f64> = final_ids.iter().map(|id| id.get(&cell, &profile)).collect();
        let j = numerical_jacobian(
            &ws,
            &final_ids,
            &x,
            &problem.cell0,
            &problem.start_profile,
            &reflections,
            n,
        )?;
        let normal = j.transpose() * &j;
        esds = estimate_esds(&normal, chi2_red, &names)?;
    } else {
        names.clear();
    }

    let mut cell_esd = CellEsd::default();
    for (name, esd) in names.iter().zip(&esds) {
        match name.as_str() {
            "a" => cell_esd.a = *esd,
            "b" => cell_esd.b = *esd,
            "c" => cell_esd.c = *esd,
            "alpha" => cell_esd.alpha = *esd,
            "beta" => cell_esd.beta = *esd,
            "gamma" => cell_esd.gamma = *esd,
            _ => {}
        }
    }

    reposition(&mut reflections, &cell, problem)?;
    let extracted = reflections
        .iter()
        .map(|r| ExtractedIntensity {
            h: r.h,
            k: r.k,
            l: r.l,
            two_theta: r.two_theta + profile.zero_shift,
            intensity: r.intensity,
        })
        .collect();

    Ok(RefinementResult {
        cell,
        cell_esd,
        param_esds: names.into_iter().zip(esds).collect(),
        extracted_intensities: extracted,
        profile,
        background: BackgroundModel::new(&last_state.background)?,
        rwp,
        rexp,
        chi2,
        cycles_used,
        converged,
        rwp_history,
    })
}

/// Recompute reflection positions from a trial cell (hkl set fixed).
fn reposition(
    reflections: &mut [Reflection],
    cell: &UnitCell,
    problem: &RefinementProblem,
) -> Result<(), LebailError> {
    for r in reflections.iter_mut() {
        let d = d_spacing(cell, (r.h, r.k, r.l))?;
        let s = problem.lambda.angstrom() / (2.0 * d);
        if s <= 1.0 {
            r.d = d;
            r.two_theta = 2.0 * s.asin().to_degrees();
        }
    }
    Ok(())
}

/// Expand the window background values of an evaluation onto the full
/// observed abscissa (zero outside the window; partition only reads inside).
fn window_background_to_full(ws: &Workspace, state: &EvalState) -> Vec<f64> {
    let mut bg = vec![0.0; ws.problem.observed.len()];
    let (lo, hi) = ws.problem.fit_range;
    let vals = background_at(
        &state.background,
        &ws.tw,
        lo,
        hi,
    );
    for (&i, v) in ws.idx.iter().zip(vals) {
        bg[i] = v;
    }
    bg
}

/// Observed/calculated/difference triplet over the fit window, for plotting.
pub fn profile_export(problem: &RefinementProblem, result: &RefinementResult) -> Result<Vec<(f64, f64, f64)>, LebailError> {
    let ws = Workspace::new(problem)?;
    let mut reflections = ws.reflections.clone();
    for r in &mut reflections {
        if let Some(e) = result
            .extracted_intensities
            .iter()
            .find(|e| (e.h, e.k, e.l) == (r.h, r.k, r.l))
        {
            r.intensity = e.intensity;
        }
    }
    let peaks = {
        let mut refl = reflections;
        reposition(&mut refl, &result.cell, problem)?;
        ws.peaks_curve(&result.cell, &result.profile, &refl)?
    };
    let bg = background_at(
        result.background.coeffs(),
        &ws.tw,
        problem.fit_range.0,
        problem.fit_range.1,
    );
    Ok((0..ws.tw.len())
        .map(|i| (ws.tw[i], ws.yo[i], peaks[i] + bg[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::PatternGrid;
    use crate::profile::{synthesize, SynthOptions};
    use approx::assert_relative_eq;

    fn single_peak_setup() -> (PowderPattern, Vec<Reflection>, ProfileParams) {
        let grid = PatternGrid::new(10.0, 30.0, 0.02).unwrap();
        let profile = ProfileParams::default();
        let r = Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 5.0,
            two_theta: 20.0,
            multiplicity: 2,
            intensity: 500.0,
        };
        let obs = synthesize(
            &[r],
            &profile,
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions::default(),
        )
        .unwrap();
        (obs, vec![r], profile)
    }

    #[test]
    fn partition_recovers_isolated_intensity() {
        let (obs, mut refl, profile) = single_peak_setup();
        refl[0].intensity = 10.0; // wrong start
        let bg = vec![0.0; obs.len()];
        for _ in 0..3 {
            partition_intensities(&obs, (10.0, 30.0), &mut refl, &profile, &bg).unwrap();
        }
        assert_relative_eq!(refl[0].intensity, 500.0, max_relative = 1e-3);
    }

    #[test]
    fn partition_splits_exact_overlap_evenly() {
        let grid = PatternGrid::new(10.0, 30.0, 0.02).unwrap();
        let profile = ProfileParams::default();
        let mk = |i: f64| Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 5.0,
            two_theta: 20.0,
            multiplicity: 1,
            intensity: i,
        };
        let obs = synthesize(
            &[mk(300.0), mk(300.0)],
            &profile,
            &BackgroundModel::zero(),
            &grid,
            &SynthOptions::default(),
        )
        .unwrap();
        let mut refl = vec![mk(50.0), mk(50.0)];
        let bg = vec![0.0; obs.len()];
        for _ in 0..4 {
            partition_intensities(&obs, (10.0, 30.0), &mut refl, &profile, &bg).unwrap();
        }
        assert_relative_eq!(refl[0].intensity, refl[1].intensity, max_relative = 1e-12);
        assert_relative_eq!(refl[0].intensity + refl[1].intensity, 600.0, max_relative = 1e-3);
    }

    #[test]
    fn partition_decays_on_background_only_data() {
        let grid = PatternGrid::new(10.0, 30.0, 0.02).unwrap();
        let tt = grid.positions();
        let n = tt.len();
        let obs = PowderPattern::new(tt, vec![50.0; n], None).unwrap();
        let mut refl = vec![Reflection {
            h: 1,
            k: 0,
            l: 0,
            d: 5.0,
            two_theta: 20.0,
            multiplicity: 1,
            intensity: 100.0,
        }];
        let bg = vec![50.0; obs.len()];
        let profile = ProfileParams::default();
        for _ in 0..5 {
            partition_intensities(&obs, (10.0, 30.0), &mut refl, &profile, &bg).unwrap();
        }
        assert!(refl[0].intensity <= 1e-6 * 100.0);
    }

    #[test]
    fn partition_rejects_all_zero_model() {
        let (obs, mut refl, profile) = single_peak_setup();
        refl[0].intensity = 0.0;
        let bg = vec![0.0; obs.len()];
        assert!(matches!(
            partition_intensities(&obs, (10.0, 30.0), &mut refl, &profile, &bg),
            Err(LebailError::AllZeroCalculated)
        ));
    }

    #[test]
    fn value_esd_formatting() {
        assert_eq!(format_value_esd(13.60003, 5.2e-4), "13.6000(5)");
        assert_eq!(format_value_esd(6.8564, 2.4e-4), "6.8564(2)");
        assert_eq!(format_value_esd(13.600, 9.6e-4), "13.600(1)");
        assert_eq!(format_value_esd(136.2, 2.3), "136(2)");
        assert_eq!(format_value_esd(1.5, 0.0), "1.5");
    }
}
