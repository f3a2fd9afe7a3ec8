//! Lattice geometry: d-spacings, Bragg angles, and systematic-absence-filtered
//! reflection lists for a small set of space groups.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cu Kα1 wavelength in Å, the default for a laboratory Cu-anode instrument.
pub const CU_KA1: f64 = 1.540598;

#[derive(Debug, Error, PartialEq)]
pub enum XtalError {
    #[error("invalid unit cell: {0}")]
    InvalidCell(String),
    #[error("hkl must not be (0,0,0)")]
    ZeroHkl,
    #[error("reflection ({h},{k},{l}) unobservable: lambda {lambda} > 2d = {two_d}")]
    Unobservable {
        h: i32,
        k: i32,
        l: i32,
        lambda: f64,
        two_d: f64,
    },
    #[error("unsupported space-group symbol {0:?}")]
    UnsupportedSpaceGroup(String),
    #[error("invalid wavelength: {0}")]
    InvalidWavelength(f64),
    #[error("invalid 2-theta range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("cell incompatible with {system:?} lattice: {detail}")]
    SystemMismatch {
        system: CrystalSystem,
        detail: String,
    },
}

/// Unit cell with lengths in Å and angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCell {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl UnitCell {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self, XtalError> {
        let cell = UnitCell { a, b, c, alpha, beta, gamma };
        cell.validate()?;
        Ok(cell)
    }

    /// Orthorhombic convenience constructor (all angles 90°).
    pub fn orthorhombic(a: f64, b: f64, c: f64) -> Result<Self, XtalError> {
        Self::new(a, b, c, 90.0, 90.0, 90.0)
    }

    /// Monoclinic (b-unique) convenience constructor.
    pub fn monoclinic(a: f64, b: f64, c: f64, beta: f64) -> Result<Self, XtalError> {
        Self::new(a, b, c, 90.0, beta, 90.0)
    }

    pub fn validate(&self) -> Result<(), XtalError> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(XtalError::InvalidCell(format!("{name} = {v} must be > 0")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 180.0) {
                return Err(XtalError::InvalidCell(format!(
                    "{name} = {v} must lie in (0, 180)"
                )));
            }
        }
        let v = self.volume();
        if !(v > 0.0) || !v.is_finite() {
            return Err(XtalError::InvalidCell(format!("degenerate cell, volume = {v}")));
        }
        Ok(())
    }

    /// Cell volume in Å³ (general triclinic formula).
    pub fn volume(&self) -> f64 {
        let (ca, cb, cg) = (
            self.alpha.to_radians().cos(),
            self.beta.to_radians().cos(),
            self.gamma.to_radians().cos(),
        );
        let arg = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
        self.a * self.b * self.c * arg.max(0.0).sqrt()
    }

    /// Direct metric tensor G (Å²).
    pub fn metric(&self) -> Matrix3<f64> {
        let (ca, cb, cg) = (
            self.alpha.to_radians().cos(),
            self.beta.to_radians().cos(),
            self.gamma.to_radians().cos(),
        );
        Matrix3::new(
            self.a * self.a,
            self.a * self.b * cg,
            self.a * self.c * cb,
            self.a * self.b * cg,
            self.b * self.b,
            self.b * self.c * ca,
            self.a * self.c * cb,
            self.b * self.c * ca,
            self.c * self.c,
        )
    }

    /// Reciprocal metric tensor G* = G⁻¹ (Å⁻²).
    pub fn reciprocal_metric(&self) -> Result<Matrix3<f64>, XtalError> {
        self.metric()
            .try_inverse()
            .ok_or_else(|| XtalError::InvalidCell("metric tensor is singular".into()))
    }
}

/// X-ray wavelength in Å.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wavelength(pub f64);

impl Wavelength {
    pub fn new(lambda: f64) -> Result<Self, XtalError> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Wavelength(lambda))
        } else {
            Err(XtalError::InvalidWavelength(lambda))
        }
    }

    pub fn angstrom(&self) -> f64 {
        self.0
    }
}

impl Default for Wavelength {
    fn default() -> Self {
        Wavelength(CU_KA1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrystalSystem {
    Triclinic,
    Monoclinic,
    Orthorhombic,
}

/// Laue class used for orbit counting when merging equivalent reflections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaueClass {
    /// -1 (triclinic): hkl ~ -h-k-l
    Bar1,
    /// 2/m, b-unique (monoclinic): sign of k flips independently
    TwoOverM,
    /// mmm (orthorhombic): all index signs flip independently
    Mmm,
}

impl LaueClass {
    /// Distinct images of (h,k,l) under the Laue group, sorted.
    pub fn orbit(&self, h: i32, k: i32, l: i32) -> Vec<[i32; 3]> {
        let raw: Vec<[i32; 3]> = match self {
            LaueClass::Bar1 => vec![[h, k, l], [-h, -k, -l]],
            LaueClass::TwoOverM => vec![[h, k, l], [-h, k, -l], [-h, -k, -l], [h, -k, l]],
            LaueClass::Mmm => {
                let mut v = Vec::with_capacity(8);
                for sh in [1, -1] {
                    for sk in [1, -1] {
                        for sl in [1, -1] {
                            v.push([sh * h, sk * k, sl * l]);
                        }
                    }
                }
                v
            }
        };
        let mut out = raw;
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Which indices a reflection condition applies to: the zone is selected by
/// requiring the flagged indices to be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReflectionCondition {
    /// true: this index must be zero for the condition to apply
    pub zone_zero: [bool; 3],
    /// parity constraint: sum of coeff·index must be even when the zone matches
    pub parity_coeffs: [i32; 3],
}

impl ReflectionCondition {
    fn applies(&self, hkl: [i32; 3]) -> bool {
        self.zone_zero
            .iter()
            .zip(hkl.iter())
            .all(|(&z, &i)| !z || i == 0)
    }

    fn satisfied(&self, hkl: [i32; 3]) -> bool {
        let s: i32 = self
            .parity_coeffs
            .iter()
            .zip(hkl.iter())
            .map(|(&c, &i)| c * i)
            .sum();
        s.rem_euclid(2) == 0
    }
}

/// Reflection conditions and merging rules for one space group.
///
/// Hand-coded table for the groups used here; extensible by adding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGroupRules {
    pub symbol: String,
    pub system: CrystalSystem,
    pub laue: LaueClass,
    conditions: Vec<ReflectionCondition>,
}

impl SpaceGroupRules {
    /// Look up a supported symbol: P1, Pna21, P21/n, P21/c.
    pub fn from_symbol(symbol: &str) -> Result<Self, XtalError> {
        let zone = |zz: [bool; 3], pc: [i32; 3]| ReflectionCondition {
            zone_zero: zz,
            parity_coeffs: pc,
        };
        match symbol {
            "P1" => Ok(SpaceGroupRules {
                symbol: "P1".into(),
                system: CrystalSystem::Triclinic,
                laue: LaueClass::Bar1,
                conditions: vec![],
            }),
            "Pna21" | "Pna2_1" => Ok(SpaceGroupRules {
                symbol: "Pna21".into(),
                system: CrystalSystem::Orthorhombic,
                laue: LaueClass::Mmm,
                conditions: vec![
                    // 0kl: k+l = 2n
                    zone([true, false, false], [0, 1, 1]),
                    // h0l: h = 2n
                    zone([false, true, false], [1, 0, 0]),
                    // h00: h = 2n
                    zone([false, true, true], [1, 0, 0]),
                    // 0k0: k = 2n
                    zone([true, false, true], [0, 1, 0]),
                    // 00l: l = 2n
                    zone([true, true, false], [0, 0, 1]),
                ],
            }),
            "P21/n" | "P2_1/n" => Ok(SpaceGroupRules {
                symbol: "P21/n".into(),
                system: CrystalSystem::Monoclinic,
                laue: LaueClass::TwoOverM,
                conditions: vec![
                    // h0l: h+l = 2n
                    zone([false, true, false], [1, 0, 1]),
                    // 0k0: k = 2n
                    zone([true, false, true], [0, 1, 0]),
                ],
            }),
            "P21/c" | "P2_1/c" => Ok(SpaceGroupRules {
                symbol: "P21/c".into(),
                system: CrystalSystem::Monoclinic,
                laue: LaueClass::TwoOverM,
                conditions: vec![
                    // h0l: l = 2n
                    zone([false, true, false], [0, 0, 1]),
                    // 0k0: k = 2n
                    zone([true, false, true], [0, 1, 0]),
                ],
            }),
            other => Err(XtalError::UnsupportedSpaceGroup(other.to_string())),
        }
    }

    pub fn conditions(&self) -> &[ReflectionCondition] {
        &self.conditions
    }

    /// True when (h,k,l) is systematically absent under this group.
    pub fn is_absent(&self, h: i32, k: i32, l: i32) -> bool {
        let hkl = [h, k, l];
        self.conditions
            .iter()
            .any(|c| c.applies(hkl) && !c.satisfied(hkl))
    }

    /// Validate that a cell's angles are consistent with the group's lattice system.
    pub fn validate_cell(&self, cell: &UnitCell) -> Result<(), XtalError> {
        cell.validate()?;
        let right = |x: f64| (x - 90.0).abs() < 1e-9;
        let ok = match self.system {
            CrystalSystem::Triclinic => true,
            CrystalSystem::Monoclinic => right(cell.alpha) && right(cell.gamma),
            CrystalSystem::Orthorhombic => right(cell.alpha) && right(cell.beta) && right(cell.gamma),
        };
        if ok {
            Ok(())
        } else {
            Err(XtalError::SystemMismatch {
                system: self.system,
                detail: format!(
                    "angles ({}, {}, {}) violate the lattice constraints",
                    cell.alpha, cell.beta, cell.gamma
                ),
            })
        }
    }
}

/// One merged powder reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub h: i32,
    pub k: i32,
    pub l: i32,
    /// interplanar spacing, Å
    pub d: f64,
    /// Bragg angle 2θ, degrees
    pub two_theta: f64,
    pub multiplicity: u32,
    /// relative intensity, dimensionless, ≥ 0
    pub intensity: f64,
}

/// Interplanar spacing d(hkl) in Å from the reciprocal metric quadratic form.
pub fn d_spacing(cell: &UnitCell, hkl: (i32, i32, i32)) -> Result<f64, XtalError> {
    let (h, k, l) = hkl;
    if h == 0 && k == 0 && l == 0 {
        return Err(XtalError::ZeroHkl);
    }
    let gstar = cell.reciprocal_metric()?;
    let v = nalgebra::Vector3::new(h as f64, k as f64, l as f64);
    let inv_d2 = (v.transpose() * gstar * v)[(0, 0)];
    if inv_d2 <= 0.0 || !inv_d2.is_finite() {
        return Err(XtalError::InvalidCell(format!(
            "non-positive 1/d² = {inv_d2} for hkl ({h},{k},{l})"
        )));
    }
    Ok(1.0 / inv_d2.sqrt())
}

/// Bragg angle 2θ in degrees for spacing d and wavelength λ (both Å).
pub fn bragg_two_theta(d: f64, lambda: f64) -> Result<f64, XtalError> {
    if !(d > 0.0) {
        return Err(XtalError::InvalidCell(format!("d = {d} must be > 0")));
    }
    if !(lambda > 0.0) {
        return Err(XtalError::InvalidWavelength(lambda));
    }
    let s = lambda / (2.0 * d);
    if s > 1.0 {
        return Err(XtalError::Unobservable {
            h: 0,
            k: 0,
            l: 0,
            lambda,
            two_d: 2.0 * d,
        });
    }
    Ok(2.0 * s.asin().to_degrees())
}

/// Canonical orbit representative: the lexicographically greatest image.
fn canonical_rep(laue: LaueClass, h: i32, k: i32, l: i32) -> ([i32; 3], u32) {
    let orbit = laue.orbit(h, k, l);
    let rep = *orbit.last().expect("orbit never empty");
    (rep, orbit.len() as u32)
}

/// Enumerate the merged, absence-filtered reflection list with 2θ inside
/// `range` (degrees). Entries are sorted by ascending 2θ, ties broken by
/// lexicographic (h,k,l); every entry carries unit relative intensity.
pub fn reflection_list(
    cell: &UnitCell,
    rules: &SpaceGroupRules,
    lambda: Wavelength,
    range: (f64, f64),
) -> Result<Vec<Reflection>, XtalError> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi < 180.0 && lo < hi) {
        return Err(XtalError::InvalidRange(lo, hi));
    }
    rules.validate_cell(cell)?;
    let lam = lambda.angstrom();
    let d_min = lam / (2.0 * (hi / 2.0).to_radians().sin());
    // |h| = |q·a| ≤ |q||a| ≤ a/d_min, and likewise for k, l.
    let hmax = (cell.a / d_min).floor() as i32;
    let kmax = (cell.b / d_min).floor() as i32;
    let lmax = (cell.c / d_min).floor() as i32;

    let gstar = cell.reciprocal_metric()?;
    let mut out = Vec::new();
    for h in -hmax..=hmax {
        for k in -kmax..=kmax {
            for l in -lmax..=lmax {
                if h == 0 && k == 0 && l == 0 {
                    continue;
                }
                let (rep, mult) = canonical_rep(rules.laue, h, k, l);
                if rep != [h, k, l] {
                    continue;
                }
                if rules.is_absent(h, k, l) {
                    continue;
                }
                let v = nalgebra::Vector3::new(h as f64, k as f64, l as f64);
                let inv_d2 = (v.transpose() * gstar * v)[(0, 0)];
                let d = 1.0 / inv_d2.sqrt();
                let s = lam / (2.0 * d);
                if s > 1.0 {
                    continue;
                }
                let tt = 2.0 * s.asin().to_degrees();
                if tt < lo || tt > hi {
                    continue;
                }
                out.push(Reflection {
                    h,
                    k,
                    l,
                    d,
                    two_theta: tt,
                    multiplicity: mult,
                    intensity: 1.0,
                });
            }
        }
    }
    out.sort_by(|p, q| {
        p.two_theta
            .total_cmp(&q.two_theta)
            .then_with(|| (p.h, p.k, p.l).cmp(&(q.h, q.k, q.l)))
    });
    Ok(out)
}

/// Build reflections from stored (h,k,l, intensity) peak entries: positions
/// from the cell, multiplicities from the Laue class, intensities kept.
pub fn reflections_from_peaks(
    cell: &UnitCell,
    rules: &SpaceGroupRules,
    lambda: Wavelength,
    peaks: &[(i32, i32, i32, f64)],
) -> Result<Vec<Reflection>, XtalError> {
    let mut out = Vec::with_capacity(peaks.len());
    for &(h, k, l, i) in peaks {
        let d = d_spacing(cell, (h, k, l))?;
        let s = lambda.angstrom() / (2.0 * d);
        if s > 1.0 {
            continue; // outside the observable sphere for this cell
        }
        let tt = 2.0 * s.asin().to_degrees();
        let (_, mult) = canonical_rep(rules.laue, h, k, l);
        out.push(Reflection {
            h,
            k,
            l,
            d,
            two_theta: tt,
            multiplicity: mult,
            intensity: i,
        });
    }
    out.sort_by(|p, q| {
        p.two_theta
            .total_cmp(&q.two_theta)
            .then_with(|| (p.h, p.k, p.l).cmp(&(q.h, q.k, q.l)))
    });
    Ok(out)
}
