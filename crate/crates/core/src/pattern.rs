//! Powder pattern container, uniform 2θ grids, and the plain-text two/three
//! column pattern format used at every process boundary.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("sigma must be > 0 everywhere (point {0})")]
    NonPositiveSigma(usize),
    #[error("pattern abscissa must strictly increase (point {0})")]
    NonMonotonic(usize),
    #[error("empty pattern")]
    Empty,
    #[error("pattern file, line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform 2θ grid in degrees: points at min + i·step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternGrid {
    pub two_theta_min: f64,
    pub two_theta_max: f64,
    pub step: f64,
}

impl PatternGrid {
    pub fn new(two_theta_min: f64, two_theta_max: f64, step: f64) -> Result<Self, PatternError> {
        if !(two_theta_min < two_theta_max) {
            return Err(PatternError::InvalidGrid(format!(
                "min {two_theta_min} must be < max {two_theta_max}"
            )));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(PatternError::InvalidGrid(format!("step {step} must be > 0")));
        }
        Ok(PatternGrid {
            two_theta_min,
            two_theta_max,
            step,
        })
    }

    /// floor((max-min)/step) + 1, with a small guard against fp division noise.
    pub fn n_points(&self) -> usize {
        let ratio = (self.two_theta_max - self.two_theta_min) / self.step;
        (ratio + 1e-9).floor() as usize + 1
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_points())
            .map(|i| self.two_theta_min + i as f64 * self.step)
            .collect()
    }
}

/// Observed or synthetic diffractogram.
///
/// The abscissa is stored explicitly so that a pattern written to disk and
/// read back is bit-identical to the in-memory original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowderPattern {
    two_theta: Vec<f64>,
    intensities: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

impl PowderPattern {
    pub fn new(
        two_theta: Vec<f64>,
        intensities: Vec<f64>,
        sigma: Option<Vec<f64>>,
    ) -> Result<Self, PatternError> {
        if two_theta.is_empty() {
            return Err(PatternError::Empty);
        }
        if two_theta.len() != intensities.len() {
            return Err(PatternError::LengthMismatch(format!(
                "{} abscissa points vs {} intensities",
                two_theta.len(),
                intensities.len()
            )));
        }
        for (i, w) in two_theta.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(PatternError::NonMonotonic(i + 1));
            }
        }
        if let Some(s) = &sigma {
            if s.len() != two_theta.len() {
                return Err(PatternError::LengthMismatch(format!(
                    "{} abscissa points vs {} sigmas",
                    two_theta.len(),
                    s.len()
                )));
            }
            if let Some(i) = s.iter().position(|&x| !(x > 0.0)) {
                return Err(PatternError::NonPositiveSigma(i));
            }
        }
        Ok(PowderPattern {
            two_theta,
            intensities,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.two_theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.two_theta.is_empty()
    }

    pub fn two_theta(&self) -> &[f64] {
        &self.two_theta
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn intensities_mut(&mut self) -> &mut [f64] {
        &mut self.intensities
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    /// Per-point weights 1/σ²; σ defaults to √max(y, 1) when absent.
    pub fn weights(&self) -> Vec<f64> {
        match &self.sigma {
            Some(s) => s.iter().map(|&x| 1.0 / (x * x)).collect(),
            None => self
                .intensities
                .iter()
                .map(|&y| 1.0 / y.max(1.0))
                .collect(),
        }
    }

    /// Nominal uniform grid descriptor recovered from the abscissa.
    pub fn nominal_grid(&self) -> PatternGrid {
        let n = self.two_theta.len();
        let min = self.two_theta[0];
        let max = self.two_theta[n - 1];
        let step = if n > 1 { (max - min) / (n - 1) as f64 } else { 1.0 };
        PatternGrid {
            two_theta_min: min,
            two_theta_max: max,
            step,
        }
    }

    /// True when both patterns share the same abscissa to within 1e-9 deg.
    pub fn same_grid(&self, other: &PowderPattern) -> bool {
        self.two_theta.len() == other.two_theta.len()
            && self
                .two_theta
                .iter()
                .zip(other.two_theta.iter())
                .all(|(a, b)| (a - b).abs() < 1e-9)
    }

    pub fn max_intensity(&self) -> f64 {
        self.intensities.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Restrict to points with 2θ in [lo, hi].
    pub fn window(&self, lo: f64, hi: f64) -> Result<PowderPattern, PatternError> {
        let idx: Vec<usize> = self
            .two_theta
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= lo && t <= hi)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(PatternError::Empty);
        }
        Ok(PowderPattern {
            two_theta: idx.iter().map(|&i| self.two_theta[i]).collect(),
            intensities: idx.iter().map(|&i| self.intensities[i]).collect(),
            sigma: self
                .sigma
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
        })
    }

    /// Write the two/three-column text format. Floats use the shortest
    /// round-trip representation, so read(write(p)) == p exactly.
    pub fn write_xy<W: Write>(&self, mut w: W) -> Result<(), PatternError> {
        writeln!(w, "# two_theta_deg intensity_counts{}", if self.sigma.is_some() { " sigma_counts" } else { "" })?;
        match &self.sigma {
            Some(s) => {
                for i in 0..self.len() {
                    writeln!(w, "{} {} {}", self.two_theta[i], self.intensities[i], s[i])?;
                }
            }
            None => {
                for i in 0..self.len() {
                    writeln!(w, "{} {}", self.two_theta[i], self.intensities[i])?;
                }
            }
        }
        Ok(())
    }

    pub fn write_xy_file(&self, path: &std::path::Path) -> Result<(), PatternError> {
        let f = std::fs::File::create(path)?;
        self.write_xy(std::io::BufWriter::new(f))
    }

    /// Read the two/three-column text format; '#' lines are comments.
    pub fn read_xy<R: BufRead>(r: R) -> Result<PowderPattern, PatternError> {
        let mut tt = Vec::new();
        let mut ii = Vec::new();
        let mut ss: Vec<f64> = Vec::new();
        let mut saw_sigma = None::<bool>;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split_whitespace().collect();
            if cols.len() != 2 && cols.len() != 3 {
                return Err(PatternError::Parse {
                    line: lineno + 1,
                    detail: format!("expected 2 or 3 columns, found {}", cols.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, PatternError> {
                s.parse::<f64>().map_err(|e| PatternError::Parse {
                    line: lineno + 1,
                    detail: format!("bad number {s:?}: {e}"),
                })
            };
            let has_sigma = cols.len() == 3;
            match saw_sigma {
                None => saw_sigma = Some(has_sigma),
                Some(prev) if prev != has_sigma => {
                    return Err(PatternError::Parse {
                        line: lineno + 1,
                        detail: "mixed 2- and 3-column rows".into(),
                    })
                }
                _ => {}
            }
            tt.push(parse(cols[0])?);
            ii.push(parse(cols[1])?);
            if has_sigma {
                ss.push(parse(cols[2])?);
            }
        }
        PowderPattern::new(tt, ii, if saw_sigma == Some(true) { Some(ss) } else { None })
    }

    pub fn read_xy_file(path: &std::path::Path) -> Result<PowderPattern, PatternError> {
        let f = std::fs::File::open(path)?;
        Self::read_xy(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_point_count_matches_spec_grid() {
        let g = PatternGrid::new(4.0, 40.0, 0.013).unwrap();
        assert_eq!(g.n_points(), 2770);
        let pos = g.positions();
        assert_eq!(pos.len(), 2770);
        assert!(pos[2769] <= 40.0 + 1e-9);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(PatternGrid::new(10.0, 4.0, 0.01).is_err());
        assert!(PatternGrid::new(4.0, 40.0, 0.0).is_err());
    }

    #[test]
    fn xy_round_trip_is_bit_exact() {
        let g = PatternGrid::new(4.0, 10.0, 0.013).unwrap();
        let tt = g.positions();
        let ii: Vec<f64> = tt.iter().map(|t| 100.0 * (t * 0.7).sin().abs() + 0.1).collect();
        let ss: Vec<f64> = ii.iter().map(|y| y.max(1.0).sqrt()).collect();
        let p = PowderPattern::new(tt, ii, Some(ss)).unwrap();
        let mut buf = Vec::new();
        p.write_xy(&mut buf).unwrap();
        let q = PowderPattern::read_xy(&buf[..]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn read_rejects_garbage() {
        assert!(PowderPattern::read_xy("4.0 1.0\n4.1".as_bytes()).is_err());
        assert!(PowderPattern::read_xy("4.0 x\n".as_bytes()).is_err());
        assert!(PowderPattern::read_xy("# only comments\n".as_bytes()).is_err());
        // non-monotone abscissa
        assert!(PowderPattern::read_xy("4.0 1\n4.0 2\n".as_bytes()).is_err());
    }

    #[test]
    fn window_restricts() {
        let g = PatternGrid::new(4.0, 40.0, 0.5).unwrap();
        let tt = g.positions();
        let n = tt.len();
        let p = PowderPattern::new(tt, vec![1.0; n], None).unwrap();
        let w = p.window(10.0, 20.0).unwrap();
        assert!(w.two_theta().first().unwrap() >= &10.0);
        assert!(w.two_theta().last().unwrap() <= &20.0);
        assert!(p.window(50.0, 60.0).is_err());
    }
}
