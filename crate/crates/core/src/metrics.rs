//! Average-minimum-RMSD and coverage between generated and reference ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_rmsd_over, rmsd, symmetry_permutations, Conformer};
use crate::molgraph::MolecularGraph;

pub const DRUG_THRESHOLD: f64 = 0.75;
pub const SMALL_MOLECULE_THRESHOLD: f64 = 0.5;

/// Row-major `L x K` matrix: rows are generated, columns reference conformers.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RmsdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch { expected: vec![rows, cols], found: vec![data.len()] });
        }
        Ok(RmsdMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        RmsdMatrix::new(r, c, rows.concat())
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.data[l * self.cols + k]
    }

    fn row_min(&self, l: usize) -> f64 {
        (0..self.cols).map(|k| self.get(l, k)).fold(f64::INFINITY, f64::min)
    }

    fn col_min(&self, k: usize) -> f64 {
        (0..self.rows).map(|l| self.get(l, k)).fold(f64::INFINITY, f64::min)
    }
}

/// Aligned RMSD for every (generated, reference) pair.
///
/// With `symmetry`, each entry is minimized over graph automorphisms (see
/// [`crate::geometry::symmetric_rmsd`]).
pub fn rmsd_matrix(
    generated: &[Conformer],
    reference: &[Conformer],
    graph: Option<&MolecularGraph>,
    symmetry: bool,
) -> Result<RmsdMatrix> {
    let perms = match (symmetry, graph) {
        (true, Some(g)) => symmetry_permutations(g),
        (true, None) => return Err(Error::InvalidInput("symmetry-aware RMSD needs the molecular graph".into())),
        _ => Vec::new(),
    };
    let mut data = Vec::with_capacity(generated.len() * reference.len());
    for g in generated {
        for r in reference {
            data.push(if symmetry { min_rmsd_over(&perms, g, r)? } else { rmsd(g, r, true)? });
        }
    }
    RmsdMatrix::new(generated.len(), reference.len(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageScores {
    /// Fraction of reference conformers matched by some generated one, in `[0, 1]`.
    pub cov_r: f64,
    /// Fraction of generated conformers matching some reference one.
    pub cov_p: f64,
    pub amr_r: f64,
    pub amr_p: f64,
}

pub fn amr_cov(m: &RmsdMatrix, delta: f64) -> Result<CoverageScores> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidInput("empty RMSD matrix".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be positive, got {delta}")));
    }
    let col_mins: Vec<f64> = (0..m.cols).map(|k| m.col_min(k)).collect();
    let row_mins: Vec<f64> = (0..m.rows).map(|l| m.row_min(l)).collect();
    let frac = |v: &[f64]| v.iter().filter(|&&x| x < delta).count() as f64 / v.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CoverageScores { cov_r: frac(&col_mins), cov_p: frac(&row_mins), amr_r: mean(&col_mins), amr_p: mean(&row_mins) })
}

/// `(delta, COV-R, COV-P)` for each threshold.
pub fn coverage_curve(m: &RmsdMatrix, deltas: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("threshold grid must be ascending".into()));
    }
    deltas
        .iter()
        .map(|&d| amr_cov(m, d).map(|s| (d, s.cov_r, s.cov_p)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub cov_r_mean: f64,
    pub cov_r_median: f64,
    pub cov_p_mean: f64,
    pub cov_p_median: f64,
    pub amr_r_mean: f64,
    pub amr_r_median: f64,
    pub amr_p_mean: f64,
    pub amr_p_median: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn aggregate(scores: &[CoverageScores]) -> Result<AggregateScores> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no molecules to aggregate".into()));
    }
    let stat = |f: fn(&CoverageScores) -> f64| {
        let mut v: Vec<f64> = scores.iter().map(f).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (mean, median(&mut v))
    };
    let (cov_r_mean, cov_r_median) = stat(|s| s.cov_r);
    let (cov_p_mean, cov_p_median) = stat(|s| s.cov_p);
    let (amr_r_mean, amr_r_median) = stat(|s| s.amr_r);
    let (amr_p_mean, amr_p_median) = stat(|s| s.amr_p);
    Ok(AggregateScores {
        cov_r_mean,
        cov_r_median,
        cov_p_mean,
        cov_p_median,
        amr_r_mean,
        amr_r_median,
        amr_p_mean,
        amr_p_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let m = RmsdMatrix::from_rows(&[vec![0.3], vec![0.9]]).unwrap();
        let s = amr_cov(&m, 0.5).unwrap();
        assert_eq!((s.cov_r, s.cov_p, s.amr_r, s.amr_p), (1.0, 0.5, 0.3, 0.6));
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(amr_cov(&RmsdMatrix::new(0, 0, vec![]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn curve_extremes() {
        let m = RmsdMatrix::from_rows(&[vec![0.3, 1.2], vec![0.9, 0.4]]).unwrap();
        let c = coverage_curve(&m, &[0.1, 2.0]).unwrap();
        assert_eq!((c[0].1, c[0].2), (0.0, 0.0));
        assert_eq!((c[1].1, c[1].2), (1.0, 1.0));
        assert!(coverage_curve(&m, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
