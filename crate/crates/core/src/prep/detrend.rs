//! Per-run voxel cleaning: cosine-drift regression and z-scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcortex::FmriRun;

/// Default high-pass cutoff (seconds). Drift components with a period at or
/// above this are regressed out.
pub const DEFAULT_CUTOFF_S: f64 = 32.0;
pub const DEGENERATE_STD: f64 = 1e-8;

/// Discrete cosine drift basis, column-major: `basis[k][n]`.
/// Column 0 is the constant; column k is `cos(π·k·(n+0.5)/N)`, kept while
/// its period `2·N·TR/k` is at least `cutoff_s`.
pub fn cosine_basis(n_volumes: usize, tr: f64, cutoff_s: f64) -> Vec<Vec<f64>> {
    let n = n_volumes as f64;
    let mut cols = vec![vec![1.0; n_volumes]];
    let mut k = 1usize;
    while 2.0 * n * tr / k as f64 >= cutoff_s && k < n_volumes {
        cols.push((0..n_volumes).map(|i| (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()).collect());
        k += 1;
    }
    cols
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = a.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let d = a[i][i] - s;
                // relative pivot test catches duplicated or collinear columns
                if d <= 1e-10 * a[i][i].abs().max(1.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = l.len();
    let mut y = vec![0.0; k];
    for i in 0..k {
        y[i] = (b[i] - (0..i).map(|p| l[i][p] * y[p]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        x[i] = (y[i] - (i + 1..k).map(|p| l[p][i] * x[p]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Least-squares residual of every row of `rows` against `basis`
/// (normal equations, f64 accumulation).
pub fn regress_out(basis: &[Vec<f64>], rows: &mut [f64], row_len: usize) -> Result<()> {
    if basis.iter().any(|c| c.len() != row_len) {
        return Err(Error::Shape(format!("basis columns must have length {row_len}")));
    }
    if row_len < basis.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{row_len} samples cannot support {} basis functions",
            basis.len()
        )));
    }
    let k = basis.len();
    let gram: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum()).collect()).collect();
    let l = cholesky(&gram).ok_or_else(|| Error::InvalidArgument("drift basis is rank deficient".into()))?;
    for row in rows.chunks_mut(row_len) {
        let rhs: Vec<f64> = basis.iter().map(|c| c.iter().zip(row.iter()).map(|(a, b)| a * b).sum()).collect();
        let beta = cholesky_solve(&l, &rhs);
        for (c, b) in basis.iter().zip(&beta) {
            for (v, x) in row.iter_mut().zip(c) {
                *v -= b * x;
            }
        }
    }
    Ok(())
}

pub fn detrend(run: &FmriRun, cutoff_s: f64) -> Result<FmriRun> {
    if !(cutoff_s > 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff must be positive, got {cutoff_s}")));
    }
    let n = run.n_volumes();
    let basis = cosine_basis(n, run.timeline.tr, cutoff_s);
    let mut out = run.clone();
    regress_out(&basis, &mut out.data, n)?;
    Ok(out)
}

/// Z-scores every voxel over the run (population std). Voxels whose std is
/// below [`DEGENERATE_STD`] are zeroed and their indices returned.
pub fn zscore(run: &FmriRun) -> Result<(FmriRun, Vec<usize>)> {
    let n = run.n_volumes();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("z-scoring needs at least 2 volumes, got {n}")));
    }
    let mut out = run.clone();
    let mut degenerate = Vec::new();
    for (v, row) in out.data.chunks_mut(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std < DEGENERATE_STD {
            row.fill(0.0);
            degenerate.push(v);
        } else {
            row.iter_mut().for_each(|x| *x = (*x - mean) / std);
        }
    }
    Ok((out, degenerate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub detrend: bool,
    pub cutoff_s: f64,
    pub zscore: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { detrend: true, cutoff_s: DEFAULT_CUTOFF_S, zscore: true }
    }
}

/// Detrend then z-score, as configured. Returns the degenerate voxels.
pub fn preprocess_run(run: &FmriRun, cfg: &PrepConfig) -> Result<(FmriRun, Vec<usize>)> {
    let run = if cfg.detrend { detrend(run, cfg.cutoff_s)? } else { run.clone() };
    if cfg.zscore {
        zscore(&run)
    } else {
        Ok((run, Vec::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcortex::RunTimeline;

    fn run_from(rows: &[Vec<f64>], tr: f64) -> FmriRun {
        let n = rows[0].len();
        FmriRun {
            subject: 0,
            run: 0,
            split_tag: "test".into(),
            timeline: RunTimeline { tr, n_volumes: n, events: vec![] },
            n_voxels: rows.len(),
            data: rows.concat(),
        }
    }

    #[test]
    fn in_basis_cosine_and_constant_vanish() {
        let basis = cosine_basis(179, 1.3, 128.0);
        let r = run_from(&[basis[2].iter().map(|x| 3.0 * x).collect(), vec![7.5; 179]], 1.3);
        let out = detrend(&r, 128.0).unwrap();
        assert!(out.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn fast_cosine_survives() {
        let x: Vec<f64> = (0..179).map(|i| (std::f64::consts::TAU * i as f64 * 1.3 / 10.0).cos()).collect();
        let out = detrend(&run_from(&[x.clone()], 1.3), DEFAULT_CUTOFF_S).unwrap();
        let dot: f64 = x.iter().zip(&out.data).map(|(a, b)| a * b).sum();
        let na: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = out.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.99);
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let c = vec![1.0, 2.0, 3.0, 4.0];
        let mut rows = vec![0.0; 4];
        assert!(regress_out(&[c.clone(), c], &mut rows, 4).is_err());
    }

    #[test]
    fn too_short_runs_are_rejected() {
        let r = run_from(&[vec![1.0, 2.0]], 1.3);
        assert!(detrend(&r, 1.0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let (out, flags) = zscore(&run_from(&[vec![1.0, 3.0], vec![5.0, 5.0]], 1.3)).unwrap();
        assert_eq!(out.data, vec![-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(flags, vec![1]);
        // same thing, longer constant voxel
        let (out, flags) = zscore(&run_from(&[vec![5.0, 5.0, 5.0]], 1.3)).unwrap();
        assert_eq!(out.data, vec![0.0; 3]);
        assert_eq!(flags, vec![0]);
    }
}
