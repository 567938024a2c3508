use std::fmt;

use super::Matrix;
use crate::error::Result;

/// A set of named parameter blocks that can be perturbed one entry at a time.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<(String, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn n_values(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }
}

/// Free-form block list, handy for checking standalone functions.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlocks(pub Vec<(String, Matrix)>);

impl Parameters for NamedBlocks {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.0.iter().map(|(n, m)| (n.clone(), m)).collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.0.iter_mut().map(|(n, m)| (n.clone(), m)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub n_values: usize,
    pub max_abs_error: f64,
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over the block.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub step: f64,
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<28} n={:<5} rel={:.3e} abs={:.3e} {}",
                b.name,
                b.n_values,
                b.rel_error,
                b.max_abs_error,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "max rel error {:.3e} (tol {:.1e}, h {:.1e})",
            self.max_rel_error(),
            self.tol,
            self.step
        )
    }
}

/// Smallest gradient scale treated as non-zero when forming relative errors.
const SCALE_FLOOR: f64 = 1e-8;

/// Compares `analytic` against central differences `(f(θ+h) − f(θ−h)) / 2h`
/// taken entry by entry over every block of `params`.
pub fn finite_difference_check<P, F>(loss: F, params: &P, analytic: &P, h: f64, tol: f64) -> Result<FdReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let names: Vec<(String, usize)> = params.blocks().iter().map(|(n, m)| (n.clone(), m.len())).collect();
    let analytic_blocks: Vec<Matrix> = analytic.blocks().into_iter().map(|(_, m)| m.clone()).collect();
    let mut reports = Vec::with_capacity(names.len());
    let mut probe = params.clone();
    for (b, (name, len)) in names.iter().enumerate() {
        let mut numeric = vec![0.0; *len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let original = probe.blocks_mut()[b].1.as_slice()[e];
            probe.blocks_mut()[b].1.as_mut_slice()[e] = original + h;
            let plus = loss(&probe)?;
            probe.blocks_mut()[b].1.as_mut_slice()[e] = original - h;
            let minus = loss(&probe)?;
            probe.blocks_mut()[b].1.as_mut_slice()[e] = original;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = analytic_blocks[b].as_slice();
        let max_abs_error = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(SCALE_FLOOR);
        let rel_error = max_abs_error / scale;
        reports.push(BlockReport {
            name: name.clone(),
            n_values: *len,
            max_abs_error,
            rel_error,
            passed: rel_error <= tol && a.len() == numeric.len(),
        });
    }
    Ok(FdReport {
        step: h,
        tol,
        blocks: reports,
    })
}
