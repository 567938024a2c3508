//! Two-layer ReLU fusion of local and global user states, and catalog scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// `W₁ ∈ R^{4d×2d}`, `W₂ ∈ R^{d×4d}`; no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl FusionParams {
    pub fn init(d: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionParams {
            w1: Matrix::randn(4 * d, 2 * d, std, &mut rng),
            w2: Matrix::randn(d, 4 * d, std, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.w1.shape() != (4 * d, 2 * d) || self.w2.shape() != (d, 4 * d) {
            return Err(Error::dim(
                "fuse",
                format!("W1 {:?}, W2 {:?}", self.w1.shape(), self.w2.shape()),
            ));
        }
        Ok(())
    }
}

/// Which user representation is dotted with the catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringHead {
    /// `e_f` against `I_e`.
    Fused,
    /// `e_l` against `I_e`.
    Sequential,
    /// `e_g` against the propagated item rows.
    Graph,
}

/// Recorded `e_f = W₂ ReLU(W₁ (e_l ∥ e_g))`, row-batched.
pub fn fuse_on(tape: &mut Tape, e_l: Var, e_g: Var, w1: Var, w2: Var) -> Result<Var> {
    let (bl, dl) = tape.value(e_l).shape();
    let (bg, dg) = tape.value(e_g).shape();
    if bl != bg || dl != dg {
        return Err(Error::dim("fuse", format!("e_l {bl}x{dl}, e_g {bg}x{dg}")));
    }
    let x = tape.concat_cols(&[e_l, e_g])?;
    let h = tape.matmul_t(x, w1)?;
    let h = tape.relu(h);
    tape.matmul_t(h, w2)
}

pub fn fuse(e_l: &Matrix, e_g: &Matrix, params: &FusionParams) -> Result<Matrix> {
    params.check()?;
    if e_l.cols() != params.dim() {
        return Err(Error::dim("fuse", format!("input width {} vs {}", e_l.cols(), params.dim())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(e_l.clone());
    let b = tape.constant(e_g.clone());
    let w1 = tape.constant(params.w1.clone());
    let w2 = tape.constant(params.w2.clone());
    let out = fuse_on(&mut tape, a, b, w1, w2)?;
    Ok(tape.value(out).clone())
}

/// `batch × N` scores `e · I_e(i)` over the catalog (padding row excluded).
pub fn score_items(e: &Matrix, catalog: &Matrix) -> Result<Matrix> {
    e.matmul_t(catalog)
}
