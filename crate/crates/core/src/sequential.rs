//! Transformer encoder over the user token followed by the item window.
//!
//! The input for each user is a `(c + 1) × d` block: row 0 is the user
//! embedding, rows `1..=c` the (position-augmented) item window. Blocks are
//! pre-layer-norm residual units:
//!
//! ```text
//! x ← x + Dropout(Attention(LN₁(x)) · W_o)
//! x ← x + Dropout(W₂ᵀ ReLU(LN₂(x) · W₁ + b₁) + b₂)
//! ```
//!
//! Attention visibility is set by [`AttentionMode`]. In causal mode an item
//! slot sees the user token and the real items at or before it, and the user
//! token sees only itself, so per-position next-item targets never leak.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Matrix, Tape, Var};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

/// Which output row becomes the local user state `e_l^u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserState {
    /// Output row of the prepended user token.
    UserToken,
    /// Output row of the most recent item.
    LastItem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqEncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub attention: AttentionMode,
    pub user_state: UserState,
}

impl SeqEncoderConfig {
    pub fn with_width(d: usize) -> Self {
        SeqEncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_ff: 4 * d,
            dropout: 0.2,
            attention: AttentionMode::Causal,
            user_state: UserState::UserToken,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {} heads",
                self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ff_in: Matrix,
    pub ff_in_bias: Matrix,
    pub ff_out: Matrix,
    pub ff_out_bias: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        EncoderLayer {
            wq: Matrix::randn(d, d, std, rng),
            wk: Matrix::randn(d, d, std, rng),
            wv: Matrix::randn(d, d, std, rng),
            wo: Matrix::randn(d, d, std, rng),
            ff_in: Matrix::randn(d, d_ff, std, rng),
            ff_in_bias: Matrix::zeros(1, d_ff),
            ff_out: Matrix::randn(d_ff, d, std, rng),
            ff_out_bias: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    pub(crate) fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 12] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ff_in", &mut self.ff_in),
            ("ff_in_bias", &mut self.ff_in_bias),
            ("ff_out", &mut self.ff_out),
            ("ff_out_bias", &mut self.ff_out_bias),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoderParams {
    pub layers: Vec<EncoderLayer>,
}

impl SeqEncoderParams {
    pub fn init(config: &SeqEncoderConfig, d: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqEncoderParams {
            layers: (0..config.n_layers)
                .map(|_| EncoderLayer::init(d, config.d_ff, std, &mut rng))
                .collect(),
        }
    }
}

/// Tape handles mirroring [`EncoderLayer`], in the same order as `named()`.
#[derive(Clone, Debug)]
pub struct LayerVars(pub [Var; 12]);

/// Attention mask over `c + 1` positions (user token at 0) for each batch row.
pub fn causal_attention_mask(c_plus_1: usize, valid_lengths: &[usize], mode: AttentionMode) -> Result<AttentionMask> {
    let c = c_plus_1
        .checked_sub(1)
        .ok_or_else(|| Error::dim("causal_attention_mask", "length must include the user token"))?;
    let len = c_plus_1;
    let mut allowed = vec![false; valid_lengths.len() * len * len];
    for (b, &valid) in valid_lengths.iter().enumerate() {
        if valid > c {
            return Err(Error::dim(
                "causal_attention_mask",
                format!("valid length {valid} exceeds window {c}"),
            ));
        }
        let first_real = 1 + c - valid;
        let real = |p: usize| p == 0 || p >= first_real;
        for i in 0..len {
            if !real(i) {
                continue;
            }
            for j in 0..len {
                if !real(j) {
                    continue;
                }
                let ok = match mode {
                    AttentionMode::Bidirectional => true,
                    AttentionMode::Causal => {
                        if i == 0 {
                            j == 0
                        } else {
                            j <= i
                        }
                    }
                };
                allowed[(b * len + i) * len + j] = ok;
            }
        }
    }
    AttentionMask::new(valid_lengths.len(), len, allowed)
}

/// Dropout source for training-mode passes.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, Matrix::from_vec(rows, cols, data)?)
    }
}

/// Recorded encoder pass. `e_u` is `batch × d`, `items` is `(batch·c) × d`.
/// Returns `(e_l, E_l)` with the same shapes. Pass `dropout = None` for
/// evaluation mode.
pub fn seq_encode_on(
    tape: &mut Tape,
    e_u: Var,
    items: Var,
    layers: &[LayerVars],
    config: &SeqEncoderConfig,
    valid_lengths: &[usize],
    mut dropout: Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let batch = valid_lengths.len();
    let (ub, d) = tape.value(e_u).shape();
    let (rows, d2) = tape.value(items).shape();
    if ub != batch || d2 != d || batch == 0 || rows % batch != 0 {
        return Err(Error::dim(
            "seq_encode",
            format!("user block {ub}x{d}, item block {rows}x{d2}, batch {batch}"),
        ));
    }
    if layers.len() != config.n_layers {
        return Err(Error::dim(
            "seq_encode",
            format!("{} layer parameter sets for {} layers", layers.len(), config.n_layers),
        ));
    }
    config.validate(d)?;
    let c = rows / batch;
    let len = c + 1;
    // Interleave [e_u; E_u] into per-user (c + 1)-row blocks.
    let stacked = tape.concat_rows(&[e_u, items])?;
    let interleave: Vec<Option<usize>> = (0..batch)
        .flat_map(|b| std::iter::once(Some(b)).chain((0..c).map(move |t| Some(batch + b * c + t))))
        .collect();
    let mut x = tape.gather_rows(stacked, &interleave)?;
    let mask = Rc::new(causal_attention_mask(len, valid_lengths, config.attention)?);
    for lv in layers {
        let [wq, wk, wv, wo, ff_in, ff_in_bias, ff_out, ff_out_bias, ln1_g, ln1_b, ln2_g, ln2_b] = lv.0;
        let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let att = tape.attention(q, k, v, config.n_heads, mask.clone())?;
        let mut att = tape.matmul(att, wo)?;
        if let Some(dp) = dropout.as_mut() {
            att = dp.apply(tape, att)?;
        }
        x = tape.add(x, att)?;
        let h = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = tape.matmul(h, ff_in)?;
        let f = tape.add_row(f, ff_in_bias)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, ff_out)?;
        let mut f = tape.add_row(f, ff_out_bias)?;
        if let Some(dp) = dropout.as_mut() {
            f = dp.apply(tape, f)?;
        }
        x = tape.add(x, f)?;
    }
    let state_row = match config.user_state {
        UserState::UserToken => 0,
        UserState::LastItem => c,
    };
    let user_idx: Vec<Option<usize>> = (0..batch).map(|b| Some(b * len + state_row)).collect();
    let item_idx: Vec<Option<usize>> = (0..batch)
        .flat_map(|b| (1..len).map(move |p| Some(b * len + p)))
        .collect();
    let e_l = tape.gather_rows(x, &user_idx)?;
    let big_e_l = tape.gather_rows(x, &item_idx)?;
    Ok((e_l, big_e_l))
}

/// Plain-value encoder pass. `dropout_seed = None` runs in evaluation mode.
pub fn seq_encode(
    e_u: &Matrix,
    items: &Matrix,
    params: &SeqEncoderParams,
    config: &SeqEncoderConfig,
    valid_lengths: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let e = tape.constant(e_u.clone());
    let it = tape.constant(items.clone());
    let layers: Vec<LayerVars> = params
        .layers
        .iter()
        .map(|l| LayerVars(l.named().map(|(_, m)| tape.constant(m.clone()))))
        .collect();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let dropout = rng.as_mut().map(|rng| Dropout {
        rate: config.dropout,
        rng,
    });
    let (a, b) = seq_encode_on(&mut tape, e, it, &layers, config, valid_lengths, dropout)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, NamedBlocks};

    fn config(n_layers: usize, n_heads: usize, d: usize) -> SeqEncoderConfig {
        SeqEncoderConfig {
            n_layers,
            n_heads,
            d_ff: 2 * d,
            dropout: 0.0,
            attention: AttentionMode::Causal,
            user_state: UserState::UserToken,
        }
    }

    fn rand_inputs(batch: usize, c: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Matrix::randn(batch, d, 1.0, &mut rng), Matrix::randn(batch * c, d, 1.0, &mut rng))
    }

    fn mask_rows(mask: &AttentionMask, b: usize) -> Vec<Vec<usize>> {
        (0..mask.seq_len())
            .map(|i| (0..mask.seq_len()).filter(|&j| mask.allows(b, i, j)).collect())
            .collect()
    }

    #[test]
    fn causal_mask_full_length() {
        let m = causal_attention_mask(3, &[2], AttentionMode::Causal).unwrap();
        assert_eq!(mask_rows(&m, 0), vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn padded_slot_is_excluded_everywhere() {
        let m = causal_attention_mask(3, &[1], AttentionMode::Causal).unwrap();
        assert_eq!(mask_rows(&m, 0), vec![vec![0], vec![], vec![0, 2]]);
        let m = causal_attention_mask(3, &[1], AttentionMode::Bidirectional).unwrap();
        assert_eq!(mask_rows(&m, 0), vec![vec![0, 2], vec![], vec![0, 2]]);
        assert!(causal_attention_mask(3, &[3], AttentionMode::Causal).is_err());
    }

    #[test]
    fn masked_softmax_normalizes_over_allowed_entries() {
        // A masked attention row with V = identity returns its probabilities.
        let len = 4;
        let mask = causal_attention_mask(len, &[2], AttentionMode::Causal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Matrix::randn(len, len, 3.0, &mut rng);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let vv = tape.constant(Matrix::identity(len));
        let out = tape.attention(qv, qv, vv, 1, Rc::new(mask.clone())).unwrap();
        let probs = tape.value(out);
        for i in 0..len {
            let allowed = mask.row(0, i);
            if !allowed.iter().any(|&a| a) {
                continue;
            }
            let total: f64 = probs.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for j in 0..len {
                if !allowed[j] {
                    assert_eq!(probs.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_is_preserved() {
        for (batch, c, d) in [(1, 1, 2), (3, 4, 4), (2, 7, 6)] {
            let cfg = config(2, 2, d);
            let p = SeqEncoderParams::init(&cfg, d, 0.1, 1);
            let (e, items) = rand_inputs(batch, c, d, 2);
            let lens = vec![c; batch];
            let (el, big) = seq_encode(&e, &items, &p, &cfg, &lens, None).unwrap();
            assert_eq!(el.shape(), (batch, d));
            assert_eq!(big.shape(), (batch * c, d));
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = config(0, 1, 3);
        let p = SeqEncoderParams::init(&cfg, 3, 0.1, 1);
        let (e, items) = rand_inputs(2, 3, 3, 4);
        let (el, big) = seq_encode(&e, &items, &p, &cfg, &[3, 2], None).unwrap();
        assert_eq!(el, e);
        assert_eq!(big, items);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let cfg = config(1, 1, 4);
        let p = SeqEncoderParams::init(&cfg, 4, 0.1, 1);
        let (e, items) = rand_inputs(2, 3, 4, 4);
        assert!(seq_encode(&e, &items, &p, &cfg, &[3], None).is_err());
        let bad = Matrix::zeros(6, 3);
        assert!(seq_encode(&e, &bad, &p, &cfg, &[3, 3], None).is_err());
    }

    /// Scalar re-derivation of one pre-LN block with one head, written
    /// independently of the tape.
    fn hand_block(x: &[Vec<f64>], l: &EncoderLayer, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let d = x[0].len();
        let ln = |row: &[f64], g: &Matrix, b: &Matrix| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|c| (row[c] - mean) / (var + LN_EPS).sqrt() * g.get(0, c) + b.get(0, c))
                .collect()
        };
        let proj = |row: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..row.len()).map(|p| row[p] * w.get(p, c)).sum()).collect()
        };
        let n = x.len();
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &l.ln1_gain, &l.ln1_bias)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| proj(r, &l.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| proj(r, &l.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| proj(r, &l.wv)).collect();
        let mut out = x.to_vec();
        for i in 0..n {
            let js: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
            let mut att = vec![0.0; d];
            if !js.is_empty() {
                let s: Vec<f64> = js
                    .iter()
                    .map(|&j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for (idx, &j) in js.iter().enumerate() {
                    let p = (s[idx] - m).exp() / z;
                    for c in 0..d {
                        att[c] += p * v[j][c];
                    }
                }
            }
            let o = proj(&att, &l.wo);
            for c in 0..d {
                out[i][c] += o[c];
            }
        }
        let x1 = out.clone();
        for i in 0..n {
            let h2 = ln(&x1[i], &l.ln2_gain, &l.ln2_bias);
            let mut f = proj(&h2, &l.ff_in);
            for (c, fv) in f.iter_mut().enumerate() {
                *fv = (*fv + l.ff_in_bias.get(0, c)).max(0.0);
            }
            let g = proj(&f, &l.ff_out);
            for c in 0..d {
                out[i][c] = x1[i][c] + g[c] + l.ff_out_bias.get(0, c);
            }
        }
        out
    }

    #[test]
    fn single_layer_matches_hand_arithmetic() {
        let d = 4;
        let c = 2;
        let cfg = config(1, 1, d);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut layer = EncoderLayer::init(d, cfg.d_ff, 0.3, &mut rng);
        layer.ff_in_bias = Matrix::randn(1, cfg.d_ff, 0.1, &mut rng);
        layer.ff_out_bias = Matrix::randn(1, d, 0.1, &mut rng);
        layer.ln1_gain = Matrix::from_vec(1, d, vec![1.0, 0.9, 1.1, 0.8]).unwrap();
        layer.ln2_bias = Matrix::from_vec(1, d, vec![0.05, -0.05, 0.0, 0.1]).unwrap();
        let params = SeqEncoderParams { layers: vec![layer.clone()] };
        let (e, items) = rand_inputs(1, c, d, 5);
        let (el, big) = seq_encode(&e, &items, &params, &cfg, &[c], None).unwrap();
        let x: Vec<Vec<f64>> = std::iter::once(e.row(0).to_vec())
            .chain((0..c).map(|t| items.row(t).to_vec()))
            .collect();
        let causal = |i: usize, j: usize| if i == 0 { j == 0 } else { j <= i };
        let expected = hand_block(&x, &layer, &causal);
        for col in 0..d {
            assert!((el.get(0, col) - expected[0][col]).abs() < 1e-10);
            for t in 0..c {
                assert!((big.get(t, col) - expected[t + 1][col]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn causal_perturbation_only_moves_later_positions() {
        let (batch, c, d) = (1, 5, 4);
        let cfg = config(2, 2, d);
        let p = SeqEncoderParams::init(&cfg, d, 0.3, 3);
        let (e, items) = rand_inputs(batch, c, d, 6);
        let (el0, big0) = seq_encode(&e, &items, &p, &cfg, &[c], None).unwrap();
        for t in 0..c {
            let mut moved = items.clone();
            moved.set(t, 0, moved.get(t, 0) + 1e-3);
            let (el1, big1) = seq_encode(&e, &moved, &p, &cfg, &[c], None).unwrap();
            assert_eq!(el0, el1, "user-token state must ignore items");
            for s in 0..c {
                let changed = big0.row(s) != big1.row(s);
                assert_eq!(changed, s >= t, "slot {s} after perturbing {t}");
            }
        }
    }

    #[test]
    fn padded_content_does_not_reach_real_positions() {
        let (c, d) = (4, 4);
        for attention in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let cfg = SeqEncoderConfig { attention, ..config(2, 2, d) };
            let p = SeqEncoderParams::init(&cfg, d, 0.3, 3);
            let (e, items) = rand_inputs(1, c, d, 8);
            let (el0, big0) = seq_encode(&e, &items, &p, &cfg, &[2], None).unwrap();
            let mut garbage = items.clone();
            garbage.row_mut(0).fill(37.0);
            garbage.row_mut(1).fill(-5.0);
            let (el1, big1) = seq_encode(&e, &garbage, &p, &cfg, &[2], None).unwrap();
            assert_eq!(el0, el1);
            assert_eq!(big0.row(2), big1.row(2));
            assert_eq!(big0.row(3), big1.row(3));
        }
    }

    #[test]
    fn forward_is_deterministic_in_both_modes() {
        let cfg = SeqEncoderConfig { dropout: 0.3, ..config(2, 2, 4) };
        let p = SeqEncoderParams::init(&cfg, 4, 0.3, 3);
        let (e, items) = rand_inputs(2, 3, 4, 1);
        let a = seq_encode(&e, &items, &p, &cfg, &[3, 1], None).unwrap();
        let b = seq_encode(&e, &items, &p, &cfg, &[3, 1], None).unwrap();
        assert_eq!(a, b);
        let a = seq_encode(&e, &items, &p, &cfg, &[3, 1], Some(4)).unwrap();
        let b = seq_encode(&e, &items, &p, &cfg, &[3, 1], Some(4)).unwrap();
        assert_eq!(a, b);
        let c = seq_encode(&e, &items, &p, &cfg, &[3, 1], Some(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn last_item_state_sees_the_sequence() {
        let cfg = SeqEncoderConfig {
            user_state: UserState::LastItem,
            ..config(1, 1, 4)
        };
        let p = SeqEncoderParams::init(&cfg, 4, 0.3, 3);
        let (e, items) = rand_inputs(1, 3, 4, 1);
        let (el, big) = seq_encode(&e, &items, &p, &cfg, &[3], None).unwrap();
        assert_eq!(el.row(0), big.row(2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (batch, c, d) = (2, 3, 4);
        let cfg = config(2, 2, d);
        let p = SeqEncoderParams::init(&cfg, d, 0.4, 7);
        let (e, items) = rand_inputs(batch, c, d, 3);
        let lens = [3, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe_l = Matrix::randn(batch, d, 1.0, &mut rng);
        let probe_big = Matrix::randn(batch * c, d, 1.0, &mut rng);
        let mut blocks = vec![("e_u".to_string(), e), ("items".to_string(), items)];
        for (li, layer) in p.layers.iter().enumerate() {
            for (name, m) in layer.named() {
                blocks.push((format!("layer{li}.{name}"), m.clone()));
            }
        }
        let params = NamedBlocks(blocks);
        let run = |ps: &NamedBlocks, want_grad: bool| -> Result<(f64, NamedBlocks)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.0.iter().map(|(_, m)| tape.param(m.clone())).collect();
            let layers: Vec<LayerVars> = vars[2..]
                .chunks(12)
                .map(|ch| LayerVars(ch.try_into().unwrap()))
                .collect();
            let (el, big) = seq_encode_on(&mut tape, vars[0], vars[1], &layers, &cfg, &lens, None)?;
            // scalar probe: Σ probe ⊙ output, plus a quadratic term for curvature
            let pl = tape.constant(probe_l.clone());
            let pb = tape.constant(probe_big.clone());
            let a = tape.add(el, pl)?;
            let b = tape.add(big, pb)?;
            let sa = tape.sum_squares(a);
            let sb = tape.sum_squares(b);
            let loss = tape.add(sa, sb)?;
            let value = tape.value(loss).item();
            if !want_grad {
                return Ok((value, ps.clone()));
            }
            let g = tape.backward(loss)?;
            let grads = ps
                .0
                .iter()
                .zip(&vars)
                .map(|((n, m), v)| Ok((n.clone(), g.wrt_or_zeros(*v, m)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((value, NamedBlocks(grads)))
        };
        let (_, analytic) = run(&params, true).unwrap();
        let report = finite_difference_check(|p| Ok(run(p, false)?.0), &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
    }
}
