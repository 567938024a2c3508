//! User, item and positional embedding tables; window truncation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Standard deviation of the initial table entries.
pub const INIT_STD: f64 = 0.02;

/// Learnable lookup tables. The item table has `n_items + 1` rows; the last
/// one is the padding row, kept at zero and never scored.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub user: Matrix,
    pub item: Matrix,
    pub positional: Matrix,
}

impl EmbeddingTables {
    /// Entries i.i.d. normal(0, 0.02²), padding row zeroed.
    pub fn init(n_users: usize, n_items: usize, window: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user = Matrix::randn(n_users, dim, INIT_STD, &mut rng);
        let mut item = Matrix::randn(n_items + 1, dim, INIT_STD, &mut rng);
        item.row_mut(n_items).fill(0.0);
        let positional = Matrix::randn(window, dim, INIT_STD, &mut rng);
        EmbeddingTables {
            user,
            item,
            positional,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item.rows() - 1
    }

    /// Index of the padding row in the item table.
    pub fn pad(&self) -> usize {
        self.n_items()
    }

    pub fn window(&self) -> usize {
        self.positional.rows()
    }

    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    /// Item rows without the padding row.
    pub fn catalog(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_vec(self.n_items(), d, self.item.as_slice()[..self.n_items() * d].to_vec())
            .expect("catalog slice has n_items rows")
    }
}

/// A right-aligned window of the most recent items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// `c` ids, padding id in the leading slots.
    pub ids: Vec<usize>,
    pub valid_len: usize,
}

/// Keeps the last `min(|sequence|, c)` items, right-aligned, padding on the left.
pub fn truncate_window(sequence: &[usize], c: usize, pad: usize) -> Result<Window> {
    if c == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    if sequence.is_empty() {
        return Err(Error::Data("cannot build a window from an empty sequence".into()));
    }
    let valid_len = sequence.len().min(c);
    let mut ids = vec![pad; c - valid_len];
    ids.extend_from_slice(&sequence[sequence.len() - valid_len..]);
    Ok(Window { ids, valid_len })
}

/// Batch of users with their padded item windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub user_ids: Vec<usize>,
    /// `batch × c` item ids, row-major.
    pub windows: Vec<usize>,
    pub valid_lengths: Vec<usize>,
    pub window: usize,
    pub pad: usize,
}

impl SequenceBatch {
    pub fn new(user_ids: Vec<usize>, sequences: &[&[usize]], window: usize, pad: usize) -> Result<Self> {
        if user_ids.len() != sequences.len() {
            return Err(Error::dim(
                "SequenceBatch::new",
                format!("{} users, {} sequences", user_ids.len(), sequences.len()),
            ));
        }
        let mut windows = Vec::with_capacity(user_ids.len() * window);
        let mut valid_lengths = Vec::with_capacity(user_ids.len());
        for seq in sequences {
            let w = truncate_window(seq, window, pad)?;
            windows.extend(w.ids);
            valid_lengths.push(w.valid_len);
        }
        Ok(SequenceBatch {
            user_ids,
            windows,
            valid_lengths,
            window,
            pad,
        })
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn is_pad_slot(&self, b: usize, t: usize) -> bool {
        t < self.window - self.valid_lengths[b]
    }

    /// `batch × c` flags, true at real items.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.len())
            .flat_map(|b| (0..self.window).map(move |t| !self.is_pad_slot(b, t)))
            .collect()
    }

    /// Window item ids with `None` at padded slots.
    pub fn item_slots(&self) -> Vec<Option<usize>> {
        self.valid_mask()
            .iter()
            .zip(&self.windows)
            .map(|(&valid, &id)| valid.then_some(id))
            .collect()
    }

    fn check_ranges(&self, tables: &EmbeddingTables) -> Result<()> {
        if let Some(&u) = self.user_ids.iter().find(|&&u| u >= tables.n_users()) {
            return Err(Error::Index {
                what: "user id",
                index: u,
                size: tables.n_users(),
            });
        }
        if let Some(Some(i)) = self.item_slots().iter().find(|s| matches!(s, Some(i) if *i >= tables.n_items())) {
            return Err(Error::Index {
                what: "item id",
                index: *i,
                size: tables.n_items(),
            });
        }
        if self.window != tables.window() {
            return Err(Error::dim(
                "embed_sequence",
                format!("batch window {} vs positional table {}", self.window, tables.window()),
            ));
        }
        Ok(())
    }
}

/// Tape handles of the three tables.
#[derive(Clone, Copy, Debug)]
pub struct TableVars {
    pub user: Var,
    pub item: Var,
    pub positional: Var,
}

/// Recorded lookup: `e^u = U_e(u)` (`batch × d`) and `E^u` (`(batch·c) × d`) with
/// the positional row added at real slots; padded slots stay zero.
pub fn embed_sequence_on(
    tape: &mut Tape,
    batch: &SequenceBatch,
    tables: &EmbeddingTables,
    vars: TableVars,
) -> Result<(Var, Var)> {
    batch.check_ranges(tables)?;
    let user_idx: Vec<Option<usize>> = batch.user_ids.iter().map(|&u| Some(u)).collect();
    let e_u = tape.gather_rows(vars.user, &user_idx)?;
    let items = tape.gather_rows(vars.item, &batch.item_slots())?;
    let pos_idx: Vec<Option<usize>> = batch
        .valid_mask()
        .chunks(batch.window)
        .flat_map(|row| row.iter().enumerate().map(|(t, &v)| v.then_some(t)).collect::<Vec<_>>())
        .collect();
    let pos = tape.gather_rows(vars.positional, &pos_idx)?;
    let seq = tape.add(items, pos)?;
    Ok((e_u, seq))
}

/// Plain-value version of [`embed_sequence_on`].
pub fn embed_sequence(batch: &SequenceBatch, tables: &EmbeddingTables) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let vars = TableVars {
        user: tape.constant(tables.user.clone()),
        item: tape.constant(tables.item.clone()),
        positional: tape.constant(tables.positional.clone()),
    };
    let (e, s) = embed_sequence_on(&mut tape, batch, tables, vars)?;
    Ok((tape.value(e).clone(), tape.value(s).clone()))
}
