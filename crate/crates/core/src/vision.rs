//! Image tokenizer and the two understanding towers.
//!
//! The tokenizer is a lossless per-cell codebook lookup. The semantic tower is
//! frozen: object histograms and row/column color occupancy read off the
//! raster, pushed through a fixed random projection. The spatial tower embeds
//! each image token with a trainable table plus a per-cell position vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{decode_cell, render, Cell, Pos, SymbolicState, CELLS, GRID, NUM_CELL_CODES, NUM_COLORS, RASTER_PX};
use crate::raster::Raster;

/// Semantic feature width after projection.
pub const SEMANTIC_DIM: usize = 32;
/// Raw semantic features: block and bowl count per color, then per-row and
/// per-column color occupancy.
pub const SEMANTIC_RAW_DIM: usize = 2 * NUM_COLORS + 2 * GRID * NUM_COLORS;
const SEMANTIC_PROJECTION_SEED: u64 = 0x5E4A_471C;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub size: usize,
}

impl Default for Codebook {
    fn default() -> Self {
        Codebook { size: NUM_CELL_CODES }
    }
}

impl Codebook {
    pub fn token_of(&self, cell: Cell) -> u32 {
        cell.code() as u32
    }

    pub fn cell_of(&self, id: u32) -> Result<Cell> {
        if id as usize >= self.size {
            return Err(Error::InvalidToken { id, size: self.size });
        }
        Cell::from_code(id as u8).ok_or(Error::InvalidToken { id, size: self.size })
    }
}

/// Row-major grid of image token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenImage {
    pub tokens: Vec<u32>,
}

impl TokenImage {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fraction of positions where both images agree.
    pub fn accuracy(&self, other: &TokenImage) -> f64 {
        let n = self.tokens.len().max(1);
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a == b).count() as f64 / n as f64
    }
}

pub fn tokenize(s: &SymbolicState) -> TokenImage {
    let book = Codebook::default();
    TokenImage { tokens: s.cells().iter().map(|c| book.token_of(*c)).collect() }
}

pub fn detokenize(t: &TokenImage) -> Result<SymbolicState> {
    let book = Codebook::default();
    if t.tokens.len() != CELLS {
        return Err(Error::DimensionMismatch(format!("expected {CELLS} tokens, got {}", t.tokens.len())));
    }
    let mut s = SymbolicState::empty();
    for (i, &id) in t.tokens.iter().enumerate() {
        s.set(Pos::from_index(i), book.cell_of(id)?);
    }
    Ok(s)
}

fn semantic_projection() -> &'static [f64] {
    static PROJ: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    PROJ.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(SEMANTIC_PROJECTION_SEED);
        let scale = (3.0 / SEMANTIC_RAW_DIM as f64).sqrt();
        (0..SEMANTIC_DIM * SEMANTIC_RAW_DIM).map(|_| rng.gen_range(-scale..scale)).collect()
    })
}

/// Unprojected semantic features of a rendered grid.
pub fn semantic_features(r: &Raster) -> Result<Vec<f64>> {
    if r.width != RASTER_PX || r.height != RASTER_PX || r.data.len() != RASTER_PX * RASTER_PX * 3 {
        return Err(Error::DimensionMismatch(format!(
            "semantic tower expects {RASTER_PX}x{RASTER_PX} rasters, got {}x{}",
            r.width, r.height
        )));
    }
    let mut f = vec![0.0; SEMANTIC_RAW_DIM];
    let rows = 2 * NUM_COLORS;
    let cols = rows + GRID * NUM_COLORS;
    for i in 0..CELLS {
        let p = Pos::from_index(i);
        let (block, bowl) = decode_cell(r, p);
        for (offset, color) in [(0, block), (NUM_COLORS, bowl)] {
            if let Some(c) = color {
                f[offset + c.index()] += 1.0;
            }
        }
        let mut present = [false; NUM_COLORS];
        for c in [block, bowl].into_iter().flatten() {
            present[c.index()] = true;
        }
        for (c, &here) in present.iter().enumerate() {
            if here {
                f[rows + p.row * NUM_COLORS + c] += 1.0;
                f[cols + p.col * NUM_COLORS + c] += 1.0;
            }
        }
    }
    Ok(f)
}

/// Frozen semantic tower: fixed projection of [`semantic_features`] to
/// [`SEMANTIC_DIM`]. Never trained.
pub fn semantic_encode(r: &Raster) -> Result<Vec<f64>> {
    let f = semantic_features(r)?;
    let proj = semantic_projection();
    Ok((0..SEMANTIC_DIM)
        .map(|o| proj[o * SEMANTIC_RAW_DIM..(o + 1) * SEMANTIC_RAW_DIM].iter().zip(&f).map(|(w, x)| w * x).sum())
        .collect())
}

pub fn semantic_encode_state(s: &SymbolicState) -> Vec<f64> {
    semantic_encode(&render(s)).expect("rendered rasters have the canonical size")
}

/// Trainable spatial tower: row i is `table[tokens[i]] + positions[i]`.
pub fn spatial_encode(t: &TokenImage, table: &[f64], positions: &[f64], d_model: usize) -> Result<Vec<f64>> {
    let k = table.len() / d_model;
    if positions.len() < t.len() * d_model {
        return Err(Error::DimensionMismatch("positional table shorter than token grid".into()));
    }
    let mut out = vec![0.0; t.len() * d_model];
    for (i, &id) in t.tokens.iter().enumerate() {
        if id as usize >= k {
            return Err(Error::InvalidToken { id, size: k });
        }
        let row = &table[id as usize * d_model..(id as usize + 1) * d_model];
        let pos = &positions[i * d_model..(i + 1) * d_model];
        for ((o, a), b) in out[i * d_model..(i + 1) * d_model].iter_mut().zip(row).zip(pos) {
            *o = a + b;
        }
    }
    Ok(out)
}

/// How the two towers are combined into model input slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// One projected semantic slot followed by every spatial row.
    #[default]
    Full,
    /// Spatial rows only.
    NoSe,
    /// Projected semantic slot plus a single mean-pooled spatial slot.
    NoEn,
}

impl FusionMode {
    pub fn slot_count(self, n_cells: usize) -> usize {
        match self {
            FusionMode::Full => n_cells + 1,
            FusionMode::NoSe => n_cells,
            FusionMode::NoEn => 2,
        }
    }
}

/// Projects the frozen semantic vector into model width: `w · sem + b`, with
/// `w` stored row-major as `d_model × SEMANTIC_DIM`.
pub fn project_semantic(sem: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    if sem.len() != SEMANTIC_DIM || w.len() != d * SEMANTIC_DIM {
        return Err(Error::DimensionMismatch("semantic projection shapes".into()));
    }
    Ok((0..d)
        .map(|o| b[o] + w[o * SEMANTIC_DIM..(o + 1) * SEMANTIC_DIM].iter().zip(sem).map(|(a, x)| a * x).sum::<f64>())
        .collect())
}

/// Assembles the understanding slots for one image (`slots × d_model`,
/// row-major).
pub fn fuse_understanding(sem_slot: &[f64], spatial: &[f64], mode: FusionMode) -> Result<Vec<f64>> {
    let d = sem_slot.len();
    if d == 0 || spatial.len() % d != 0 {
        return Err(Error::DimensionMismatch("spatial rows do not match semantic slot width".into()));
    }
    let n = spatial.len() / d;
    let mut out = Vec::with_capacity(mode.slot_count(n) * d);
    match mode {
        FusionMode::Full => {
            out.extend_from_slice(sem_slot);
            out.extend_from_slice(spatial);
        }
        FusionMode::NoSe => out.extend_from_slice(spatial),
        FusionMode::NoEn => {
            out.extend_from_slice(sem_slot);
            let mut mean = vec![0.0; d];
            for row in spatial.chunks_exact(d) {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
            out.extend_from_slice(&mean);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Color;
    use proptest::prelude::*;

    #[test]
    fn empty_state_tokens() {
        let t = tokenize(&SymbolicState::empty());
        assert_eq!(t.tokens, vec![0; CELLS]);
        let mut s = SymbolicState::empty();
        s.set(Pos::new(0, 0), Cell::Block(Color::Red));
        let t = tokenize(&s);
        assert_eq!(t.tokens[0], Cell::Block(Color::Red).code() as u32);
        assert!(t.tokens[1..].iter().all(|&x| x == 0));
        assert_eq!(detokenize(&t).unwrap(), s);
    }

    #[test]
    fn out_of_range_token() {
        let mut t = tokenize(&SymbolicState::empty());
        t.tokens[5] = NUM_CELL_CODES as u32;
        assert!(matches!(detokenize(&t), Err(Error::InvalidToken { .. })));
    }

    fn arb_state() -> impl Strategy<Value = SymbolicState> {
        proptest::collection::vec(0u8..NUM_CELL_CODES as u8, CELLS)
            .prop_map(|codes| SymbolicState::from_codes(&codes).unwrap())
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(s in arb_state()) {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }

        #[test]
        fn detokenize_never_panics(ids in proptest::collection::vec(0u32..80, CELLS)) {
            let t = TokenImage { tokens: ids.clone() };
            match detokenize(&t) {
                Ok(s) => prop_assert_eq!(tokenize(&s).tokens, ids),
                Err(e) => { prop_assert!(matches!(e, Error::InvalidToken { .. }), "unexpected error variant"); }
            }
        }
    }

    #[test]
    fn semantic_of_background_is_zero() {
        let v = semantic_encode_state(&SymbolicState::empty());
        assert_eq!(v, vec![0.0; SEMANTIC_DIM]);
    }

    #[test]
    fn layouts_share_histogram_but_not_occupancy() {
        let mut a = SymbolicState::empty();
        a.set(Pos::new(0, 0), Cell::Block(Color::Red));
        a.set(Pos::new(5, 6), Cell::Bowl(Color::Blue));
        let mut b = SymbolicState::empty();
        b.set(Pos::new(2, 3), Cell::Block(Color::Red));
        b.set(Pos::new(7, 1), Cell::Bowl(Color::Blue));
        let fa = semantic_features(&render(&a)).unwrap();
        let fb = semantic_features(&render(&b)).unwrap();
        let hist = 2 * NUM_COLORS;
        assert_eq!(fa[..hist], fb[..hist]);
        assert_ne!(fa[hist..], fb[hist..]);
        assert_eq!(semantic_encode_state(&a), semantic_encode_state(&a));
    }

    #[test]
    fn semantic_rejects_wrong_size() {
        let r = Raster::filled(10, 10, [0, 0, 0]);
        assert!(matches!(semantic_encode(&r), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn spatial_rows_are_additive() {
        let d = 3;
        let table: Vec<f64> = (0..NUM_CELL_CODES * d).map(|i| i as f64 * 0.1).collect();
        let pos: Vec<f64> = (0..CELLS * d).map(|i| (i as f64).sin()).collect();
        let mut s = SymbolicState::empty();
        s.set(Pos::new(0, 1), Cell::Block(Color::Green));
        s.set(Pos::new(4, 4), Cell::Block(Color::Green));
        let t = tokenize(&s);
        let out = spatial_encode(&t, &table, &pos, d).unwrap();
        let (i, j) = (Pos::new(0, 1).index(), Pos::new(4, 4).index());
        for c in 0..d {
            let row_diff = out[i * d + c] - out[j * d + c];
            let pos_diff = pos[i * d + c] - pos[j * d + c];
            assert!((row_diff - pos_diff).abs() < 1e-12);
        }
        let zero = vec![0.0; NUM_CELL_CODES * d];
        assert_eq!(spatial_encode(&t, &zero, &pos, d).unwrap(), pos);
        let bad = TokenImage { tokens: vec![99; CELLS] };
        assert!(spatial_encode(&bad, &table, &pos, d).is_err());
    }

    #[test]
    fn fusion_arity() {
        let d = 4;
        for n in [1usize, 9, 64] {
            let sem = vec![1.0; d];
            let spat = vec![0.5; n * d];
            for mode in [FusionMode::Full, FusionMode::NoSe, FusionMode::NoEn] {
                let out = fuse_understanding(&sem, &spat, mode).unwrap();
                assert_eq!(out.len(), mode.slot_count(n) * d);
            }
        }
        assert_eq!(FusionMode::Full.slot_count(64), 65);
        assert_eq!(FusionMode::NoSe.slot_count(64), 64);
        assert_eq!(FusionMode::NoEn.slot_count(64), 2);
    }
}
