//! Frequency tokens over time, space and frequency.
//!
//! A spectral map `T×F×C×R×Q` is cut into `K×K` cell blocks; block `i`
//! (row-major over the block grid) of frequency plane `f` in frame `t`
//! becomes token `(t, i, f)`, a `C×K×K` slice flattened row-major. Tokens
//! are stored as a `T×N×F×(C·K·K)` tensor, so the token order is
//! lexicographic in `(t, i, f)`.

use std::sync::Arc;

use crate::dct::{BlockDct, SpectralGeometry, SpectralMap};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{SparseMap, Tensor};

/// Block structure of a token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub spectral: SpectralGeometry,
    pub cells: usize,
}

impl TokenLayout {
    pub fn new(spectral: SpectralGeometry, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::invalid("token block edge K must be positive"));
        }
        if spectral.rows() % cells != 0 || spectral.cols() % cells != 0 {
            return Err(Error::invalid(format!(
                "K={} does not divide spectral extents {}×{}",
                cells,
                spectral.rows(),
                spectral.cols()
            )));
        }
        Ok(TokenLayout { spectral, cells })
    }

    pub fn frames(&self) -> usize {
        self.spectral.frames
    }

    pub fn block_rows(&self) -> usize {
        self.spectral.rows() / self.cells
    }

    pub fn block_cols(&self) -> usize {
        self.spectral.cols() / self.cells
    }

    /// Spatial block count `N`.
    pub fn block_count(&self) -> usize {
        self.block_rows() * self.block_cols()
    }

    pub fn freqs(&self) -> usize {
        self.spectral.freqs()
    }

    pub fn token_width(&self) -> usize {
        self.spectral.channels * self.cells * self.cells
    }

    pub fn grid_shape(&self) -> [usize; 4] {
        [self.frames(), self.block_count(), self.freqs(), self.token_width()]
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        TokenLayout {
            spectral: self.spectral.with_channels(channels),
            cells: self.cells,
        }
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        TokenLayout {
            spectral: self.spectral.with_frames(frames),
            cells: self.cells,
        }
    }

    /// Spectral flat index feeding each token element, in token order.
    fn source_index(&self) -> Vec<usize> {
        let k = self.cells;
        let [t_n, n_n, f_n, w] = self.grid_shape();
        let nc = self.spectral.channels;
        let bc = self.block_cols();
        let mut idx = Vec::with_capacity(t_n * n_n * f_n * w);
        for t in 0..t_n {
            for i in 0..n_n {
                let (br, bq) = (i / bc, i % bc);
                for f in 0..f_n {
                    for c in 0..nc {
                        for ky in 0..k {
                            for kx in 0..k {
                                idx.push(self.spectral.spectral_index(t, f, c, br * k + ky, bq * k + kx));
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn tokenize_map(&self) -> Result<SparseMap> {
        let src = self.source_index();
        SparseMap::gather(src.len(), &src)
    }

    pub fn detokenize_map(&self) -> Result<SparseMap> {
        let src = self.source_index();
        let mut inverse = vec![0; src.len()];
        for (token_pos, &s) in src.iter().enumerate() {
            inverse[s] = token_pos;
        }
        SparseMap::gather(src.len(), &inverse)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub layout: TokenLayout,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, layout: TokenLayout) -> Result<Self> {
        if tokens.shape() != layout.grid_shape() {
            return Err(Error::shape(
                "TokenGrid::new",
                format!("{:?} vs layout {:?}", tokens.shape(), layout.grid_shape()),
            ));
        }
        Ok(TokenGrid { tokens, layout })
    }

    pub fn token_count(&self) -> usize {
        self.layout.frames() * self.layout.block_count() * self.layout.freqs()
    }

    /// Token `(t, i, f)` with zero-based indices.
    pub fn token(&self, t: usize, i: usize, f: usize) -> Result<Tensor> {
        let [nt, nn, nf, w] = self.layout.grid_shape();
        if t >= nt || i >= nn || f >= nf {
            return Err(Error::shape("token", format!("({}, {}, {}) outside {:?}", t, i, f, [nt, nn, nf])));
        }
        let start = ((t * nn + i) * nf + f) * w;
        Tensor::new(vec![w], self.tokens.data()[start..start + w].to_vec())
    }
}

pub fn tokenize(map: &SpectralMap, cells: usize) -> Result<TokenGrid> {
    let layout = TokenLayout::new(map.geometry.clone(), cells)?;
    let data = layout.tokenize_map()?.apply(map.data.data())?;
    TokenGrid::new(Tensor::new(layout.grid_shape().to_vec(), data)?, layout)
}

pub fn detokenize(grid: &TokenGrid) -> Result<SpectralMap> {
    if grid.tokens.shape() != grid.layout.grid_shape() {
        return Err(Error::shape(
            "detokenize",
            format!("{:?} vs layout {:?}", grid.tokens.shape(), grid.layout.grid_shape()),
        ));
    }
    let data = grid.layout.detokenize_map()?.apply(grid.tokens.data())?;
    SpectralMap::new(
        Tensor::new(grid.layout.spectral.spectral_shape().to_vec(), data)?,
        grid.layout.spectral.clone(),
    )
}

/// Query tokens of one target frame and key/value tokens of the others.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvSets {
    /// `1×N×F×w`.
    pub queries: Tensor,
    /// `(T−1)×N×F×w`, frames in ascending order with the target removed.
    pub keys: Tensor,
    pub values: Tensor,
    pub target: usize,
}

impl QkvSets {
    pub fn key_count(&self) -> usize {
        self.keys.shape()[..3].iter().product()
    }
}

/// Splits a grid for target frame `target` (1-based, as in `1..=T`).
/// Keys and values are the same token set; learned projections separate
/// them downstream.
pub fn build_qkv(grid: &TokenGrid, target: usize) -> Result<QkvSets> {
    let frames = grid.layout.frames();
    if frames < 1 {
        return Err(Error::invalid("token grid has no frames"));
    }
    if target < 1 || target > frames {
        return Err(Error::invalid(format!("target frame {} outside 1..={}", target, frames)));
    }
    let t = target - 1;
    let queries = grid.tokens.slice(0, t, 1)?;
    let before = grid.tokens.slice(0, 0, t)?;
    let after = grid.tokens.slice(0, t + 1, frames - t - 1)?;
    let keys = Tensor::concat(&[&before, &after], 0)?;
    Ok(QkvSets {
        queries,
        values: keys.clone(),
        keys,
        target,
    })
}

/// Differentiable frames → tokens and tokens → frames for one layout.
#[derive(Clone, Debug)]
pub struct TokenTransform {
    pub layout: TokenLayout,
    encode: Arc<SparseMap>,
    decode: Arc<SparseMap>,
}

impl TokenTransform {
    pub fn new(layout: TokenLayout) -> Result<Self> {
        let dct = BlockDct::new(layout.spectral.block)?;
        let encode = layout.spectral.forward_map(&dct)?.then(&layout.tokenize_map()?)?;
        let decode = layout.detokenize_map()?.then(&layout.spectral.inverse_map(&dct)?)?;
        Ok(TokenTransform {
            encode: Arc::new(encode),
            decode: Arc::new(decode),
            layout,
        })
    }

    /// `T×C×H×W` frames → `T×N×F×(C·K·K)` tokens.
    pub fn encode<'t>(&self, frames: Var<'t>) -> Result<Var<'t>> {
        frames.linear_map(&self.encode, &self.layout.grid_shape())
    }

    /// Inverse of [`TokenTransform::encode`], padding removed.
    pub fn decode<'t>(&self, tokens: Var<'t>) -> Result<Var<'t>> {
        tokens.linear_map(&self.decode, &self.layout.spectral.frame_shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::{from_spectral, to_spectral, to_spectral_aligned};
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(t: usize, c: usize, side: usize, b: usize, seed: u64) -> SpectralMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = SpectralGeometry::new(t, c, side, side, b, 1).unwrap();
        let data = Tensor::from_fn(&geom.spectral_shape(), |_| rng.random_range(-2.0..2.0));
        SpectralMap::new(data, geom).unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let map = to_spectral(&Tensor::zeros(&[1, 1, 8, 8]), 2).unwrap();
        let grid = tokenize(&map, 2).unwrap();
        assert_eq!(grid.tokens.shape(), &[1, 4, 4, 4]);
        assert_eq!(grid.token_count(), 16);
    }

    #[test]
    fn full_extent_block_gives_whole_planes() {
        let map = random_map(1, 2, 8, 2, 1);
        let grid = tokenize(&map, 4).unwrap();
        assert_eq!(grid.layout.block_count(), 1);
        let g = &map.geometry;
        for f in 0..4 {
            let tok = grid.token(0, 0, f).unwrap();
            for c in 0..2 {
                for r in 0..4 {
                    for q in 0..4 {
                        let want = map.data.data()[g.spectral_index(0, f, c, r, q)];
                        assert_eq!(tok.data()[(c * 4 + r) * 4 + q], want);
                    }
                }
            }
        }
    }

    #[test]
    fn token_addresses_block_and_frequency() {
        let map = random_map(2, 1, 8, 2, 5);
        let grid = tokenize(&map, 2).unwrap();
        // block i=3 is the bottom-right 2×2 cell block of the 4×4 spectral plane
        let tok = grid.token(1, 3, 2).unwrap();
        let g = &map.geometry;
        assert_eq!(tok.data()[1], map.data.data()[g.spectral_index(1, 2, 0, 2, 3)]);
        assert_eq!(tok.data()[2], map.data.data()[g.spectral_index(1, 2, 0, 3, 2)]);
    }

    #[test]
    fn round_trip_bit_exact_over_combinations() {
        let mut seed = 0;
        for b in [2, 4] {
            for k in [1, 2] {
                for t in [1, 3] {
                    for c in [1, 3] {
                        seed += 1;
                        let map = random_map(t, c, b * k * 2, b, seed);
                        let back = detokenize(&tokenize(&map, k).unwrap()).unwrap();
                        assert_eq!(back.data.data(), map.data.data());
                    }
                }
            }
        }
    }

    #[test]
    fn zero_grid_and_single_token_grid() {
        let geom = SpectralGeometry::new(1, 1, 2, 2, 2, 1).unwrap();
        let layout = TokenLayout::new(geom, 1).unwrap();
        let zero = TokenGrid::new(Tensor::zeros(&layout.grid_shape()), layout.clone()).unwrap();
        assert!(detokenize(&zero).unwrap().data.data().iter().all(|&v| v == 0.0));
        let single_geom = SpectralGeometry::new(1, 1, 1, 1, 1, 1).unwrap();
        let single = TokenLayout::new(single_geom, 1).unwrap();
        let grid = TokenGrid::new(Tensor::full(&[1, 1, 1, 1], 4.0), single).unwrap();
        assert_eq!(grid.token_count(), 1);
        assert_eq!(detokenize(&grid).unwrap().data.data(), &[4.0]);
    }

    #[test]
    fn indivisible_k_is_rejected() {
        let map = to_spectral(&Tensor::zeros(&[1, 1, 6, 6]), 2).unwrap();
        assert!(tokenize(&map, 2).is_err());
        let aligned = to_spectral_aligned(&Tensor::zeros(&[1, 1, 6, 6]), 2, 2).unwrap();
        assert_eq!(tokenize(&aligned, 2).unwrap().layout.block_count(), 4);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let map = random_map(1, 1, 4, 2, 9);
        let mut grid = tokenize(&map, 1).unwrap();
        grid.tokens = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(detokenize(&grid).is_err());
    }

    #[test]
    fn frame_permutation_permutes_token_blocks() {
        let map = random_map(3, 1, 4, 2, 17);
        let grid = tokenize(&map, 1).unwrap();
        let frames: Vec<Tensor> = (0..3).map(|t| map.data.slice(0, t, 1).unwrap()).collect();
        let swapped = Tensor::concat(&[&frames[2], &frames[0], &frames[1]], 0).unwrap();
        let grid2 = tokenize(&SpectralMap::new(swapped, map.geometry.clone()).unwrap(), 1).unwrap();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            assert_eq!(grid2.tokens.slice(0, dst, 1).unwrap(), grid.tokens.slice(0, src, 1).unwrap());
        }
    }

    #[test]
    fn qkv_sets() {
        let map = random_map(2, 1, 4, 2, 2);
        let grid = tokenize(&map, 1).unwrap();
        let sets = build_qkv(&grid, 2).unwrap();
        assert_eq!(sets.queries, grid.tokens.slice(0, 1, 1).unwrap());
        assert_eq!(sets.keys, grid.tokens.slice(0, 0, 1).unwrap());

        let one = tokenize(&random_map(1, 1, 4, 2, 3), 1).unwrap();
        let sets = build_qkv(&one, 1).unwrap();
        assert_eq!(sets.key_count(), 0);

        let three = tokenize(&random_map(3, 1, 4, 2, 4), 2).unwrap();
        assert_eq!(three.layout.block_count(), 1);
        let three = tokenize(&SpectralMap::new(
            Tensor::zeros(&SpectralGeometry::new(3, 1, 4, 8, 2, 1).unwrap().spectral_shape()),
            SpectralGeometry::new(3, 1, 4, 8, 2, 1).unwrap(),
        ).unwrap(), 2).unwrap();
        assert_eq!(three.layout.block_count(), 2);
        assert_eq!(build_qkv(&three, 3).unwrap().key_count(), 16);
        assert!(build_qkv(&three, 0).is_err());
        assert!(build_qkv(&three, 4).is_err());
    }

    #[test]
    fn composite_transform_matches_stepwise_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = Tensor::from_fn(&[2, 3, 7, 9], |_| rng.random_range(0.0..1.0));
        let map = to_spectral_aligned(&frames, 2, 2).unwrap();
        let grid = tokenize(&map, 2).unwrap();
        let tf = TokenTransform::new(grid.layout.clone()).unwrap();
        let tape = Tape::new();
        let x = tape.constant(frames.clone()).unwrap();
        let tokens = tf.encode(x).unwrap();
        assert!(tokens.value().max_abs_diff(&grid.tokens).unwrap() < 1e-12);
        let back = tf.decode(tokens).unwrap().value();
        assert!(back.max_abs_diff(&frames).unwrap() < 1e-12);
        assert!(back.max_abs_diff(&from_spectral(&map).unwrap()).unwrap() < 1e-12);
    }
}
