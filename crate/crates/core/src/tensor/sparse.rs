//! Fixed sparse linear operators over flattened tensors.
//!
//! Padding, block transforms, token reshuffles, resampling and warping are
//! all linear in the pixel values, so each is expressed as a [`SparseMap`]
//! and differentiated once, generically, through its transpose.

use crate::error::{Error, Result};

/// Compressed sparse rows: `out[r] = Σ weight · in[col]` over row `r`'s entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds a map by asking `row` for the entries of each output element.
    /// Repeated columns within a row are merged.
    pub fn from_rows<F>(in_len: usize, out_len: usize, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, &mut Vec<(usize, f64)>),
    {
        let mut row_start = Vec::with_capacity(out_len + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut scratch = Vec::new();
        row_start.push(0);
        for r in 0..out_len {
            scratch.clear();
            row(r, &mut scratch);
            scratch.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(c, w) in scratch.iter() {
                if c >= in_len {
                    return Err(Error::shape(
                        "SparseMap::from_rows",
                        format!("row {} references column {} of {}", r, c, in_len),
                    ));
                }
                if last == Some(c) {
                    *weights.last_mut().expect("merged entry") += w;
                } else {
                    cols.push(c);
                    weights.push(w);
                    last = Some(c);
                }
            }
            row_start.push(cols.len());
        }
        Ok(SparseMap {
            in_len,
            row_start,
            cols,
            weights,
        })
    }

    /// Pure index selection: `out[r] = in[index[r]]`.
    pub fn gather(in_len: usize, index: &[usize]) -> Result<Self> {
        Self::from_rows(in_len, index.len(), |r, e| e.push((index[r], 1.0)))
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[r]..self.row_start[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_len {
            return Err(Error::shape(
                "SparseMap::apply",
                format!("expected {} inputs, got {}", self.in_len, input.len()),
            ));
        }
        Ok((0..self.out_len())
            .map(|r| self.row(r).map(|(c, w)| w * input[c]).sum())
            .collect())
    }

    /// `Mᵀ · g`, the adjoint used for back-propagation.
    pub fn apply_transpose(&self, grad_out: &[f64]) -> Result<Vec<f64>> {
        if grad_out.len() != self.out_len() {
            return Err(Error::shape(
                "SparseMap::apply_transpose",
                format!("expected {} values, got {}", self.out_len(), grad_out.len()),
            ));
        }
        let mut g = vec![0.0; self.in_len];
        for (r, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for (c, w) in self.row(r) {
                g[c] += w * go;
            }
        }
        Ok(g)
    }

    /// The operator `next ∘ self`.
    pub fn then(&self, next: &SparseMap) -> Result<SparseMap> {
        if next.in_len != self.out_len() {
            return Err(Error::shape(
                "SparseMap::then",
                format!("{} outputs feed {} inputs", self.out_len(), next.in_len),
            ));
        }
        SparseMap::from_rows(self.in_len, next.out_len(), |r, entries| {
            for (mid, w1) in next.row(r) {
                for (c, w0) in self.row(mid) {
                    entries.push((c, w1 * w0));
                }
            }
        })
    }
}
