//! Binary attention masks.

use crate::error::{Error, Result};

/// A `rows x cols` binary mask. Entry `(i, j) == 1` means query row `i` may
/// attend to key row `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl AttentionMask {
    /// Build from raw entries; anything other than 0/1 is rejected.
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dimension(format!(
                "mask of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                bits.len()
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::validation(format!(
                "mask entries must be 0 or 1, found {bad}"
            )));
        }
        Ok(AttentionMask { rows, cols, bits })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(u8::from(f(i, j)));
            }
        }
        AttentionMask { rows, cols, bits }
    }

    /// All-ones mask (full bidirectional attention).
    pub fn full(n: usize) -> Self {
        AttentionMask {
            rows: n,
            cols: n,
            bits: vec![1; n * n],
        }
    }

    /// Standard causal mask: row `i` attends to columns `j <= i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] == 1
    }

    /// Number of allowed keys in row `i`.
    pub fn row_count(&self, i: usize) -> usize {
        self.bits[i * self.cols..(i + 1) * self.cols]
            .iter()
            .map(|&b| b as usize)
            .sum()
    }

    /// Render as a text grid of 0/1, one mask row per line.
    pub fn to_text_grid(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(if self.allows(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary() {
        assert!(AttentionMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn causal_is_lower_triangular() {
        let m = AttentionMask::causal(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn text_grid_round_trips_visually() {
        let m = AttentionMask::causal(2);
        assert_eq!(m.to_text_grid(), "10\n11\n");
    }
}
