//! Index bookkeeping for (shifted) window attention on a token grid.

use crate::error::{Error, Result};

/// Gather indices, relative-position indices and shift-mask regions for one
/// `(grid, window, shift)` combination.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: (usize, usize),
    pub window: usize,
    pub shift: usize,
    /// `num_windows * window^2` token indices into the unshifted grid.
    tokens: Vec<usize>,
    /// `window^2 * window^2` indices into the relative-bias table.
    rel_index: Vec<usize>,
    /// Region label per gathered token; empty when `shift == 0`.
    regions: Vec<u8>,
}

impl WindowLayout {
    pub fn new(grid: (usize, usize), window: usize, shift: usize) -> Result<Self> {
        let (gh, gw) = grid;
        if window == 0 || gh % window != 0 || gw % window != 0 {
            return Err(Error::Shape(format!(
                "token grid {gh}x{gw} is not divisible by window {window}"
            )));
        }
        if shift >= window {
            return Err(Error::Shape(format!("shift {shift} must be below window {window}")));
        }
        let n = window * window;
        let (nwh, nww) = (gh / window, gw / window);
        let mut tokens = Vec::with_capacity(nwh * nww * n);
        let mut regions = Vec::new();
        let region_of = |pos: usize, size: usize| -> u8 {
            if pos < size - window {
                0
            } else if pos < size - shift {
                1
            } else {
                2
            }
        };
        for wy in 0..nwh {
            for wx in 0..nww {
                for i in 0..window {
                    for j in 0..window {
                        // position in the cyclically shifted grid
                        let ys = wy * window + i;
                        let xs = wx * window + j;
                        let y = (ys + shift) % gh;
                        let x = (xs + shift) % gw;
                        tokens.push(y * gw + x);
                        if shift > 0 {
                            regions.push(region_of(ys, gh) * 3 + region_of(xs, gw));
                        }
                    }
                }
            }
        }
        let side = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(n * n);
        for a in 0..n {
            let (ai, aj) = (a / window, a % window);
            for b in 0..n {
                let (bi, bj) = (b / window, b % window);
                let dy = ai + window - 1 - bi;
                let dx = aj + window - 1 - bj;
                rel_index.push(dy * side + dx);
            }
        }
        Ok(Self {
            grid,
            window,
            shift,
            tokens,
            rel_index,
            regions,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        self.tokens.len() / self.window_len()
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Rows of the relative-position bias table.
    pub fn table_rows(&self) -> usize {
        let side = 2 * self.window - 1;
        side * side
    }

    pub fn window_tokens(&self, w: usize) -> &[usize] {
        let n = self.window_len();
        &self.tokens[w * n..(w + 1) * n]
    }

    pub fn rel_index(&self) -> &[usize] {
        &self.rel_index
    }

    /// Region labels of window `w`, or `None` for unshifted layouts.
    pub fn window_regions(&self, w: usize) -> Option<&[u8]> {
        if self.regions.is_empty() {
            None
        } else {
            let n = self.window_len();
            Some(&self.regions[w * n..(w + 1) * n])
        }
    }
}
