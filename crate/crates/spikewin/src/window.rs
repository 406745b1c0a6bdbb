//! Window geometry for shifted-window attention: cyclic-shift partition /
//! reverse as row permutations, and the cross-region mask for shifted
//! configurations.
//!
//! Tokens live on an H×W grid in row-major order. Partitioning reorders
//! them window-major (windows row-major over the grid, tokens row-major
//! inside each window) after a cyclic shift, so attention can treat each
//! consecutive M² rows as one window. Everything is a permutation, hence
//! exactly invertible.

use crate::error::{Error, Result};

/// Additive mask value for cross-region token pairs in shifted windows.
pub const MASK_NEG: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    /// Window side length M.
    pub m: usize,
    /// Cyclic shift, 0 or ⌊M/2⌋.
    pub shift: usize,
    /// Number of windows.
    pub nw: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, m: usize, shift: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("window size must be positive"));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "grid {h}x{w} not divisible by window {m}"
            )));
        }
        if shift >= m {
            return Err(Error::config(format!(
                "shift {shift} must be smaller than window {m}"
            )));
        }
        Ok(WindowLayout {
            h,
            w,
            m,
            shift,
            nw: (h / m) * (w / m),
        })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn window_tokens(&self) -> usize {
        self.m * self.m
    }

    /// Row permutation carrying grid order into window-major order:
    /// output row `o` reads input row `perm[o]`. The cyclic shift is folded
    /// in, so window-major position (wy, wx, ly, lx) reads grid position
    /// ((wy·M + ly + shift) mod H, (wx·M + lx + shift) mod W).
    pub fn partition_perm(&self) -> Vec<usize> {
        let (m, ww) = (self.m, self.w / self.m);
        (0..self.tokens())
            .map(|o| {
                let wi = o / (m * m);
                let local = o % (m * m);
                let (wy, wx) = (wi / ww, wi % ww);
                let (ly, lx) = (local / m, local % m);
                let y = (wy * m + ly + self.shift) % self.h;
                let x = (wx * m + lx + self.shift) % self.w;
                y * self.w + x
            })
            .collect()
    }

    /// Inverse of [`Self::partition_perm`].
    pub fn reverse_perm(&self) -> Vec<usize> {
        let fwd = self.partition_perm();
        let mut inv = vec![0usize; fwd.len()];
        for (o, &src) in fwd.iter().enumerate() {
            inv[src] = o;
        }
        inv
    }

    /// Region id in {0,1,2}×{0,1,2} of a *post-shift* grid coordinate. The
    /// three bands per axis are: untouched interior, wrapped-in body, and
    /// wrapped-in tail — tokens from different bands are not true spatial
    /// neighbours and must not attend to each other.
    fn region(&self, y: usize, x: usize) -> u8 {
        let band = |v: usize, extent: usize| -> u8 {
            if v < extent - self.m {
                0
            } else if v < extent - self.shift {
                1
            } else {
                2
            }
        };
        band(y, self.h) * 3 + band(x, self.w)
    }

    /// Additive attention mask, `nw × M² × M²` flattened: 0 on same-region
    /// pairs, [`MASK_NEG`] on cross-region pairs. `None` when unshifted.
    pub fn mask_additive(&self) -> Option<Vec<f64>> {
        self.mask_with(0.0, MASK_NEG)
    }

    /// Multiplicative 1/0 allow mask for branches without a softmax.
    pub fn mask_allow(&self) -> Option<Vec<f64>> {
        self.mask_with(1.0, 0.0)
    }

    fn mask_with(&self, same: f64, cross: f64) -> Option<Vec<f64>> {
        if self.shift == 0 {
            return None;
        }
        let (m, ww) = (self.m, self.w / self.m);
        let n = self.window_tokens();
        let mut out = vec![0.0; self.nw * n * n];
        for wi in 0..self.nw {
            let (wy, wx) = (wi / ww, wi % ww);
            let regions: Vec<u8> = (0..n)
                .map(|local| {
                    let (ly, lx) = (local / m, local % m);
                    self.region(wy * m + ly, wx * m + lx)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    out[wi * n * n + i * n + j] =
                        if regions[i] == regions[j] { same } else { cross };
                }
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_arithmetic() {
        let l = WindowLayout::new(8, 8, 4, 0).unwrap();
        assert_eq!(l.nw, 4);
        assert_eq!(l.window_tokens(), 16);
        assert_eq!(l.tokens(), 64);
    }

    #[test]
    fn indivisible_grid_rejected() {
        assert!(matches!(WindowLayout::new(6, 8, 4, 0), Err(Error::Shape(_))));
        assert!(matches!(WindowLayout::new(8, 8, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn partition_reverse_identity_both_shifts() {
        for shift in [0usize, 2] {
            let l = WindowLayout::new(8, 12, 4, shift).unwrap();
            let fwd = l.partition_perm();
            let inv = l.reverse_perm();
            let tokens: Vec<usize> = (0..l.tokens()).collect();
            let parted: Vec<usize> = fwd.iter().map(|&s| tokens[s]).collect();
            let restored: Vec<usize> = inv.iter().map(|&s| parted[s]).collect();
            assert_eq!(restored, tokens, "shift {shift}");
        }
    }

    #[test]
    fn unshifted_first_window_is_top_left_tile() {
        let l = WindowLayout::new(4, 4, 2, 0).unwrap();
        let p = l.partition_perm();
        // window 0 holds grid tokens (0,0) (0,1) (1,0) (1,1)
        assert_eq!(&p[0..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn shift_wraps_corner_tokens_cyclically() {
        let l = WindowLayout::new(4, 4, 2, 1).unwrap();
        let p = l.partition_perm();
        // first window local (0,0) reads grid (1,1); local (1,1) reads (2,2)
        assert_eq!(p[0], 1 * 4 + 1);
        assert_eq!(p[3], 2 * 4 + 2);
        // last window wraps: local (1,1) at window (1,1) reads ((2+1+1)%4, (2+1+1)%4) = (0,0)
        let last = p[p.len() - 1];
        assert_eq!(last, 0);
    }

    #[test]
    fn mask_only_exists_when_shifted() {
        assert!(WindowLayout::new(8, 8, 4, 0).unwrap().mask_additive().is_none());
        let l = WindowLayout::new(8, 8, 4, 2).unwrap();
        let m = l.mask_additive().unwrap();
        assert_eq!(m.len(), l.nw * 16 * 16);
        assert!(m.iter().all(|&v| v == 0.0 || v == MASK_NEG));
        // interior window (top-left) sees one region: fully allowed
        assert!(m[0..16 * 16].iter().all(|&v| v == 0.0));
        // bottom-right window mixes four regions: some pairs blocked
        let lastw = &m[(l.nw - 1) * 256..];
        assert!(lastw.iter().any(|&v| v == MASK_NEG));
    }

    #[test]
    fn allow_mask_mirrors_additive_mask() {
        let l = WindowLayout::new(8, 8, 4, 2).unwrap();
        let add = l.mask_additive().unwrap();
        let allow = l.mask_allow().unwrap();
        for (a, b) in add.iter().zip(&allow) {
            assert_eq!(*a == 0.0, *b == 1.0);
            assert_eq!(*a == MASK_NEG, *b == 0.0);
        }
    }

    #[test]
    fn mask_is_symmetric_per_window() {
        let l = WindowLayout::new(8, 8, 4, 2).unwrap();
        let m = l.mask_additive().unwrap();
        let n = 16;
        for wi in 0..l.nw {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m[wi * n * n + i * n + j], m[wi * n * n + j * n + i]);
                }
            }
        }
    }
}
