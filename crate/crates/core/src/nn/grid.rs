/// Token layout on a 2-D patch grid.
///
/// Tokens are stored column-major: index `r + rows · c`, so the row (time)
/// coordinate varies fastest. A batch stacks `batch` grids back to back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub batch: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, batch: usize) -> Self {
        TokenGrid { rows, cols, batch }
    }

    pub fn per_example(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.per_example() * self.batch
    }

    #[inline]
    pub fn index(&self, b: usize, r: usize, c: usize) -> usize {
        b * self.per_example() + r + self.rows * c
    }

    pub fn merged(&self) -> TokenGrid {
        TokenGrid { rows: self.rows / 2, cols: self.cols / 2, batch: self.batch }
    }

    pub fn expanded(&self) -> TokenGrid {
        TokenGrid { rows: self.rows * 2, cols: self.cols * 2, batch: self.batch }
    }

    pub fn can_merge(&self) -> bool {
        self.rows % 2 == 0 && self.cols % 2 == 0 && self.rows > 0 && self.cols > 0
    }

    /// Attention groups for windows of `window × window` tokens (clamped to
    /// the grid). With `shifted`, window boundaries move by half a window,
    /// leaving partial windows at the edges instead of wrapping around.
    pub fn window_groups(&self, window: usize, shifted: bool) -> Vec<Vec<usize>> {
        let wr = window.min(self.rows).max(1);
        let wc = window.min(self.cols).max(1);
        let (sr, sc) = if shifted { (wr / 2, wc / 2) } else { (0, 0) };
        let band = |pos: usize, w: usize, s: usize| (pos + w - s) / w;
        let nr = band(self.rows - 1, wr, sr) + 1;
        let nc = band(self.cols - 1, wc, sc) + 1;
        let mut groups = Vec::new();
        for b in 0..self.batch {
            let mut local = vec![Vec::new(); nr * nc];
            for c in 0..self.cols {
                for r in 0..self.rows {
                    let slot = band(r, wr, sr) + nr * band(c, wc, sc);
                    local[slot].push(self.index(b, r, c));
                }
            }
            groups.extend(local.into_iter().filter(|g| !g.is_empty()));
        }
        groups
    }

    /// One group per example.
    pub fn example_groups(&self) -> Vec<Vec<usize>> {
        (0..self.batch)
            .map(|b| (0..self.per_example()).map(|i| b * self.per_example() + i).collect())
            .collect()
    }

    /// Source rows for each 2×2 sub-position `(dr, dc)` in the order
    /// (0,0), (1,0), (0,1), (1,1), indexed by the merged grid.
    pub fn merge_sources(&self) -> [Vec<usize>; 4] {
        let m = self.merged();
        let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
        offsets.map(|(dr, dc)| {
            let mut v = Vec::with_capacity(m.tokens());
            for b in 0..m.batch {
                for c in 0..m.cols {
                    for r in 0..m.rows {
                        v.push(self.index(b, 2 * r + dr, 2 * c + dc));
                    }
                }
            }
            v
        })
    }

    /// Inverse of [`TokenGrid::merge_sources`]: after stacking the four
    /// sub-position blocks row-wise, `perm[i]` is the stacked row that lands at
    /// token `i` of the expanded grid.
    pub fn expand_permutation(&self) -> Vec<usize> {
        let big = self.expanded();
        let n = self.tokens();
        let mut perm = vec![0; big.tokens()];
        for (k, src) in big.merge_sources().iter().enumerate() {
            for (i, &dst) in src.iter().enumerate() {
                perm[dst] = k * n + i;
            }
        }
        perm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_partition_every_token_once() {
        for (rows, cols, w, shifted) in [(8, 32, 4, false), (8, 32, 4, true), (2, 8, 4, true), (1, 4, 4, false), (5, 7, 3, true)] {
            let g = TokenGrid::new(rows, cols, 2);
            let groups = g.window_groups(w, shifted);
            let mut seen = vec![0; g.tokens()];
            for grp in &groups {
                assert!(grp.len() <= w * w);
                for &i in grp {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
        assert_eq!(TokenGrid::new(8, 32, 1).window_groups(4, false).len(), 16);
        assert_eq!(TokenGrid::new(8, 32, 1).window_groups(4, true).len(), 27);
    }

    #[test]
    fn expand_undoes_merge() {
        let g = TokenGrid::new(4, 6, 2);
        let src = g.merge_sources();
        let stacked: Vec<usize> = src.iter().flatten().copied().collect();
        let perm = g.merged().expand_permutation();
        let back: Vec<usize> = perm.iter().map(|&p| stacked[p]).collect();
        assert_eq!(back, (0..g.tokens()).collect::<Vec<_>>());
    }
}
