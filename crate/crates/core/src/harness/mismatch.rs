//! Stride-2 sampling points on a `2n x 2n` image before and after a
//! clockwise quarter turn, in 1-based `(column, row)` coordinates of the
//! original image.

use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq)]
pub struct MismatchDemo {
    pub n: usize,
    /// Sampling points on the original image: `(2i+1, 2j+1)`.
    pub pre: Vec<(usize, usize)>,
    /// Sampling points on the rotated image, mapped back: `(2j+1, 2n-2i)`.
    pub post: Vec<(usize, usize)>,
}

impl MismatchDemo {
    pub fn pre_rows(&self) -> BTreeSet<usize> {
        self.pre.iter().map(|p| p.1).collect()
    }

    pub fn post_rows(&self) -> BTreeSet<usize> {
        self.post.iter().map(|p| p.1).collect()
    }

    /// Every pre-rotation row is odd and every post-rotation row even.
    pub fn parity_disjoint(&self) -> bool {
        self.pre.iter().all(|p| p.1 % 2 == 1) && self.post.iter().all(|p| p.1 % 2 == 0)
    }

    /// No sampling point is shared between the two sets.
    pub fn points_disjoint(&self) -> bool {
        let pre: BTreeSet<_> = self.pre.iter().collect();
        self.post.iter().all(|p| !pre.contains(p))
    }

    pub fn summary(&self) -> String {
        let fmt = |s: BTreeSet<usize>| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "n={} image={}x{} pre rows {{{}}} (odd) post rows {{{}}} (even) parity disjoint: {} points disjoint: {}",
            self.n,
            2 * self.n,
            2 * self.n,
            fmt(self.pre_rows()),
            fmt(self.post_rows()),
            self.parity_disjoint(),
            self.points_disjoint()
        )
    }
}

pub fn sampling_mismatch_demo(n: usize) -> MismatchDemo {
    let mut pre = Vec::with_capacity(n * n);
    let mut post = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pre.push((2 * i + 1, 2 * j + 1));
            post.push((2 * j + 1, 2 * n - 2 * i));
        }
    }
    MismatchDemo { n, pre, post }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Map stride-2 samples of the rotated image back through the rotation
    /// by explicit array indexing instead of the closed form.
    fn post_by_rotation(n: usize) -> BTreeSet<(usize, usize)> {
        let side = 2 * n;
        // label each original pixel by its (column, row), rotate the label
        // grid clockwise, then read the labels at the sampling points
        let grid: Vec<Vec<(usize, usize)>> = (1..=side).map(|y| (1..=side).map(|x| (x, y)).collect()).collect();
        let rotated: Vec<Vec<(usize, usize)>> = (0..side)
            .map(|r| (0..side).map(|c| grid[side - 1 - c][r]).collect())
            .collect();
        let mut out = BTreeSet::new();
        for r in (0..side).step_by(2) {
            for c in (0..side).step_by(2) {
                out.insert(rotated[r][c]);
            }
        }
        out
    }

    #[test]
    fn smallest_cases() {
        let d = sampling_mismatch_demo(1);
        assert_eq!((d.pre.clone(), d.post.clone()), (vec![(1, 1)], vec![(1, 2)]));
        let d = sampling_mismatch_demo(2);
        assert_eq!(d.pre_rows().into_iter().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(d.post_rows().into_iter().collect::<Vec<_>>(), vec![2, 4]);
        assert!(d.parity_disjoint());
    }

    #[test]
    fn closed_form_matches_rotation() {
        for n in 1..=16 {
            let d = sampling_mismatch_demo(n);
            let closed: BTreeSet<_> = d.post.iter().copied().collect();
            assert_eq!(closed, post_by_rotation(n), "n={n}");
        }
    }

    #[test]
    fn disjoint_up_to_64() {
        for n in 1..=64 {
            let d = sampling_mismatch_demo(n);
            assert!(d.parity_disjoint() && d.points_disjoint(), "n={n}");
        }
    }
}
