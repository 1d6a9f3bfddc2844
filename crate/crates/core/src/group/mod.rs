//! The cyclic rotation group C_N and its actions.
//!
//! Features use the regular-representation layout: channel `c = f*N + o`,
//! where `f` is the field and `o` the orientation. Element `g` acts on a
//! feature by turning it spatially by `g*360/N` degrees clockwise and rolling
//! the orientation axis by `+g` (`out[o] = in[o - g]`). Only grid rotations
//! (multiples of 90 degrees) are applied to features; kernels may be turned
//! by any multiple of `360/N`, with bilinear resampling for off-grid angles.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Float, SparseLinear, Tensor};

/// C_N, `N >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CyclicGroup {
    n: usize,
}

impl Default for CyclicGroup {
    fn default() -> Self {
        CyclicGroup { n: 8 }
    }
}

impl CyclicGroup {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("group order must be >= 1"));
        }
        Ok(CyclicGroup { n })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Rotation angle of element `g`, degrees clockwise.
    pub fn angle_deg(&self, g: usize) -> f64 {
        360.0 * (g % self.n) as f64 / self.n as f64
    }

    /// Element corresponding to `quarter_turns` clockwise quarter turns.
    /// Needs `4 | N`.
    pub fn element_for_quarter_turns(&self, quarter_turns: i64) -> Result<usize> {
        if !self.n.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "C_{} does not contain the quarter turn",
                self.n
            )));
        }
        Ok((quarter_turns.rem_euclid(4) as usize) * self.n / 4)
    }

    /// Quarter turns performed by element `g`; errors unless its angle is a
    /// multiple of 90 degrees.
    pub fn quarter_turns(&self, g: usize) -> Result<i64> {
        let g = g % self.n;
        if !(4 * g).is_multiple_of(self.n) {
            return Err(Error::invalid(format!(
                "element {g} of C_{} is a {} degree turn, not a grid rotation",
                self.n,
                self.angle_deg(g)
            )));
        }
        Ok((4 * g / self.n) as i64)
    }
}

/// A regular-representation feature map `[B, F*N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivFeature<T: Float = f32> {
    tensor: Tensor<T>,
    group: CyclicGroup,
}

impl<T: Float> EquivFeature<T> {
    pub fn new(tensor: Tensor<T>, group: CyclicGroup) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c % group.order() != 0 {
            return Err(Error::shape(format!(
                "{c} channels not divisible by N={}",
                group.order()
            )));
        }
        Ok(EquivFeature { tensor, group })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    pub fn fields(&self) -> usize {
        self.tensor.shape()[1] / self.group.order()
    }

    /// Values of field `f` at sample `b` and position `(i, j)` across the
    /// orientation sub-axis.
    pub fn orientations(&self, b: usize, f: usize, i: usize, j: usize) -> Vec<T> {
        let s = self.tensor.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let n = self.group.order();
        (0..n)
            .map(|o| self.tensor.data()[((b * c + f * n + o) * h + i) * w + j])
            .collect()
    }

    pub fn act(&self, g: usize) -> Result<Self> {
        Ok(EquivFeature {
            tensor: regular_act(&self.tensor, self.group, g)?,
            group: self.group,
        })
    }
}

/// Apply group element `g` to a regular-representation tensor
/// `[B, F*N, H, W]`: spatial clockwise turn by `g*360/N` degrees and
/// orientation roll by `+g`. Exact permutation; `g` must be a grid rotation.
pub fn regular_act<T: Float>(x: &Tensor<T>, group: CyclicGroup, g: usize) -> Result<Tensor<T>> {
    let q = group.quarter_turns(g)?;
    let (b, c, h, w) = x.dims4()?;
    let n = group.order();
    if c % n != 0 {
        return Err(Error::shape(format!("{c} channels not divisible by N={n}")));
    }
    let turned = x.rot90(q, (2, 3))?;
    if n == 1 || g.is_multiple_of(n) {
        return Ok(turned);
    }
    turned
        .into_shape(&[b, c / n, n, h * w])?
        .roll((g % n) as i64, 2)?
        .into_shape(&[b, c, h, w])
}

/// Turn a feature map by `quarter_turns` clockwise quarter turns using the
/// representation matching its layout: the regular action for `N > 1`, a
/// plain spatial turn for the trivial group.
pub fn rotate_feature<T: Float>(
    x: &Tensor<T>,
    group: CyclicGroup,
    quarter_turns: i64,
) -> Result<Tensor<T>> {
    if group.order() == 1 {
        return x.rot90(quarter_turns, (2, 3));
    }
    regular_act(x, group, group.element_for_quarter_turns(quarter_turns)?)
}

/// Snap values within `1e-9` of an integer onto it so that exact grid
/// positions produce a single interpolation term.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Sparse terms for turning a `k x k` plane clockwise by element `o` of
/// `group`: one term list per output pixel, indices into the source plane.
/// The angle is split into `q` quarter turns plus a residual below 90
/// degrees; the residual is resampled bilinearly about the plane center with
/// zero fill, then the quarter turns are applied as a permutation.
pub fn rotation_terms(k: usize, o: usize, group: CyclicGroup) -> Vec<Vec<(usize, f64)>> {
    let n = group.order();
    let o = o % n;
    let q = (4 * o / n) as i64;
    let residual_num = (4 * o) % n;
    let residual = if residual_num == 0 {
        None
    } else {
        Some(0.5 * PI * residual_num as f64 / n as f64)
    };
    let c = (k as f64 - 1.0) / 2.0;
    let resampled: Vec<Vec<(usize, f64)>> = (0..k * k)
        .map(|e| {
            let (i, j) = (e / k, e % k);
            let Some(theta) = residual else {
                return vec![(e, 1.0)];
            };
            let (xp, yp) = (j as f64 - c, i as f64 - c);
            let (s, co) = theta.sin_cos();
            let x = snap(xp * co + yp * s + c);
            let y = snap(-xp * s + yp * co + c);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let mut terms = Vec::with_capacity(4);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    let wgt = wy * wx;
                    if wgt == 0.0 || yy < 0.0 || xx < 0.0 || yy >= k as f64 || xx >= k as f64 {
                        continue;
                    }
                    terms.push((yy as usize * k + xx as usize, wgt));
                }
            }
            terms
        })
        .collect();
    (0..k * k)
        .map(|e| {
            let (si, sj) = quarter_source(q, e / k, e % k, k);
            resampled[si * k + sj].clone()
        })
        .collect()
}

fn quarter_source(q: i64, i: usize, j: usize, k: usize) -> (usize, usize) {
    match q.rem_euclid(4) {
        1 => (k - 1 - j, i),
        2 => (k - 1 - i, k - 1 - j),
        3 => (j, k - 1 - i),
        _ => (i, j),
    }
}

/// Turn every trailing `k x k` plane of `kernel` clockwise by element `o`.
pub fn rotate_kernel<T: Float>(kernel: &Tensor<T>, o: usize, group: CyclicGroup) -> Result<Tensor<T>> {
    let nd = kernel.ndim();
    if nd < 2 || kernel.shape()[nd - 1] != kernel.shape()[nd - 2] {
        return Err(Error::shape(format!(
            "rotate_kernel needs square planes, got {:?}",
            kernel.shape()
        )));
    }
    let k = kernel.shape()[nd - 1];
    let planes = kernel.numel() / (k * k);
    let terms = rotation_terms(k, o, group);
    let map = SparseLinear::from_terms(
        kernel.shape().to_vec(),
        kernel.shape().to_vec(),
        (0..planes).flat_map(|p| {
            terms
                .iter()
                .map(move |t| t.iter().map(|&(s, w)| (p * k * k + s, w)).collect::<Vec<_>>())
        }),
    )?;
    map.apply(kernel)
}

/// How a learnable base kernel is expanded into a full kernel bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expansion {
    /// `[F, C_in, k, k] -> [F*N, C_in, k, k]` from plain input channels.
    Lift,
    /// `[F, F_in*N, k, k] -> [F*N, F_in*N, k, k]` between regular features.
    Group,
    /// `[F, C_in, k, k] -> [N*F, C_in, k, k]`, orientation-major: block `o`
    /// holds all base kernels turned by `o`. Used with a grouped convolution
    /// whose groups are orientations.
    PerOrientation,
}

/// Build the fixed linear map from a base kernel of shape `base_shape` to its
/// expanded bank.
pub fn expansion_map(base_shape: &[usize], kind: Expansion, group: CyclicGroup) -> Result<SparseLinear> {
    let [f_out, c_in, k, k2] = *base_shape else {
        return Err(Error::shape(format!("base kernel must be 4-d, got {base_shape:?}")));
    };
    if k != k2 {
        return Err(Error::shape(format!("non-square kernel {k}x{k2}")));
    }
    let n = group.order();
    if kind == Expansion::Group && c_in % n != 0 {
        return Err(Error::shape(format!(
            "group kernel input channels {c_in} not divisible by N={n}"
        )));
    }
    let rotations: Vec<_> = (0..n).map(|o| rotation_terms(k, o, group)).collect();
    let kk = k * k;
    let base_off = |f: usize, ci: usize| (f * c_in + ci) * kk;
    let mut rows = Vec::with_capacity(f_out * n * c_in * kk);
    // Output channel `oc` decomposes into (field, orientation) per layout.
    for oc in 0..f_out * n {
        let (f, o) = match kind {
            Expansion::PerOrientation => (oc % f_out, oc / f_out),
            _ => (oc / n, oc % n),
        };
        for ci in 0..c_in {
            let src_ci = match kind {
                Expansion::Group => {
                    let (fi, i) = (ci / n, ci % n);
                    fi * n + (i + n - o) % n
                }
                _ => ci,
            };
            let off = base_off(f, src_ci);
            for t in &rotations[o] {
                rows.push(t.iter().map(|&(s, w)| (off + s, w)).collect::<Vec<_>>());
            }
        }
    }
    SparseLinear::from_terms(base_shape.to_vec(), vec![f_out * n, c_in, k, k], rows)
}

pub fn expand_lift<T: Float>(base: &Tensor<T>, group: CyclicGroup) -> Result<Tensor<T>> {
    expansion_map(base.shape(), Expansion::Lift, group)?.apply(base)
}

pub fn expand_group<T: Float>(base: &Tensor<T>, group: CyclicGroup) -> Result<Tensor<T>> {
    expansion_map(base.shape(), Expansion::Group, group)?.apply(base)
}

pub fn expand_per_orientation<T: Float>(base: &Tensor<T>, group: CyclicGroup) -> Result<Tensor<T>> {
    expansion_map(base.shape(), Expansion::PerOrientation, group)?.apply(base)
}

/// A learnable base kernel together with its derived expanded bank. The
/// bank is re-derived whenever the base changes.
#[derive(Clone, Debug)]
pub struct KernelStack<T: Float = f32> {
    base: Tensor<T>,
    expanded: Tensor<T>,
    map: Rc<SparseLinear>,
}

impl<T: Float> KernelStack<T> {
    pub fn new(base: Tensor<T>, kind: Expansion, group: CyclicGroup) -> Result<Self> {
        let map = Rc::new(expansion_map(base.shape(), kind, group)?);
        let expanded = map.apply(&base)?;
        Ok(KernelStack { base, expanded, map })
    }

    pub fn base(&self) -> &Tensor<T> {
        &self.base
    }

    pub fn expanded(&self) -> &Tensor<T> {
        &self.expanded
    }

    pub fn map(&self) -> Rc<SparseLinear> {
        self.map.clone()
    }

    pub fn set_base(&mut self, base: Tensor<T>) -> Result<()> {
        self.expanded = self.map.apply(&base)?;
        self.base = base;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::finite_diff_check;
    use crate::rng::Rng;
    use crate::tensor::{conv2d, ConvSpec};

    fn c(n: usize) -> CyclicGroup {
        CyclicGroup::new(n).unwrap()
    }

    fn t2(rows: &[&[f32]]) -> Tensor {
        let n = rows[0].len();
        Tensor::new(vec![rows.len(), n], rows.concat()).unwrap()
    }

    #[test]
    fn rotate_identity_and_quarter() {
        let k = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(rotate_kernel(&k, 0, c(4)).unwrap(), k);
        assert_eq!(rotate_kernel(&k, 1, c(4)).unwrap(), t2(&[&[3.0, 1.0], &[4.0, 2.0]]));
        assert_eq!(rotate_kernel(&k, 2, c(8)).unwrap(), t2(&[&[3.0, 1.0], &[4.0, 2.0]]));
    }

    #[test]
    fn non_square_rejected() {
        assert!(rotate_kernel(&Tensor::<f32>::zeros(&[2, 3]), 1, c(4)).is_err());
    }

    #[test]
    fn off_grid_rotation_composes_with_quarter_turns_bitwise() {
        let mut rng = Rng::new(9);
        for k in [3, 4, 5] {
            let base = Tensor::<f32>::randn(&[2, k, k], &mut rng);
            let g = c(8);
            for o in 0..8 {
                let a = rotate_kernel(&base, o, g).unwrap().rot90(1, (1, 2)).unwrap();
                let b = rotate_kernel(&base, o + 2, g).unwrap();
                assert_eq!(a, b, "k={k} o={o}");
            }
        }
    }

    #[test]
    fn forty_five_degrees_bilinear_values() {
        // Centre pixel is fixed; the right-middle tap of a 3x3 comes from
        // the point at distance 1 rotated back by 45 degrees.
        let mut k = Tensor::<f64>::zeros(&[3, 3]);
        k.data_mut()[4] = 2.0;
        let r = rotate_kernel(&k, 1, c(8)).unwrap();
        assert_eq!(r.data()[4], 2.0);
        let terms = rotation_terms(3, 1, c(8));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // Output (1, 2): x' = 1, y' = 0 -> source (x, y) = (c + s, c - s).
        let mut got: Vec<_> = terms[5].clone();
        got.sort_by_key(|t| t.0);
        let fx = s;
        let fy = 1.0 - s;
        let expect = [
            (1, (1.0 - fy) * (1.0 - fx)),
            (2, (1.0 - fy) * fx),
            (4, fy * (1.0 - fx)),
            (5, fy * fx),
        ];
        assert_eq!(got.len(), 4);
        for ((i, w), (ei, ew)) in got.iter().zip(expect) {
            assert_eq!(*i, ei);
            assert!((w - ew).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_expansion_moves_top_centre_tap() {
        let mut base = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        base.data_mut()[1] = 1.0;
        let e = expand_lift(&base, c(4)).unwrap();
        assert_eq!(e.shape(), &[4, 1, 3, 3]);
        let hot: Vec<usize> = e
            .data()
            .chunks_exact(9)
            .map(|p| p.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        // top, right, bottom, left centres
        assert_eq!(hot, vec![1, 5, 7, 3]);
        assert!(e.data().iter().filter(|&&v| v != 0.0).count() == 4);
    }

    #[test]
    fn trivial_group_expansions_are_identity() {
        let mut rng = Rng::new(1);
        let base = Tensor::<f32>::randn(&[3, 2, 3, 3], &mut rng);
        assert_eq!(expand_lift(&base, c(1)).unwrap(), base);
        assert_eq!(expand_group(&base, c(1)).unwrap(), base);
    }

    #[test]
    fn symmetric_base_gives_identical_copies() {
        let base = Tensor::<f32>::ones(&[2, 3, 3, 3]);
        let e = expand_lift(&base, c(4)).unwrap();
        assert!(e.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn group_expansion_matches_independent_transforms() {
        let mut rng = Rng::new(2);
        let n = 4;
        let base = Tensor::<f32>::randn(&[2, 3 * n, 3, 3], &mut rng);
        let e = expand_group(&base, c(n)).unwrap();
        assert_eq!(e.shape(), &[2 * n, 3 * n, 3, 3]);
        for f in 0..2 {
            let bf = base.narrow0(f, f + 1).unwrap();
            for o in 0..n {
                let slice = e.narrow0(f * n + o, f * n + o + 1).unwrap();
                // rotate spatially, then roll the input-orientation axis by o
                let expect = bf
                    .rot90(o as i64, (2, 3))
                    .unwrap()
                    .into_shape(&[1, 3, n, 9])
                    .unwrap()
                    .roll(o as i64, 2)
                    .unwrap()
                    .into_shape(&[1, 3 * n, 3, 3])
                    .unwrap();
                assert_eq!(slice, expect, "f={f} o={o}");
            }
        }
    }

    #[test]
    fn isotropic_group_kernel_orientation_sums_agree() {
        let n = 4;
        let mut base = Tensor::<f32>::zeros(&[1, n, 3, 3]);
        for (i, v) in base.data_mut().iter_mut().enumerate() {
            *v = (i / 9) as f32 + 1.0;
        }
        let e = expand_group(&base, c(n)).unwrap();
        let sums: Vec<f32> = e.data().chunks_exact(n * 9).map(|s| s.iter().sum()).collect();
        assert!(sums.iter().all(|&s| s == sums[0]));
    }

    #[test]
    fn per_orientation_layout() {
        let mut rng = Rng::new(3);
        let base = Tensor::<f32>::randn(&[2, 3, 3, 3], &mut rng);
        let e = expand_per_orientation(&base, c(8)).unwrap();
        assert_eq!(e.shape(), &[16, 3, 3, 3]);
        for o in 0..8 {
            assert_eq!(e.narrow0(2 * o, 2 * o + 2).unwrap(), rotate_kernel(&base, o, c(8)).unwrap());
        }
    }

    #[test]
    fn regular_act_examples() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::randn(&[2, 16, 5, 5], &mut rng);
        let g = c(8);
        assert_eq!(regular_act(&x, g, 0).unwrap(), x);
        let manual = x
            .rot90(1, (2, 3))
            .unwrap()
            .into_shape(&[2, 2, 8, 25])
            .unwrap()
            .roll(2, 2)
            .unwrap()
            .into_shape(&[2, 16, 5, 5])
            .unwrap();
        assert_eq!(regular_act(&x, g, 2).unwrap(), manual);
        assert!(regular_act(&x, g, 1).is_err());
    }

    #[test]
    fn regular_act_group_law_and_inverse() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::randn(&[1, 16, 4, 4], &mut rng);
        let g = c(8);
        for a in [0, 2, 4, 6] {
            let back = regular_act(&regular_act(&x, g, a).unwrap(), g, (8 - a) % 8).unwrap();
            assert_eq!(back, x);
            for b in [0, 2, 4, 6] {
                let lhs = regular_act(&x, g, (a + b) % 8).unwrap();
                let rhs = regular_act(&regular_act(&x, g, b).unwrap(), g, a).unwrap();
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn lift_conv_is_equivariant_on_odd_extent() {
        let mut rng = Rng::new(6);
        let g = c(8);
        let base = Tensor::<f32>::randn(&[3, 1, 3, 3], &mut rng);
        let bank = expand_lift(&base, g).unwrap();
        let x = Tensor::<f32>::randn(&[2, 1, 9, 9], &mut rng);
        let spec = ConvSpec::new(3, 1, 1);
        let y = conv2d(&x, &bank, spec).unwrap();
        for q in 1..4 {
            let lhs = conv2d(&x.rot90(q, (2, 3)).unwrap(), &bank, spec).unwrap();
            let rhs = rotate_feature(&y, g, q).unwrap();
            let rel = lhs.max_abs_diff(&rhs).unwrap() / rhs.max_abs();
            assert!(rel <= 1e-5, "q={q} rel={rel}");
        }
    }

    #[test]
    fn group_conv_is_equivariant_on_odd_extent() {
        let mut rng = Rng::new(7);
        let g = c(8);
        let x = Tensor::<f32>::randn(&[1, 16, 7, 7], &mut rng);
        for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(3, 1, 2), ConvSpec::new(4, 1, 1)] {
            let base = Tensor::<f32>::randn(&[2, 16, spec.k, spec.k], &mut rng);
            let bank = expand_group(&base, g).unwrap();
            let y = conv2d(&x, &bank, spec).unwrap();
            for q in 1..4 {
                let lhs = conv2d(&rotate_feature(&x, g, q).unwrap(), &bank, spec).unwrap();
                let rhs = rotate_feature(&y, g, q).unwrap();
                let rel = lhs.max_abs_diff(&rhs).unwrap() / rhs.max_abs();
                assert!(rel <= 1e-5, "{spec:?} q={q} rel={rel}");
            }
        }
    }

    #[test]
    fn kernel_stack_rederives_after_update() {
        let mut rng = Rng::new(8);
        let g = c(8);
        let mut ks = KernelStack::new(Tensor::<f32>::randn(&[2, 1, 3, 3], &mut rng), Expansion::Lift, g).unwrap();
        let nb = Tensor::<f32>::randn(&[2, 1, 3, 3], &mut rng);
        ks.set_base(nb.clone()).unwrap();
        for f in 0..2 {
            for o in 0..8 {
                let e = ks.expanded().narrow0(f * 8 + o, f * 8 + o + 1).unwrap();
                let r = rotate_kernel(&nb.narrow0(f, f + 1).unwrap(), o, g).unwrap();
                assert_eq!(e, r);
            }
        }
    }

    #[test]
    fn expansion_gradient_reaches_base() {
        let mut rng = Rng::new(10);
        let g = c(8);
        let map = Rc::new(expansion_map(&[1, 8, 3, 3], Expansion::Group, g).unwrap());
        for _ in 0..3 {
            let base = Tensor::<f64>::randn(&[1, 8, 3, 3], &mut rng);
            let err = finite_diff_check(|v| v.sparse_linear(map.clone()), &base, 1e-3).unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}
