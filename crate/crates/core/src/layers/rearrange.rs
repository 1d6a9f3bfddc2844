use std::rc::Rc;

use super::PoolKind;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Source channel for each position of the orientation-major layout: group
/// `o` collects channels `c` with `c mod N == o`, in increasing order.
pub fn rearrange_permutation(channels: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || !channels.is_multiple_of(n) {
        return Err(Error::shape(format!("{channels} channels not divisible by N={n}")));
    }
    let f = channels / n;
    Ok((0..channels).map(|p| (p % f) * n + p / f).collect())
}

/// Inverse of [`rearrange_permutation`].
pub fn merge_permutation(channels: usize, n: usize) -> Result<Vec<usize>> {
    let fwd = rearrange_permutation(channels, n)?;
    let mut inv = vec![0; channels];
    for (p, &c) in fwd.iter().enumerate() {
        inv[c] = p;
    }
    Ok(inv)
}

pub fn rearrange_by_orientation<'g, T: Float>(x: Var<'g, T>, n: usize) -> Result<Var<'g, T>> {
    let c = *x.shape().get(1).ok_or_else(|| Error::shape("rearrange needs a channel axis"))?;
    x.permute_channels(Rc::new(rearrange_permutation(c, n)?))
}

pub fn merge_orientations<'g, T: Float>(x: Var<'g, T>, n: usize) -> Result<Var<'g, T>> {
    let c = *x.shape().get(1).ok_or_else(|| Error::shape("merge needs a channel axis"))?;
    x.permute_channels(Rc::new(merge_permutation(c, n)?))
}

/// Split `[B, C, H, W]` into N tensors of `C/N` channels by `c mod N`.
pub fn rearrange_groups<T: Float>(x: &Tensor<T>, n: usize) -> Result<Vec<Tensor<T>>> {
    let (b, c, h, w) = x.dims4()?;
    let perm = rearrange_permutation(c, n)?;
    let f = c / n;
    let plane = h * w;
    (0..n)
        .map(|o| {
            let mut data = Vec::with_capacity(b * f * plane);
            for bi in 0..b {
                for &src in &perm[o * f..(o + 1) * f] {
                    data.extend_from_slice(&x.data()[(bi * c + src) * plane..][..plane]);
                }
            }
            Tensor::new(vec![b, f, h, w], data)
        })
        .collect::<Result<_>>()
}

/// Inverse of [`rearrange_groups`].
pub fn merge_groups<T: Float>(groups: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = groups.first().ok_or_else(|| Error::shape("no groups to merge"))?;
    let (b, f, h, w) = first.dims4()?;
    let n = groups.len();
    let c = f * n;
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for (o, g) in groups.iter().enumerate() {
        if g.shape() != first.shape() {
            return Err(Error::shape("merge of differently shaped groups"));
        }
        for bi in 0..b {
            for fi in 0..f {
                let dst = (bi * c + fi * n + o) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(&g.data()[(bi * f + fi) * plane..][..plane]);
            }
        }
    }
    Ok(out)
}

/// Reduce the orientation sub-axis, `[B, F*N, ...] -> [B, F, ...]`.
pub fn orientation_pool<'g, T: Float>(x: Var<'g, T>, n: usize, kind: PoolKind) -> Result<Var<'g, T>> {
    x.orientation_pool(n, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::finite_diff_check;
    use crate::autodiff::Graph;
    use crate::group::{regular_act, CyclicGroup};
    use crate::rng::Rng;

    #[test]
    fn remainder_groups() {
        let x = Tensor::<f32>::from_fn(&[1, 8, 1, 1], |i| i as f32);
        let groups = rearrange_groups(&x, 4).unwrap();
        let ids: Vec<Vec<f32>> = groups.iter().map(|g| g.data().to_vec()).collect();
        assert_eq!(ids, vec![vec![0.0, 4.0], vec![1.0, 5.0], vec![2.0, 6.0], vec![3.0, 7.0]]);
        assert_eq!(merge_groups(&groups).unwrap(), x);
        assert_eq!(rearrange_permutation(8, 4).unwrap(), vec![0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn trivial_group_is_identity() {
        let mut rng = Rng::new(0);
        let x = Tensor::<f32>::randn(&[2, 5, 3, 3], &mut rng);
        let groups = rearrange_groups(&x, 1).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0], x);
    }

    #[test]
    fn graph_rearrange_round_trip() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::randn(&[2, 24, 3, 3], &mut rng);
        let g = Graph::inference();
        let r = rearrange_by_orientation(g.constant(x.clone()), 8).unwrap();
        let groups = rearrange_groups(&x, 8).unwrap();
        assert_eq!(r.value().reshape(&[2, 8, 27]).unwrap().data()[..27], groups[0].data()[..27]);
        assert_eq!(*merge_orientations(r, 8).unwrap().value(), x);
    }

    #[test]
    fn pooling_invariance() {
        let mut rng = Rng::new(2);
        let g8 = CyclicGroup::new(8).unwrap();
        let x = Tensor::<f32>::randn(&[2, 16, 5, 5], &mut rng);
        let gr = Graph::inference();
        for kind in [PoolKind::Mean, PoolKind::Max] {
            let base = orientation_pool(gr.constant(x.clone()), 8, kind).unwrap().value();
            for g in [2, 4, 6] {
                let acted = regular_act(&x, g8, g).unwrap();
                let pooled = orientation_pool(gr.constant(acted), 8, kind).unwrap().value();
                assert_eq!(*pooled, base.rot90((g / 2) as i64, (2, 3)).unwrap());
            }
        }
        let constant = Tensor::<f32>::full(&[1, 8, 2, 2], 1.25);
        let pooled = orientation_pool(gr.constant(constant), 8, PoolKind::Mean).unwrap().value();
        assert!(pooled.data().iter().all(|&v| v == 1.25));
        let y = orientation_pool(gr.constant(x.clone()), 1, PoolKind::Mean).unwrap().value();
        assert_eq!(*y, x);
    }

    #[test]
    fn gradients() {
        let mut rng = Rng::new(3);
        for _ in 0..3 {
            let x = Tensor::<f64>::randn(&[2, 8, 3, 3], &mut rng);
            for kind in [PoolKind::Mean, PoolKind::Max] {
                let err = finite_diff_check(|v| orientation_pool(v, 4, kind), &x, 1e-3).unwrap();
                assert!(err <= 1e-4, "{kind:?}: {err}");
            }
            let err = finite_diff_check(|v| rearrange_by_orientation(v, 4), &x, 1e-3).unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}
