use super::{Float, Tensor};
use crate::error::{Error, Result};

/// A fixed sparse linear map `out[e] = sum_j w_ej * in[src_ej]` between flat
/// tensors. Kernel rotations and expansions are all of this form. Each output
/// sums its terms in stored order, so a single unit-weight term copies the
/// input bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLinear {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseLinear {
    /// Build from one term list per output element.
    pub fn from_terms(
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        terms: impl IntoIterator<Item = Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let in_len: usize = in_shape.iter().product();
        let mut offsets = vec![0];
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for list in terms {
            for (s, w) in list {
                if s >= in_len {
                    return Err(Error::shape(format!("sparse source {s} >= {in_len}")));
                }
                src.push(s);
                weight.push(w);
            }
            offsets.push(src.len());
        }
        let out_len: usize = out_shape.iter().product();
        if offsets.len() != out_len + 1 {
            return Err(Error::shape(format!(
                "sparse map has {} rows, out shape {:?} needs {out_len}",
                offsets.len() - 1,
                out_shape
            )));
        }
        Ok(SparseLinear {
            in_shape,
            out_shape,
            offsets,
            src,
            weight,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Terms of output element `e`.
    pub fn terms(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[e]..self.offsets[e + 1];
        self.src[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(Error::shape(format!(
                "sparse map expects {:?}, got {:?}",
                self.in_shape,
                x.shape()
            )));
        }
        let xd = x.data();
        let out_len = self.offsets.len() - 1;
        let mut out = Vec::with_capacity(out_len);
        for e in 0..out_len {
            let mut it = self.terms(e);
            let v = match it.next() {
                None => T::zero(),
                Some((s, w)) => {
                    let mut acc = T::from_f64(w) * xd[s];
                    for (s, w) in it {
                        acc += T::from_f64(w) * xd[s];
                    }
                    acc
                }
            };
            out.push(v);
        }
        Ok(Tensor::from_parts(self.out_shape.clone(), out))
    }

    /// Adjoint map, used for gradients.
    pub fn apply_transpose<T: Float>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        if g.shape() != self.out_shape.as_slice() {
            return Err(Error::shape(format!(
                "sparse adjoint expects {:?}, got {:?}",
                self.out_shape,
                g.shape()
            )));
        }
        let mut out = Tensor::zeros(&self.in_shape);
        let od = out.data_mut();
        for (e, &gv) in g.data().iter().enumerate() {
            for (s, w) in self.terms(e) {
                od[s] += T::from_f64(w) * gv;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_and_transpose_are_adjoint() {
        let m = SparseLinear::from_terms(
            vec![3],
            vec![2],
            vec![vec![(0, 2.0), (2, -1.0)], vec![(1, 0.5)]],
        )
        .unwrap();
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.apply(&x).unwrap().data(), &[-1.0, 1.0]);
        let g = Tensor::<f64>::new(vec![2], vec![1.0, 4.0]).unwrap();
        assert_eq!(m.apply_transpose(&g).unwrap().data(), &[2.0, 2.0, -1.0]);
    }

    #[test]
    fn row_count_checked() {
        assert!(SparseLinear::from_terms(vec![2], vec![3], vec![vec![(0, 1.0)]]).is_err());
        assert!(SparseLinear::from_terms(vec![2], vec![1], vec![vec![(5, 1.0)]]).is_err());
    }
}
