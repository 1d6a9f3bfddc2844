use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Square convolution geometry: kernel size, zero padding, stride and
/// dilation (dilation is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub p: usize,
    pub s: usize,
    pub d: usize,
}

impl ConvSpec {
    pub const fn new(k: usize, p: usize, s: usize) -> Self {
        ConvSpec { k, p, s, d: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 {
            return Err(Error::invalid(format!("kernel and stride must be >= 1: {self:?}")));
        }
        if self.d != 1 {
            return Err(Error::invalid(format!("dilation {} unsupported", self.d)));
        }
        Ok(())
    }

    /// Output extent `floor((S_in + 2p - d(k-1) - 1) / s) + 1`.
    pub fn out_size(&self, s_in: usize) -> Result<usize> {
        self.validate()?;
        if s_in == 0 {
            return Err(Error::invalid("input extent must be >= 1"));
        }
        let num = s_in as i64 + 2 * self.p as i64 - (self.d * (self.k - 1)) as i64 - 1;
        if num < 0 {
            return Err(Error::invalid(format!(
                "extent {s_in} too small for {self:?}: non-positive output"
            )));
        }
        Ok(num as usize / self.s + 1)
    }

    /// Residue `(i - k) mod s` of the padded input extent `i = S_in + 2p`.
    /// Zero means the sampling lattice is symmetric about the input center.
    pub fn residue(&self, s_in: usize) -> usize {
        let padded = s_in + 2 * self.p;
        padded.saturating_sub(self.k) % self.s
    }
}

struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.c_in / self.groups
    }
    fn og(&self) -> usize {
        self.c_out / self.groups
    }
    fn kk(&self) -> usize {
        self.cg() * self.spec.k * self.spec.k
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
    groups: usize,
) -> Result<Geometry> {
    geometry_from_shapes(input.shape(), kernel.shape(), spec, groups)
}

fn geometry_from_shapes(
    input: &[usize],
    kernel: &[usize],
    spec: ConvSpec,
    groups: usize,
) -> Result<Geometry> {
    spec.validate()?;
    let (batch, c_in, h, w) = match input {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => return Err(Error::shape(format!("expected NCHW input, got {input:?}"))),
    };
    let (c_out, cg, kh, kw) = match kernel {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => return Err(Error::shape(format!("expected OIkk kernel, got {kernel:?}"))),
    };
    if kh != spec.k || kw != spec.k {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} does not match spec k={}",
            spec.k
        )));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::shape(format!(
            "channels {c_in}->{c_out} not divisible into {groups} groups"
        )));
    }
    if cg * groups != c_in {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, input has {c_in}",
            cg * groups
        )));
    }
    let ho = spec.out_size(h)?;
    let wo = spec.out_size(w)?;
    Ok(Geometry {
        batch,
        c_in,
        h,
        w,
        c_out,
        ho,
        wo,
        groups,
        spec,
    })
}

/// Range of output columns whose input column `o * s + kx - p` is in bounds.
#[inline]
fn valid_range(len_in: usize, len_out: usize, s: usize, k_off: usize, p: usize) -> (usize, usize) {
    // o*s + k_off >= p  and  o*s + k_off - p <= len_in - 1
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    let hi_num = len_in as i64 - 1 + p as i64 - k_off as i64;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / s + 1).min(len_out)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(x: &[T], g: &Geometry, group: usize, cols: &mut [T]) {
    let ConvSpec { k, p, s, .. } = g.spec;
    let (h, w, ho, wo, l) = (g.h, g.w, g.ho, g.wo, g.l());
    for ci in 0..g.cg() {
        let plane = &x[(group * g.cg() + ci) * h * w..][..h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, ho, s, ky, p);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, wo, s, kx, p);
                let row = &mut cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if oy < ylo || oy >= yhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * w..(iy + 1) * w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if s == 1 {
                        let start = xlo + kx - p;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *d = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], g: &Geometry, group: usize, dx: &mut [T]) {
    let ConvSpec { k, p, s, .. } = g.spec;
    let (h, w, ho, wo, l) = (g.h, g.w, g.ho, g.wo, g.l());
    for ci in 0..g.cg() {
        let plane = &mut dx[(group * g.cg() + ci) * h * w..][..h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, ho, s, ky, p);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, wo, s, kx, p);
                let row = &cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if s == 1 {
                        let start = xlo + kx - p;
                        for (d, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * s + kx - p] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of an NCHW input with an `O x I x k x k` kernel,
/// zero padded. Computed as patch gather followed by a matrix product.
pub fn conv2d<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    conv2d_grouped(input, kernel, spec, 1)
}

/// Grouped variant: input channels are split into `groups` equal blocks and
/// output block `g` sees only input block `g`. Kernel shape is
/// `O x (I / groups) x k x k`.
pub fn conv2d_grouped<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, spec, groups)?;
    let (kk, l, og) = (g.kk(), g.l(), g.og());
    let mut out = vec![T::zero(); g.batch * g.c_out * l];
    let mut cols = vec![T::zero(); kk * l];
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        for grp in 0..g.groups {
            im2col(x, &g, grp, &mut cols);
            let w = &kernel.data()[grp * og * kk..(grp + 1) * og * kk];
            let y = &mut out[(b * g.c_out + grp * og) * l..][..og * l];
            // SAFETY: w is og x kk, cols is kk x l, y is og x l, all dense row-major.
            unsafe {
                T::gemm(
                    og,
                    kk,
                    l,
                    T::one(),
                    w.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    l as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out).ensure_finite("conv2d")
}

/// Gradient of a (grouped) convolution with respect to its input.
pub fn conv2d_backward_input<T: Float>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    kernel: &Tensor<T>,
    spec: ConvSpec,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry_from_shapes(input_shape, kernel.shape(), spec, groups)?;
    check_grad_shape(grad_out, &g)?;
    let (kk, l, og) = (g.kk(), g.l(), g.og());
    let mut dx = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    let mut dcols = vec![T::zero(); kk * l];
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
        for grp in 0..g.groups {
            let w = &kernel.data()[grp * og * kk..(grp + 1) * og * kk];
            let dy = &grad_out.data()[(b * g.c_out + grp * og) * l..][..og * l];
            // SAFETY: w^T is kk x og (strides 1, kk), dy is og x l, dcols is kk x l.
            unsafe {
                T::gemm(
                    kk,
                    og,
                    l,
                    T::one(),
                    w.as_ptr(),
                    1,
                    kk as isize,
                    dy.as_ptr(),
                    l as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            col2im_add(&dcols, &g, grp, dxb);
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Gradient of a (grouped) convolution with respect to its kernel. Samples
/// are accumulated in batch order.
pub fn conv2d_backward_weight<T: Float>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    spec: ConvSpec,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry_from_shapes(input.shape(), kernel_shape, spec, groups)?;
    check_grad_shape(grad_out, &g)?;
    let (kk, l, og) = (g.kk(), g.l(), g.og());
    let mut dw = vec![T::zero(); g.c_out * kk];
    let mut cols = vec![T::zero(); kk * l];
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        for grp in 0..g.groups {
            im2col(x, &g, grp, &mut cols);
            let dy = &grad_out.data()[(b * g.c_out + grp * og) * l..][..og * l];
            let dwg = &mut dw[grp * og * kk..(grp + 1) * og * kk];
            // SAFETY: dy is og x l, cols^T is l x kk (strides 1, l), dwg is og x kk.
            unsafe {
                T::gemm(
                    og,
                    l,
                    kk,
                    T::one(),
                    dy.as_ptr(),
                    l as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    l as isize,
                    T::one(),
                    dwg.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), dw))
}

fn check_grad_shape<T: Float>(grad_out: &Tensor<T>, g: &Geometry) -> Result<()> {
    if grad_out.shape() != [g.batch, g.c_out, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "conv grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.batch, g.c_out, g.ho, g.wo]
        )));
    }
    Ok(())
}

/// Direct quadruple-loop convolution, kept as an independent reference for
/// the patch-gather path.
pub fn conv2d_naive<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, spec, 1)?;
    let ConvSpec { k, p, s, .. } = spec;
    let (x, wt) = (input.data(), kernel.data());
    let mut out = Vec::with_capacity(g.batch * g.c_out * g.l());
    for b in 0..g.batch {
        for o in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ci in 0..g.c_in {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as i64 - p as i64;
                            if iy < 0 || iy >= g.h as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as i64 - p as i64;
                                if ix < 0 || ix >= g.w as i64 {
                                    continue;
                                }
                                acc += x[((b * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                    * wt[((o * g.c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out))
}
