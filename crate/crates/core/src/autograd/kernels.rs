//! Raw numeric kernels shared by forward and backward passes.

use crate::error::{dim_err, Result};

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary row/column strides on the
/// inputs. `accumulate` selects between overwrite and add-into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Right-aligned broadcasting of two shapes (size-1 and missing leading
/// dimensions stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast shapes {a:?} and {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed in the index space of `out`, with zero
/// stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + nd - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching flat offsets into both
/// operands.
pub(crate) fn broadcast_for_each(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if a == b {
        let n: usize = out.iter().product();
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if shape.len() != 4 {
            return dim_err(format!("convolution expects [B×C×H×W], got {shape:?}"));
        }
        if kernel == 0 || stride == 0 {
            return dim_err("kernel and stride must be positive");
        }
        let (h, w) = (shape[2], shape[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return dim_err(format!(
                "kernel {kernel} with pad {pad} does not fit input {h}×{w}"
            ));
        }
        Ok(Self {
            batch: shape[0],
            channels: shape[1],
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Visits (column-matrix offset, input offset) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let g = self;
        let k = g.kernel;
        let plen = g.patch_len();
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let row = ((b * g.out_h + oy) * g.out_w + ox) * plen;
                    for c in 0..g.channels {
                        let plane = (b * g.channels + c) * g.height * g.width;
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                let col = (c * k + ky) * k + kx;
                                f(row + col, plane + iy as usize * g.width + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patches() * g.patch_len()];
    g.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    cols
}

pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    g.for_each_tap(|ci, xi| dx[xi] += dcols[ci]);
}
