//! Slice-level numeric kernels shared by the eager `Tensor` helpers and the graph.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize, temperature: f64) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[idx(i)] / temperature);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (x[idx(i)] / temperature - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    /// Input coordinate for output `o` and kernel tap `k`, or `None` in padding.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

}

/// Patch matrix `[ho·wo, c_in·kh·kw]`: row `n` holds the receptive field of
/// output pixel `n` (zeros in padding), laid out like one weight row.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let k = g.c_in * g.kh * g.kw;
    let mut cols = vec![0.0; ho * wo * k];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for c in 0..g.c_in {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            row[(c * g.kh + ky) * g.kw + kx] = x[(c * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.c_in * g.kh * g.kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for c in 0..g.c_in {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            gx[(c * g.h + iy) * g.w + ix] += row[(c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let k = g.c_in * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.c_out * n];
    for (o, plane) in out.chunks_mut(n).enumerate() {
        let wrow = &w[o * k..(o + 1) * k];
        for (p, v) in plane.iter_mut().enumerate() {
            *v = b[o] + dot(wrow, &cols[p * k..(p + 1) * k]);
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d`] for upstream `grad`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let k = g.c_in * g.kh * g.kw;
    if let Some(gb) = gb {
        for o in 0..g.c_out {
            gb[o] += grad[o * n..(o + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        let cols = im2col(x, g);
        for o in 0..g.c_out {
            let grow = &mut gw[o * k..(o + 1) * k];
            for p in 0..n {
                let gv = grad[o * n + p];
                if gv != 0.0 {
                    for (acc, cv) in grow.iter_mut().zip(&cols[p * k..(p + 1) * k]) {
                        *acc += gv * cv;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; n * k];
        for o in 0..g.c_out {
            let wrow = &w[o * k..(o + 1) * k];
            for p in 0..n {
                let gv = grad[o * n + p];
                if gv != 0.0 {
                    for (acc, wv) in gcols[p * k..(p + 1) * k].iter_mut().zip(wrow) {
                        *acc += gv * wv;
                    }
                }
            }
        }
        col2im_add(&gcols, g, gx);
    }
}
