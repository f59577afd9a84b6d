//! Forward and backward numeric kernels over `(H, W, N, C)` tensors.
//!
//! These are plain loops with the channel axis innermost. The autograd graph
//! calls them; forward-only helpers elsewhere reuse the forward halves.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            pad: dilation,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad: 0,
        }
    }

    pub const fn patchify(size: usize) -> Self {
        Self {
            stride: size,
            dilation: 1,
            pad: 0,
        }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.pad)
            .checked_sub(span)
            .map(|v| v / self.stride + 1)
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [h, w, n, c] => Ok([h, w, n, c]),
        _ => Err(Error::Dimension(format!(
            "{what}: expected (H, W, N, C), got {:?}",
            t.shape()
        ))),
    }
}

fn conv_shapes(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    let xd = dims4(x, "conv2d input")?;
    let wd = match *w.shape() {
        [kh, kw, ci, co] => [kh, kw, ci, co],
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d weight must be (kh, kw, Cin, Cout), got {:?}",
                w.shape()
            )))
        }
    };
    if xd[3] != wd[2] {
        return Err(Error::Dimension(format!(
            "conv2d expects {} input channels, got {}",
            wd[2], xd[3]
        )));
    }
    let ho = geom
        .out_dim(xd[0], wd[0])
        .ok_or_else(|| Error::Dimension(format!("conv2d kernel larger than input {:?}", xd)))?;
    let wo = geom
        .out_dim(xd[1], wd[1])
        .ok_or_else(|| Error::Dimension(format!("conv2d kernel larger than input {:?}", xd)))?;
    Ok((xd, wd, ho, wo))
}

#[inline]
fn src_index(o: usize, k: usize, geom: ConvGeometry, limit: usize) -> Option<usize> {
    let i = (o * geom.stride + k * geom.dilation) as isize - geom.pad as isize;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

/// 2-D convolution applied independently to every slice of the `N` axis with
/// shared weights `(kh, kw, Cin, Cout)`. Zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    let ([h, wd, n, c], [kh, kw, _, co], ho, wo) = conv_shapes(x, w, geom)?;
    if let Some(b) = b {
        if b.len() != co {
            return Err(Error::Dimension(format!(
                "conv2d bias has {} entries, expected {co}",
                b.len()
            )));
        }
    }
    let mut out = Tensor::zeros(&[ho, wo, n, co]);
    let xs = x.data();
    let ws = w.data();
    let os = out.data_mut();
    if let Some(b) = b {
        for row in os.chunks_exact_mut(co) {
            row.copy_from_slice(b.data());
        }
    }
    for oy in 0..ho {
        for ky in 0..kh {
            let Some(iy) = src_index(oy, ky, geom, h) else { continue };
            for ox in 0..wo {
                for kx in 0..kw {
                    let Some(ix) = src_index(ox, kx, geom, wd) else { continue };
                    let wbase = (ky * kw + kx) * c * co;
                    for ni in 0..n {
                        let xo = ((iy * wd + ix) * n + ni) * c;
                        let oo = ((oy * wo + ox) * n + ni) * co;
                        let orow = &mut os[oo..oo + co];
                        for (ci, &v) in xs[xo..xo + c].iter().enumerate() {
                            let wrow = &ws[wbase + ci * co..wbase + (ci + 1) * co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let ([h, wd, n, c], [kh, kw, _, co], ho, wo) = conv_shapes(x, w, geom)?;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let xs = x.data();
    let ws = w.data();
    let ds = dout.data();
    for row in ds.chunks_exact(co) {
        for (b, g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let dws = dw.data_mut();
    for oy in 0..ho {
        for ky in 0..kh {
            let Some(iy) = src_index(oy, ky, geom, h) else { continue };
            for ox in 0..wo {
                for kx in 0..kw {
                    let Some(ix) = src_index(ox, kx, geom, wd) else { continue };
                    let wbase = (ky * kw + kx) * c * co;
                    for ni in 0..n {
                        let xo = ((iy * wd + ix) * n + ni) * c;
                        let oo = ((oy * wo + ox) * n + ni) * co;
                        let grow = &ds[oo..oo + co];
                        for ci in 0..c {
                            let v = xs[xo + ci];
                            let wslice = wbase + ci * co..wbase + (ci + 1) * co;
                            for (dwv, &g) in dws[wslice.clone()].iter_mut().zip(grow) {
                                *dwv += v * g;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let acc: f64 = ws[wslice].iter().zip(grow).map(|(a, b)| a * b).sum();
                                dx.data_mut()[xo + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Stride-2 transposed convolution with a 2×2 kernel `(2, 2, Cin, Cout)`:
/// every input pixel expands into its own 2×2 output block.
pub fn deconv2x(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [h, wd, n, c] = dims4(x, "deconv input")?;
    let co = match *w.shape() {
        [2, 2, ci, co] if ci == c => co,
        _ => {
            return Err(Error::Dimension(format!(
                "deconv weight must be (2, 2, {c}, Cout), got {:?}",
                w.shape()
            )))
        }
    };
    let mut out = Tensor::zeros(&[2 * h, 2 * wd, n, co]);
    let (xs, ws) = (x.data(), w.data());
    let os = out.data_mut();
    for y in 0..h {
        for xx in 0..wd {
            for ni in 0..n {
                let xo = ((y * wd + xx) * n + ni) * c;
                for i in 0..2 {
                    for j in 0..2 {
                        let oo = (((2 * y + i) * 2 * wd + 2 * xx + j) * n + ni) * co;
                        let orow = &mut os[oo..oo + co];
                        orow.copy_from_slice(b.data());
                        let wbase = (i * 2 + j) * c * co;
                        for ci in 0..c {
                            let v = xs[xo + ci];
                            for (o, &wv) in orow.iter_mut().zip(&ws[wbase + ci * co..wbase + (ci + 1) * co]) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv2x_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [h, wd, n, c] = match *x.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("validated in forward"),
    };
    let co = w.shape()[3];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let (xs, ws, ds) = (x.data(), w.data(), dout.data());
    for y in 0..h {
        for xx in 0..wd {
            for ni in 0..n {
                let xo = ((y * wd + xx) * n + ni) * c;
                for i in 0..2 {
                    for j in 0..2 {
                        let oo = (((2 * y + i) * 2 * wd + 2 * xx + j) * n + ni) * co;
                        let grow = &ds[oo..oo + co];
                        for (b, g) in db.data_mut().iter_mut().zip(grow) {
                            *b += g;
                        }
                        let wbase = (i * 2 + j) * c * co;
                        for ci in 0..c {
                            let range = wbase + ci * co..wbase + (ci + 1) * co;
                            let v = xs[xo + ci];
                            for (d, &g) in dw.data_mut()[range.clone()].iter_mut().zip(grow) {
                                *d += v * g;
                            }
                            dx.data_mut()[xo + ci] +=
                                ws[range].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Affine map over the trailing axis: `x (.., Cin) · w (Cin, Cout) + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (ci, co) = match *w.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::Dimension(format!("linear weight must be 2-D, got {:?}", w.shape()))),
    };
    if x.last_dim() != ci {
        return Err(Error::Dimension(format!(
            "linear expects {ci} input features, got {}",
            x.last_dim()
        )));
    }
    let rows = x.len() / ci;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = co;
    let mut out = Tensor::zeros(&shape);
    let os = out.data_mut();
    let ws = w.data();
    for r in 0..rows {
        let orow = &mut os[r * co..(r + 1) * co];
        if let Some(b) = b {
            orow.copy_from_slice(b.data());
        }
        for (i, &v) in x.data()[r * ci..(r + 1) * ci].iter().enumerate() {
            for (o, &wv) in orow.iter_mut().zip(&ws[i * co..(i + 1) * co]) {
                *o += v * wv;
            }
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / ci;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let ws = w.data();
    for r in 0..rows {
        let grow = &dout.data()[r * co..(r + 1) * co];
        for (b, g) in db.data_mut().iter_mut().zip(grow) {
            *b += g;
        }
        let xrow = &x.data()[r * ci..(r + 1) * ci];
        let dxrow = &mut dx.data_mut()[r * ci..(r + 1) * ci];
        for i in 0..ci {
            let wrow = &ws[i * co..(i + 1) * co];
            dxrow[i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        }
        let dws = dw.data_mut();
        for (i, &v) in xrow.iter().enumerate() {
            for (d, &g) in dws[i * co..(i + 1) * co].iter_mut().zip(grow) {
                *d += v * g;
            }
        }
    }
    (dx, dw, db)
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormCache)> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!(
            "layer norm over {c} channels with params of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    let rows = x.len() / c;
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for i in 0..c {
            let xh = (xr[i] - mean) * rs;
            xhat.data_mut()[r * c + i] = xh;
            out.data_mut()[r * c + i] = gamma.data()[i] * xh + beta.data()[i];
        }
    }
    Ok((out, NormCache { xhat, rstd }))
}

pub fn layer_norm_backward(cache: &NormCache, gamma: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let rows = dout.len() / c;
    let mut dx = Tensor::zeros(dout.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let g = &dout.data()[r * c..(r + 1) * c];
        let xh = &cache.xhat.data()[r * c..(r + 1) * c];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            dg.data_mut()[i] += g[i] * xh[i];
            db.data_mut()[i] += g[i];
            dxhat[i] = g[i] * gamma.data()[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let rs = cache.rstd[r];
        for i in 0..c {
            dx.data_mut()[r * c + i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    (dx, dg, db)
}

/// GELU, tanh approximation.
pub fn gelu(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
}

/// Single-head scaled dot-product attention across the `N` axis of an
/// `(H, W, N, C)` tensor, independently at every spatial location.
/// Returns the output and the attention weights `(H, W, N, N)`.
pub fn category_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let [h, w, n, c] = dims4(q, "attention query")?;
    q.check_same_shape(k, "attention key")?;
    q.check_same_shape(v, "attention value")?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut attn = Tensor::zeros(&[h, w, n, n]);
    let mut scores = vec![0.0; n];
    for p in 0..h * w {
        let base = p * n * c;
        for i in 0..n {
            let qi = &q.data()[base + i * c..base + (i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.data()[base + j * c..base + (j + 1) * c];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                mx = mx.max(*s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            let arow = &mut attn.data_mut()[(p * n + i) * n..(p * n + i + 1) * n];
            for (a, s) in arow.iter_mut().zip(&scores) {
                *a = s / z;
            }
            let orow = &mut out.data_mut()[base + i * c..base + (i + 1) * c];
            for j in 0..n {
                let a = scores[j] / z;
                for (o, &vv) in orow.iter_mut().zip(&v.data()[base + j * c..base + (j + 1) * c]) {
                    *o += a * vv;
                }
            }
        }
    }
    Ok((out, attn))
}

pub fn category_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    attn: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [h, w, n, c] = match *q.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("validated in forward"),
    };
    let scale = 1.0 / (c as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let mut da = vec![0.0; n];
    for p in 0..h * w {
        let base = p * n * c;
        for i in 0..n {
            let g = &dout.data()[base + i * c..base + (i + 1) * c];
            let arow = &attn.data()[(p * n + i) * n..(p * n + i + 1) * n];
            let mut weighted = 0.0;
            for j in 0..n {
                let vj = &v.data()[base + j * c..base + (j + 1) * c];
                da[j] = g.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += arow[j] * da[j];
                let dvj = &mut dv.data_mut()[base + j * c..base + (j + 1) * c];
                for (d, &gg) in dvj.iter_mut().zip(g) {
                    *d += arow[j] * gg;
                }
            }
            for j in 0..n {
                let ds = arow[j] * (da[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..c {
                    dq.data_mut()[base + i * c + t] += ds * k.data()[base + j * c + t];
                    dk.data_mut()[base + j * c + t] += ds * q.data()[base + i * c + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Per-output-coordinate interpolation taps for bilinear resizing with
/// half-pixel centres (`align_corners = false`).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the spatial axes of an `(H, W, N, C)` tensor.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, n, c] = dims4(x, "bilinear input")?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let inner = n * c;
    let mut out = Tensor::zeros(&[out_h, out_w, n, c]);
    let xs = x.data();
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let o = (oy * out_w + ox) * inner;
            let corners = [
                ((y0 * w + x0) * inner, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * inner, (1.0 - ly) * lx),
                ((y1 * w + x0) * inner, ly * (1.0 - lx)),
                ((y1 * w + x1) * inner, ly * lx),
            ];
            let orow = &mut out.data_mut()[o..o + inner];
            for (src, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                for (d, &s) in orow.iter_mut().zip(&xs[src..src + inner]) {
                    *d += wgt * s;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (h, w) = (input_shape[0], input_shape[1]);
    let inner = input_shape[2] * input_shape[3];
    let (out_h, out_w) = (dout.shape()[0], dout.shape()[1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let o = (oy * out_w + ox) * inner;
            let g = &dout.data()[o..o + inner];
            let corners = [
                ((y0 * w + x0) * inner, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * inner, (1.0 - ly) * lx),
                ((y1 * w + x0) * inner, ly * (1.0 - lx)),
                ((y1 * w + x1) * inner, ly * lx),
            ];
            for (dst, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                for (d, &s) in dx.data_mut()[dst..dst + inner].iter_mut().zip(g) {
                    *d += wgt * s;
                }
            }
        }
    }
    dx
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &v in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8, "at {v}");
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::from_vec(&[2, 3, 1, 1], (0..6).map(f64::from).collect()).unwrap();
        let y = bilinear_resize(&x, 2, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::full(&[2, 2, 2, 3], 1.5);
        let y = bilinear_resize(&x, 8, 8).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn conv_out_dims() {
        assert_eq!(ConvGeometry::same(4).out_dim(9, 3), Some(9));
        assert_eq!(ConvGeometry::patchify(4).out_dim(64, 4), Some(16));
        assert_eq!(ConvGeometry::pointwise().out_dim(5, 3), Some(3));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 3, 1, 2]);
        let w = Tensor::zeros(&[3, 3, 4, 1]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::same(1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
