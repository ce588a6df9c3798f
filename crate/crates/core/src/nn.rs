//! Dense layers: token-wise linear maps, layer normalization, 2D convolution,
//! nearest-neighbour upsampling.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Stride, zero padding, and channel groups of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1 with `(k - 1) / 2` padding.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, pad: (kernel - 1) / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { groups: channels, ..Self::same(kernel) }
    }

    pub fn out_size(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<F: Real>(x: &Tensor<F>, weight: &Tensor<F>, geo: ConvGeometry) -> Result<ConvDims> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, cin_g, k, k2) = weight.dims4()?;
    if k != k2 {
        return Err(Error::dim("conv2d", "kernel must be square"));
    }
    if geo.groups == 0 || cin % geo.groups != 0 || cout % geo.groups != 0 || cin / geo.groups != cin_g {
        return Err(Error::Shape {
            op: "conv2d",
            expected: vec![cout, cin / geo.groups.max(1), k, k],
            actual: weight.shape().to_vec(),
        });
    }
    if h + 2 * geo.pad < k || w + 2 * geo.pad < k {
        return Err(Error::dim("conv2d", format!("{h}x{w} input smaller than kernel {k}")));
    }
    Ok(ConvDims { b, cin, h, w, cout, cin_g, k, ho: geo.out_size(h, k), wo: geo.out_size(w, k) })
}

/// Output positions `o` in `[lo, hi)` whose input `o * stride + tap - pad` lies in `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if n + pad > tap { ((n + pad - tap - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv2d<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    geo: ConvGeometry,
) -> Result<Tensor<F>> {
    let d = conv_dims(x, weight, geo)?;
    if let Some(bias) = bias {
        bias.ensure_shape("conv2d bias", &[d.cout])?;
    }
    let (xs, ws) = (x.data(), weight.data());
    let cout_g = d.cout / geo.groups;
    let mut out = vec![F::zero(); d.b * d.cout * d.ho * d.wo];
    for bi in 0..d.b {
        for oc in 0..d.cout {
            let plane = &mut out[(bi * d.cout + oc) * d.ho * d.wo..][..d.ho * d.wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[oc]);
            }
            let ic0 = (oc / cout_g) * d.cin_g;
            for icl in 0..d.cin_g {
                let src = &xs[(bi * d.cin + ic0 + icl) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.k {
                    let (y0, y1) = valid_range(d.h, d.ho, ky, geo.pad, geo.stride);
                    for kx in 0..d.k {
                        let wv = ws[((oc * d.cin_g + icl) * d.k + ky) * d.k + kx];
                        let (x0, x1) = valid_range(d.w, d.wo, kx, geo.pad, geo.stride);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * geo.stride + ky - geo.pad;
                            let orow = &mut plane[oy * d.wo + x0..oy * d.wo + x1];
                            let ix0 = x0 * geo.stride + kx - geo.pad;
                            if geo.stride == 1 {
                                let irow = &src[iy * d.w + ix0..][..x1 - x0];
                                for (o, &i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                let irow = src[iy * d.w + ix0..].iter().step_by(geo.stride);
                                for (o, &i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.b, d.cout, d.ho, d.wo], out)
}

/// Gradients `(dx, dweight, dbias)` of a convolution given the output gradient.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    geo: ConvGeometry,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let d = conv_dims(x, weight, geo)?;
    grad_out.ensure_shape("conv2d_backward", &[d.b, d.cout, d.ho, d.wo])?;
    let (xs, ws, gs) = (x.data(), weight.data(), grad_out.data());
    let cout_g = d.cout / geo.groups;
    let mut gx = vec![F::zero(); xs.len()];
    let mut gw = vec![F::zero(); ws.len()];
    let mut gb = vec![F::zero(); d.cout];
    for bi in 0..d.b {
        for oc in 0..d.cout {
            let gplane = &gs[(bi * d.cout + oc) * d.ho * d.wo..][..d.ho * d.wo];
            gb[oc] += gplane.iter().copied().sum::<F>();
            let ic0 = (oc / cout_g) * d.cin_g;
            for icl in 0..d.cin_g {
                let base = (bi * d.cin + ic0 + icl) * d.h * d.w;
                for ky in 0..d.k {
                    let (y0, y1) = valid_range(d.h, d.ho, ky, geo.pad, geo.stride);
                    for kx in 0..d.k {
                        let widx = ((oc * d.cin_g + icl) * d.k + ky) * d.k + kx;
                        let wv = ws[widx];
                        let (x0, x1) = valid_range(d.w, d.wo, kx, geo.pad, geo.stride);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = F::zero();
                        for oy in y0..y1 {
                            let iy = oy * geo.stride + ky - geo.pad;
                            let grow = &gplane[oy * d.wo + x0..oy * d.wo + x1];
                            let ix0 = x0 * geo.stride + kx - geo.pad;
                            let start = base + iy * d.w + ix0;
                            if geo.stride == 1 {
                                let n = x1 - x0;
                                let irow = &xs[start..start + n];
                                acc += grow.iter().zip(irow).map(|(&g, &i)| g * i).sum::<F>();
                                for (gxe, &g) in gx[start..start + n].iter_mut().zip(grow) {
                                    *gxe += wv * g;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    let idx = start + j * geo.stride;
                                    acc += g * xs[idx];
                                    gx[idx] += wv * g;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![d.cout], gb)?,
    ))
}

/// `[N.., Cin] x [Cin, Cout] -> [N.., Cout]` over the last axis.
pub fn linear<F: Real>(x: &Tensor<F>, weight: &Tensor<F>) -> Result<Tensor<F>> {
    let (cin, cout) = match weight.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::dim("linear", format!("weight must be rank 2, got {s:?}"))),
    };
    let last = *x.shape().last().unwrap_or(&0);
    if last != cin {
        return Err(Error::Shape { op: "linear", expected: vec![cin, cout], actual: weight.shape().to_vec() });
    }
    let n = x.numel() / cin;
    let mut out = vec![F::zero(); n * cout];
    let ws = weight.data();
    for (xr, orow) in x.data().chunks(cin).zip(out.chunks_mut(cout)) {
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &ws[i * cout..(i + 1) * cout];
            for (o, &w) in orow.iter_mut().zip(wr) {
                *o += xv * w;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cout;
    Tensor::new(shape, out)
}

fn linear_backward<F: Real>(x: &Tensor<F>, weight: &Tensor<F>, g: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let (cin, cout) = (weight.shape()[0], weight.shape()[1]);
    let ws = weight.data();
    let mut gx = vec![F::zero(); x.numel()];
    let mut gw = vec![F::zero(); ws.len()];
    for ((xr, gr), gxr) in x.data().chunks(cin).zip(g.data().chunks(cout)).zip(gx.chunks_mut(cin)) {
        for i in 0..cin {
            let wr = &ws[i * cout..(i + 1) * cout];
            gxr[i] = wr.iter().zip(gr).map(|(&w, &g)| w * g).sum();
            let xv = xr[i];
            for (gwe, &g) in gw[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                *gwe += xv * g;
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), gx).expect("shape"), Tensor::new(weight.shape().to_vec(), gw).expect("shape"))
}

/// Normalizes every row of the last axis to zero mean and unit variance.
/// Returns the normalized rows and the per-row inverse standard deviations.
pub fn normalize_rows<F: Real>(x: &Tensor<F>, eps: F) -> (Tensor<F>, Vec<F>) {
    let c = *x.shape().last().expect("rank >= 1");
    let cf = F::cst(c as f64);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.numel() / c);
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().copied().sum::<F>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
        let is = F::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    (out, inv_std)
}

impl<F: Real> Graph<F> {
    /// Token-wise linear map over the last axis with an optional bias.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut v = linear(self.value(x), self.value(weight))?;
        let cout = *v.shape().last().expect("rank >= 1");
        if let Some(b) = bias {
            let bv = self.value(b);
            bv.ensure_shape("linear bias", &[cout])?;
            for row in v.data_mut().chunks_mut(cout) {
                row.iter_mut().zip(bv.data()).for_each(|(e, &b)| *e += b);
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(
            v,
            &parents,
            Box::new(move |g, p, _| {
                let (gx, gw) = linear_backward(p[0], p[1], g);
                let mut out = vec![Some(gx), Some(gw)];
                if p.len() == 3 {
                    let mut gb = vec![F::zero(); cout];
                    for row in g.data().chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push(Some(Tensor::new(vec![cout], gb).expect("shape")));
                }
                out
            }),
        ))
    }

    /// Layer normalization over the last axis with scale `gamma` and offset `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        self.value(gamma).ensure_shape("layer_norm", &[c])?;
        self.value(beta).ensure_shape("layer_norm", &[c])?;
        let (xhat, inv_std) = normalize_rows(self.value(x), F::cst(LN_EPS));
        let mut v = xhat.clone();
        let (gm, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        for row in v.data_mut().chunks_mut(c) {
            for ((e, &g), &b) in row.iter_mut().zip(&gm).zip(&bt) {
                *e = *e * g + b;
            }
        }
        let cf = F::cst(c as f64);
        Ok(self.record(
            v,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let gamma = p[1].data();
                let mut gx = Tensor::zeros(p[0].shape());
                let mut gg = vec![F::zero(); c];
                let mut gb = vec![F::zero(); c];
                for (((gr, xr), gxr), &is) in
                    g.data().chunks(c).zip(xhat.data().chunks(c)).zip(gx.data_mut().chunks_mut(c)).zip(&inv_std)
                {
                    let mut mean_g = F::zero();
                    let mut mean_gx = F::zero();
                    for i in 0..c {
                        let gh = gr[i] * gamma[i];
                        mean_g += gh;
                        mean_gx += gh * xr[i];
                        gg[i] += gr[i] * xr[i];
                        gb[i] += gr[i];
                    }
                    mean_g /= cf;
                    mean_gx /= cf;
                    for i in 0..c {
                        gxr[i] = is * (gr[i] * gamma[i] - mean_g - xr[i] * mean_gx);
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::new(vec![c], gg).expect("shape")),
                    Some(Tensor::new(vec![c], gb).expect("shape")),
                ]
            }),
        ))
    }

    /// Layer normalization across channels at every pixel of a `[B, C, H, W]` map.
    pub fn layer_norm_map(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let t = self.to_tokens(x)?;
        let n = self.layer_norm(t, gamma, beta)?;
        self.to_map(n, h, w)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let v = conv2d(self.value(x), self.value(weight), bias.map(|b| self.value(b)), geo)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(
            v,
            &parents,
            Box::new(move |g, p, _| {
                let (gx, gw, gb) = conv2d_backward(p[0], p[1], g, geo).expect("validated in forward");
                let mut out = vec![Some(gx), Some(gw)];
                if has_bias {
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[B, C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); b * c * h2 * w2];
        for plane in 0..b * c {
            for y in 0..h2 {
                let srow = &src[(plane * h + y / 2) * w..][..w];
                let orow = &mut out[(plane * h2 + y) * w2..][..w2];
                for (xo, o) in orow.iter_mut().enumerate() {
                    *o = srow[xo / 2];
                }
            }
        }
        let v = Tensor::new(vec![b, c, h2, w2], out)?;
        Ok(self.record(
            v,
            &[x],
            Box::new(move |g, _, _| {
                let gs = g.data();
                let mut gx = vec![F::zero(); b * c * h * w];
                for plane in 0..b * c {
                    for y in 0..h2 {
                        let grow = &gs[(plane * h2 + y) * w2..][..w2];
                        let xrow = &mut gx[(plane * h + y / 2) * w..][..w];
                        for (xo, &gv) in grow.iter().enumerate() {
                            xrow[xo / 2] += gv;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, c, h, w], gx).expect("shape"))]
            }),
        ))
    }
}
