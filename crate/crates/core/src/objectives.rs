//! Training objectives and image-quality metrics on `[B, C, H, W]` images in
//! `[0, 1]`. Every loss returns its value and its gradient with respect to the
//! prediction; accumulation is done in `f64`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const EDGE_EPS: f64 = 1e-8;
/// Reported in tables in place of the infinite PSNR of identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `(lambda_ssim, lambda_edge)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ssim: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.4, edge: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_loss: f64,
    pub edge: f64,
    pub total: f64,
    pub lambdas: LossWeights,
}

fn pair<'a, F: Real>(op: &'static str, pred: &'a Tensor<F>, gt: &'a Tensor<F>) -> Result<(usize, usize, usize)> {
    pred.same_shape(op, gt)?;
    let (b, c, h, w) = pred.dims4()?;
    Ok((b * c, h, w))
}

fn to_f64<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn from_f64<F: Real>(shape: &[usize], v: Vec<f64>) -> Tensor<F> {
    Tensor::new(shape.to_vec(), v.into_iter().map(F::cst).collect()).expect("shape")
}

/// Mean Huber-style loss with unit threshold, and its gradient.
pub fn smooth_l1<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    pred.same_shape("smooth_l1", gt)?;
    let n = pred.numel() as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p.as_f64() - g.as_f64();
            if d.abs() < 1.0 {
                total += 0.5 * d * d;
                d / n
            } else {
                total += d.abs() - 0.5;
                d.signum() / n
            }
        })
        .collect();
    Ok((total / n, from_f64(pred.shape(), grad)))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-position separable filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = k.iter().enumerate().map(|(j, kv)| kv * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for (j, kv) in k.iter().enumerate() {
            let src = &rows[(yo + j) * wo..(yo + j + 1) * wo];
            for (o, s) in out[yo * wo..(yo + 1) * wo].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(h-n+1) x (w-n+1)` map back to `h x w`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for yo in 0..ho {
        for (j, kv) in k.iter().enumerate() {
            let dst = &mut rows[(yo + j) * wo..(yo + j + 1) * wo];
            for (d, s) in dst.iter_mut().zip(&g[yo * wo..(yo + 1) * wo]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..wo {
            let gv = rows[y * wo + xo];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + xo + j] += kv * gv;
            }
        }
    }
    out
}

/// Mean single-scale SSIM over valid window positions, and its gradient with
/// respect to `pred`.
pub fn ssim<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let (planes, h, w) = pair("ssim", pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let (xs, ys) = (to_f64(pred), to_f64(gt));
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let count = (planes * ho * wo) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; xs.len()];
    for p in 0..planes {
        let x = &xs[p * h * w..(p + 1) * h * w];
        let y = &ys[p * h * w..(p + 1) * h * w];
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let exx = filter_valid(&sq(x, x), h, w, &k);
        let eyy = filter_valid(&sq(y, y), h, w, &k);
        let exy = filter_valid(&sq(x, y), h, w, &k);
        let m = ho * wo;
        let (mut g_mu, mut g_xx, mut g_xy) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            let sc = s / count;
            g_mu[i] = sc * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            g_xx[i] = -sc / b2;
            g_xy[i] = sc * 2.0 / a2;
        }
        let d_mu = filter_valid_adjoint(&g_mu, h, w, &k);
        let d_xx = filter_valid_adjoint(&g_xx, h, w, &k);
        let d_xy = filter_valid_adjoint(&g_xy, h, w, &k);
        let gp = &mut grad[p * h * w..(p + 1) * h * w];
        for i in 0..h * w {
            gp[i] = d_mu[i] + 2.0 * x[i] * d_xx[i] + y[i] * d_xy[i];
        }
    }
    Ok((total / count, from_f64(pred.shape(), grad)))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamped(i: usize, d: usize, n: usize) -> usize {
    (i + d).saturating_sub(1).min(n - 1)
}

/// Sobel responses with replicate padding.
fn sobel(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for dy in 0..3 {
                let row = clamped(yy, dy, h) * w;
                for dx in 0..3 {
                    let v = x[row + clamped(xx, dx, w)];
                    sx += SOBEL_X[dy][dx] * v;
                    sy += SOBEL_Y[dy][dx] * v;
                }
            }
            gx[yy * w + xx] = sx;
            gy[yy * w + xx] = sy;
        }
    }
    (gx, gy)
}

fn sobel_adjoint(gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let (ax, ay) = (gx[yy * w + xx], gy[yy * w + xx]);
            for dy in 0..3 {
                let row = clamped(yy, dy, h) * w;
                for dx in 0..3 {
                    out[row + clamped(xx, dx, w)] += SOBEL_X[dy][dx] * ax + SOBEL_Y[dy][dx] * ay;
                }
            }
        }
    }
    out
}

/// Per-pixel `sqrt(gx^2 + gy^2 + eps)` of the Sobel responses of every plane.
pub fn sobel_magnitude<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    let xs = to_f64(x);
    let mut out = Vec::with_capacity(xs.len());
    for p in 0..b * c {
        let (gx, gy) = sobel(&xs[p * h * w..(p + 1) * h * w], h, w);
        out.extend(gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b + EDGE_EPS).sqrt()));
    }
    Ok(from_f64(x.shape(), out))
}

/// Mean absolute difference of Sobel gradient magnitudes, and its gradient.
pub fn edge_loss<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    let (planes, h, w) = pair("edge_loss", pred, gt)?;
    let (xs, ys) = (to_f64(pred), to_f64(gt));
    let n = (planes * h * w) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(xs.len());
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        let (px, py) = sobel(&xs[r.clone()], h, w);
        let (tx, ty) = sobel(&ys[r], h, w);
        let mut ax = vec![0.0; h * w];
        let mut ay = vec![0.0; h * w];
        for i in 0..h * w {
            let mp = (px[i] * px[i] + py[i] * py[i] + EDGE_EPS).sqrt();
            let mt = (tx[i] * tx[i] + ty[i] * ty[i] + EDGE_EPS).sqrt();
            let d = mp - mt;
            total += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            ax[i] = s * px[i] / (mp * n);
            ay[i] = s * py[i] / (mp * n);
        }
        grad.extend(sobel_adjoint(&ax, &ay, h, w));
    }
    Ok((total / n, from_f64(pred.shape(), grad)))
}

/// `l1 + lambda_ssim (1 - ssim) + lambda_edge edge`, with the gradient of the total.
pub fn total_loss<F: Real>(
    pred: &Tensor<F>,
    gt: &Tensor<F>,
    lambdas: LossWeights,
) -> Result<(LossBreakdown, Tensor<F>)> {
    let (l1, g1) = smooth_l1(pred, gt)?;
    let (s, gs) = ssim(pred, gt)?;
    let (edge, ge) = edge_loss(pred, gt)?;
    let ssim_loss = 1.0 - s;
    let total = l1 + lambdas.ssim * ssim_loss + lambdas.edge * edge;
    let (ws, we) = (F::cst(lambdas.ssim), F::cst(lambdas.edge));
    let grad = Tensor::from_fn(pred.shape(), |i| g1.data()[i] - ws * gs.data()[i] + we * ge.data()[i]);
    Ok((LossBreakdown { l1, ssim_loss, edge, total, lambdas }, grad))
}

pub fn mse<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    pred.same_shape("mse", gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(1 / MSE)`; infinite for identical images.
pub fn psnr<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn rmse<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    Ok(mse(pred, gt)?.sqrt())
}

impl<F: Real> Graph<F> {
    /// Records the composite loss of `pred` against a fixed target as a scalar node.
    pub fn composite_loss(&mut self, pred: Var, gt: &Tensor<F>, lambdas: LossWeights) -> Result<(Var, LossBreakdown)> {
        let (breakdown, grad) = total_loss(self.value(pred), gt, lambdas)?;
        let v = self.record(
            Tensor::scalar(F::cst(breakdown.total)),
            &[pred],
            Box::new(move |g, _, _| vec![Some(grad.scale(g.data()[0]))]),
        );
        Ok((v, breakdown))
    }
}
