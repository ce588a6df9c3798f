//! Bidirectional WKV attention over a flattened token grid.
//!
//! For token `t` of a length-`T` sequence and each channel,
//!
//! ```text
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i) v_i + exp(u + k_t) v_t
//! wkv_t = -------------------------------------------------------------------
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i)     + exp(u + k_t)
//! ```
//!
//! [`bi_wkv_scan`] evaluates this in `O(T)` per channel with a prefix scan and a
//! suffix scan. Each accumulator is stored as `(num, den, max_exponent)` so the
//! true sums are `num * exp(max_exponent)`; the exponent is tracked as a running
//! maximum and nothing is ever exponentiated above zero. [`bi_wkv_oracle`] is the
//! literal `O(T^2)` double-precision evaluation.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel decay `w` and current-token bonus `u`, both `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<F = f32> {
    pub w: Tensor<F>,
    pub u: Tensor<F>,
}

impl<F: Real> WkvParams<F> {
    pub fn new(w: Tensor<F>, u: Tensor<F>) -> Result<Self> {
        if w.rank() != 1 {
            return Err(Error::dim("WkvParams", "decay must be rank 1"));
        }
        u.same_shape("WkvParams", &w)?;
        if !w.is_finite() || !u.is_finite() {
            return Err(Error::NonFinite("WkvParams".into()));
        }
        Ok(Self { w, u })
    }

    /// Decay linearly spaced over `[0, 3]` across channels, bonus `0.5 (1 - c / C)`.
    pub fn init(channels: usize) -> Self {
        let denom = channels.saturating_sub(1).max(1) as f64;
        let w = Tensor::from_fn(&[channels], |c| F::cst(3.0 * c as f64 / denom));
        let u = Tensor::from_fn(&[channels], |c| F::cst(0.5 * (1.0 - c as f64 / channels as f64)));
        Self { w, u }
    }

    pub fn channels(&self) -> usize {
        self.w.numel()
    }
}

/// Tokens `[B, T, C]` of an `height x width` grid flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<F = f32> {
    pub data: Tensor<F>,
    pub height: usize,
    pub width: usize,
}

impl<F: Real> TokenSeq<F> {
    pub fn new(data: Tensor<F>, height: usize, width: usize) -> Result<Self> {
        let (_, t, _) = data.dims3()?;
        if t == 0 || t != height * width {
            return Err(Error::dim("TokenSeq", format!("{t} tokens do not form a {height}x{width} grid")));
        }
        Ok(Self { data, height, width })
    }

    /// A 1-row sequence of length `T`.
    pub fn line(data: Tensor<F>) -> Result<Self> {
        let (_, t, _) = data.dims3()?;
        Self::new(data, 1, t)
    }

    pub fn from_map(map: &Tensor<F>) -> Result<Self> {
        let (_, _, h, w) = map.dims4()?;
        Self::new(map.to_tokens()?, h, w)
    }

    pub fn to_map(&self) -> Result<Tensor<F>> {
        self.data.to_map(self.height, self.width)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims3().expect("validated at construction")
    }
}

/// Gradients of a scalar objective with respect to every Bi-WKV input.
#[derive(Clone, Debug)]
pub struct WkvGrads<F = f32> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub w: Tensor<F>,
    pub u: Tensor<F>,
}

fn validate<F: Real>(k: &TokenSeq<F>, v: &TokenSeq<F>, params: &WkvParams<F>) -> Result<(usize, usize, usize)> {
    v.data.same_shape("bi_wkv", &k.data)?;
    let (b, t, c) = k.dims();
    params.w.ensure_shape("bi_wkv", &[c])?;
    params.u.ensure_shape("bi_wkv", &[c])?;
    if !k.data.is_finite() || !v.data.is_finite() {
        return Err(Error::NonFinite("bi_wkv input".into()));
    }
    Ok((b, t, c))
}

/// Quadratic reference evaluation in double precision, shifting each row of
/// exponents by its maximum.
pub fn bi_wkv_oracle<F: Real>(k: &TokenSeq<F>, v: &TokenSeq<F>, params: &WkvParams<F>) -> Result<TokenSeq<F>> {
    let (b, t, c) = validate(k, v, params)?;
    let (kd, vd) = (k.data.data(), v.data.data());
    let tf = t as f64;
    let mut out = vec![F::zero(); b * t * c];
    let mut expo = vec![0.0f64; t];
    for bi in 0..b {
        for ch in 0..c {
            let w = params.w.data()[ch].as_f64();
            let u = params.u.data()[ch].as_f64();
            let at = |i: usize| (bi * t + i) * c + ch;
            for ti in 0..t {
                for (i, e) in expo.iter_mut().enumerate() {
                    *e = if i == ti {
                        u + kd[at(i)].as_f64()
                    } else {
                        let dist = (ti as f64 - i as f64).abs() - 1.0;
                        -dist / tf * w + kd[at(i)].as_f64()
                    };
                }
                let m = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for (i, &e) in expo.iter().enumerate() {
                    let p = (e - m).exp();
                    num += p * vd[at(i)].as_f64();
                    den += p;
                }
                out[at(ti)] = F::cst(num / den);
            }
        }
    }
    TokenSeq::new(Tensor::new(vec![b, t, c], out)?, k.height, k.width)
}

/// Linear-time evaluation; agrees with [`bi_wkv_oracle`].
pub fn bi_wkv_scan<F: Real>(k: &TokenSeq<F>, v: &TokenSeq<F>, params: &WkvParams<F>) -> Result<TokenSeq<F>> {
    scan_with_decay_sign(k, v, params, F::one())
}

/// The scan with the decay exponent multiplied by `sign`. Only `sign = 1`
/// computes Bi-WKV; other values exist for fault-injection tests.
pub(crate) fn scan_with_decay_sign<F: Real>(
    k: &TokenSeq<F>,
    v: &TokenSeq<F>,
    params: &WkvParams<F>,
    sign: F,
) -> Result<TokenSeq<F>> {
    let (b, t, c) = validate(k, v, params)?;
    let mut y = vec![F::zero(); b * t * c];
    let mut log_den = vec![F::zero(); b * t * c];
    let decay: Vec<F> = params.w.data().iter().map(|&w| sign * w / F::cst(t as f64)).collect();
    for bi in 0..b {
        let r = bi * t * c..(bi + 1) * t * c;
        forward_batch(
            &k.data.data()[r.clone()],
            &v.data.data()[r.clone()],
            &decay,
            params.u.data(),
            t,
            c,
            &mut y[r.clone()],
            &mut log_den[r],
        );
    }
    TokenSeq::new(Tensor::new(vec![b, t, c], y)?, k.height, k.width)
}

/// One direction of the scan state, stored per channel.
struct Accum<F> {
    num: Vec<F>,
    den: Vec<F>,
    max: Vec<F>,
}

impl<F: Real> Accum<F> {
    fn empty(c: usize) -> Self {
        Self { num: vec![F::zero(); c], den: vec![F::zero(); c], max: vec![F::neg_infinity(); c] }
    }

    /// Decays the state by one step and absorbs token `(k, v)`.
    #[inline(always)]
    fn push(&mut self, ch: usize, decay: F, k: F, v: F) {
        let shifted = self.max[ch] - decay;
        let m = shifted.max(k);
        let f = (shifted - m).exp();
        let e = (k - m).exp();
        self.num[ch] = self.num[ch] * f + e * v;
        self.den[ch] = self.den[ch] * f + e;
        self.max[ch] = m;
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_batch<F: Real>(k: &[F], v: &[F], decay: &[F], u: &[F], t: usize, c: usize, y: &mut [F], log_den: &mut [F]) {
    // prefix states before absorbing token t
    let mut pre_num = vec![F::zero(); t * c];
    let mut pre_den = vec![F::zero(); t * c];
    let mut pre_max = vec![F::zero(); t * c];
    let mut acc = Accum::empty(c);
    for ti in 0..t {
        let row = ti * c;
        for ch in 0..c {
            pre_num[row + ch] = acc.num[ch];
            pre_den[row + ch] = acc.den[ch];
            pre_max[row + ch] = acc.max[ch];
            acc.push(ch, decay[ch], k[row + ch], v[row + ch]);
        }
    }
    let mut suf = Accum::empty(c);
    for ti in (0..t).rev() {
        let row = ti * c;
        for ch in 0..c {
            let i = row + ch;
            let own = u[ch] + k[i];
            let m = pre_max[i].max(suf.max[ch]).max(own);
            let fp = (pre_max[i] - m).exp();
            let fs = (suf.max[ch] - m).exp();
            let fo = (own - m).exp();
            let num = pre_num[i] * fp + suf.num[ch] * fs + v[i] * fo;
            let den = pre_den[i] * fp + suf.den[ch] * fs + fo;
            y[i] = num / den;
            log_den[i] = m + den.ln();
            suf.push(ch, decay[ch], k[i], v[i]);
        }
    }
}

/// Analytic gradients of `<grad_out, bi_wkv_scan(k, v, params)>`.
///
/// With `beta_ti = alpha_ti / D_t` the normalized attention weights, the
/// gradients are `dv_i = sum_t g_t beta_ti`, `dk_i = sum_t g_t beta_ti (v_i - y_t)`,
/// plus the self and distance-weighted terms for `u` and `w`. The sums over `t`
/// are themselves decayed scans keyed by `-log D_t`, so the whole backward pass
/// stays linear and every exponent stays non-positive.
pub fn bi_wkv_backward<F: Real>(
    k: &TokenSeq<F>,
    v: &TokenSeq<F>,
    params: &WkvParams<F>,
    grad_out: &TokenSeq<F>,
) -> Result<WkvGrads<F>> {
    let (b, t, c) = validate(k, v, params)?;
    grad_out.data.same_shape("bi_wkv_backward", &k.data)?;
    let tf = F::cst(t as f64);
    let decay: Vec<F> = params.w.data().iter().map(|&w| w / tf).collect();
    let u = params.u.data();

    let mut gk = vec![F::zero(); b * t * c];
    let mut gv = vec![F::zero(); b * t * c];
    let mut gw = vec![F::zero(); c];
    let mut gu = vec![F::zero(); c];

    for bi in 0..b {
        let r = bi * t * c..(bi + 1) * t * c;
        let (k, v, g) = (&k.data.data()[r.clone()], &v.data.data()[r.clone()], &grad_out.data.data()[r.clone()]);

        // Pass 1: prefix sums plus distance-weighted prefix sums.
        let n = t * c;
        let (mut p_num, mut p_den, mut p_dnum, mut p_dden, mut p_max) =
            (vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]);
        {
            let mut acc = DistAccum::empty(c);
            for ti in 0..t {
                for ch in 0..c {
                    let i = ti * c + ch;
                    p_num[i] = acc.num[ch];
                    p_den[i] = acc.den[ch];
                    p_dnum[i] = acc.dnum[ch];
                    p_dden[i] = acc.dden[ch];
                    p_max[i] = acc.max[ch];
                    acc.push(ch, decay[ch], k[i], v[i]);
                }
            }
        }

        // Pass 2: suffix sums; outputs, log-normalizers, and the w/u gradients.
        let mut y = vec![F::zero(); n];
        let mut log_den = vec![F::zero(); n];
        {
            let mut acc = DistAccum::empty(c);
            for ti in (0..t).rev() {
                for ch in 0..c {
                    let i = ti * c + ch;
                    let own = u[ch] + k[i];
                    let m = p_max[i].max(acc.max[ch]).max(own);
                    let fp = (p_max[i] - m).exp();
                    let fs = (acc.max[ch] - m).exp();
                    let fo = (own - m).exp();
                    let num = p_num[i] * fp + acc.num[ch] * fs + v[i] * fo;
                    let den = p_den[i] * fp + acc.den[ch] * fs + fo;
                    let yt = num / den;
                    y[i] = yt;
                    log_den[i] = m + den.ln();

                    gu[ch] += g[i] * (fo / den) * (v[i] - yt);
                    let dnum = p_dnum[i] * fp + acc.dnum[ch] * fs;
                    let dden = p_dden[i] * fp + acc.dden[ch] * fs;
                    gw[ch] -= g[i] * (dnum - yt * dden) / den / tf;

                    acc.push(ch, decay[ch], k[i], v[i]);
                }
            }
        }

        // Passes 3 and 4: sum_t g_t beta_ti and sum_t g_t y_t beta_ti over t < i
        // and t > i, keyed by -log D_t.
        let (gk, gv) = (&mut gk[r.clone()], &mut gv[r]);
        let mut fwd = GradAccum::empty(c);
        for ti in 0..t {
            for ch in 0..c {
                let i = ti * c + ch;
                let s = (k[i] + fwd.max[ch]).exp();
                gv[i] = fwd.g[ch] * s;
                gk[i] = fwd.gy[ch] * s;
                fwd.push(ch, decay[ch], -log_den[i], g[i], g[i] * y[i]);
            }
        }
        let mut bwd = GradAccum::empty(c);
        for ti in (0..t).rev() {
            for ch in 0..c {
                let i = ti * c + ch;
                let s = (k[i] + bwd.max[ch]).exp();
                let own = (u[ch] + k[i] - log_den[i]).exp();
                let sum_g = gv[i] + bwd.g[ch] * s + g[i] * own;
                let sum_gy = gk[i] + bwd.gy[ch] * s + g[i] * y[i] * own;
                gv[i] = sum_g;
                gk[i] = v[i] * sum_g - sum_gy;
                bwd.push(ch, decay[ch], -log_den[i], g[i], g[i] * y[i]);
            }
        }
    }

    Ok(WkvGrads {
        k: Tensor::new(vec![b, t, c], gk)?,
        v: Tensor::new(vec![b, t, c], gv)?,
        w: Tensor::new(vec![c], gw)?,
        u: Tensor::new(vec![c], gu)?,
    })
}

/// Forward accumulator extended with `sum (distance) * weight` terms. The
/// distance-weighted sums obey `E_{t+1} = rho (E_t + A_t)`.
struct DistAccum<F> {
    num: Vec<F>,
    den: Vec<F>,
    dnum: Vec<F>,
    dden: Vec<F>,
    max: Vec<F>,
}

impl<F: Real> DistAccum<F> {
    fn empty(c: usize) -> Self {
        Self {
            num: vec![F::zero(); c],
            den: vec![F::zero(); c],
            dnum: vec![F::zero(); c],
            dden: vec![F::zero(); c],
            max: vec![F::neg_infinity(); c],
        }
    }

    #[inline(always)]
    fn push(&mut self, ch: usize, decay: F, k: F, v: F) {
        let shifted = self.max[ch] - decay;
        let m = shifted.max(k);
        let f = (shifted - m).exp();
        let e = (k - m).exp();
        self.dnum[ch] = (self.dnum[ch] + self.num[ch]) * f;
        self.dden[ch] = (self.dden[ch] + self.den[ch]) * f;
        self.num[ch] = self.num[ch] * f + e * v;
        self.den[ch] = self.den[ch] * f + e;
        self.max[ch] = m;
    }
}

/// Signed sums `sum_t g_t exp(key_t - decay * dist)` sharing one scale.
struct GradAccum<F> {
    g: Vec<F>,
    gy: Vec<F>,
    max: Vec<F>,
}

impl<F: Real> GradAccum<F> {
    fn empty(c: usize) -> Self {
        Self { g: vec![F::zero(); c], gy: vec![F::zero(); c], max: vec![F::neg_infinity(); c] }
    }

    #[inline(always)]
    fn push(&mut self, ch: usize, decay: F, key: F, g: F, gy: F) {
        let shifted = self.max[ch] - decay;
        let m = shifted.max(key);
        let f = (shifted - m).exp();
        let e = (key - m).exp();
        self.g[ch] = self.g[ch] * f + e * g;
        self.gy[ch] = self.gy[ch] * f + e * gy;
        self.max[ch] = m;
    }
}

/// Relative deviation `max |a - b| / max(1, max |b|)` between two outputs.
pub fn relative_error<F: Real>(a: &TokenSeq<F>, b: &TokenSeq<F>) -> f64 {
    let scale = b.data.max_abs().as_f64().max(1.0);
    a.data.max_abs_diff(&b.data).as_f64() / scale
}

impl<F: Real> Graph<F> {
    /// Bi-WKV over tokens `k, v: [B, T, C]` of an `height x width` grid, with
    /// per-channel decay `w` and bonus `u`.
    pub fn bi_wkv(&mut self, k: Var, v: Var, w: Var, u: Var, height: usize, width: usize) -> Result<Var> {
        let ks = TokenSeq::new(self.value(k).clone(), height, width)?;
        let vs = TokenSeq::new(self.value(v).clone(), height, width)?;
        let params = WkvParams::new(self.value(w).clone(), self.value(u).clone())?;
        let y = bi_wkv_scan(&ks, &vs, &params)?;
        Ok(self.record(
            y.data,
            &[k, v, w, u],
            Box::new(move |g, p, _| {
                let ks = TokenSeq::new(p[0].clone(), height, width).expect("validated");
                let vs = TokenSeq::new(p[1].clone(), height, width).expect("validated");
                let params = WkvParams { w: p[2].clone(), u: p[3].clone() };
                let gs = TokenSeq::new(g.clone(), height, width).expect("validated");
                let gr = bi_wkv_backward(&ks, &vs, &params, &gs).expect("validated");
                vec![Some(gr.k), Some(gr.v), Some(gr.w), Some(gr.u)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::random_tensor;

    fn seq(b: usize, t: usize, c: usize, seed: u64, scale: f64) -> TokenSeq<f64> {
        TokenSeq::line(random_tensor(&[b, t, c], seed, scale)).unwrap()
    }

    /// Independent summation of the defining formula without any max-shift.
    fn naive(k: &TokenSeq<f64>, v: &TokenSeq<f64>, p: &WkvParams<f64>) -> Vec<f64> {
        let (b, t, c) = k.dims();
        let mut out = vec![];
        for bi in 0..b {
            for ti in 0..t {
                for ch in 0..c {
                    let at = |i: usize| (bi * t + i) * c + ch;
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..t {
                        let wgt = if i == ti {
                            (p.u.data()[ch] + k.data.data()[at(i)]).exp()
                        } else {
                            let d = (ti as f64 - i as f64).abs() - 1.0;
                            (-d / t as f64 * p.w.data()[ch] + k.data.data()[at(i)]).exp()
                        };
                        num += wgt * v.data.data()[at(i)];
                        den += wgt;
                    }
                    out.push(num / den);
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value() {
        let k = seq(2, 1, 3, 1, 5.0);
        let v = seq(2, 1, 3, 2, 5.0);
        let p = WkvParams::<f64>::init(3);
        for out in [bi_wkv_scan(&k, &v, &p).unwrap(), bi_wkv_oracle(&k, &v, &p).unwrap()] {
            assert!(out.data.max_abs_diff(&v.data) < 1e-12);
        }
    }

    #[test]
    fn constant_values_pass_through() {
        let k = seq(1, 9, 2, 3, 4.0);
        let v = TokenSeq::line(Tensor::full(&[1, 9, 2], 0.7)).unwrap();
        let out = bi_wkv_scan(&k, &v, &WkvParams::init(2)).unwrap();
        assert!(out.data.data().iter().all(|&y| (y - 0.7).abs() < 1e-12));
    }

    #[test]
    fn oracle_matches_hand_summation_t4() {
        let k = seq(1, 4, 2, 41, 1.0);
        let v = seq(1, 4, 2, 42, 1.0);
        let p = WkvParams::new(
            Tensor::new(vec![2], vec![0.8, 2.5]).unwrap(),
            Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(),
        )
        .unwrap();
        let expect = naive(&k, &v, &p);
        let got = bi_wkv_oracle(&k, &v, &p).unwrap();
        for (a, b) in got.data.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn scan_matches_oracle() {
        for (i, &t) in [1usize, 2, 3, 5, 8, 17, 64].iter().enumerate() {
            let k = seq(2, t, 3, 100 + i as u64, 3.0);
            let v = seq(2, t, 3, 200 + i as u64, 1.0);
            let p = WkvParams::new(random_tensor(&[3], 7, 5.0), random_tensor(&[3], 8, 2.0)).unwrap();
            let s = bi_wkv_scan(&k, &v, &p).unwrap();
            let o = bi_wkv_oracle(&k, &v, &p).unwrap();
            assert!(relative_error(&s, &o) < 1e-10, "T={t}");
        }
    }

    #[test]
    fn zero_decay_matches_oracle() {
        let k = seq(1, 12, 2, 5, 2.0);
        let v = seq(1, 12, 2, 6, 1.0);
        let p = WkvParams::new(Tensor::zeros(&[2]), Tensor::full(&[2], 1.5)).unwrap();
        let s = bi_wkv_scan(&k, &v, &p).unwrap();
        let o = bi_wkv_oracle(&k, &v, &p).unwrap();
        assert!(relative_error(&s, &o) < 1e-12);
    }

    #[test]
    fn dominant_key_is_stable() {
        let mut kd = random_tensor::<f32>(&[1, 32, 2], 9, 1.0);
        kd.data_mut()[10 * 2] = 80.0;
        let k = TokenSeq::line(kd).unwrap();
        let v = TokenSeq::line(random_tensor::<f32>(&[1, 32, 2], 10, 1.0)).unwrap();
        let p = WkvParams::new(Tensor::full(&[2], 3.0), Tensor::full(&[2], 20.0)).unwrap();
        let s = bi_wkv_scan(&k, &v, &p).unwrap();
        let o = bi_wkv_oracle(&k, &v, &p).unwrap();
        assert!(s.data.is_finite());
        assert!(relative_error(&s, &o) < 1e-5);
        // channel 0 everywhere except the token itself is dominated by token 10
        let v10 = v.data.data()[20];
        for ti in 0..32 {
            if ti != 10 {
                assert!((s.data.data()[ti * 2] - v10).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let k = seq(1, 4, 2, 1, 1.0);
        let v = seq(1, 5, 2, 1, 1.0);
        assert!(bi_wkv_scan(&k, &v, &WkvParams::init(2)).is_err());
        assert!(bi_wkv_scan(&k, &k, &WkvParams::init(3)).is_err());
        let mut bad = k.clone();
        bad.data.data_mut()[0] = f64::NAN;
        assert!(matches!(bi_wkv_oracle(&bad, &k, &WkvParams::init(2)), Err(Error::NonFinite(_))));
    }

    fn objective(k: &TokenSeq<f64>, v: &TokenSeq<f64>, p: &WkvParams<f64>, g: &TokenSeq<f64>) -> f64 {
        let y = bi_wkv_scan(k, v, p).unwrap();
        y.data.data().iter().zip(g.data.data()).map(|(a, b)| a * b).sum()
    }

    fn rel(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (t, c) = (6, 2);
        let k = seq(1, t, c, 21, 1.5);
        let v = seq(1, t, c, 22, 1.0);
        let g = seq(1, t, c, 23, 1.0);
        let p = WkvParams::new(random_tensor(&[c], 24, 2.0), random_tensor(&[c], 25, 1.0)).unwrap();
        let grads = bi_wkv_backward(&k, &v, &p, &g).unwrap();
        let h = 1e-3;
        let floor = 1e-6;

        let check = |analytic: &Tensor<f64>, perturb: &dyn Fn(usize, f64) -> f64| {
            for i in 0..analytic.numel() {
                let n = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
                let e = rel(analytic.data()[i], n, floor);
                assert!(e <= 1e-3, "index {i}: analytic {} fd {n}", analytic.data()[i]);
            }
        };
        check(&grads.k, &|i, d| {
            let mut k2 = k.clone();
            k2.data.data_mut()[i] += d;
            objective(&k2, &v, &p, &g)
        });
        check(&grads.v, &|i, d| {
            let mut v2 = v.clone();
            v2.data.data_mut()[i] += d;
            objective(&k, &v2, &p, &g)
        });
        check(&grads.w, &|i, d| {
            let mut p2 = p.clone();
            p2.w.data_mut()[i] += d;
            objective(&k, &v, &p2, &g)
        });
        check(&grads.u, &|i, d| {
            let mut p2 = p.clone();
            p2.u.data_mut()[i] += d;
            objective(&k, &v, &p2, &g)
        });
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = seq(1, 7, 3, 1, 1.0);
        let v = seq(1, 7, 3, 2, 1.0);
        let zero = TokenSeq::line(Tensor::zeros(&[1, 7, 3])).unwrap();
        let gr = bi_wkv_backward(&k, &v, &WkvParams::init(3), &zero).unwrap();
        for t in [&gr.k, &gr.v, &gr.w, &gr.u] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn constant_values_have_no_decay_gradient() {
        let k = seq(1, 7, 3, 1, 1.0);
        let v = TokenSeq::line(Tensor::full(&[1, 7, 3], -0.25)).unwrap();
        let g = seq(1, 7, 3, 3, 1.0);
        let gr = bi_wkv_backward(&k, &v, &WkvParams::init(3), &g).unwrap();
        assert!(gr.w.max_abs() < 1e-12);
        assert!(gr.u.max_abs() < 1e-12);
        assert!(gr.k.max_abs() < 1e-12);
    }

    #[test]
    fn token_order_matters() {
        let k = seq(1, 8, 2, 31, 1.0);
        let v = seq(1, 8, 2, 32, 1.0);
        let p = WkvParams::new(Tensor::full(&[2], 6.0), Tensor::zeros(&[2])).unwrap();
        let y = bi_wkv_scan(&k, &v, &p).unwrap();
        let rev = |s: &TokenSeq<f64>| {
            let mut d = s.data.clone();
            for ti in 0..8 {
                for ch in 0..2 {
                    d.data_mut()[ti * 2 + ch] = s.data.data()[(7 - ti) * 2 + ch];
                }
            }
            TokenSeq::line(d).unwrap()
        };
        // swap tokens 0 and 3 only: a permutation that is not a reflection
        let swap = |s: &TokenSeq<f64>| {
            let mut d = s.data.clone();
            for ch in 0..2 {
                d.data_mut().swap(ch, 3 * 2 + ch);
            }
            TokenSeq::line(d).unwrap()
        };
        let ys = bi_wkv_scan(&swap(&k), &swap(&v), &p).unwrap();
        assert!(swap(&ys).data.max_abs_diff(&y.data) > 1e-6);
        // reversal is a symmetry of the bidirectional kernel
        let yr = bi_wkv_scan(&rev(&k), &rev(&v), &p).unwrap();
        assert!(rev(&yr).data.max_abs_diff(&y.data) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn outputs_in_convex_hull(seed in 0u64..100_000, t in 1usize..40) {
                let k = seq(1, t, 2, seed, 10.0);
                let v = seq(1, t, 2, seed ^ 0xff, 1.0);
                let y = bi_wkv_scan(&k, &v, &WkvParams::init(2)).unwrap();
                for ch in 0..2 {
                    let col: Vec<f64> = (0..t).map(|i| v.data.data()[i * 2 + ch]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for i in 0..t {
                        let yi = y.data.data()[i * 2 + ch];
                        prop_assert!(yi >= lo - 1e-12 && yi <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn finite_in_stated_range(seed in 0u64..100_000, w in 0.0f64..10.0, u in -20.0f64..20.0) {
                let k = TokenSeq::line(random_tensor::<f32>(&[1, 48, 2], seed, 80.0)).unwrap();
                let v = TokenSeq::line(random_tensor::<f32>(&[1, 48, 2], seed + 1, 1.0)).unwrap();
                let p = WkvParams::new(Tensor::full(&[2], w as f32), Tensor::full(&[2], u as f32)).unwrap();
                let y = bi_wkv_scan(&k, &v, &p).unwrap();
                prop_assert!(y.data.is_finite());
                let g = bi_wkv_backward(&k, &v, &p, &v).unwrap();
                prop_assert!(g.k.is_finite() && g.v.is_finite() && g.w.is_finite() && g.u.is_finite());
            }
        }
    }
}
