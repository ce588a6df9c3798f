//! Single-level orthonormal 2D Haar transform.
//!
//! For every 2x2 block `[[a, b], [c, d]]` the analysis produces
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
//! HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The analysis matrix is symmetric and orthogonal, so synthesis applies the
//! same butterfly and the adjoint of `dwt2` is `idwt2`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One approximation band plus three detail bands, each `[B, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<F = f32> {
    pub ll: Tensor<F>,
    /// Vertical detail.
    pub lh: Tensor<F>,
    /// Horizontal detail.
    pub hl: Tensor<F>,
    pub hh: Tensor<F>,
}

impl<F: Real> WaveletPyramid<F> {
    pub fn new(ll: Tensor<F>, lh: Tensor<F>, hl: Tensor<F>, hh: Tensor<F>) -> Result<Self> {
        ll.dims4()?;
        for band in [&lh, &hl, &hh] {
            band.same_shape("WaveletPyramid::new", &ll)?;
        }
        Ok(Self { ll, lh, hl, hh })
    }

    pub fn bands(&self) -> [&Tensor<F>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn detail_energy(&self) -> F {
        self.lh.norm_sq() + self.hl.norm_sq() + self.hh.norm_sq()
    }

    pub fn energy(&self) -> F {
        self.ll.norm_sq() + self.detail_energy()
    }

    /// Packs the bands channel-wise as `[B, 4C, H/2, W/2]` in LL, LH, HL, HH order.
    pub fn pack(&self) -> Result<Tensor<F>> {
        Tensor::concat_channels(&self.bands())
    }

    pub fn unpack(packed: &Tensor<F>) -> Result<Self> {
        let (_, c4, _, _) = packed.dims4()?;
        if c4 % 4 != 0 {
            return Err(Error::dim("WaveletPyramid::unpack", format!("{c4} channels is not a multiple of 4")));
        }
        let c = c4 / 4;
        Ok(Self {
            ll: packed.slice_channels(0, c)?,
            lh: packed.slice_channels(c, c)?,
            hl: packed.slice_channels(2 * c, c)?,
            hh: packed.slice_channels(3 * c, c)?,
        })
    }
}

#[inline(always)]
fn butterfly<F: Real>(a: F, b: F, c: F, d: F) -> [F; 4] {
    let half = F::cst(0.5);
    let (s0, d0) = (a + b, a - b);
    let (s1, d1) = (c + d, c - d);
    [(s0 + s1) * half, (s0 - s1) * half, (d0 + d1) * half, (d0 - d1) * half]
}

pub fn dwt2<F: Real>(x: &Tensor<F>) -> Result<WaveletPyramid<F>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("dwt2", format!("spatial size {h}x{w} must be even")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let half_shape = [b, c, h2, w2];
    let mut bands: [Vec<F>; 4] = std::array::from_fn(|_| vec![F::zero(); b * c * h2 * w2]);
    let src = x.data();
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            let top = &p[2 * i * w..(2 * i + 1) * w];
            let bot = &p[(2 * i + 1) * w..(2 * i + 2) * w];
            let o = plane * h2 * w2 + i * w2;
            for j in 0..w2 {
                let r = butterfly(top[2 * j], top[2 * j + 1], bot[2 * j], bot[2 * j + 1]);
                for (band, v) in bands.iter_mut().zip(r) {
                    band[o + j] = v;
                }
            }
        }
    }
    let [ll, lh, hl, hh] = bands.map(|d| Tensor::new(half_shape.to_vec(), d).expect("band shape"));
    Ok(WaveletPyramid { ll, lh, hl, hh })
}

pub fn idwt2<F: Real>(p: &WaveletPyramid<F>) -> Result<Tensor<F>> {
    let (b, c, h2, w2) = p.ll.dims4()?;
    for band in [&p.lh, &p.hl, &p.hh] {
        band.same_shape("idwt2", &p.ll)?;
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![F::zero(); b * c * h * w];
    let [ll, lh, hl, hh] = p.bands().map(|t| t.data());
    for plane in 0..b * c {
        let o = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let s = plane * h2 * w2 + i * w2 + j;
                let [a, bb, cc, d] = butterfly(ll[s], lh[s], hl[s], hh[s]);
                o[2 * i * w + 2 * j] = a;
                o[2 * i * w + 2 * j + 1] = bb;
                o[(2 * i + 1) * w + 2 * j] = cc;
                o[(2 * i + 1) * w + 2 * j + 1] = d;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// `dwt2` with bands packed channel-wise, see [`WaveletPyramid::pack`].
pub fn dwt2_packed<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    dwt2(x)?.pack()
}

pub fn idwt2_packed<F: Real>(packed: &Tensor<F>) -> Result<Tensor<F>> {
    idwt2(&WaveletPyramid::unpack(packed)?)
}

impl<F: Real> Graph<F> {
    /// Packed analysis `[B, C, H, W] -> [B, 4C, H/2, W/2]`. The transform is
    /// orthogonal, so its backward pass is the synthesis.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let v = dwt2_packed(self.value(x))?;
        Ok(self.record(v, &[x], Box::new(|g, _, _| vec![Some(idwt2_packed(g).expect("band layout"))])))
    }

    pub fn idwt2(&mut self, packed: Var) -> Result<Var> {
        let v = idwt2_packed(self.value(packed))?;
        Ok(self.record(v, &[packed], Box::new(|g, _, _| vec![Some(dwt2_packed(g).expect("even output"))])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::random_tensor;

    /// Per-block evaluation of the analysis formulas, written independently of the
    /// butterfly kernel.
    fn brute_force(x: &Tensor<f64>) -> [Vec<f64>; 4] {
        let (b, c, h, w) = x.dims4().unwrap();
        let at = |bi: usize, ci: usize, y: usize, xx: usize| x.data()[((bi * c + ci) * h + y) * w + xx];
        let mut out: [Vec<f64>; 4] = Default::default();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let a = at(bi, ci, 2 * i, 2 * j);
                        let bb = at(bi, ci, 2 * i, 2 * j + 1);
                        let cc = at(bi, ci, 2 * i + 1, 2 * j);
                        let d = at(bi, ci, 2 * i + 1, 2 * j + 1);
                        out[0].push((a + bb + cc + d) / 2.0);
                        out[1].push((a + bb - cc - d) / 2.0);
                        out[2].push((a - bb + cc - d) / 2.0);
                        out[3].push((a - bb - cc + d) / 2.0);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 6], 0.3);
        let p = dwt2(&x).unwrap();
        assert!(p.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
        assert_eq!(p.detail_energy(), 0.0);
    }

    #[test]
    fn single_corner_pixel() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = dwt2(&x).unwrap();
        for band in p.bands() {
            assert_eq!(band.data(), &[0.5]);
        }
    }

    #[test]
    fn matches_brute_force_on_random_4x4() {
        let x = random_tensor::<f64>(&[2, 3, 4, 4], 11, 1.0);
        let p = dwt2(&x).unwrap();
        let oracle = brute_force(&x);
        for (band, expect) in p.bands().iter().zip(&oracle) {
            for (a, b) in band.data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_cases() {
        let x = random_tensor::<f32>(&[1, 2, 6, 8], 5, 1.0);
        let back = idwt2(&dwt2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-6);

        let z = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let zp = WaveletPyramid::new(z.clone(), z.clone(), z.clone(), z.clone()).unwrap();
        assert_eq!(idwt2(&zp).unwrap(), Tensor::zeros(&[1, 1, 6, 6]));

        let ll = Tensor::<f32>::full(&[1, 1, 2, 2], 1.4);
        let cp = WaveletPyramid::new(ll, z.clone(), z.clone(), z.clone());
        assert!(cp.is_err(), "band shapes differ");
        let ll = Tensor::<f32>::full(&[1, 1, 3, 3], 1.4);
        let cp = WaveletPyramid::new(ll, z.clone(), z.clone(), z).unwrap();
        assert!(idwt2(&cp).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn odd_sizes_rejected() {
        assert!(matches!(dwt2(&Tensor::<f32>::zeros(&[1, 1, 3, 4])), Err(Error::Dimension { .. })));
        assert!(dwt2(&Tensor::<f32>::zeros(&[1, 1, 4, 5])).is_err());
    }

    #[test]
    fn idwt_rejects_mismatched_bands() {
        let p = WaveletPyramid {
            ll: Tensor::<f32>::zeros(&[1, 1, 2, 2]),
            lh: Tensor::zeros(&[1, 1, 2, 2]),
            hl: Tensor::zeros(&[1, 1, 2, 3]),
            hh: Tensor::zeros(&[1, 1, 2, 2]),
        };
        assert!(matches!(idwt2(&p), Err(Error::Shape { .. })));
    }

    #[test]
    fn pack_unpack() {
        let x = random_tensor::<f32>(&[2, 3, 4, 4], 9, 1.0);
        let packed = dwt2_packed(&x).unwrap();
        assert_eq!(packed.shape(), &[2, 12, 2, 2]);
        assert!(idwt2_packed(&packed).unwrap().max_abs_diff(&x) < 1e-6);
    }

    mod props {
        use super::*;
        use crate::gradcheck::{check_gradients, GradCheckOptions};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parseval_and_reconstruction(seed in 0u64..10_000, hh in 1usize..5, ww in 1usize..5) {
                let x = random_tensor::<f32>(&[1, 2, 2 * hh, 2 * ww], seed, 2.0);
                let p = dwt2(&x).unwrap();
                let e = x.norm_sq() as f64;
                prop_assert!((e - p.energy() as f64).abs() <= 1e-4 * e);
                prop_assert!(idwt2(&p).unwrap().max_abs_diff(&x) <= 1e-6);
            }

            #[test]
            fn gradient_matches_finite_differences(seed in 0u64..1_000) {
                let x = random_tensor::<f64>(&[1, 2, 4, 4], seed, 1.0);
                let probe = random_tensor::<f64>(&[1, 8, 2, 2], seed + 7, 1.0);
                let back = random_tensor::<f64>(&[1, 2, 4, 4], seed + 13, 1.0);
                let r = check_gradients("dwt2/idwt2", &[x, probe, back], |g, v| {
                    let p = g.dwt2(v[0])?;
                    let q = g.mul(p, v[1])?;
                    let s = g.idwt2(q)?;
                    let t = g.mul(s, v[2])?;
                    Ok(g.sum(t))
                }, &GradCheckOptions::default()).unwrap();
                prop_assert!(r.passed(), "{}", r);
            }

            #[test]
            fn linear(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
                let x = random_tensor::<f64>(&[1, 1, 4, 6], seed, 1.0);
                let y = random_tensor::<f64>(&[1, 1, 4, 6], seed + 1, 1.0);
                let combo = x.scale(alpha).add(&y.scale(beta));
                let lhs = dwt2_packed(&combo).unwrap();
                let rhs = dwt2_packed(&x).unwrap().scale(alpha).add(&dwt2_packed(&y).unwrap().scale(beta));
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
            }
        }
    }
}
