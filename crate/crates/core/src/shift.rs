//! Omnidirectional token shifting, on the feature map and on its wavelet
//! approximation band, mixed by learned per-channel gates.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Pixel offsets `(dy, dx)` with their channel apportionment. Offset `p` gets
/// weight `1 / (|dy| + |dx|)` and a share of the channels proportional to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub offsets: Vec<(i32, i32)>,
    pub weights: Vec<f64>,
    pub partition: Vec<usize>,
}

/// Unit-radius 8-neighbourhood, cardinal directions first.
pub fn neighborhood8() -> Vec<(i32, i32)> {
    vec![(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
}

/// The single rightward offset used by plain token shift.
pub fn uni_shift() -> Vec<(i32, i32)> {
    vec![(0, 1)]
}

impl ShiftSpec {
    /// Apportions `channels` over `offsets` by largest remainder on the quotas
    /// `k * w_p`, `k = C / sum(w_p)`. Ties go to the earlier offset.
    pub fn build(channels: usize, offsets: &[(i32, i32)]) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("shift offsets must not be empty".into()));
        }
        if let Some(o) = offsets.iter().find(|o| **o == (0, 0)) {
            return Err(Error::Config(format!("shift offset {o:?} is not a displacement")));
        }
        if channels < offsets.len() {
            return Err(Error::Config(format!("{channels} channels cannot cover {} shift offsets", offsets.len())));
        }
        let weights: Vec<f64> =
            offsets.iter().map(|&(dy, dx)| 1.0 / (dy.unsigned_abs() + dx.unsigned_abs()) as f64).collect();
        let k = channels as f64 / weights.iter().sum::<f64>();
        let quotas: Vec<f64> = weights.iter().map(|w| k * w).collect();
        let mut partition: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = partition.iter().sum();
        let mut order: Vec<usize> = (0..offsets.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(channels - assigned) {
            partition[i] += 1;
        }
        Ok(Self { offsets: offsets.to_vec(), weights, partition })
    }

    pub fn channels(&self) -> usize {
        self.partition.iter().sum()
    }

    /// Offset assigned to each channel, in channel order.
    pub fn channel_offsets(&self) -> Vec<(i32, i32)> {
        self.offsets.iter().zip(&self.partition).flat_map(|(&o, &n)| std::iter::repeat_n(o, n)).collect()
    }
}

/// `out[y][x] = src[y - dy][x - dx]`, zero where the source falls outside.
fn shift_plane<F: Real>(src: &[F], dst: &mut [F], h: usize, w: usize, dy: i32, dx: i32) {
    dst.fill(F::zero());
    let (dy, dx) = (dy as isize, dx as isize);
    let (h, w) = (h as isize, w as isize);
    if dy.abs() >= h || dx.abs() >= w {
        return;
    }
    let (x0, x1) = (dx.max(0), w + dx.min(0));
    let n = (x1 - x0) as usize;
    for y in dy.max(0)..h + dy.min(0) {
        let sy = y - dy;
        let d = (y * w + x0) as usize;
        let s = (sy * w + x0 - dx) as usize;
        dst[d..d + n].copy_from_slice(&src[s..s + n]);
    }
}

fn shift_with_sign<F: Real>(x: &Tensor<F>, spec: &ShiftSpec, sign: i32) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if spec.channels() != c {
        return Err(Error::Shape {
            op: "omni_shift",
            expected: vec![b, spec.channels(), h, w],
            actual: x.shape().to_vec(),
        });
    }
    let per_channel = spec.channel_offsets();
    let mut out = Tensor::zeros(x.shape());
    let hw = h * w;
    for (i, (src, dst)) in x.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)).enumerate() {
        let (dy, dx) = per_channel[i % c];
        shift_plane(src, dst, h, w, sign * dy, sign * dx);
    }
    Ok(out)
}

/// Translates each channel block by its offset, with zero fill.
pub fn omni_shift<F: Real>(x: &Tensor<F>, spec: &ShiftSpec) -> Result<Tensor<F>> {
    shift_with_sign(x, spec, 1)
}

/// Raw (pre-sigmoid) gates `[C]` of one frequency-spatial shift.
#[derive(Clone, Debug, PartialEq)]
pub struct FsoShiftParams<F = f32> {
    pub omega_spatial: Tensor<F>,
    pub omega_ll: Tensor<F>,
    pub omega_out: Tensor<F>,
}

impl<F: Real> FsoShiftParams<F> {
    /// All gates at one half.
    pub fn init(channels: usize) -> Self {
        Self::constant(channels, 0.0, 0.0, 0.0)
    }

    pub fn constant(channels: usize, spatial: f64, ll: f64, out: f64) -> Self {
        Self {
            omega_spatial: Tensor::full(&[channels], F::cst(spatial)),
            omega_ll: Tensor::full(&[channels], F::cst(ll)),
            omega_out: Tensor::full(&[channels], F::cst(out)),
        }
    }
}

/// Graph handles to the three raw gates.
#[derive(Clone, Copy, Debug)]
pub struct FsoShiftVars {
    pub omega_spatial: Var,
    pub omega_ll: Var,
    pub omega_out: Var,
}

impl FsoShiftVars {
    pub fn leaves<F: Real>(g: &mut Graph<F>, p: &FsoShiftParams<F>) -> Self {
        Self {
            omega_spatial: g.leaf(p.omega_spatial.clone()),
            omega_ll: g.leaf(p.omega_ll.clone()),
            omega_out: g.leaf(p.omega_out.clone()),
        }
    }

    pub fn shared<F: Real>(g: &mut Graph<F>, spatial: &Rc<Tensor<F>>, ll: &Rc<Tensor<F>>, out: &Rc<Tensor<F>>) -> Self {
        Self {
            omega_spatial: g.leaf_shared(spatial.clone()),
            omega_ll: g.leaf_shared(ll.clone()),
            omega_out: g.leaf_shared(out.clone()),
        }
    }
}

/// Token shift applied ahead of a projection: the full frequency-spatial shift,
/// or a plain single-offset shift with no wavelet branch and no gates.
#[derive(Clone, Debug, PartialEq)]
pub enum ShiftMode {
    Fso(ShiftSpec),
    Uni(ShiftSpec),
}

impl ShiftMode {
    pub fn fso(channels: usize, offsets: &[(i32, i32)]) -> Result<Self> {
        Ok(Self::Fso(ShiftSpec::build(channels, offsets)?))
    }

    pub fn uni(channels: usize) -> Result<Self> {
        Ok(Self::Uni(ShiftSpec::build(channels, &uni_shift())?))
    }

    pub fn spec(&self) -> &ShiftSpec {
        match self {
            Self::Fso(s) | Self::Uni(s) => s,
        }
    }

    pub fn has_gates(&self) -> bool {
        matches!(self, Self::Fso(_))
    }
}

impl<F: Real> Graph<F> {
    pub fn omni_shift(&mut self, x: Var, spec: &ShiftSpec) -> Result<Var> {
        let v = omni_shift(self.value(x), spec)?;
        let spec = spec.clone();
        Ok(self.record(v, &[x], Box::new(move |g, _, _| vec![Some(shift_with_sign(g, &spec, -1).expect("validated"))])))
    }

    /// Frequency-spatial omnidirectional shift of `x: [B, C, H, W]`:
    ///
    /// ```text
    /// s_out   = w_s * shift(x) + (1 - w_s) * x
    /// f_out   = w_ll * shift(LL) + (1 - w_ll) * LL          (LL, LH, HL, HH) = dwt2(x)
    /// o_freq  = idwt2(f_out, LH, HL, HH)
    /// out     = w_o * (s_out + o_freq) + (1 - w_o) * x
    /// ```
    ///
    /// with every `w = sigmoid(raw)` per channel. The approximation band reuses
    /// the same offsets on its half-resolution grid.
    pub fn fso_shift(&mut self, x: Var, spec: &ShiftSpec, p: FsoShiftVars) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let shifted = self.omni_shift(x, spec)?;
        let s_out = self.gated_mix(shifted, x, p.omega_spatial)?;

        let bands = self.dwt2(x)?;
        let ll = self.slice_channels(bands, 0, c)?;
        let detail = self.slice_channels(bands, c, 3 * c)?;
        let ll_shifted = self.omni_shift(ll, spec)?;
        let f_out = self.gated_mix(ll_shifted, ll, p.omega_ll)?;
        let packed = self.concat_channels(&[f_out, detail])?;
        let o_freq = self.idwt2(packed)?;

        let o_final = self.add(s_out, o_freq)?;
        self.gated_mix(o_final, x, p.omega_out)
    }

    /// Dispatches on the shift mode; `gates` is ignored for [`ShiftMode::Uni`].
    pub fn token_shift(&mut self, x: Var, mode: &ShiftMode, gates: Option<FsoShiftVars>) -> Result<Var> {
        match (mode, gates) {
            (ShiftMode::Fso(spec), Some(p)) => self.fso_shift(x, spec, p),
            (ShiftMode::Fso(_), None) => Err(Error::Config("frequency-spatial shift needs gate parameters".into())),
            (ShiftMode::Uni(spec), _) => self.omni_shift(x, spec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::rng::random_tensor;
    use crate::wavelet::{dwt2, idwt2, WaveletPyramid};

    fn cardinal() -> Vec<(i32, i32)> {
        neighborhood8()[..4].to_vec()
    }

    #[test]
    fn apportionment() {
        assert_eq!(ShiftSpec::build(96, &neighborhood8()).unwrap().partition, [16, 16, 16, 16, 8, 8, 8, 8]);
        assert_eq!(ShiftSpec::build(8, &cardinal()).unwrap().partition, [2, 2, 2, 2]);
        assert_eq!(ShiftSpec::build(10, &cardinal()[..3]).unwrap().partition, [4, 3, 3]);
        let s = ShiftSpec::build(13, &neighborhood8()).unwrap();
        assert_eq!(s.channels(), 13);
        assert_eq!(s.channel_offsets().len(), 13);
    }

    #[test]
    fn invalid_specs() {
        assert!(ShiftSpec::build(3, &neighborhood8()).is_err());
        assert!(ShiftSpec::build(8, &[(0, 1), (0, 0)]).is_err());
        assert!(ShiftSpec::build(8, &[]).is_err());
    }

    #[test]
    fn hot_pixel_moves_right() {
        let spec = ShiftSpec::build(1, &uni_shift()).unwrap();
        let mut x = Tensor::<f32>::zeros(&[1, 1, 4, 5]);
        x.data_mut()[2 * 5 + 1] = 1.0;
        let y = omni_shift(&x, &spec).unwrap();
        let hot: Vec<usize> = (0..20).filter(|&i| y.data()[i] != 0.0).collect();
        assert_eq!(hot, [2 * 5 + 2]);
        assert_eq!(omni_shift(&Tensor::<f32>::zeros(&[2, 1, 3, 3]), &spec).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn constant_image_keeps_interior() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let y = omni_shift(&Tensor::<f32>::full(&[1, 8, 5, 6], 0.7), &spec).unwrap();
        for (ch, &(dy, dx)) in spec.channel_offsets().iter().enumerate() {
            let plane = &y.data()[ch * 30..(ch + 1) * 30];
            for yy in 0..5i32 {
                for xx in 0..6i32 {
                    let v = plane[(yy * 6 + xx) as usize];
                    let (sy, sx) = (yy - dy, xx - dx);
                    let inside = (0..5).contains(&sy) && (0..6).contains(&sx);
                    assert_eq!(v, if inside { 0.7 } else { 0.0 }, "channel {ch} at ({yy},{xx})");
                }
            }
        }
    }

    #[test]
    fn shift_is_linear() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let a = random_tensor::<f64>(&[2, 8, 4, 4], 1, 1.0);
        let b = random_tensor::<f64>(&[2, 8, 4, 4], 2, 1.0);
        let lhs = omni_shift(&a.scale(0.5).add(&b.scale(-2.0)), &spec).unwrap();
        let rhs = omni_shift(&a, &spec).unwrap().scale(0.5).add(&omni_shift(&b, &spec).unwrap().scale(-2.0));
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    fn run_fso(x: &Tensor<f64>, spec: &ShiftSpec, p: &FsoShiftParams<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = FsoShiftVars::leaves(&mut g, p);
        let y = g.fso_shift(xv, spec, pv).unwrap();
        g.take_value(y)
    }

    #[test]
    fn closed_output_gate_is_identity() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let x = random_tensor::<f64>(&[1, 8, 4, 4], 3, 1.0);
        let y = run_fso(&x, &spec, &FsoShiftParams::constant(8, 0.3, -0.2, -20.0));
        assert!(y.max_abs_diff(&x) <= 1e-4);
    }

    #[test]
    fn open_output_gate_without_shifts_doubles() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let x = random_tensor::<f64>(&[1, 8, 4, 4], 4, 1.0);
        let y = run_fso(&x, &spec, &FsoShiftParams::constant(8, -20.0, -20.0, 20.0));
        assert!(y.max_abs_diff(&x.scale(2.0)) <= 1e-4);
    }

    #[test]
    fn matches_composition_of_primitives() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let x = random_tensor::<f64>(&[1, 8, 4, 4], 5, 1.0);
        let p = FsoShiftParams {
            omega_spatial: random_tensor(&[8], 6, 2.0),
            omega_ll: random_tensor(&[8], 7, 2.0),
            omega_out: random_tensor(&[8], 8, 2.0),
        };
        let gate = |raw: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
            let hw = a.shape()[2] * a.shape()[3];
            Tensor::from_fn(a.shape(), |i| {
                let s = 1.0 / (1.0 + (-raw.data()[(i / hw) % 8]).exp());
                s * a.data()[i] + (1.0 - s) * b.data()[i]
            })
        };
        let s_out = gate(&p.omega_spatial, &omni_shift(&x, &spec).unwrap(), &x);
        let pyr = dwt2(&x).unwrap();
        let f_out = gate(&p.omega_ll, &omni_shift(&pyr.ll, &spec).unwrap(), &pyr.ll);
        let o_freq = idwt2(&WaveletPyramid::new(f_out, pyr.lh, pyr.hl, pyr.hh).unwrap()).unwrap();
        let want = gate(&p.omega_out, &s_out.add(&o_freq), &x);
        assert!(run_fso(&x, &spec, &p).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn closed_ll_gate_preserves_frequency_branch() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let x = random_tensor::<f64>(&[1, 8, 4, 4], 9, 1.0);
        // With the spatial gate closed too, s_out = x and out = w_o * 2x + (1 - w_o) x.
        let y = run_fso(&x, &spec, &FsoShiftParams::constant(8, -20.0, -20.0, 0.0));
        assert!(y.max_abs_diff(&x.scale(1.5)) <= 1e-4);
    }

    #[test]
    fn gradients() {
        let spec = ShiftSpec::build(8, &neighborhood8()).unwrap();
        let probe = random_tensor::<f64>(&[1, 8, 4, 4], 10, 1.0);
        let inputs = [
            random_tensor::<f64>(&[1, 8, 4, 4], 11, 1.0),
            random_tensor(&[8], 12, 1.0),
            random_tensor(&[8], 13, 1.0),
            random_tensor(&[8], 14, 1.0),
            probe,
        ];
        let r = check_gradients(
            "fso_shift",
            &inputs,
            |g, v| {
                let p = FsoShiftVars { omega_spatial: v[1], omega_ll: v[2], omega_out: v[3] };
                let y = g.fso_shift(v[0], &spec, p)?;
                let m = g.mul(y, v[4])?;
                Ok(g.sum(m))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
