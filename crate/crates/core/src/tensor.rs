//! Dense row-major tensors in double precision plus the pure (graph-free)
//! numeric primitives: bilinear sampling, softmax and the finite-difference
//! gradient checker.
//!
//! Feature maps are stored `[height, width, channels]` so that one texel is a
//! contiguous channel vector.

use crate::error::{domain, shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(&shape, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

fn shape_err(shape: &[usize], len: usize) -> crate::Error {
    crate::error::shape(format!("shape {shape:?} does not hold {len} values"))
}

/// Texel corners and weights of a bilinear lookup at normalized `(x, y)`.
///
/// Normalized `u` maps to the continuous pixel coordinate `u * W - 0.5`
/// (texel-center addressing). Locations outside `[0, 1]^2` have no corners;
/// corners that fall off the map are dropped (zero padding).
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearTaps {
    /// `(texel index, weight, d weight / d x, d weight / d y)`, in normalized units.
    pub taps: [(usize, f64, f64, f64); 4],
    pub count: usize,
}

pub fn bilinear_taps(height: usize, width: usize, x: f64, y: f64) -> BilinearTaps {
    let mut out = BilinearTaps::default();
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return out;
    }
    let px = x * width as f64 - 0.5;
    let py = y * height as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (sw, sh) = (width as f64, height as f64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy) * sw, -(1.0 - fx) * sh),
        (x0 + 1, y0, fx * (1.0 - fy), (1.0 - fy) * sw, -fx * sh),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy * sw, (1.0 - fx) * sh),
        (x0 + 1, y0 + 1, fx * fy, fy * sw, fx * sh),
    ];
    for (cx, cy, w, dx, dy) in corners {
        if cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height {
            out.taps[out.count] = (cy as usize * width + cx as usize, w, dx, dy);
            out.count += 1;
        }
    }
    out
}

/// Bilinear lookup of a `[H, W, C]` map at a normalized location.
pub fn bilinear_sample(map: &Tensor, loc: (f64, f64)) -> Result<Vec<f64>> {
    let [h, w, c] = map_dims(map)?;
    if !loc.0.is_finite() || !loc.1.is_finite() {
        return Err(domain(format!("non-finite sampling location {loc:?}")));
    }
    let taps = bilinear_taps(h, w, loc.0, loc.1);
    let mut out = vec![0.0; c];
    for &(idx, wt, _, _) in &taps.taps[..taps.count] {
        let texel = &map.data()[idx * c..(idx + 1) * c];
        for (o, v) in out.iter_mut().zip(texel) {
            *o += wt * v;
        }
    }
    Ok(out)
}

pub(crate) fn map_dims(map: &Tensor) -> Result<[usize; 3]> {
    match *map.shape() {
        [h, w, c] if h > 0 && w > 0 => Ok([h, w, c]),
        ref s => Err(shape(format!("expected a [H, W, C] map, got {s:?}"))),
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(domain("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(domain("softmax of non-finite input"));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences and returns the worst coordinate's
/// `|g_analytic - g_fd| / max(1, |g_fd|)`.
///
/// `f` returns `(value, gradient)` at the given point.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(domain(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(domain("function value is not finite at the check point"));
    }
    if analytic.len() != point.len() {
        return Err(shape(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = f(&probe)?.0;
        probe[i] = point[i] - h;
        let down = f(&probe)?.0;
        probe[i] = point[i];
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map2x2() -> Tensor {
        Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn texel_center_hit() {
        let v = bilinear_sample(&map2x2(), (0.25, 0.25)).unwrap();
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn center_of_four_texels() {
        let v = bilinear_sample(&map2x2(), (0.5, 0.5)).unwrap();
        assert!((v[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn outside_unit_square_is_zero() {
        assert_eq!(bilinear_sample(&map2x2(), (-0.5, 0.5)).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&map2x2(), (0.5, 1.01)).unwrap(), vec![0.0]);
    }

    #[test]
    fn non_finite_location_rejected() {
        assert!(bilinear_sample(&map2x2(), (f64::NAN, 0.5)).is_err());
        assert!(bilinear_sample(&map2x2(), (0.5, f64::INFINITY)).is_err());
    }

    #[test]
    fn interior_tap_weights_sum_to_one() {
        let taps = bilinear_taps(5, 7, 0.41, 0.63);
        assert_eq!(taps.count, 4);
        let s: f64 = taps.taps.iter().map(|t| t.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = softmax(&[0.0, 0.0, 2f64.ln()]).unwrap();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[2] - 0.5).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(|p| Ok((p[0] * p[0], vec![2.0 * p[0]])), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_weighted_softmax() {
        // f(v) = c . softmax(v); df/dv_i = s_i (c_i - c . s)
        let c = [0.3, -1.2, 2.0, 0.7];
        let f = |v: &[f64]| {
            let s = softmax(v)?;
            let dot: f64 = s.iter().zip(&c).map(|(a, b)| a * b).sum();
            let g = s.iter().zip(&c).map(|(si, ci)| si * (ci - dot)).collect();
            Ok((dot, g))
        };
        let err = grad_check(f, &[0.1, -0.4, 0.9, 0.0], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step_and_nan() {
        let f = |p: &[f64]| Ok((p[0], vec![1.0]));
        assert!(grad_check(f, &[0.0], 1e-2).is_err());
        let nan = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(grad_check(nan, &[0.0], 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn softmax_permutation_equivariant(v in prop::collection::vec(-10.0f64..10.0, 2..10), seed in 0u64..1000) {
            let n = v.len();
            let perm: Vec<usize> = (0..n).map(|i| (i * (2 * (seed as usize) + 1) + seed as usize) % n).collect();
            let mut seen = vec![false; n];
            let bijective = perm.iter().all(|&p| !std::mem::replace(&mut seen[p], true));
            prop_assume!(bijective);
            let pv: Vec<f64> = perm.iter().map(|&p| v[p]).collect();
            let s = softmax(&v).unwrap();
            let ps = softmax(&pv).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((ps[i] - s[p]).abs() < 1e-14);
            }
        }

        #[test]
        fn bilinear_linear_between_centers(vals in prop::collection::vec(-5.0f64..5.0, 6), t in 0.0f64..1.0, i in 0usize..5) {
            // 1 x 6 map: along x, the sample between texel centers i and i+1 is the lerp.
            let map = Tensor::new(vec![1, 6, 1], vals.clone()).unwrap();
            let x = (i as f64 + 0.5 + t) / 6.0;
            let s = bilinear_sample(&map, (x, 0.5)).unwrap()[0];
            let expect = vals[i] * (1.0 - t) + vals[i + 1] * t;
            prop_assert!((s - expect).abs() < 1e-12);
        }
    }
}
