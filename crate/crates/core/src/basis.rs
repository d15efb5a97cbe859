//! Kaiser-Bessel window ("blob") basis functions.
//!
//! A blob of radius `a`, taper `α` and order `m` is
//!
//! ```text
//! β(r) = z^m · I_m(α z) / I_m(α),   z = sqrt(1 - (r/a)²),   r ≤ a
//! ```
//!
//! and its integral along a line passing at distance `s` from the centre has
//! the closed form
//!
//! ```text
//! p(s) = (a / I_m(α)) · sqrt(2π/α) · z^(m+½) · I_(m+½)(α z),   z = sqrt(1 - (s/a)²).
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per footprint table; the table has `FOOTPRINT_SAMPLES + 1` entries on `[0, a]`.
pub const FOOTPRINT_SAMPLES: usize = 4096;

/// Samples of the footprint on a uniform grid in `s²` over `[0, a²]`.
pub(crate) const SQUARED_SAMPLES: usize = 4096;

/// Modified Bessel function of the first kind, `I_ν(x)`, for `ν ∈ {0, ½, 1, 3/2, …}`.
///
/// Evaluated by its power series. All terms are positive, so there is no
/// cancellation; the series is accurate for the moderate arguments blobs use.
pub fn bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && (2.0 * nu).fract() == 0.0);
    if x == 0.0 {
        return if nu == 0.0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x.abs();
    let mut term = half.powf(nu) / gamma_plus_one(nu);
    let q = half * half;
    let mut sum = term;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + nu));
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum
}

/// `Γ(ν + 1)` for non-negative integer or half-integer `ν`.
fn gamma_plus_one(nu: f64) -> f64 {
    // Walk down from ν+1 to either Γ(1) = 1 or Γ(½) = √π.
    let mut z = nu + 1.0;
    let mut acc = 1.0;
    while z > 1.0 {
        z -= 1.0;
        acc *= z;
    }
    if (z - 0.5).abs() < 1e-12 {
        acc * std::f64::consts::PI.sqrt()
    } else {
        acc
    }
}

/// Parameters of a blob, as stored in geometry and volume sidecars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    /// Support radius in world units.
    pub radius: f64,
    pub alpha: f64,
    pub order: u32,
}

impl BlobParams {
    /// `m = 2`, `α = 10.8`, `a = 2h`.
    pub fn default_for_spacing(spacing: f64) -> Self {
        BlobParams {
            radius: 2.0 * spacing,
            alpha: 10.8,
            order: 2,
        }
    }
}

/// A blob together with a tabulated line-integral footprint.
#[derive(Debug, Clone)]
pub struct BlobProfile {
    params: BlobParams,
    norm: f64,
    table: Vec<f64>,
    inv_step: f64,
    sq_table: Vec<f64>,
    inv_sq_step: f64,
}

impl BlobProfile {
    pub fn new(params: BlobParams) -> Result<Self> {
        let BlobParams {
            radius,
            alpha,
            order,
        } = params;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("blob radius {radius} must be > 0")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("blob taper {alpha} must be > 0")));
        }
        if order < 1 {
            return Err(Error::InvalidParameter("blob order must be >= 1".into()));
        }
        let mut profile = BlobProfile {
            params,
            norm: bessel_i(order as f64, alpha),
            table: Vec::new(),
            inv_step: FOOTPRINT_SAMPLES as f64 / radius,
            sq_table: Vec::new(),
            inv_sq_step: SQUARED_SAMPLES as f64 / (radius * radius),
        };
        let step = radius / FOOTPRINT_SAMPLES as f64;
        profile.table = (0..=FOOTPRINT_SAMPLES)
            .map(|i| profile.xray(i as f64 * step))
            .collect();
        // Guarantee exact compact support regardless of rounding in the last sample.
        profile.table[FOOTPRINT_SAMPLES] = 0.0;
        let sq_step = radius * radius / SQUARED_SAMPLES as f64;
        // Two trailing zeros let `footprint_sq` interpolate without a bounds branch.
        profile.sq_table = (0..SQUARED_SAMPLES)
            .map(|i| profile.xray((i as f64 * sq_step).sqrt()))
            .chain([0.0, 0.0])
            .collect();
        Ok(profile)
    }

    pub fn params(&self) -> BlobParams {
        self.params
    }

    pub fn radius(&self) -> f64 {
        self.params.radius
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Blob value at distance `r` from its centre.
    pub fn value(&self, r: f64) -> f64 {
        let a = self.params.radius;
        let r = r.abs();
        if r >= a {
            return 0.0;
        }
        let z = (1.0 - (r / a).powi(2)).sqrt();
        let m = self.params.order as f64;
        z.powf(m) * bessel_i(m, self.params.alpha * z) / self.norm
    }

    /// Exact line integral through the blob at perpendicular offset `s`.
    pub fn xray(&self, s: f64) -> f64 {
        let a = self.params.radius;
        let s = s.abs();
        if s >= a {
            return 0.0;
        }
        let alpha = self.params.alpha;
        let z = (1.0 - (s / a).powi(2)).sqrt();
        let nu = self.params.order as f64 + 0.5;
        a / self.norm
            * (std::f64::consts::TAU / alpha).sqrt()
            * z.powf(nu)
            * bessel_i(nu, alpha * z)
    }

    /// Tabulated line integral with linear interpolation.
    #[inline]
    pub fn footprint(&self, s: f64) -> f64 {
        let x = s.abs() * self.inv_step;
        let i = x as usize;
        if i >= FOOTPRINT_SAMPLES {
            return 0.0;
        }
        let f = x - i as f64;
        let lo = self.table[i];
        lo + f * (self.table[i + 1] - lo)
    }

    /// The `s²` table and its inverse step, for callers that fold their own
    /// unit scaling into the lookup.
    pub fn squared_table(&self) -> (&[f64], f64) {
        (&self.sq_table, self.inv_sq_step)
    }

    /// Footprint as a function of the squared offset, tabulated uniformly in
    /// `s²`. This is the projector's hot path: no square root per pixel.
    #[inline(always)]
    pub fn footprint_sq(&self, s2: f64) -> f64 {
        let x = s2 * self.inv_sq_step;
        let i = (x as usize).min(SQUARED_SAMPLES);
        let f = x - i as f64;
        let lo = self.sq_table[i];
        lo + f * (self.sq_table[i + 1] - lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_blob() -> BlobProfile {
        BlobProfile::new(BlobParams::default_for_spacing(1.0)).unwrap()
    }

    fn simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb) = (f(lo), f(hi));
        let fm = f(0.5 * (lo + hi));
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, lo, hi, fa, fm, fb, whole, tol, 40)
    }

    /// `I_m(x) = (1/π) ∫₀^π exp(x cos θ) cos(mθ) dθ`, integer `m`.
    fn bessel_integral(m: u32, x: f64) -> f64 {
        let f = |t: f64| (x * t.cos()).exp() * (m as f64 * t).cos();
        simpson(&f, 0.0, std::f64::consts::PI, 20_000) / std::f64::consts::PI
    }

    fn line_quadrature(blob: &BlobProfile, s: f64) -> f64 {
        let a = blob.radius();
        let half = (a * a - s * s).max(0.0).sqrt();
        let f = |tau: f64| blob.value((s * s + tau * tau).sqrt());
        adaptive_simpson(&f, -half, half, 1e-13)
    }

    #[test]
    fn half_integer_bessel_matches_closed_form() {
        // I_{1/2}(x) = sqrt(2/(πx)) sinh x
        for x in [0.1, 1.0, 5.0, 10.8] {
            let expect = (2.0 / (std::f64::consts::PI * x)).sqrt() * f64::sinh(x);
            assert!((bessel_i(0.5, x) - expect).abs() / expect < 1e-13);
        }
        // I_{5/2}(x) = sqrt(2/(πx)) [ (1 + 3/x²) sinh x - (3/x) cosh x ]
        for x in [0.5, 2.0, 10.8] {
            let expect = (2.0 / (std::f64::consts::PI * x)).sqrt()
                * ((1.0 + 3.0 / (x * x)) * x.sinh() - 3.0 / x * x.cosh());
            assert!((bessel_i(2.5, x) - expect).abs() / expect < 1e-12);
        }
    }

    #[test]
    fn integer_bessel_matches_integral_representation() {
        for m in 0..4 {
            for x in [0.3, 2.0, 7.5, 10.8] {
                let expect = bessel_integral(m, x);
                assert!((bessel_i(m as f64, x) - expect).abs() / expect < 1e-10, "m={m} x={x}");
            }
        }
    }

    #[test]
    fn blob_boundary_and_centre() {
        let blob = default_blob();
        assert_eq!(blob.value(blob.radius()), 0.0);
        assert!((blob.value(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(blob.value(3.0 * blob.radius()), 0.0);
    }

    #[test]
    fn blob_half_radius_matches_bessel_oracle() {
        let blob = default_blob();
        let a = blob.radius();
        let z: f64 = (1.0 - 0.25f64).sqrt();
        let expect = z.powi(2) * bessel_integral(2, 10.8 * z) / bessel_integral(2, 10.8);
        assert!((blob.value(0.5 * a) - expect).abs() / expect < 1e-9);
    }

    #[test]
    fn profile_support_and_symmetry() {
        let blob = default_blob();
        let a = blob.radius();
        assert_eq!(blob.xray(a), 0.0);
        assert_eq!(blob.xray(-a), 0.0);
        assert_eq!(blob.footprint(a), 0.0);
        for s in [0.1, 0.77, 1.9] {
            assert_eq!(blob.xray(s), blob.xray(-s));
            assert_eq!(blob.footprint(s), blob.footprint(-s));
        }
    }

    #[test]
    fn profile_matches_quadrature_at_point_three() {
        for order in [1, 2, 3] {
            let blob = BlobProfile::new(BlobParams {
                radius: 2.0,
                alpha: 10.8,
                order,
            })
            .unwrap();
            let s = 0.3 * blob.radius();
            let q = line_quadrature(&blob, s);
            let rel = (blob.xray(s) - q).abs() / q;
            assert!(rel < 1e-6, "order {order}: rel err {rel}");
        }
    }

    #[test]
    fn profile_matches_quadrature_at_random_offsets() {
        let blob = default_blob();
        let a = blob.radius();
        let p0 = blob.xray(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = rng.gen_range(-a..a);
            let err = (blob.xray(s) - line_quadrature(&blob, s)).abs() / p0;
            assert!(err < 1e-6, "s={s}: {err}");
        }
    }

    #[test]
    fn table_tracks_closed_form() {
        let blob = default_blob();
        let a = blob.radius();
        let p0 = blob.xray(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let worst = (0..10_000)
            .map(|_| {
                let s = rng.gen_range(-1.1 * a..1.1 * a);
                (blob.footprint(s) - blob.xray(s)).abs() / p0
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "worst {worst}");
    }

    #[test]
    fn squared_table_tracks_closed_form() {
        let blob = default_blob();
        let a = blob.radius();
        let p0 = blob.xray(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let worst = (0..10_000)
            .map(|_| {
                let s: f64 = rng.gen_range(0.0..1.2 * a);
                (blob.footprint_sq(s * s) - blob.xray(s)).abs() / p0
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "worst {worst}");
        assert_eq!(blob.footprint_sq(a * a), 0.0);
        assert_eq!(blob.footprint_sq(4.0 * a * a), 0.0);
    }

    #[test]
    fn table_is_monotone_and_dense() {
        let blob = default_blob();
        assert!(blob.table().len() > 512);
        assert!(blob.table().windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*blob.table().last().unwrap(), 0.0);
    }

    #[test]
    fn rejects_degenerate_parameters() {
        let ok = BlobParams::default_for_spacing(1.0);
        assert!(BlobProfile::new(BlobParams { radius: 0.0, ..ok }).is_err());
        assert!(BlobProfile::new(BlobParams { alpha: -1.0, ..ok }).is_err());
        assert!(BlobProfile::new(BlobParams { order: 0, ..ok }).is_err());
    }
}
