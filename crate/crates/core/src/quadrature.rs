//! Adaptive Gauss–Kronrod integration and Gauss–Hermite rules.
//!
//! The adaptive integrator is a globally adaptive bisection scheme on top of
//! the 21-point Kronrod extension of the 10-point Gauss rule. Panels are
//! refined in order of their error estimate until the total estimated error
//! falls below `max(abs_tol, rel_tol * |I|)`. Endpoints are never evaluated,
//! so integrable endpoint singularities are handled by repeated bisection.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_093_763_680,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights for the odd-indexed Kronrod abscissae.
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-300,
            max_panels: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut err = err.abs();
    if res_asc != 0.0 && err != 0.0 {
        let scale = (200.0 * err / res_asc).powf(1.5);
        err = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    err
}

fn gk21<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64) -> Panel {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    let err = rescale_error((res_k - res_g) * half, res_abs * half.abs(), res_asc * half.abs());
    Panel {
        lo,
        hi,
        value,
        error: err,
    }
}

/// Integrates `f` over `[lo, hi]` (finite, `lo <= hi`), splitting first at
/// the given interior `breaks`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    breaks: &[f64],
    cfg: &QuadConfig,
) -> Result<f64> {
    if lo == hi {
        return Ok(0.0);
    }
    debug_assert!(lo < hi, "integrate expects an ordered interval");
    let mut cuts: Vec<f64> = vec![lo];
    cuts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in cuts.windows(2) {
        let p = gk21(&mut f, w[0], w[1]);
        total += p.value;
        total_err += p.error;
        heap.push(p);
    }
    let mut panels = heap.len();
    loop {
        if !total.is_finite() || !total_err.is_finite() {
            let worst = heap.peek().copied().unwrap_or(Panel {
                lo,
                hi,
                value: total,
                error: total_err,
            });
            return Err(Error::QuadratureDivergence {
                lo: worst.lo,
                hi: worst.hi,
                estimate: total,
                error: total_err,
            });
        }
        let target = cfg.abs_tol.max(cfg.rel_tol * total.abs());
        if total_err <= target {
            return Ok(total);
        }
        let worst = match heap.pop() {
            Some(p) => p,
            None => return Ok(total),
        };
        let mid = 0.5 * (worst.lo + worst.hi);
        if panels >= cfg.max_panels || mid <= worst.lo || mid >= worst.hi {
            // Either out of budget or the panel cannot be split further in
            // floating point. Accept a tiny residual error, otherwise fail.
            if total_err <= 1e3 * target {
                return Ok(total);
            }
            return Err(Error::QuadratureDivergence {
                lo: worst.lo,
                hi: worst.hi,
                estimate: total,
                error: total_err,
            });
        }
        let left = gk21(&mut f, worst.lo, mid);
        let right = gk21(&mut f, mid, worst.hi);
        total += left.value + right.value - worst.value;
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        panels += 1;
    }
}

/// Integrates `f` over `[lo, +inf)` via `x = lo + t / (1 - t)`.
pub fn integrate_upper_tail<F: FnMut(f64) -> f64>(mut f: F, lo: f64, cfg: &QuadConfig) -> Result<f64> {
    integrate(
        |t| {
            let u = 1.0 - t;
            let v = f(lo + t / u) / (u * u);
            if v.is_nan() {
                0.0
            } else {
                v
            }
        },
        0.0,
        1.0,
        &[],
        cfg,
    )
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the weight
/// `exp(-x^2)`, computed by Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss–Hermite rule needs at least one node");
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Ascending order is friendlier for callers.
    x.reverse();
    w.reverse();
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, &[], &QuadConfig::default()).unwrap();
        assert!((v - 8.0).abs() < 1e-13);
    }

    #[test]
    fn sqrt_endpoint_singularity() {
        let v = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, &[], &QuadConfig::default()).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn breakpoints_handle_jumps() {
        let f = |x: f64| if x < 0.3 { 1.0 } else { 5.0 };
        let v = integrate(f, 0.0, 1.0, &[0.3], &QuadConfig::default()).unwrap();
        assert!((v - (0.3 + 3.5)).abs() < 1e-12);
    }

    #[test]
    fn nonintegrable_singularity_is_reported() {
        let r = integrate(|x| 1.0 / x, 0.0, 1.0, &[], &QuadConfig::default());
        assert!(matches!(r, Err(Error::QuadratureDivergence { .. })), "{r:?}");
    }

    #[test]
    fn tail_integral() {
        let v = integrate_upper_tail(|x| (-x).exp(), 1.0, &QuadConfig::default()).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn hermite_rule_moments() {
        let (x, w) = gauss_hermite(64);
        let sp = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - sp).abs() < 1e-12);
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-11);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }
}
