//! Special functions: log-gamma, regularized incomplete gamma, chi-squared and
//! standard normal distribution/quantile functions, and the Kolmogorov tail.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 1_000_000;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Lanczos coefficients, g = 7, n = 9.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    if x >= 10.0 {
        return (x - 0.5) * x.ln() - x + LN_SQRT_2PI + stirling_tail(x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + 7.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln Γ(a) - [(a - 1/2) ln a - a + ln √(2π)]`, valid for `a >= 10`.
fn stirling_tail(a: f64) -> f64 {
    let inv = 1.0 / a;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0
        - inv2
            * (1.0 / 360.0
                - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))))
}

/// `t - ln(1 + t)` without cancellation near zero.
fn t_minus_log1p(t: f64) -> f64 {
    if t.abs() < 0.5 {
        let mut power = t * t;
        let mut sum = 0.0;
        let mut k = 2.0;
        loop {
            let term = power / k;
            sum += term;
            if term.abs() <= EPS * sum.abs() {
                break;
            }
            power *= -t;
            k += 1.0;
        }
        sum
    } else {
        t - t.ln_1p()
    }
}

/// `x^a e^{-x} / Γ(a)`, the common prefactor of both incomplete gamma branches.
fn gamma_prefix(a: f64, x: f64) -> f64 {
    if a < 10.0 {
        (a * x.ln() - x - ln_gamma(a)).exp()
    } else {
        let t = (x - a) / a;
        (-a * t_minus_log1p(t) + 0.5 * (a / (2.0 * PI)).ln() - stirling_tail(a)).exp()
    }
}

/// Series for `P(a, x) / prefix`, convergent for all x, used when `x < a + 1`.
fn gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..MAX_ITER {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() <= sum.abs() * EPS {
            break;
        }
    }
    sum
}

/// Continued fraction for `Q(a, x) / prefix` (modified Lentz), used when `x >= a + 1`.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() <= EPS {
            break;
        }
    }
    h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if x < a + 1.0 {
        gamma_prefix(a, x) * gamma_series(a, x)
    } else {
        1.0 - gamma_prefix(a, x) * gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_prefix(a, x) * gamma_series(a, x)
    } else {
        gamma_prefix(a, x) * gamma_continued_fraction(a, x)
    }
}

pub fn chi2_cdf(dof: f64, x: f64) -> f64 {
    gamma_p(0.5 * dof, 0.5 * x)
}

pub fn chi2_sf(dof: f64, x: f64) -> f64 {
    gamma_q(0.5 * dof, 0.5 * x)
}

pub fn chi2_pdf(dof: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_prefix(0.5 * dof, 0.5 * x) / x
}

/// The `p`-quantile of the chi-squared distribution with `dof` degrees of freedom.
///
/// Newton iteration on the regularized incomplete gamma, started from the
/// Wilson–Hilferty approximation and safeguarded by bisection. The lower tail
/// is used for `p <= 1/2` and the upper tail otherwise.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-squared dof must be >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    let k = dof as f64;
    let a = 0.5 * k;
    let upper = p > 0.5;
    let q = 1.0 - p;
    // f(x) > 0 means x is above the target
    let residual = |x: f64| {
        if upper {
            q - chi2_sf(k, x)
        } else {
            chi2_cdf(k, x) - p
        }
    };

    let z = normal_quantile_rational(p);
    let h = 2.0 / (9.0 * k);
    let wh = k * (1.0 - h + z * h.sqrt()).powi(3);
    let mut x = if wh > 0.0 && (upper || wh > 0.01 * k) {
        wh
    } else {
        // small-x expansion P(a, x/2) ~ (x/2)^a / Γ(a + 1)
        2.0 * ((p.ln() + ln_gamma(a + 1.0)) / a).exp()
    };

    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..300 {
        let f = residual(x);
        if f == 0.0 {
            return Ok(x);
        }
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let pdf = chi2_pdf(k, x);
        let mut next = if pdf > 0.0 { x - f / pdf } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-15 * x {
            break;
        }
    }
    Ok(x)
}

/// `erfc(x)` via `Q(1/2, x^2)`.
pub fn erfc(x: f64) -> f64 {
    if x >= 0.0 {
        gamma_q(0.5, x * x)
    } else {
        2.0 - gamma_q(0.5, x * x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile: rational initializer refined by one Halley step
/// against the complementary error function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    Ok(normal_quantile_refined(p))
}

fn normal_quantile_refined(p: f64) -> f64 {
    if p > 0.5 {
        return -normal_quantile_refined(1.0 - p);
    }
    if p == 0.5 {
        return 0.0;
    }
    let x = normal_quantile_rational(p);
    // lower tail: Φ(x) = Q(1/2, x^2/2) / 2, no cancellation
    let e = 0.5 * gamma_q(0.5, 0.5 * x * x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Wichura's AS 241 (PPND16) rational approximation to the standard normal
/// quantile, accurate to about 1e-16 relative. Also used for sampling.
pub fn normal_quantile_rational(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Asymptotic Kolmogorov survival function `P(K > t)`.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 1.0 {
        // Jacobi theta form converges fast for small t
        let mut s = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            s += (-(j * j) * PI * PI / (8.0 * t * t)).exp();
        }
        1.0 - (2.0 * PI).sqrt() / t * s
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * t * t).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// One-sample Kolmogorov–Smirnov test: returns `(D, p-value)`.
///
/// The p-value uses Stephens' finite-sample correction of the asymptotic law.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if sample.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sqrt_n = n.sqrt();
    let t = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok((d, kolmogorov_sf(t)))
}
