//! Sampling helpers and special functions shared by the model and sampler.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tail mass below which truncated-gamma draws switch from inverse-CDF to rejection.
const TAIL_REJECTION_THRESHOLD: f64 = 1e-12;

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, precision: f64) -> f64 {
    let d = x - mean;
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * d * d
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Draws an index from unnormalized log-weights.
pub fn sample_log_categorical<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Option<usize> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = None;
    for (j, lw) in log_weights.iter().enumerate() {
        let p = (lw - lse).exp();
        if p > 0.0 {
            last_positive = Some(j);
        }
        acc += p;
        if u < acc {
            return Some(j);
        }
    }
    last_positive
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, variance: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + variance.sqrt() * z
}

/// Gamma draw parameterized by shape and rate.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma shape and rate must be positive")
        .sample(rng)
}

/// Log of a Gamma(shape, 1) draw; stays finite for shapes well below one.
pub fn sample_log_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape >= 1.0 {
        sample_gamma(rng, shape, 1.0).ln()
    } else {
        let g = sample_gamma(rng, shape + 1.0, 1.0);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    }
}

pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(rng, a)).collect();
    let lse = log_sum_exp(&logs);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Beta draw kept strictly inside (0, 1).
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let la = sample_log_gamma(rng, a);
    let lb = sample_log_gamma(rng, b);
    let x = (la - log_sum_exp(&[la, lb])).exp();
    x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Exponential integral E1(x) for x > 0.
pub fn exp_integral_e1(x: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 0.0 {
        return f64::INFINITY;
    }
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        -EULER - x.ln() - sum
    } else {
        // Lentz continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// Unnormalized upper tail of x^(a-1) e^(-x) from `x`: Q(a, x) for a > 0, E1(x) for a = 0.
fn upper_tail(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return if shape > 0.0 { 1.0 } else { f64::INFINITY };
    }
    if shape > 0.0 {
        gamma_ur(shape, x)
    } else {
        exp_integral_e1(x)
    }
}

fn lower_tail(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, x)
    }
}

/// Draws from Gamma(shape, rate) restricted to (lower, inf).
///
/// `shape` may be zero (density x^-1 e^(-rate x)) as long as `lower > 0`.
/// Inverse-CDF on the regularized incomplete gamma, with a rejection sampler
/// for truncation points deep in the upper tail.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(
    rng: &mut R,
    shape: f64,
    rate: f64,
    lower: f64,
) -> Result<f64> {
    if !(shape >= 0.0 && rate > 0.0 && lower >= 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::InvalidState(format!(
            "truncated gamma needs shape >= 0, rate > 0, lower >= 0 (got {shape}, {rate}, {lower})"
        )));
    }
    if lower == 0.0 {
        if shape == 0.0 {
            return Err(Error::InvalidState("improper gamma: zero shape without truncation".into()));
        }
        return Ok(sample_gamma(rng, shape, rate));
    }
    if !lower.is_finite() {
        return Err(Error::InvalidState("truncation point is not finite".into()));
    }
    let z = rate * lower;
    let tail = upper_tail(shape, z);
    let tail_normalized = if shape > 0.0 { tail } else { 1.0 };
    if tail_normalized < TAIL_REJECTION_THRESHOLD || !tail.is_finite() || tail == 0.0 {
        return Ok(tail_rejection(rng, shape, rate, lower));
    }

    let u: f64 = rng.random::<f64>();
    let u = u.max(f64::MIN_POSITIVE);
    let log_norm = if shape > 0.0 { ln_gamma(shape) } else { 0.0 };
    let log_density = |y: f64| (shape - 1.0) * y.ln() - y - log_norm;
    let y = if shape > 0.0 && u * tail > 0.5 {
        // Solve via the lower tail for precision when the target sits near the truncation point.
        let target = lower_tail(shape, z) + (1.0 - u) * tail;
        invert_increasing(z, shape, |y| lower_tail(shape, y) - target, log_density)
    } else {
        let target = u * tail;
        invert_increasing(z, shape, |y| target - upper_tail(shape, y), log_density)
    };
    Ok(y / rate)
}

/// Root of an increasing `g` on [z, inf) with g(z) <= 0, by Newton steps
/// safeguarded with a shrinking bracket. `log_slope` is log g'(y).
fn invert_increasing<G, D>(z: f64, shape: f64, g: G, log_slope: D) -> f64
where
    G: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut lo = z;
    let mut hi = (z.max(shape) + 1.0) * 2.0;
    let mut guard = 0;
    while g(hi) < 0.0 && guard < 2000 {
        lo = hi;
        hi *= 2.0;
        guard += 1;
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gy = g(y);
        if gy == 0.0 {
            return y;
        }
        if gy < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
        let step = gy / log_slope(y).exp();
        let candidate = y - step;
        y = if candidate.is_finite() && candidate > lo && candidate < hi {
            if step.abs() <= 1e-15 * y.abs() {
                return candidate;
            }
            candidate
        } else if lo > 0.0 && hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
    }
    y
}

/// Exponential-envelope rejection for x^(a-1) e^(-rate x) on (lower, inf).
fn tail_rejection<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64, lower: f64) -> f64 {
    let env_rate = if shape > 1.0 {
        let r = rate - (shape - 1.0) / lower;
        if r > 0.0 {
            r
        } else {
            rate * 0.5
        }
    } else {
        rate
    };
    let exp = Exp::new(env_rate).expect("positive envelope rate");
    loop {
        let x = lower + exp.sample(rng);
        let log_ratio = if shape > 1.0 {
            let slope = rate - env_rate;
            let peak = ((shape - 1.0) / slope).max(lower);
            let h = |v: f64| (shape - 1.0) * v.ln() - slope * v;
            h(x) - h(peak)
        } else {
            (shape - 1.0) * (x / lower).ln()
        };
        let u: f64 = rng.random();
        if u.ln() <= log_ratio.min(0.0) {
            return x;
        }
    }
}
