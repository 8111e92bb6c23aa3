#![allow(dead_code)]

use std::collections::HashMap;

use mlpp::hyperparams::{ClusterPrior, HyperParams};
use mlpp::sampler::Problem;
use mlpp::Group;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Every set partition of n items as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, next: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for l in 0..=next {
            prefix.push(l);
            rec(prefix, n, next.max(l + 1), out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), n, 0, &mut out);
    out
}

/// ARI from explicit enumeration of item pairs.
pub fn brute_ari(p: &[usize], q: &[usize]) -> f64 {
    let n = p.len();
    let (mut both, mut in_p, mut in_q, mut pairs) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for a in 0..n {
        for b in a + 1..n {
            pairs += 1.0;
            let sp = p[a] == p[b];
            let sq = q[a] == q[b];
            in_p += sp as u8 as f64;
            in_q += sq as u8 as f64;
            both += (sp && sq) as u8 as f64;
        }
    }
    let expected = if pairs > 0.0 { in_p * in_q / pairs } else { 0.0 };
    let max = 0.5 * (in_p + in_q);
    if max == expected {
        let same = (0..n).all(|a| (0..n).all(|b| (p[a] == p[b]) == (q[a] == q[b])));
        return if same { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

fn entropy_bits(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let f = c as f64 / n;
            -f * f.log2()
        })
        .sum()
}

/// VI = 2 H(P, Q) - H(P) - H(Q), in bits.
pub fn brute_vi(p: &[usize], q: &[usize]) -> f64 {
    let n = p.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mp: HashMap<usize, usize> = HashMap::new();
    let mut mq: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in p.iter().zip(q) {
        *joint.entry((a, b)).or_default() += 1;
        *mp.entry(a).or_default() += 1;
        *mq.entry(b).or_default() += 1;
    }
    2.0 * entropy_bits(joint.into_values(), n) - entropy_bits(mp.into_values(), n) - entropy_bits(mq.into_values(), n)
}

/// Asymptotic Kolmogorov survival function P(K > x).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS statistic and asymptotic p-value.
pub fn ks_test(xs: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sqn = n.sqrt();
    (d, kolmogorov_sf((sqn + 0.12 + 0.11 / sqn) * d))
}

pub fn ar1(rng: &mut ChaCha8Rng, rho: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = normal.sample(rng);
    (0..n)
        .map(|_| {
            let out = x;
            x = rho * x + innov * normal.sample(rng);
            out
        })
        .collect()
}

/// Hand-set hyperparameters with proper priors everywhere.
pub fn small_hyperparams(k: usize, j_s: usize) -> HyperParams {
    let prior = |mean: f64| ClusterPrior {
        mean,
        h_inv: 4.0,
        gamma: 2.0,
    };
    HyperParams {
        k,
        j_s,
        common: vec![prior(0.0); k],
        group: vec![[prior(2.0), prior(-2.0)]; k],
        subject: vec![[prior(1.0), prior(-1.0)]; k],
        delta: [0.45, 0.45, 0.1],
        alpha: vec![1.0; k],
        tau_shape: 3.0,
        tau_rate: 3.0,
        recipe: None,
    }
}

/// Orthonormal (Euclidean) sine modes on t points.
pub fn sine_modes(t: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|m| {
            let v: Vec<f64> = (0..t)
                .map(|j| ((m + 1) as f64 * std::f64::consts::PI * (j as f64 + 0.5) / t as f64).sin())
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn alternating_groups(n_subjects: usize) -> Vec<Group> {
    (0..n_subjects).map(|u| if u % 2 == 0 { Group::A } else { Group::B }).collect()
}

/// Random centred curves around random scores on `phi`.
pub fn random_problem(rng: &mut ChaCha8Rng, u: usize, n: usize, t: usize, k: usize, j_s: usize) -> Problem {
    let phi = sine_modes(t, k);
    let groups = alternating_groups(u);
    let mut centred = Vec::with_capacity(u * n * t);
    for _ in 0..u * n {
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        for j in 0..t {
            let s: f64 = scores.iter().zip(&phi).map(|(x, p)| x * p[j]).sum();
            centred.push(s + rng.random_range(-0.5..0.5));
        }
    }
    Problem::new(centred, u, n, phi, groups, small_hyperparams(k, j_s), None).unwrap()
}

/// Curves generated from `xi` on `phi` with Gaussian noise of precision `tau`.
pub fn curves_from_scores(rng: &mut ChaCha8Rng, xi: &[f64], phi: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let k = phi.len();
    let t = phi[0].len();
    let noise = Normal::new(0.0, tau.powf(-0.5)).unwrap();
    let mut out = Vec::with_capacity(xi.len() / k * t);
    for c in xi.chunks_exact(k) {
        for j in 0..t {
            let s: f64 = c.iter().zip(phi).map(|(x, p)| x * p[j]).sum();
            out.push(s + noise.sample(rng));
        }
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}
