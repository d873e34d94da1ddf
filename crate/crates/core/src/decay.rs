//! Remote decay of the rotary inner product.
//!
//! With `h_i = q_i conj(k_i)` (coordinate pairs read as complex numbers) and
//! `S_j = sum_{i<j} exp(i Δ θ_i)`, summation by parts gives
//! `sum h_i (S_{i+1} - S_i) = -sum S_{i+1} (h_{i+1} - h_i)` under the boundary
//! convention `h_{d/2} = 0`, `S_0 = 0`, and hence the bound
//! `|<R_m q, R_n k>| <= max_i |h_{i+1} - h_i| * sum_i |S_{i+1}|`.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Result};
use crate::pos_encoding::{as_complex_pairs, RopeConfig};

/// `h_i = q_[2i:2i+1] conj(k_[2i:2i+1])`.
pub fn pair_products(q: &[f64], k: &[f64]) -> Result<Vec<Complex64>> {
    if q.len() != k.len() || !q.len().is_multiple_of(2) {
        return shape_err(format!(
            "q/k lengths {} and {} must match and be even",
            q.len(),
            k.len()
        ));
    }
    Ok(as_complex_pairs(q)
        .into_iter()
        .zip(as_complex_pairs(k))
        .map(|(a, b)| a * b.conj())
        .collect())
}

/// Partial sums `S_0..=S_len` of `exp(i delta theta_i)`.
pub fn phase_partial_sums(delta: f64, freqs: &[f64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(freqs.len() + 1);
    let mut acc = Complex64::new(0.0, 0.0);
    out.push(acc);
    for &theta in freqs {
        acc += Complex64::from_polar(1.0, delta * theta);
        out.push(acc);
    }
    out
}

/// Both sides of the summation-by-parts identity for the given `h`.
///
/// Returns `(sum h_i (S_{i+1} - S_i), -sum S_{i+1} (h_{i+1} - h_i))`.
pub fn abel_identity_check(h: &[Complex64], delta: f64, cfg: &RopeConfig) -> Result<(Complex64, Complex64)> {
    if h.is_empty() {
        return arg_err("abel identity needs at least one term");
    }
    if h.len() != cfg.freqs().len() {
        return shape_err(format!("expected {} terms, got {}", cfg.freqs().len(), h.len()));
    }
    let s = phase_partial_sums(delta, cfg.freqs());
    let n = h.len();
    let h_at = |i: usize| if i < n { h[i] } else { Complex64::new(0.0, 0.0) };
    let lhs = (0..n).map(|i| h[i] * (s[i + 1] - s[i])).sum();
    let rhs = -(0..n).map(|i| s[i + 1] * (h_at(i + 1) - h_at(i))).sum::<Complex64>();
    Ok((lhs, rhs))
}

/// Returns `(|<R_Δ q, k>|, bound)` for relative distance `delta`.
pub fn decay_bound(q: &[f64], k: &[f64], delta: f64, cfg: &RopeConfig) -> Result<(f64, f64)> {
    if q.len() != cfg.head_dim() {
        return shape_err(format!("expected head dim {}, got {}", cfg.head_dim(), q.len()));
    }
    let h = pair_products(q, k)?;
    let s = phase_partial_sums(delta, cfg.freqs());
    let n = h.len();
    let inner: Complex64 = h
        .iter()
        .zip(cfg.freqs())
        .map(|(hi, &theta)| hi * Complex64::from_polar(1.0, delta * theta))
        .sum();
    let max_step = (0..n)
        .map(|i| {
            let next = if i + 1 < n { h[i + 1] } else { Complex64::new(0.0, 0.0) };
            (next - h[i]).norm()
        })
        .fold(0.0, f64::max);
    let s_mass: f64 = s[1..].iter().map(|z| z.norm()).sum();
    Ok((inner.re.abs(), max_step * s_mass))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Empirical,
    Bound,
}

impl CurveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Empirical => "empirical",
            Self::Bound => "bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurve {
    pub distances: Vec<usize>,
    pub values: Vec<f64>,
    pub kind: CurveKind,
}

impl DecayCurve {
    /// Mean value over distances in `[lo, hi]`.
    pub fn mean_over(&self, lo: usize, hi: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .distances
            .iter()
            .zip(&self.values)
            .filter(|(d, _)| (lo..=hi).contains(*d))
            .map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn value_at(&self, distance: usize) -> Option<f64> {
        self.distances
            .iter()
            .position(|&d| d == distance)
            .map(|i| self.values[i])
    }
}

/// `distance,value,kind` rows for any number of curves, header first.
pub fn curves_to_csv(curves: &[&DecayCurve]) -> String {
    let mut out = String::from("distance,value,kind\n");
    for c in curves {
        for (d, v) in c.distances.iter().zip(&c.values) {
            let _ = writeln!(out, "{d},{v:.12e},{}", c.kind.as_str());
        }
    }
    out
}

fn draw_pairs(d: usize, trials: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let q = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let k = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (q, k)
        })
        .collect()
}

/// Mean `|<R_Δ q, k>|` (and mean bound) for `Δ in 0..max_distance`, with
/// `q, k` drawn i.i.d. standard normal from `seed`.
///
/// Each distance sums its trials in draw order, so results do not depend on
/// the thread schedule.
pub fn decay_curves(
    cfg: &RopeConfig,
    max_distance: usize,
    trials: usize,
    seed: u64,
) -> Result<(DecayCurve, DecayCurve)> {
    if trials == 0 {
        return arg_err("trials must be >= 1");
    }
    let draws = draw_pairs(cfg.head_dim(), trials, seed);
    let hs: Vec<Vec<Complex64>> = draws.iter().map(|(q, k)| pair_products(q, k)).collect::<Result<_>>()?;
    let steps: Vec<f64> = hs
        .iter()
        .map(|h| {
            let n = h.len();
            (0..n)
                .map(|i| {
                    let next = if i + 1 < n { h[i + 1] } else { Complex64::new(0.0, 0.0) };
                    (next - h[i]).norm()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let per_distance: Vec<(f64, f64)> = (0..max_distance)
        .into_par_iter()
        .map(|dist| {
            let phases: Vec<Complex64> = cfg
                .freqs()
                .iter()
                .map(|&t| Complex64::from_polar(1.0, dist as f64 * t))
                .collect();
            let s_mass: f64 = phase_partial_sums(dist as f64, cfg.freqs())[1..]
                .iter()
                .map(|z| z.norm())
                .sum();
            let mut emp = 0.0;
            let mut bnd = 0.0;
            for (h, step) in hs.iter().zip(&steps) {
                let re: f64 = h.iter().zip(&phases).map(|(a, b)| (a * b).re).sum();
                emp += re.abs();
                bnd += step * s_mass;
            }
            (emp / trials as f64, bnd / trials as f64)
        })
        .collect();
    let distances: Vec<usize> = (0..max_distance).collect();
    Ok((
        DecayCurve {
            distances: distances.clone(),
            values: per_distance.iter().map(|p| p.0).collect(),
            kind: CurveKind::Empirical,
        },
        DecayCurve {
            distances,
            values: per_distance.iter().map(|p| p.1).collect(),
            kind: CurveKind::Bound,
        },
    ))
}

pub fn empirical_decay_curve(cfg: &RopeConfig, max_distance: usize, trials: usize, seed: u64) -> Result<DecayCurve> {
    Ok(decay_curves(cfg, max_distance, trials, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pos_encoding::rope_inner_product;
    use rand::Rng;

    fn random_h(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect()
    }

    #[test]
    fn zero_h_gives_zero_sides() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let (l, r) = abel_identity_check(&[Complex64::new(0.0, 0.0); 4], 17.0, &cfg).unwrap();
        assert_eq!((l.norm(), r.norm()), (0.0, 0.0));
        assert!(abel_identity_check(&[], 1.0, &cfg).is_err());
    }

    #[test]
    fn zero_distance_reduces_to_plain_sum() {
        let cfg = RopeConfig::with_default_base(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_h(&mut rng, 8);
        let direct: Complex64 = h.iter().sum();
        let s = phase_partial_sums(0.0, cfg.freqs());
        assert!(s
            .iter()
            .enumerate()
            .all(|(j, z)| (z - Complex64::new(j as f64, 0.0)).norm() < 1e-15));
        let (l, r) = abel_identity_check(&h, 0.0, &cfg).unwrap();
        assert!((l - direct).norm() < 1e-12);
        assert!((r - direct).norm() < 1e-12);
    }

    #[test]
    fn identity_at_large_distance() {
        let cfg = RopeConfig::with_default_base(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_h(&mut rng, 32);
        let (l, r) = abel_identity_check(&h, 100.0, &cfg).unwrap();
        assert!((l - r).norm() <= 1e-10);
        let direct: Complex64 = h
            .iter()
            .zip(cfg.freqs())
            .map(|(hi, &t)| hi * Complex64::from_polar(1.0, 100.0 * t))
            .sum();
        assert!((l - direct).norm() <= 1e-10);
    }

    #[test]
    fn bound_with_zero_vector() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        assert_eq!(decay_bound(&[0.0; 8], &[1.0; 8], 3.0, &cfg).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn bound_at_zero_distance() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let q = [1.0, 2.0, -1.0, 0.5, 0.0, 1.0, 3.0, -2.0];
        let k = [0.5, -1.0, 2.0, 1.0, 1.0, 1.0, -1.0, 0.0];
        let h = pair_products(&q, &k).unwrap();
        let max_step = (0..4)
            .map(|i| (if i < 3 { h[i + 1] } else { Complex64::new(0.0, 0.0) } - h[i]).norm())
            .fold(0.0, f64::max);
        let (inner, bound) = decay_bound(&q, &k, 0.0, &cfg).unwrap();
        assert!((bound - max_step * (1.0 + 2.0 + 3.0 + 4.0)).abs() < 1e-12);
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((inner - dot.abs()).abs() < 1e-12);
    }

    #[test]
    fn bound_never_violated() {
        let cfg = RopeConfig::with_default_base(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            let k: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            let delta = rng.gen_range(0..=4096) as f64;
            let (inner, bound) = decay_bound(&q, &k, delta, &cfg).unwrap();
            assert!(inner <= bound + 1e-9);
        }
    }

    #[test]
    fn empirical_curve_consistency() {
        let cfg = RopeConfig::with_default_base(16).unwrap();
        let curve = empirical_decay_curve(&cfg, 8, 50, 4).unwrap();
        let draws = draw_pairs(16, 50, 4);
        let mean_dot: f64 = draws
            .iter()
            .map(|(q, k)| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>().abs())
            .sum::<f64>()
            / 50.0;
        assert!((curve.values[0] - mean_dot).abs() < 1e-12);
        let at5: f64 = draws
            .iter()
            .map(|(q, k)| rope_inner_product(q, k, 5, 0, &cfg).unwrap().abs())
            .sum::<f64>()
            / 50.0;
        assert!((curve.values[5] - at5).abs() < 1e-12);
        assert_eq!(curve, empirical_decay_curve(&cfg, 8, 50, 4).unwrap());
        assert!(empirical_decay_curve(&cfg, 8, 0, 4).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = DecayCurve {
            distances: vec![0, 1],
            values: vec![1.0, 0.5],
            kind: CurveKind::Empirical,
        };
        let csv = curves_to_csv(&[&c]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "distance,value,kind");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",empirical"));
    }
}
