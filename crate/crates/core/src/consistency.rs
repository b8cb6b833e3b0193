//! Gaussian-kernel maximum mean discrepancy between two feature batches.
//!
//! The default estimator is the biased V-statistic with the `i = j` terms
//! kept:
//!
//! ```text
//! MMD^2 = 1/ns^2 sum k(s_i, s_j) + 1/nt^2 sum k(t_i, t_j) - 2/(ns nt) sum k(s_i, t_j)
//! k(x, y) = exp(-|x - y|^2 / (2 sigma^2))
//! ```
//!
//! Sums run in a fixed order so results are bitwise reproducible.

use crate::error::{Error, Result};

/// `n` latent vectors of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    n: usize,
    d: usize,
    rows: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(n: usize, d: usize, rows: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("feature batch needs at least one row"));
        }
        if rows.len() != n * d {
            return Err(Error::dims(format!(
                "{} values for a {n}x{d} batch",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature batch".into()));
        }
        Ok(Self { n, d, rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dims("feature rows differ in length"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows.iter().map(|v| v * factor).collect(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    sigma: f64,
}

impl KernelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Self { sigma })
        } else {
            Err(Error::invalid(format!("kernel bandwidth {sigma} must be positive")))
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// V-statistic, `i = j` terms included. Always non-negative.
    #[default]
    Biased,
    /// U-statistic, diagonal terms of the within-batch sums dropped.
    Unbiased,
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn kernel_unchecked(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
}

pub fn rbf_kernel(x: &[f64], y: &[f64], kp: &KernelParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dims(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    Ok(kernel_unchecked(x, y, kp.sigma))
}

fn check_pair(zs: &FeatureBatch, zt: &FeatureBatch) -> Result<()> {
    if zs.d != zt.d {
        return Err(Error::dims(format!(
            "feature dimension {} vs {}",
            zs.d, zt.d
        )));
    }
    Ok(())
}

/// Median heuristic over the pooled batch: `sigma^2` is half the median
/// pairwise squared distance. Falls back to `sigma = 1` when that median is
/// below `1e-12`.
pub fn median_bandwidth(zs: &FeatureBatch, zt: &FeatureBatch) -> Result<KernelParams> {
    check_pair(zs, zt)?;
    let pool: Vec<&[f64]> = (0..zs.n)
        .map(|i| zs.row(i))
        .chain((0..zt.n).map(|i| zt.row(i)))
        .collect();
    if pool.len() < 2 {
        return Err(Error::invalid("median bandwidth needs at least two points"));
    }
    let mut dists = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            dists.push(sq_dist(pool[i], pool[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median < 1e-12 {
        return KernelParams::new(1.0);
    }
    KernelParams::new((median / 2.0).sqrt())
}

fn block_sum(a: &FeatureBatch, b: &FeatureBatch, sigma: f64, skip_diagonal: bool) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.n {
        for j in 0..b.n {
            if skip_diagonal && i == j {
                continue;
            }
            acc += kernel_unchecked(a.row(i), b.row(j), sigma);
        }
    }
    acc
}

/// Biased squared MMD.
pub fn mmd2(zs: &FeatureBatch, zt: &FeatureBatch, kp: &KernelParams) -> Result<f64> {
    mmd2_with(zs, zt, kp, Estimator::Biased)
}

pub fn mmd2_with(
    zs: &FeatureBatch,
    zt: &FeatureBatch,
    kp: &KernelParams,
    estimator: Estimator,
) -> Result<f64> {
    check_pair(zs, zt)?;
    let (ns, nt) = (zs.n as f64, zt.n as f64);
    let cross = block_sum(zs, zt, kp.sigma, false) * 2.0 / (ns * nt);
    match estimator {
        Estimator::Biased => {
            let ss = block_sum(zs, zs, kp.sigma, false) / (ns * ns);
            let tt = block_sum(zt, zt, kp.sigma, false) / (nt * nt);
            // The V-statistic is a squared RKHS norm; clip rounding noise.
            Ok((ss + tt - cross).max(0.0))
        }
        Estimator::Unbiased => {
            if zs.n < 2 || zt.n < 2 {
                return Err(Error::invalid("unbiased MMD needs two rows per batch"));
            }
            let ss = block_sum(zs, zs, kp.sigma, true) / (ns * (ns - 1.0));
            let tt = block_sum(zt, zt, kp.sigma, true) / (nt * (nt - 1.0));
            Ok(ss + tt - cross)
        }
    }
}

/// Gradient of the biased [`mmd2`] with respect to the rows of `zt`
/// (`nt x d`, row-major). The bandwidth is held constant.
pub fn mmd2_grad(zs: &FeatureBatch, zt: &FeatureBatch, kp: &KernelParams) -> Result<Vec<f64>> {
    check_pair(zs, zt)?;
    let (ns, nt, d) = (zs.n as f64, zt.n as f64, zt.d);
    let inv_s2 = 1.0 / (kp.sigma * kp.sigma);
    let mut grad = vec![0.0; zt.n * d];
    for j in 0..zt.n {
        let tj = zt.row(j);
        let g = &mut grad[j * d..(j + 1) * d];
        // d/dt_j k(x, t_j) = k(x, t_j) (x - t_j) / sigma^2
        for k in 0..zt.n {
            let tk = zt.row(k);
            let w = 2.0 / (nt * nt) * kernel_unchecked(tj, tk, kp.sigma) * inv_s2;
            for c in 0..d {
                g[c] += w * (tk[c] - tj[c]);
            }
        }
        for i in 0..zs.n {
            let si = zs.row(i);
            let w = -2.0 / (ns * nt) * kernel_unchecked(si, tj, kp.sigma) * inv_s2;
            for c in 0..d {
                g[c] += w * (si[c] - tj[c]);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, d: usize, rng: &mut impl Rng) -> FeatureBatch {
        FeatureBatch::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kernel_values() {
        let kp = KernelParams::new(0.7).unwrap();
        let x = [0.3, -1.2, 2.0];
        assert_eq!(rbf_kernel(&x, &x, &kp).unwrap(), 1.0);
        let y = [0.3 + 0.7 * 2f64.sqrt(), -1.2, 2.0];
        assert!((rbf_kernel(&x, &y, &kp).unwrap() - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(rbf_kernel(&x, &y, &kp).unwrap(), rbf_kernel(&y, &x, &kp).unwrap());
        assert!(rbf_kernel(&x, &[1.0], &kp).is_err());
        assert!(KernelParams::new(0.0).is_err());
    }

    #[test]
    fn bandwidth_cases() {
        let same = FeatureBatch::new(3, 2, vec![1.0; 6]).unwrap();
        assert_eq!(median_bandwidth(&same, &same).unwrap().sigma(), 1.0);

        let a = FeatureBatch::new(1, 2, vec![0.0, 0.0]).unwrap();
        let b = FeatureBatch::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!((median_bandwidth(&a, &b).unwrap().sigma() - 1.0).abs() < 1e-15);

        let one = FeatureBatch::new(1, 2, vec![0.0, 0.0]).unwrap();
        let none = FeatureBatch { n: 0, d: 2, rows: vec![] };
        assert!(median_bandwidth(&one, &none).is_err());
    }

    #[test]
    fn bandwidth_ignores_pool_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = batch(4, 3, &mut rng);
        let t = batch(5, 3, &mut rng);
        let a = median_bandwidth(&s, &t).unwrap();
        let b = median_bandwidth(&t, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_rows() {
        let kp = KernelParams::new(1.3).unwrap();
        let a = FeatureBatch::new(1, 2, vec![0.1, 0.2]).unwrap();
        let b = FeatureBatch::new(1, 2, vec![-0.4, 0.9]).unwrap();
        let k = rbf_kernel(a.row(0), b.row(0), &kp).unwrap();
        assert!((mmd2(&a, &b, &kp).unwrap() - (2.0 - 2.0 * k)).abs() < 1e-15);
    }

    #[test]
    fn identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = batch(6, 4, &mut rng);
        let kp = KernelParams::new(0.9).unwrap();
        assert!(mmd2(&s, &s, &kp).unwrap().abs() < 1e-12);
        let g = mmd2_grad(&s, &s, &kp).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn unbiased_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = batch(5, 3, &mut rng);
        let t = batch(4, 3, &mut rng);
        let kp = KernelParams::new(1.0).unwrap();
        let u = mmd2_with(&s, &t, &kp, Estimator::Unbiased).unwrap();
        let b = mmd2(&s, &t, &kp).unwrap();
        // Unbiased drops the (positive) diagonal terms.
        assert!(u < b);
        let one = batch(1, 3, &mut rng);
        assert!(mmd2_with(&one, &t, &kp, Estimator::Unbiased).is_err());
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let s = batch(4, 3, &mut rng);
            let t = batch(4, 3, &mut rng);
            let kp = median_bandwidth(&s, &t).unwrap();
            let g = mmd2_grad(&s, &t, &kp).unwrap();
            let h = 1e-5;
            for idx in 0..t.rows.len() {
                let mut plus = t.clone();
                plus.rows[idx] += h;
                let mut minus = t.clone();
                minus.rows[idx] -= h;
                let fd = (mmd2(&s, &plus, &kp).unwrap() - mmd2(&s, &minus, &kp).unwrap()) / (2.0 * h);
                let err = (fd - g[idx]).abs();
                assert!(
                    err < 1e-7 || err / fd.abs().max(g[idx].abs()) < 1e-4,
                    "coord {idx}: fd {fd} analytic {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = batch(4, 3, &mut rng);
        let t = batch(3, 3, &mut rng);
        let kp = KernelParams::new(0.8).unwrap();
        let c = 3.5;
        let kpc = KernelParams::new(0.8 * c).unwrap();
        let (sc, tc) = (s.scaled(c), t.scaled(c));
        assert!((mmd2(&s, &t, &kp).unwrap() - mmd2(&sc, &tc, &kpc).unwrap()).abs() < 1e-12);
        let g = mmd2_grad(&s, &t, &kp).unwrap();
        let gc = mmd2_grad(&sc, &tc, &kpc).unwrap();
        for (a, b) in g.iter().zip(&gc) {
            assert!((a / c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = batch(rng.gen_range(1..6), 3, &mut rng);
            let t = batch(rng.gen_range(1..6), 3, &mut rng);
            let kp = KernelParams::new(rng.gen_range(0.1..3.0)).unwrap();
            let st = mmd2(&s, &t, &kp).unwrap();
            assert!(st >= 0.0);
            assert!((st - mmd2(&t, &s, &kp).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn grows_with_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let other: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let kp = KernelParams::new(1.0).unwrap();
        let s = FeatureBatch::new(20, 1, base).unwrap();
        let mut last = -1.0;
        for shift in [0.0, 1.0, 2.0, 4.0] {
            let t = FeatureBatch::new(20, 1, other.iter().map(|v| v + shift).collect()).unwrap();
            let m = mmd2(&s, &t, &kp).unwrap();
            assert!(m >= last, "shift {shift}: {m} < {last}");
            last = m;
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = FeatureBatch::new(1, 2, vec![0.0; 2]).unwrap();
        let b = FeatureBatch::new(1, 3, vec![0.0; 3]).unwrap();
        let kp = KernelParams::new(1.0).unwrap();
        assert!(mmd2(&a, &b, &kp).is_err());
        assert!(mmd2_grad(&a, &b, &kp).is_err());
        assert!(FeatureBatch::new(0, 2, vec![]).is_err());
    }
}
