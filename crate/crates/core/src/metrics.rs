//! Distribution- and shape-level comparison of a generated scenario set
//! against a reference set.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bandwidth {
    /// `γ = 1 / (2·median²)` over pooled pairwise distances; `γ = 1` if the
    /// median is zero.
    MedianHeuristic,
    Fixed {
        gamma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwPairing {
    /// Sort both sets by energy and pair by rank.
    IndexPaired,
    /// Each generated series against its closest reference series.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub kl_bins: usize,
    pub kl_epsilon: f64,
    pub mmd_bandwidth: Bandwidth,
    pub psdd_epsilon: f64,
    pub dtw_pairing: DtwPairing,
    /// Feature map used by the Fréchet distance; always `"identity"`.
    pub fd_features: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            kl_bins: 50,
            kl_epsilon: 1e-10,
            mmd_bandwidth: Bandwidth::MedianHeuristic,
            psdd_epsilon: 1e-12,
            dtw_pairing: DtwPairing::IndexPaired,
            fd_features: "identity".into(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kl_bins < 2 {
            return Err(Error::Config("kl_bins must be at least 2".into()));
        }
        if !(self.kl_epsilon > 0.0 && self.psdd_epsilon > 0.0) {
            return Err(Error::Config("epsilons must be positive".into()));
        }
        if let Bandwidth::Fixed { gamma } = self.mmd_bandwidth {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "kernel gamma {gamma} must be positive"
                )));
            }
        }
        if self.fd_features != "identity" {
            return Err(Error::Config(format!(
                "unknown feature map {}",
                self.fd_features
            )));
        }
        Ok(())
    }
}

fn nonempty(what: &str, set: &[Vec<f64>]) -> Result<()> {
    if set.is_empty() {
        Err(Error::Argument(format!("{what}: empty set")))
    } else {
        Ok(())
    }
}

fn common_len(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<usize> {
    nonempty("real", real)?;
    nonempty("generated", gen)?;
    let l = real[0].len();
    if let Some(s) = real.iter().chain(gen).find(|s| s.len() != l) {
        return Err(Error::Shape(format!(
            "series of length {} among length {l}",
            s.len()
        )));
    }
    Ok(l)
}

/// Histogram probabilities of values in `[0, 1]`; 1.0 falls in the last bin.
pub fn histogram<'a, I: IntoIterator<Item = &'a f64>>(values: I, bins: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; bins];
    let mut n = 0usize;
    for &v in values {
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(Error::Domain(format!("value {v} outside [0, 1]")));
        }
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("histogram of no values".into()));
    }
    counts.iter_mut().for_each(|c| *c /= n as f64);
    Ok(counts)
}

/// `Σ P ln(P/Q)` after adding `epsilon` to every bin and renormalising.
pub fn kl_from_probabilities(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    crate::error::ensure_same_len("kl", p.len(), q.len())?;
    let floor = |v: &[f64]| {
        let total: f64 = v.iter().map(|x| x + epsilon).sum();
        v.iter().map(|x| (x + epsilon) / total).collect::<Vec<_>>()
    };
    let (p, q) = (floor(p), floor(q));
    Ok(p.iter()
        .zip(&q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0))
}

/// KL divergence of the pooled value distributions, real relative to
/// generated.
pub fn kl_divergence(real: &[Vec<f64>], gen: &[Vec<f64>], cfg: &MetricConfig) -> Result<f64> {
    nonempty("real", real)?;
    nonempty("generated", gen)?;
    let p = histogram(real.iter().flatten(), cfg.kl_bins)?;
    let q = histogram(gen.iter().flatten(), cfg.kl_bins)?;
    kl_from_probabilities(&p, &q, cfg.kl_epsilon)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Kernel width the configuration selects for these sets.
pub fn mmd_gamma(real: &[Vec<f64>], gen: &[Vec<f64>], bandwidth: Bandwidth) -> f64 {
    match bandwidth {
        Bandwidth::Fixed { gamma } => gamma,
        Bandwidth::MedianHeuristic => {
            let pooled: Vec<&Vec<f64>> = real.iter().chain(gen).collect();
            let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
            for i in 0..pooled.len() {
                for j in i + 1..pooled.len() {
                    d.push(sq_dist(pooled[i], pooled[j]).sqrt());
                }
            }
            let m = median(d);
            if m > 0.0 {
                1.0 / (2.0 * m * m)
            } else {
                1.0
            }
        }
    }
}

/// Biased (V-statistic) squared MMD with an RBF kernel.
pub fn mmd2(real: &[Vec<f64>], gen: &[Vec<f64>], cfg: &MetricConfig) -> Result<f64> {
    common_len(real, gen)?;
    let gamma = mmd_gamma(real, gen, cfg.mmd_bandwidth);
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += (-gamma * sq_dist(x, y)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(mean_k(real, real) + mean_k(gen, gen) - 2.0 * mean_k(real, gen))
}

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let l = set[0].len();
    let x = DMatrix::from_fn(n, l, |i, j| set[i][j]);
    let mu = DVector::from_fn(l, |j, _| x.column(j).sum() / n as f64);
    let mut c = x.clone();
    for j in 0..l {
        c.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let cov = (c.transpose() * &c) / (n - 1) as f64;
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))
}

/// Eigenvalues below this fraction of the largest are rounding noise.
const EIG_REL_FLOOR: f64 = 1e-12;

fn clipped(values: &DVector<f64>) -> Vec<f64> {
    let top = values.iter().fold(0.0f64, |m, v| m.max(*v));
    values
        .iter()
        .map(|&v| if v > EIG_REL_FLOOR * top { v } else { 0.0 })
        .collect()
}

/// Symmetric square root with eigenvalues floored as in `clipped`.
fn psd_root(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(s.clone())?;
    let root: Vec<f64> = clipped(&e.eigenvalues).iter().map(|v| v.sqrt()).collect();
    Ok(&e.eigenvectors
        * DMatrix::from_diagonal(&DVector::from_vec(root))
        * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to the raw series.
pub fn frechet_distance(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    common_len(real, gen)?;
    if real.len() < 2 || gen.len() < 2 {
        return Err(Error::Argument(
            "Fréchet distance needs two samples per set".into(),
        ));
    }
    let (mu_r, s_r) = moments(real);
    let (mu_g, s_g) = moments(gen);
    let root_r = psd_root(&s_r)?;
    let root_g = psd_root(&s_g)?;
    // tr sqrt(R Σ_g R) is the nuclear norm of Σ_g^{1/2} R; the SVD avoids squaring small eigenvalues.
    let cross: f64 = (&root_g * &root_r).singular_values().iter().sum();
    let fd = (mu_r - mu_g).norm_squared() + s_r.trace() + s_g.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Dynamic time warping distance with `|a − b|` cost.
pub fn dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("DTW of an empty sequence".into()));
    }
    let m = y.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for a in x {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            cur[j] = (a - y[j - 1]).abs() + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Mean DTW over pairs chosen by `pairing`.
pub fn dtw_mean(real: &[Vec<f64>], gen: &[Vec<f64>], pairing: DtwPairing) -> Result<f64> {
    nonempty("real", real)?;
    nonempty("generated", gen)?;
    let mut total = 0.0;
    match pairing {
        DtwPairing::IndexPaired => {
            let by_energy = |s: &[Vec<f64>]| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| energy(&s[a]).total_cmp(&energy(&s[b])).then(a.cmp(&b)));
                idx
            };
            let (ri, gi) = (by_energy(real), by_energy(gen));
            for (k, &g) in gi.iter().enumerate() {
                let r = ri[k * real.len() / gen.len()];
                total += dtw(&real[r], &gen[g])?;
            }
        }
        DtwPairing::Nearest => {
            for g in gen {
                let mut best = f64::INFINITY;
                for r in real {
                    best = best.min(dtw(r, g)?);
                }
                total += best;
            }
        }
    }
    Ok(total / gen.len() as f64)
}

/// One-sided power spectrum `|F(x)_k|²`, `k = 0..=L/2`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn log_mean_spectrum(set: &[Vec<f64>], eps: f64) -> Vec<f64> {
    let mut acc = vec![0.0; set[0].len() / 2 + 1];
    for s in set {
        for (a, p) in acc.iter_mut().zip(power_spectrum(s)) {
            *a += p;
        }
    }
    acc.iter()
        .map(|a| (a / set.len() as f64 + eps).ln())
        .collect()
}

/// Squared distance between log-average power spectra.
pub fn psdd(real: &[Vec<f64>], gen: &[Vec<f64>], cfg: &MetricConfig) -> Result<f64> {
    common_len(real, gen)?;
    let a = log_mean_spectrum(real, cfg.psdd_epsilon);
    let b = log_mean_spectrum(gen, cfg.psdd_epsilon);
    Ok(sq_dist(&a, &b))
}

/// Mean absolute first difference.
pub fn marr(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Argument("ramp rate needs two points".into()));
    }
    Ok(x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (x.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kl: f64,
    pub mmd2: f64,
    /// `None` when a set has fewer than two series.
    pub fd: Option<f64>,
    pub dtw_mean: f64,
    pub psdd: f64,
    /// Mean ramp rate of the generated set.
    pub marr_mean: f64,
    pub config: MetricConfig,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "kl,mmd2,fd,dtw_mean,psdd,marr_mean";
    pub const NA: &'static str = "NA";

    pub fn to_csv_row(&self) -> String {
        let f = |v: f64| format!("{v:.16e}");
        format!(
            "{},{},{},{},{},{}",
            f(self.kl),
            f(self.mmd2),
            self.fd.map_or(Self::NA.to_string(), f),
            f(self.dtw_mean),
            f(self.psdd),
            f(self.marr_mean)
        )
    }

    pub fn from_csv_row(line: &str, config: MetricConfig) -> Result<Self> {
        let cells: Vec<&str> = line.trim().split(',').collect();
        let err = |reason: String| Error::Format {
            record: "metric row".into(),
            reason,
        };
        if cells.len() != 6 {
            return Err(err(format!("{} cells, expected 6", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s}: {e}")));
        Ok(Self {
            kl: num(cells[0])?,
            mmd2: num(cells[1])?,
            fd: if cells[2] == Self::NA {
                None
            } else {
                Some(num(cells[2])?)
            },
            dtw_mean: num(cells[3])?,
            psdd: num(cells[4])?,
            marr_mean: num(cells[5])?,
            config,
        })
    }
}

/// Every metric of `gen` against `real`.
pub fn evaluate(real: &[Vec<f64>], gen: &[Vec<f64>], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    common_len(real, gen)?;
    let fd = if real.len() < 2 || gen.len() < 2 {
        None
    } else {
        Some(frechet_distance(real, gen)?)
    };
    let mut marr_sum = 0.0;
    for g in gen {
        marr_sum += marr(g)?;
    }
    let report = MetricReport {
        kl: kl_divergence(real, gen, cfg)?,
        mmd2: mmd2(real, gen, cfg)?,
        fd,
        dtw_mean: dtw_mean(real, gen, cfg.dtw_pairing)?,
        psdd: psdd(real, gen, cfg)?,
        marr_mean: marr_sum / gen.len() as f64,
        config: cfg.clone(),
    };
    let values = [
        report.kl,
        report.mmd2,
        report.dtw_mean,
        report.psdd,
        report.marr_mean,
    ];
    if values
        .iter()
        .chain(report.fd.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite metric".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every monotone boundary-anchored warping path, found by
    /// explicit recursion over all paths.
    fn dtw_enumerate(x: &[f64], y: &[f64]) -> f64 {
        fn go(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + (x[i] - y[j]).abs();
            if i == x.len() - 1 && j == y.len() - 1 {
                *best = best.min(acc);
                return;
            }
            if i + 1 < x.len() {
                go(x, y, i + 1, j, acc, best);
            }
            if j + 1 < y.len() {
                go(x, y, i, j + 1, acc, best);
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                go(x, y, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        go(x, y, 0, 0, 0.0, &mut best);
        best
    }

    fn set(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..l).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn kl_examples() {
        let cfg = MetricConfig::default();
        let kl = kl_from_probabilities(&[0.5, 0.5], &[0.25, 0.75], 1e-10).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expect).abs() < 1e-9);
        assert!((kl - 0.14384).abs() < 1e-5);
        let back = kl_from_probabilities(&[0.25, 0.75], &[0.5, 0.5], 1e-10).unwrap();
        assert!((kl - back).abs() > 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = set(&mut rng, 5, 16);
        assert!(kl_divergence(&a, &a, &cfg).unwrap().abs() < 1e-12);
        let low = vec![vec![0.05; 8]];
        let high = vec![vec![0.95; 8]];
        let k = kl_divergence(&low, &high, &cfg).unwrap();
        assert!(k.is_finite() && k > 10.0);
        assert!(matches!(
            kl_divergence(&[vec![1.5]], &low, &cfg),
            Err(Error::Domain(_))
        ));
        assert!(kl_divergence(&[vec![1.0 + 1e-12]], &[vec![1.0]], &cfg).is_ok());
    }

    #[test]
    fn mmd_examples() {
        let fixed = MetricConfig {
            mmd_bandwidth: Bandwidth::Fixed { gamma: 0.5 },
            ..MetricConfig::default()
        };
        let m = mmd2(&[vec![0.0]], &[vec![1.0]], &fixed).unwrap();
        assert!((m - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((m - 0.78694).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = set(&mut rng, 6, 8);
        assert!(mmd2(&a, &a, &MetricConfig::default()).unwrap().abs() < 1e-12);
        // tight clusters far apart: every within-set kernel near 1
        let c1 = vec![vec![0.0; 3]; 4];
        let c2 = vec![vec![50.0; 3]; 4];
        assert!((mmd2(&c1, &c2, &fixed).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(mmd_gamma(&c1, &c1, Bandwidth::MedianHeuristic), 1.0);
    }

    #[test]
    fn fd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = set(&mut rng, 40, 6);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        // 1D: mean 0 var 1 against mean 1 var 4 (unbiased covariance)
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = vec![vec![-h], vec![h]];
        let g = vec![vec![1.0 - 2.0 * h], vec![1.0 + 2.0 * h]];
        assert!((frechet_distance(&r, &g).unwrap() - 2.0).abs() < 1e-9);
        let c = 0.3;
        let shifted: Vec<Vec<f64>> = a
            .iter()
            .map(|s| s.iter().map(|v| v + c).collect())
            .collect();
        let fd = frechet_distance(&a, &shifted).unwrap();
        assert!((fd - 6.0 * c * c).abs() < 1e-8, "{fd}");
        assert!(matches!(
            frechet_distance(&a[..1], &a),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fd_is_symmetric_for_rank_deficient_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = set(&mut rng, 10, 32);
        let b = set(&mut rng, 12, 32);
        let d = frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap();
        assert!(d.abs() < 1e-9, "{d}");
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!((dtw(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(dtw(&[0.1, 0.5, 0.2], &[0.1, 0.5, 0.5, 0.2]).unwrap(), 0.0);
        assert!(dtw(&[], &[1.0]).is_err());
        assert_eq!(dtw_enumerate(&[0.0, 1.0, 2.0], &[0.0, 2.0]), 1.0);
    }

    #[test]
    fn dtw_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!((dtw(&x, &y).unwrap() - dtw_enumerate(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn psdd_examples() {
        let cfg = MetricConfig::default();
        let a = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0, 0.0]];
        assert!(psdd(&a, &b, &cfg).unwrap() < 1e-12);
        assert!(psdd(&a, &a, &cfg).unwrap() < 1e-12);
        let x = vec![vec![0.9, 0.1, 0.4, 0.3, 0.7, 0.2]];
        let x2 = vec![x[0].iter().map(|v| 2.0 * v).collect()];
        let bins = 4.0;
        let expect = bins * 4f64.ln().powi(2);
        assert!((psdd(&x, &x2, &cfg).unwrap() - expect).abs() < 1e-9);
        assert!(matches!(psdd(&a, &[vec![1.0]], &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn power_spectrum_matches_direct_sum() {
        let x = [0.3, -1.2, 0.8, 0.5, 2.0, -0.4, 0.1];
        let n = x.len();
        for (k, p) in power_spectrum(&x).iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let th = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                re += v * th.cos();
                im -= v * th.sin();
            }
            assert!((p - (re * re + im * im)).abs() < 1e-10);
        }
    }

    #[test]
    fn marr_examples() {
        assert_eq!(marr(&[0.4; 9]).unwrap(), 0.0);
        assert_eq!(marr(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 1.0);
        let ramp: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        assert!((marr(&ramp).unwrap() - 0.1).abs() < 1e-12);
        assert!(marr(&[1.0]).is_err());
    }

    #[test]
    fn evaluate_identity_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = set(&mut rng, 8, 16);
        let cfg = MetricConfig::default();
        let r = evaluate(&a, &a, &cfg).unwrap();
        assert!(r.kl.abs() < 1e-12 && r.mmd2.abs() < 1e-12 && r.psdd.abs() < 1e-12);
        assert!(r.fd.unwrap() < 1e-8);
        assert_eq!(r.dtw_mean, 0.0);

        let single = evaluate(&a[..1], &a[2..3], &cfg).unwrap();
        assert_eq!(single.fd, None);
        assert!(single.to_csv_row().contains(",NA,"));

        let b = set(&mut rng, 5, 16);
        let r = evaluate(&a, &b, &cfg).unwrap();
        let back = MetricReport::from_csv_row(&r.to_csv_row(), cfg.clone()).unwrap();
        assert_eq!(back, r);
        let back = MetricReport::from_csv_row(&single.to_csv_row(), cfg).unwrap();
        assert_eq!(back, single);
    }

    proptest! {
        #[test]
        fn symmetry_and_sign(seed in any::<u64>(), n in 2usize..6, m in 2usize..6, l in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = set(&mut rng, n, l);
            let b = set(&mut rng, m, l);
            let cfg = MetricConfig::default();
            let ab = mmd2(&a, &b, &cfg).unwrap();
            prop_assert!((ab - mmd2(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            prop_assert!(ab >= -1e-12);
            let fab = frechet_distance(&a, &b).unwrap();
            prop_assert!((fab - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!(fab >= 0.0);
            prop_assert!(kl_divergence(&a, &b, &cfg).unwrap() >= 0.0);
            prop_assert!(psdd(&a, &b, &cfg).unwrap() >= 0.0);
            let d = dtw(&a[0], &b[0]).unwrap();
            prop_assert!((d - dtw(&b[0], &a[0]).unwrap()).abs() < 1e-12);
            prop_assert!(d >= 0.0);
            let diag: f64 = a[0].iter().zip(&b[0]).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!(d <= diag + 1e-12);
        }
    }
}
