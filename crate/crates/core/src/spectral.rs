//! One-sided real DFT with an explicit twiddle table, so magnitude spectra
//! can be differentiated in closed form.
//!
//! Forward convention is unnormalised: `F_k = sum_n x_n exp(-2πi kn/N)` for
//! `k = 0..=N/2`.

use crate::error::{ensure_same_len, Result};

#[derive(Debug, Clone)]
pub struct RealDft {
    len: usize,
    bins: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RealDft {
    pub fn new(len: usize) -> Self {
        let bins = len / 2 + 1;
        let mut cos = Vec::with_capacity(bins * len);
        let mut sin = Vec::with_capacity(bins * len);
        for k in 0..bins {
            for n in 0..len {
                // reduce k*n first so large tables stay accurate
                let theta = 2.0 * std::f64::consts::PI * ((k * n) % len) as f64 / len as f64;
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self {
            len,
            bins,
            cos,
            sin,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of one-sided bins, `N/2 + 1`.
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Real and imaginary parts of the one-sided spectrum.
    pub fn transform(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_same_len("dft input", x.len(), self.len)?;
        let mut re = vec![0.0; self.bins];
        let mut im = vec![0.0; self.bins];
        for k in 0..self.bins {
            let c = &self.cos[k * self.len..(k + 1) * self.len];
            let s = &self.sin[k * self.len..(k + 1) * self.len];
            let mut r = 0.0;
            let mut i = 0.0;
            for n in 0..self.len {
                r += x[n] * c[n];
                i -= x[n] * s[n];
            }
            re[k] = r;
            im[k] = i;
        }
        Ok((re, im))
    }

    pub fn magnitudes(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (re, im) = self.transform(x)?;
        Ok(re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect())
    }

    /// Pulls `upstream = dL/d|F_k|` back to `dL/dx`, accumulating into
    /// `grad`. Bins with zero magnitude contribute nothing (subgradient 0).
    pub fn magnitude_backward(
        &self,
        re: &[f64],
        im: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        ensure_same_len("dft upstream", upstream.len(), self.bins)?;
        ensure_same_len("dft grad", grad.len(), self.len)?;
        for k in 0..self.bins {
            let mag = re[k].hypot(im[k]);
            if mag == 0.0 || upstream[k] == 0.0 {
                continue;
            }
            let a = upstream[k] * re[k] / mag;
            let b = upstream[k] * im[k] / mag;
            let c = &self.cos[k * self.len..(k + 1) * self.len];
            let s = &self.sin[k * self.len..(k + 1) * self.len];
            for n in 0..self.len {
                grad[n] += a * c[n] - b * s[n];
            }
        }
        Ok(())
    }
}
