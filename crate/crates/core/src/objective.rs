//! Training objectives: time-domain MSE, spectral-magnitude L1 and the
//! two-task min-norm (MGDA) weighting of their gradients.

use serde::{Deserialize, Serialize};

use crate::denoiser::VelocityNet;
use crate::error::{ensure_same_len, Error, Result};
use crate::spectral::RealDft;
use crate::text::ConditionBatch;

/// Denominator floor below which the two gradients count as identical.
pub const MGDA_EPS_DENOM: f64 = 1e-12;

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_time: f64,
    pub l_freq: f64,
    /// `None` when training uses a static weighted sum.
    pub alpha: Option<f64>,
    pub g_time_norm: f64,
    pub g_freq_norm: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_time,l_freq,alpha,g_time_norm,g_freq_norm";

    pub fn to_csv_row(&self) -> String {
        let alpha = self.alpha.map(|a| format!("{a:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{:.17e},{},{:.17e},{:.17e}",
            self.step, self.l_time, self.l_freq, alpha, self.g_time_norm, self.g_freq_norm
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            record: line.to_string(),
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("not a number"));
        Ok(Self {
            step: cols[0].parse().map_err(|_| bad("bad step"))?,
            l_time: num(cols[1])?,
            l_freq: num(cols[2])?,
            alpha: if cols[3].is_empty() {
                None
            } else {
                Some(num(cols[3])?)
            },
            g_time_norm: num(cols[4])?,
            g_freq_norm: num(cols[5])?,
        })
    }
}

/// Mean squared error over all elements.
pub fn time_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(time_loss_with_grad(pred, target)?.0)
}

/// MSE and its gradient with respect to `pred`.
pub fn time_loss_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure_same_len("time_loss", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::Shape("time_loss of empty arrays".into()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean absolute difference of one-sided magnitude spectra of two series.
pub fn freq_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure_same_len("freq_loss", pred.len(), target.len())?;
    if pred.len() < 2 {
        return Err(Error::Shape("freq_loss needs at least 2 samples".into()));
    }
    SpectralLoss::new(pred.len()).value(pred, target)
}

/// Batched spectral consistency loss with a cached DFT plan.
///
/// Inputs are `B` series of length `L` laid out back to back; the loss is the
/// batch mean of per-series bin-mean L1 magnitude deviations.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    dft: RealDft,
}

impl SpectralLoss {
    pub fn new(len: usize) -> Self {
        Self {
            dft: RealDft::new(len),
        }
    }

    fn check(&self, pred: &[f64], target: &[f64]) -> Result<usize> {
        ensure_same_len("freq_loss", pred.len(), target.len())?;
        let len = self.dft.len();
        if len < 2 || pred.is_empty() || pred.len() % len != 0 {
            return Err(Error::Shape(format!(
                "freq_loss: {} values is not a batch of length-{len} series",
                pred.len()
            )));
        }
        Ok(pred.len() / len)
    }

    pub fn value(&self, pred: &[f64], target: &[f64]) -> Result<f64> {
        let batch = self.check(pred, target)?;
        let len = self.dft.len();
        let mut total = 0.0;
        for (p, t) in pred.chunks(len).zip(target.chunks(len)) {
            let mp = self.dft.magnitudes(p)?;
            let mt = self.dft.magnitudes(t)?;
            total += mp.iter().zip(&mt).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / self.dft.bins() as f64;
        }
        Ok(total / batch as f64)
    }

    /// Loss and its (sub)gradient with respect to `pred`.
    pub fn value_and_grad(&self, pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let batch = self.check(pred, target)?;
        let len = self.dft.len();
        let bins = self.dft.bins();
        let scale = 1.0 / (batch * bins) as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; pred.len()];
        let mut upstream = vec![0.0; bins];
        for (i, (p, t)) in pred.chunks(len).zip(target.chunks(len)).enumerate() {
            let (re, im) = self.dft.transform(p)?;
            let mt = self.dft.magnitudes(t)?;
            for k in 0..bins {
                let d = re[k].hypot(im[k]) - mt[k];
                total += d.abs();
                upstream[k] = if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
            self.dft
                .magnitude_backward(&re, &im, &upstream, &mut grad[i * len..(i + 1) * len])?;
        }
        Ok((total * scale, grad))
    }
}

/// Closed-form minimiser over `α ∈ [0, 1]` of `‖α g_time + (1 − α) g_freq‖²`.
///
/// Returns 0.5 when the two gradients coincide (every α is optimal).
pub fn mgda_alpha(g_time: &[f64], g_freq: &[f64]) -> Result<f64> {
    ensure_same_len("mgda_alpha", g_time.len(), g_freq.len())?;
    if g_time.is_empty() {
        return Err(Error::Shape("mgda_alpha of empty gradients".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, f) in g_time.iter().zip(g_freq) {
        let d = f - t;
        num += d * f;
        den += d * d;
    }
    if den < MGDA_EPS_DENOM {
        return Ok(0.5);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

pub fn combine_gradients(g_time: &[f64], g_freq: &[f64], alpha: f64) -> Result<Vec<f64>> {
    ensure_same_len("combine_gradients", g_time.len(), g_freq.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(g_time
        .iter()
        .zip(g_freq)
        .map(|(t, f)| alpha * t + (1.0 - alpha) * f)
        .collect())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest network [`grad_check`] accepts.
pub const GRAD_CHECK_MAX_PARAMS: usize = 5_000;

/// A fixed minibatch for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckBatch {
    pub x_t: Vec<f64>,
    pub t: Vec<f64>,
    pub cond: ConditionBatch,
    pub v_t: Vec<f64>,
}

/// Maximum parameter-wise relative error of each loss gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub time: f64,
    pub freq: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.time.max(self.freq)
    }
}

/// Compares backpropagated gradients of both losses with central
/// differences `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` for every parameter.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    net: &VelocityNet,
    batch: &GradCheckBatch,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Argument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let count = net.param_count();
    if count > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Argument(format!(
            "{count} parameters; gradient checks take at most {GRAD_CHECK_MAX_PARAMS}"
        )));
    }
    let spectral = SpectralLoss::new(net.config().seq_len);
    let rec = net.record(&batch.x_t, &batch.t, &batch.cond)?;
    let (_, d_time) = time_loss_with_grad(rec.output(), &batch.v_t)?;
    let (_, d_freq) = spectral.value_and_grad(rec.output(), &batch.v_t)?;
    let g_time = rec.param_grads(net, &d_time)?;
    let g_freq = rec.param_grads(net, &d_freq)?;
    drop(rec);

    let losses = |n: &VelocityNet| -> Result<(f64, f64)> {
        let out = n.forward(&batch.x_t, &batch.t, &batch.cond)?;
        Ok((
            time_loss(&out, &batch.v_t)?,
            spectral.value(&out, &batch.v_t)?,
        ))
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut probe = net.clone();
    let theta = net.params().flatten();
    let mut shifted = theta.clone();
    let mut report = GradCheckReport {
        time: 0.0,
        freq: 0.0,
    };
    for i in 0..theta.len() {
        shifted[i] = theta[i] + epsilon;
        probe.params_mut().set_flat(&shifted)?;
        let (tp, fp) = losses(&probe)?;
        shifted[i] = theta[i] - epsilon;
        probe.params_mut().set_flat(&shifted)?;
        let (tm, fm) = losses(&probe)?;
        shifted[i] = theta[i];
        report.time = report.time.max(rel(g_time[i], (tp - tm) / (2.0 * epsilon)));
        report.freq = report.freq.max(rel(g_freq[i], (fp - fm) / (2.0 * epsilon)));
    }
    Ok(report)
}
