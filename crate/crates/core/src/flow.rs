//! Rectified-flow forward process, training loop and Euler sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::VelocityNet;
use crate::error::{ensure_same_len, Error, Result};
use crate::objective::{
    combine_gradients, l2_norm, mgda_alpha, time_loss_with_grad, LossReport, SpectralLoss,
};
use crate::seed::{self, purpose};
use crate::text::{ConditionBatch, TextEmbedding};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub x_0: Vec<f64>,
    pub x_1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTarget {
    pub v_t: Vec<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("flow time {t} outside [0, 1]")))
    }
}

/// `x_t = t·x_1 + (1 − t)·x_0`; exact at both endpoints.
pub fn interpolate(x_0: &[f64], x_1: &[f64], t: f64) -> Result<FlowState> {
    ensure_same_len("interpolate", x_0.len(), x_1.len())?;
    check_time(t)?;
    let x_t = if t == 0.0 {
        x_0.to_vec()
    } else if t == 1.0 {
        x_1.to_vec()
    } else {
        x_0.iter()
            .zip(x_1)
            .map(|(a, b)| t * b + (1.0 - t) * a)
            .collect()
    };
    Ok(FlowState {
        x_t,
        t,
        x_0: x_0.to_vec(),
        x_1: x_1.to_vec(),
    })
}

pub fn target_velocity(x_0: &[f64], x_1: &[f64]) -> Result<VelocityTarget> {
    ensure_same_len("target_velocity", x_0.len(), x_1.len())?;
    Ok(VelocityTarget {
        v_t: x_0.iter().zip(x_1).map(|(a, b)| b - a).collect(),
    })
}

/// Anything that predicts a velocity for a batch of states.
pub trait VelocityField: Sync {
    fn seq_len(&self) -> usize;
    /// `x [B*L]`, `t [B]` → velocity `[B*L]`.
    fn velocity(&self, x: &[f64], t: &[f64], cond: &ConditionBatch) -> Result<Vec<f64>>;
}

impl VelocityField for VelocityNet {
    fn seq_len(&self) -> usize {
        self.config().seq_len
    }

    fn velocity(&self, x: &[f64], t: &[f64], cond: &ConditionBatch) -> Result<Vec<f64>> {
        self.forward(x, t, cond)
    }
}

/// A field that ignores its inputs.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn seq_len(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &[f64], t: &[f64], _cond: &ConditionBatch) -> Result<Vec<f64>> {
        ensure_same_len("constant field", x.len(), t.len() * self.0.len())?;
        Ok(t.iter().flat_map(|_| self.0.iter().copied()).collect())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Euler integration from `x_0 ~ N(0, I)` drawn with `seed` to `t = 1`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    embedding: &TextEmbedding,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(sample_batch(field, &[embedding], steps, &[seed])?.remove(0))
}

/// Integrates several samples together. Sample `i` starts from the noise
/// drawn with `seeds[i]`, so results match independent [`sample`] calls.
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    embeddings: &[&TextEmbedding],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Argument("sampling needs at least one step".into()));
    }
    ensure_same_len("sample_batch", embeddings.len(), seeds.len())?;
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let l = field.seq_len();
    let mut x: Vec<f64> = seeds
        .iter()
        .flat_map(|&s| gaussian(&mut ChaCha8Rng::seed_from_u64(s), l))
        .collect();
    let cond = ConditionBatch::from_embeddings(embeddings)?;
    integrate(field, &mut x, &cond, steps)?;
    Ok(x.chunks(l).map(<[f64]>::to_vec).collect())
}

/// Euler steps `x ← x + Δt·v(x, k/steps)` on a batch state in place.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x: &mut [f64],
    cond: &ConditionBatch,
    steps: usize,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Argument("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = vec![k as f64 / steps as f64; cond.batch];
        let v = field.velocity(x, &t, cond)?;
        ensure_same_len("velocity", v.len(), x.len())?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { step: k });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ − η·d`.
    Sgd,
    /// Adam moments on the combined direction with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine warm-up from `η/div` to `η` over `pct_start` of the run, then
    /// cosine decay to `η/(div·final_div)`.
    OneCycle {
        pct_start: f64,
        div: f64,
        final_div: f64,
    },
}

impl Schedule {
    pub fn learning_rate(&self, base: f64, step: u64, total: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::OneCycle {
                pct_start,
                div,
                final_div,
            } => {
                let cos = |from: f64, to: f64, frac: f64| {
                    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                };
                let total = total.max(1) as f64;
                let warm = (pct_start * total).max(1.0);
                let s = step as f64;
                if s < warm {
                    cos(base / div, base, s / warm)
                } else {
                    let rest = (total - warm).max(1.0);
                    cos(base, base / (div * final_div), ((s - warm) / rest).min(1.0))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mgda_enabled: bool,
    /// Weight of the spectral loss when MGDA is off.
    pub static_lambda: f64,
    pub ode_steps: usize,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            mgda_enabled: true,
            static_lambda: 0.0,
            ode_steps: 50,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.static_lambda >= 0.0 && self.static_lambda.is_finite()) {
            return bad("static_lambda must be nonnegative");
        }
        if self.ode_steps == 0 {
            return bad("ode_steps must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(dataset_len)
    }
}

/// Optimizer state carried across steps and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Outcome of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    /// The direction `d` in `θ ← θ − η·d`, before optimizer scaling.
    pub direction: Vec<f64>,
}

/// Stepwise trainer. Every step's randomness is derived from
/// `(seed, step)`, so a trainer resumed at step `k` continues exactly as an
/// uninterrupted run would.
pub struct Trainer<'a> {
    net: VelocityNet,
    cfg: TrainConfig,
    data: &'a [(&'a [f64], &'a TextEmbedding)],
    step: u64,
    opt: OptimizerState,
    spectral: SpectralLoss,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: VelocityNet,
        cfg: TrainConfig,
        data: &'a [(&'a [f64], &'a TextEmbedding)],
    ) -> Result<Self> {
        Self::resume(net, cfg, data, 0, OptimizerState::default())
    }

    pub fn resume(
        net: VelocityNet,
        cfg: TrainConfig,
        data: &'a [(&'a [f64], &'a TextEmbedding)],
        step: u64,
        opt: OptimizerState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let l = net.config().seq_len;
        let d = net.config().d_llm;
        for (i, (x, e)) in data.iter().enumerate() {
            if x.len() != l {
                return Err(Error::Shape(format!(
                    "scenario {i} has length {} but the network expects {l}",
                    x.len()
                )));
            }
            if e.dim != d {
                return Err(Error::Shape(format!(
                    "embedding {i} has width {} but the network expects {d}",
                    e.dim
                )));
            }
        }
        let p = net.param_count();
        let opt_ok = opt.m.is_empty() && opt.v.is_empty() || opt.m.len() == p && opt.v.len() == p;
        if !opt_ok {
            return Err(Error::Config(
                "optimizer state does not match the network".into(),
            ));
        }
        Ok(Self {
            spectral: SpectralLoss::new(l),
            net,
            cfg,
            data,
            step,
            opt,
            order: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps(self.data.len())
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn into_parts(self) -> (VelocityNet, u64, OptimizerState) {
        (self.net, self.step, self.opt)
    }

    /// Dataset index at position `pos` of the concatenated per-epoch
    /// permutations.
    fn index_at(&mut self, pos: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = pos / n;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, purpose::EPOCH_ORDER, epoch));
            perm.shuffle(&mut rng);
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("just set").1[(pos % n) as usize]
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let s = self.step;
        let b = self.cfg.batch_size;
        let l = self.net.config().seq_len;
        let idx: Vec<usize> = (0..b as u64)
            .map(|j| self.index_at(s * b as u64 + j))
            .collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, purpose::STEP_NOISE, s));
        let mut x_t = Vec::with_capacity(b * l);
        let mut v_t = Vec::with_capacity(b * l);
        let mut ts = Vec::with_capacity(b);
        for &i in &idx {
            let x_1 = self.data[i].0;
            let x_0 = gaussian(&mut rng, l);
            let t: f64 = rng.random_range(0.0..1.0);
            x_t.extend(interpolate(&x_0, x_1, t)?.x_t);
            v_t.extend(target_velocity(&x_0, x_1)?.v_t);
            ts.push(t);
        }
        let embs: Vec<&TextEmbedding> = idx.iter().map(|&i| self.data[i].1).collect();
        let cond = ConditionBatch::from_embeddings(&embs)?;

        let rec = self.net.record(&x_t, &ts, &cond)?;
        let pred = rec.output();
        let (l_time, d_time) = time_loss_with_grad(pred, &v_t)?;
        let (l_freq, d_freq) = self.spectral.value_and_grad(pred, &v_t)?;
        let fail = |what: &str| Error::Training {
            step: s,
            what: what.into(),
        };
        if !l_time.is_finite() || !l_freq.is_finite() {
            return Err(fail("non-finite loss"));
        }
        let g_time = rec.param_grads(&self.net, &d_time)?;
        let g_freq = rec.param_grads(&self.net, &d_freq)?;
        drop(rec);
        if g_time.iter().chain(&g_freq).any(|v| !v.is_finite()) {
            return Err(fail("non-finite gradient"));
        }

        let (alpha, direction) = if self.cfg.mgda_enabled {
            let a = mgda_alpha(&g_time, &g_freq)?;
            (Some(a), combine_gradients(&g_time, &g_freq, a)?)
        } else {
            let lam = self.cfg.static_lambda;
            let d = if lam == 0.0 {
                g_time.clone()
            } else {
                g_time
                    .iter()
                    .zip(&g_freq)
                    .map(|(t, f)| t + lam * f)
                    .collect()
            };
            (None, d)
        };

        let lr = self
            .cfg
            .schedule
            .learning_rate(self.cfg.learning_rate, s, self.total_steps());
        let mut theta = self.net.params().flatten();
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, d) in theta.iter_mut().zip(&direction) {
                    *p -= lr * d;
                }
            }
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.opt.m.is_empty() {
                    self.opt.m = vec![0.0; theta.len()];
                    self.opt.v = vec![0.0; theta.len()];
                }
                let k = (s + 1) as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                for (i, p) in theta.iter_mut().enumerate() {
                    let g = direction[i];
                    let m = &mut self.opt.m[i];
                    let v = &mut self.opt.v[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * *p);
                }
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite parameters"));
        }
        self.net.params_mut().set_flat(&theta)?;
        self.step += 1;
        Ok(StepOutcome {
            report: LossReport {
                step: s,
                l_time,
                l_freq,
                alpha,
                g_time_norm: l2_norm(&g_time),
                g_freq_norm: l2_norm(&g_freq),
            },
            direction,
        })
    }

    /// Runs the remaining steps, calling `observe` after each.
    pub fn run<F: FnMut(&LossReport)>(&mut self, mut observe: F) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            let out = self.step()?;
            observe(&out.report);
            reports.push(out.report);
        }
        Ok(reports)
    }
}

/// Full training run; returns the trained network and one report per step.
pub fn train(
    data: &[(&[f64], &TextEmbedding)],
    net: VelocityNet,
    cfg: &TrainConfig,
) -> Result<(VelocityNet, Vec<LossReport>)> {
    let mut trainer = Trainer::new(net, cfg.clone(), data)?;
    let reports = trainer.run(|_| {})?;
    Ok((trainer.into_parts().0, reports))
}
