//! Text-conditioned 1D U-Net velocity estimator.
//!
//! Layout for `n` levels with channels `c_i = base * mult[i]` and lengths
//! `L / 2^i`:
//!
//! ```text
//! conv_in (1 → c_0)
//! encoder i in 0..n-1:  ResBlock(c_{i-1} → c_i), keep skip_i, Conv stride 2
//! bottleneck:           ResBlock(c_{n-2} → c_{n-1}), [attention if n-1 ∈ levels]
//! decoder i in n-2..=0: ConvT ×2 (c_{i+1} → c_i), concat skip_i,
//!                       ResBlock(2c_i → c_i), [attention if i ∈ levels]
//! conv_out (c_0 → 1)
//! ```

mod blocks;
mod params;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{
    time_embed, AttentionOut, Conv, CrossAttention, ResidualBlock, TimeEmbedding, TIME_SCALE,
};
pub use params::{Param, ParamId, ParamSet};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::text::ConditionBatch;
use blocks::Bound;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub seq_len: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub groups: usize,
    pub d_llm: usize,
    pub d_k: usize,
    /// Level `levels - 1` is the bottleneck; lower indices are decoder levels.
    pub attention_levels: BTreeSet<usize>,
}

impl NetConfig {
    /// CPU-sized default: four levels, attention at the bottleneck and the
    /// two coarsest decoder levels.
    pub fn desk_scale(d_llm: usize) -> Self {
        Self {
            seq_len: 64,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4, 8],
            groups: 8,
            d_llm,
            d_k: 32,
            attention_levels: BTreeSet::from([1, 2, 3]),
        }
    }

    /// A few-thousand-parameter network for gradient checks.
    pub fn tiny(d_llm: usize) -> Self {
        Self {
            seq_len: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            groups: 2,
            d_llm,
            d_k: 4,
            attention_levels: BTreeSet::from([0, 1]),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be nonempty and positive".into());
        }
        if self.base_channels == 0 || self.groups == 0 || self.base_channels % self.groups != 0 {
            return bad(format!(
                "base_channels {} not divisible by groups {}",
                self.base_channels, self.groups
            ));
        }
        let factor = 1usize << (self.levels() - 1);
        if self.seq_len == 0 || self.seq_len % factor != 0 {
            return bad(format!(
                "sequence length {} not divisible by 2^{}",
                self.seq_len,
                self.levels() - 1
            ));
        }
        if self.d_llm == 0 || self.d_k == 0 {
            return bad("d_llm and d_k must be positive".into());
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!(
                "attention level {l} beyond {} levels",
                self.levels()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Conv,
    res: ResidualBlock,
    attn: Option<CrossAttention>,
}

/// The velocity network `v_θ(x_t, t, E_txt)` and its parameters.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    cfg: NetConfig,
    params: ParamSet,
    conv_in: Conv,
    encoder: Vec<(ResidualBlock, Conv)>,
    mid: ResidualBlock,
    mid_attn: Option<CrossAttention>,
    decoder: Vec<DecoderLevel>,
    conv_out: Conv,
}

/// Test hooks for architectural ablations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace the skip tensor of this level by zeros.
    pub drop_skip: Option<usize>,
}

/// A recorded forward pass, ready for one or more backward passes.
pub struct Recording {
    pub graph: Graph,
    pub output: Var,
    pub params: Vec<Var>,
}

impl Recording {
    pub fn output(&self) -> &[f64] {
        self.graph.value(self.output)
    }

    /// Flat parameter gradient of `sum(seed * output)`.
    pub fn param_grads(&self, net: &VelocityNet, seed: &[f64]) -> Result<Vec<f64>> {
        let grads = self.graph.backward(self.output, seed)?;
        Ok(net.params.gather_grads(&grads, &self.params))
    }
}

impl VelocityNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let n = cfg.levels();
        let td = cfg.time_dim();
        let c0 = cfg.channels(0);
        let conv_in = Conv::new(&mut ps, &mut rng, "conv_in", 1, c0, 3, 1, false);
        let mut encoder = Vec::new();
        let mut prev = c0;
        for i in 0..n - 1 {
            let c = cfg.channels(i);
            let res = ResidualBlock::new(
                &mut ps,
                &mut rng,
                &format!("enc{i}.res"),
                prev,
                c,
                td,
                cfg.groups,
            );
            let down = Conv::new(
                &mut ps,
                &mut rng,
                &format!("enc{i}.down"),
                c,
                c,
                3,
                2,
                false,
            );
            encoder.push((res, down));
            prev = c;
        }
        let cb = cfg.channels(n - 1);
        let mid = ResidualBlock::new(&mut ps, &mut rng, "mid.res", prev, cb, td, cfg.groups);
        let mid_attn = cfg
            .attention_levels
            .contains(&(n - 1))
            .then(|| CrossAttention::new(&mut ps, &mut rng, "mid.attn", cb, cfg.d_llm, cfg.d_k));
        let mut decoder = Vec::new();
        for i in (0..n - 1).rev() {
            let c = cfg.channels(i);
            let up = Conv::up(
                &mut ps,
                &mut rng,
                &format!("dec{i}.up"),
                cfg.channels(i + 1),
                c,
            );
            let res = ResidualBlock::new(
                &mut ps,
                &mut rng,
                &format!("dec{i}.res"),
                2 * c,
                c,
                td,
                cfg.groups,
            );
            let attn = cfg.attention_levels.contains(&i).then(|| {
                CrossAttention::new(
                    &mut ps,
                    &mut rng,
                    &format!("dec{i}.attn"),
                    c,
                    cfg.d_llm,
                    cfg.d_k,
                )
            });
            decoder.push(DecoderLevel { up, res, attn });
        }
        let conv_out = Conv::new(&mut ps, &mut rng, "conv_out", c0, 1, 3, 1, false);
        Ok(Self {
            cfg,
            params: ps,
            conv_in,
            encoder,
            mid,
            mid_attn,
            decoder,
            conv_out,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Adds uniform noise of the given scale to every all-zero array, which
    /// otherwise block gradient flow through their branch at init.
    pub fn jitter_zero_arrays(&mut self, seed: u64, scale: f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = self
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.data.iter().all(|v| *v == 0.0) && !p.name.ends_with(".beta"))
            .map(|(i, _)| i)
            .collect();
        let mut flat = self.params.flatten();
        let mut off = 0;
        for (i, p) in self.params.entries().iter().enumerate() {
            if ids.contains(&i) {
                for v in &mut flat[off..off + p.data.len()] {
                    *v = rng.random_range(-scale..scale);
                }
            }
            off += p.data.len();
        }
        self.params.set_flat(&flat).expect("same layout");
    }

    fn check_inputs(&self, x: &[f64], t: &[f64], cond: &ConditionBatch) -> Result<usize> {
        let l = self.cfg.seq_len;
        let batch = t.len();
        if batch == 0 || x.len() != batch * l {
            return Err(Error::Shape(format!(
                "{} state values for {batch} series of length {l}",
                x.len()
            )));
        }
        if cond.batch != batch {
            return Err(Error::Shape(format!(
                "{} conditioning rows for batch {batch}",
                cond.batch
            )));
        }
        if cond.dim != self.cfg.d_llm {
            return Err(Error::Shape(format!(
                "embedding width {} but network expects {}",
                cond.dim, self.cfg.d_llm
            )));
        }
        Ok(batch)
    }

    /// Records a forward pass over a batch: `x [B*L]`, `t [B]`.
    pub fn record(&self, x: &[f64], t: &[f64], cond: &ConditionBatch) -> Result<Recording> {
        self.record_with(x, t, cond, ForwardOptions::default())
    }

    pub fn record_with(
        &self,
        x: &[f64],
        t: &[f64],
        cond: &ConditionBatch,
        opts: ForwardOptions,
    ) -> Result<Recording> {
        let batch = self.check_inputs(x, t, cond)?;
        let l = self.cfg.seq_len;
        let td = self.cfg.time_dim();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let p = Bound { vars: &vars };

        let mut temb = Vec::with_capacity(batch * td);
        for &ti in t {
            temb.extend(time_embed(ti, td)?.vector);
        }
        let temb = g.constant(temb, &[batch, td])?;
        let text = g.constant(cond.data.clone(), &[batch, cond.tokens, cond.dim])?;
        let input = g.constant(x.to_vec(), &[batch, 1, l])?;

        let mut h = self.conv_in.apply(&mut g, &p, input)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (res, down) in &self.encoder {
            h = res.apply(&mut g, &p, h, temb)?;
            skips.push(h);
            h = down.apply(&mut g, &p, h)?;
        }
        h = self.mid.apply(&mut g, &p, h, temb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.apply(&mut g, &p, h, text, &cond.mask)?.out;
        }
        for (level, dec) in (0..self.decoder.len()).rev().zip(&self.decoder) {
            h = dec.up.apply(&mut g, &p, h)?;
            let mut skip = skips[level];
            if opts.drop_skip == Some(level) {
                let zeros = vec![0.0; g.value(skip).len()];
                let shape = g.shape(skip).to_vec();
                skip = g.constant(zeros, &shape)?;
            }
            h = g.concat(h, skip)?;
            h = dec.res.apply(&mut g, &p, h, temb)?;
            if let Some(attn) = &dec.attn {
                h = attn.apply(&mut g, &p, h, text, &cond.mask)?.out;
            }
        }
        let output = self.conv_out.apply(&mut g, &p, h)?;
        Ok(Recording {
            graph: g,
            output,
            params: vars,
        })
    }

    /// Predicted velocity for a batch, `[B*L]`.
    pub fn forward(&self, x: &[f64], t: &[f64], cond: &ConditionBatch) -> Result<Vec<f64>> {
        Ok(self.record(x, t, cond)?.output().to_vec())
    }
}

/// A residual block with its own parameter set, for evaluating the block in
/// isolation.
pub struct StandaloneResidual {
    pub block: ResidualBlock,
    pub params: ParamSet,
    pub time_dim: usize,
}

impl StandaloneResidual {
    pub fn new(cin: usize, cout: usize, time_dim: usize, groups: usize, seed: u64) -> Result<Self> {
        if cout % groups != 0 {
            return Err(Error::Config(format!("{cout} channels, {groups} groups")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let block = ResidualBlock::new(&mut params, &mut rng, "block", cin, cout, time_dim, groups);
        Ok(Self {
            block,
            params,
            time_dim,
        })
    }

    /// Evaluates the block on `h` of shape `[B, Cin, L]`; returns
    /// `(output, h_res)`.
    pub fn evaluate(
        &self,
        h: &[f64],
        shape: [usize; 3],
        t_emb: &TimeEmbedding,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if t_emb.vector.len() != self.time_dim {
            return Err(Error::Shape(format!(
                "time embedding width {} but block expects {}",
                t_emb.vector.len(),
                self.time_dim
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let p = Bound { vars: &vars };
        let x = g.constant(h.to_vec(), &shape)?;
        let temb: Vec<f64> = (0..shape[0])
            .flat_map(|_| t_emb.vector.iter().copied())
            .collect();
        let temb = g.constant(temb, &[shape[0], self.time_dim])?;
        let (out, res) = self.block.apply_parts(&mut g, &p, x, temb)?;
        Ok((g.value(out).to_vec(), g.value(res).to_vec()))
    }
}

/// A cross-attention block with its own parameter set.
pub struct StandaloneAttention {
    pub block: CrossAttention,
    pub params: ParamSet,
}

impl StandaloneAttention {
    pub fn new(channels: usize, d_text: usize, d_k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let block = CrossAttention::new(&mut params, &mut rng, "attn", channels, d_text, d_k);
        Self { block, params }
    }

    /// `h [B, C, L]` against `cond`; returns `(output, weights [B, L, M])`.
    pub fn evaluate(
        &self,
        h: &[f64],
        shape: [usize; 3],
        cond: &ConditionBatch,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g)?;
        let p = Bound { vars: &vars };
        let x = g.constant(h.to_vec(), &shape)?;
        let text = g.constant(cond.data.clone(), &[cond.batch, cond.tokens, cond.dim])?;
        let r = self.block.apply(&mut g, &p, x, text, &cond.mask)?;
        Ok((g.value(r.out).to_vec(), g.value(r.weights).to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{EmbeddingSource, TextEmbedding};
    use rand::Rng;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn embedding(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> TextEmbedding {
        TextEmbedding::new(
            rows,
            dim,
            gaussian(rng, rows * dim),
            EmbeddingSource::Reference,
        )
        .unwrap()
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            seq_len: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            groups: 4,
            d_llm: 8,
            d_k: 8,
            attention_levels: BTreeSet::from([1, 2]),
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::desk_scale(64).validate().is_ok());
        let mut c = NetConfig::desk_scale(64);
        c.seq_len = 63;
        assert!(matches!(VelocityNet::new(c, 0), Err(Error::Config(_))));
        let mut c = NetConfig::desk_scale(64);
        c.groups = 5;
        assert!(c.validate().is_err());
        let mut c = NetConfig::desk_scale(64);
        c.attention_levels.insert(4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn tiny_net_is_small() {
        let n = VelocityNet::new(NetConfig::tiny(8), 0)
            .unwrap()
            .param_count();
        assert!(n <= 5000, "{n} parameters");
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        let a = VelocityNet::new(small_cfg(), 1).unwrap();
        let b = VelocityNet::new(small_cfg(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let sa: Vec<_> = a
            .params()
            .entries()
            .iter()
            .map(|p| (&p.name, &p.shape))
            .collect();
        let sb: Vec<_> = b
            .params()
            .entries()
            .iter()
            .map(|p| (&p.name, &p.shape))
            .collect();
        assert_eq!(sa, sb);
        assert_ne!(a.params().flatten(), b.params().flatten());
    }

    #[test]
    fn forward_preserves_length_and_is_bounded_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [small_cfg(), NetConfig::desk_scale(16), NetConfig::tiny(8)] {
            let net = VelocityNet::new(cfg.clone(), 3).unwrap();
            let e = embedding(&mut rng, 3, cfg.d_llm);
            let cond = ConditionBatch::repeat(&e, 2).unwrap();
            let x = gaussian(&mut rng, 2 * cfg.seq_len);
            let out = net.forward(&x, &[0.2, 0.9], &cond).unwrap();
            assert_eq!(out.len(), 2 * cfg.seq_len);
            let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 10.0, "initial output magnitude {max}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = VelocityNet::new(small_cfg(), 3).unwrap();
        let cond = ConditionBatch::repeat(&embedding(&mut rng, 2, 8), 1).unwrap();
        let x = gaussian(&mut rng, 16);
        assert_eq!(
            net.forward(&x, &[0.4], &cond).unwrap(),
            net.forward(&x, &[0.4], &cond).unwrap()
        );
    }

    #[test]
    fn text_changes_output_only_through_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = VelocityNet::new(small_cfg(), 3).unwrap();
        net.jitter_zero_arrays(11, 0.2);
        let x = gaussian(&mut rng, 16);
        let a = ConditionBatch::repeat(&embedding(&mut rng, 2, 8), 1).unwrap();
        let b = ConditionBatch::repeat(&embedding(&mut rng, 4, 8), 1).unwrap();
        let ya = net.forward(&x, &[0.5], &a).unwrap();
        let yb = net.forward(&x, &[0.5], &b).unwrap();
        let diff = ya
            .iter()
            .zip(&yb)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff > 0.0);

        let mut cfg = small_cfg();
        cfg.attention_levels.clear();
        let mut plain = VelocityNet::new(cfg, 3).unwrap();
        plain.jitter_zero_arrays(11, 0.2);
        assert_eq!(
            plain.forward(&x, &[0.5], &a).unwrap(),
            plain.forward(&x, &[0.5], &b).unwrap()
        );
    }

    #[test]
    fn every_skip_connection_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = VelocityNet::new(small_cfg(), 3).unwrap();
        net.jitter_zero_arrays(12, 0.2);
        let x = gaussian(&mut rng, 16);
        let cond = ConditionBatch::repeat(&embedding(&mut rng, 2, 8), 1).unwrap();
        let full = net.forward(&x, &[0.3], &cond).unwrap();
        for level in 0..2 {
            let ablated = net
                .record_with(
                    &x,
                    &[0.3],
                    &cond,
                    ForwardOptions {
                        drop_skip: Some(level),
                    },
                )
                .unwrap()
                .output()
                .to_vec();
            let diff = full
                .iter()
                .zip(&ablated)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(diff > 1e-9, "skip {level} has no effect");
        }
    }

    #[test]
    fn no_dead_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = VelocityNet::new(small_cfg(), 3).unwrap();
        net.jitter_zero_arrays(13, 0.2);
        let batch = 3;
        let x = gaussian(&mut rng, batch * 16);
        let t: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
        let es: Vec<_> = (0..batch).map(|i| embedding(&mut rng, 1 + i, 8)).collect();
        let refs: Vec<_> = es.iter().collect();
        let cond = ConditionBatch::from_embeddings(&refs).unwrap();
        let rec = net.record(&x, &t, &cond).unwrap();
        let seed = gaussian(&mut rng, batch * 16);
        let g = rec.param_grads(&net, &seed).unwrap();
        let mut off = 0;
        for p in net.params().entries() {
            let n = p.data.len();
            let mx = g[off..off + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(mx > 0.0, "{} receives no gradient", p.name);
            off += n;
        }
    }

    #[test]
    fn residual_block_examples() {
        let blk = StandaloneResidual::new(4, 8, 16, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = gaussian(&mut rng, 2 * 4 * 12);
        let te = time_embed(0.3, 16).unwrap();
        let (out, res) = blk.evaluate(&h, [2, 4, 12], &te).unwrap();
        assert_eq!(out.len(), 2 * 8 * 12);
        // zero-initialised modulation conv: the block is exactly h_res
        assert_eq!(out, res);

        let mut blk = blk;
        let w = blk.block.modulation_conv().weight();
        let name = blk.params.by_id(w).name.clone();
        let p = blk.params.get_mut(&name).unwrap();
        p.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
        let (o0, _) = blk
            .evaluate(&h, [2, 4, 12], &time_embed(0.0, 16).unwrap())
            .unwrap();
        let (o1, _) = blk
            .evaluate(&h, [2, 4, 12], &time_embed(1.0, 16).unwrap())
            .unwrap();
        let diff = o0
            .iter()
            .zip(&o1)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff > 0.0);
        assert!(blk
            .evaluate(&h, [2, 4, 12], &time_embed(0.0, 8).unwrap())
            .is_err());
    }

    #[test]
    fn attention_examples() {
        let blk = StandaloneAttention::new(8, 6, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = gaussian(&mut rng, 2 * 8 * 5);
        let one = ConditionBatch::repeat(&embedding(&mut rng, 1, 6), 2).unwrap();
        let (out, w) = blk.evaluate(&h, [2, 8, 5], &one).unwrap();
        assert_eq!(out.len(), h.len());
        assert!(w.iter().all(|&v| v == 1.0));

        let a = embedding(&mut rng, 3, 6);
        let b = embedding(&mut rng, 5, 6);
        let cond = ConditionBatch::from_embeddings(&[&a, &b]).unwrap();
        let (out, w) = blk.evaluate(&h, [2, 8, 5], &cond).unwrap();
        assert_eq!(out.len(), h.len());
        for row in w.chunks(cond.tokens) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // padded keys of the shorter prompt get no weight
        for row in w[..5 * cond.tokens].chunks(cond.tokens) {
            assert_eq!(&row[3..], &[0.0, 0.0]);
        }
    }
}
