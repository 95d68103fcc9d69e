//! Building blocks of the velocity network. Each block owns the ids of its
//! parameters and appends its computation to a [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Scale applied to the flow time before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 100.0;

/// Sinusoidal embedding of flow time `t`, interleaving
/// `sin(s·t/ω_i), cos(s·t/ω_i)` with `ω_i = 10000^(2i/d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub vector: Vec<f64>,
}

pub fn time_embed(t: f64, d: usize) -> Result<TimeEmbedding> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::Argument(format!(
            "time embedding width {d} must be even and >= 2"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    let mut vector = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let omega = 10000f64.powf(2.0 * i as f64 / d as f64);
        let arg = TIME_SCALE * t / omega;
        vector.push(arg.sin());
        vector.push(arg.cos());
    }
    Ok(TimeEmbedding { vector })
}

/// Parameter ids bound to graph leaves for one forward pass.
pub(crate) struct Bound<'a> {
    pub vars: &'a [Var],
}

impl Bound<'_> {
    fn v(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
}

impl Conv {
    /// Stride-1 "same" convolution, or the stride-2 down-sampler when
    /// `stride == 2`.
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let fan_in = cin * kernel;
        let (wi, bi) = if zero {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::Uniform { fan_in }, Init::Uniform { fan_in })
        };
        Self {
            w: ps.add(format!("{name}.weight"), &[cout, cin, kernel], wi, rng),
            b: ps.add(format!("{name}.bias"), &[cout], bi, rng),
            stride,
            pad: kernel / 2,
            transposed: false,
        }
    }

    /// Kernel-4, stride-2 transposed convolution that doubles the length.
    pub(crate) fn up(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = cout * 4;
        Self {
            w: ps.add(
                format!("{name}.weight"),
                &[cin, cout, 4],
                Init::Uniform { fan_in },
                rng,
            ),
            b: ps.add(
                format!("{name}.bias"),
                &[cout],
                Init::Uniform { fan_in },
                rng,
            ),
            stride: 2,
            pad: 1,
            transposed: true,
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if self.transposed {
            g.conv_transpose1d(x, p.v(self.w), p.v(self.b), self.stride, self.pad)
        } else {
            g.conv1d(x, p.v(self.w), p.v(self.b), self.stride, self.pad)
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), &[width], Init::Ones, rng),
            beta: ps.add(format!("{name}.beta"), &[width], Init::Zeros, rng),
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform { fan_in: din }
        };
        Self {
            w: ps.add(format!("{name}.weight"), &[din, dout], init, rng),
            b: bias.then(|| ps.add(format!("{name}.bias"), &[dout], init, rng)),
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.v(self.w), self.b.map(|b| p.v(b)))
    }
}

/// Convolutional residual block with additive timestep modulation:
///
/// ```text
/// h_res = Conv(h)
/// h_mid = Conv(SiLU(GN(h_res)))
/// h_mod = Conv(SiLU(GN(h_mid ⊕ Linear(t_emb))))
/// out   = h_res + h_mod
/// ```
///
/// The last convolution starts at zero so the block is `h_res` at init.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv_res: Conv,
    norm_res: Norm,
    conv_mid: Conv,
    time_proj: Dense,
    norm_mid: Norm,
    conv_mod: Conv,
    groups: usize,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
    ) -> Self {
        Self {
            conv_res: Conv::new(ps, rng, &format!("{name}.conv_res"), cin, cout, 3, 1, false),
            norm_res: Norm::new(ps, rng, &format!("{name}.norm_res"), cout),
            conv_mid: Conv::new(
                ps,
                rng,
                &format!("{name}.conv_mid"),
                cout,
                cout,
                3,
                1,
                false,
            ),
            time_proj: Dense::new(
                ps,
                rng,
                &format!("{name}.time_proj"),
                time_dim,
                cout,
                true,
                false,
            ),
            norm_mid: Norm::new(ps, rng, &format!("{name}.norm_mid"), cout),
            conv_mod: Conv::new(ps, rng, &format!("{name}.conv_mod"), cout, cout, 3, 1, true),
            groups,
        }
    }

    /// `h [B, Cin, L]`, `t_emb [B, time_dim]` → `[B, Cout, L]`.
    pub(crate) fn apply(&self, g: &mut Graph, p: &Bound, h: Var, t_emb: Var) -> Result<Var> {
        Ok(self.apply_parts(g, p, h, t_emb)?.0)
    }

    /// Returns `(out, h_res)`.
    pub(crate) fn apply_parts(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        t_emb: Var,
    ) -> Result<(Var, Var)> {
        let h_res = self.conv_res.apply(g, p, h)?;
        let n = g.group_norm(
            h_res,
            p.v(self.norm_res.gamma),
            p.v(self.norm_res.beta),
            self.groups,
        )?;
        let a = g.silu(n);
        let h_mid = self.conv_mid.apply(g, p, a)?;
        let t_bias = self.time_proj.apply(g, p, t_emb)?;
        let shifted = g.channel_bias(h_mid, t_bias)?;
        let n2 = g.group_norm(
            shifted,
            p.v(self.norm_mid.gamma),
            p.v(self.norm_mid.beta),
            self.groups,
        )?;
        let a2 = g.silu(n2);
        let h_mod = self.conv_mod.apply(g, p, a2)?;
        Ok((g.add(h_res, h_mod)?, h_res))
    }

    pub fn modulation_conv(&self) -> &Conv {
        &self.conv_mod
    }
}

/// Pre-norm cross-attention from temporal features (queries) to text tokens
/// (keys and values), followed by a residual feed-forward layer.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm_q: Norm,
    w_q: Dense,
    w_k: Dense,
    w_v: Dense,
    w_o: Dense,
    norm_ff: Norm,
    ff_in: Dense,
    ff_out: Dense,
    d_k: usize,
}

/// Output of a cross-attention application.
pub struct AttentionOut {
    pub out: Var,
    /// `[B, L, M]` attention weights.
    pub weights: Var,
}

impl CrossAttention {
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        d_text: usize,
        d_k: usize,
    ) -> Self {
        Self {
            norm_q: Norm::new(ps, rng, &format!("{name}.norm_q"), channels),
            w_q: Dense::new(ps, rng, &format!("{name}.w_q"), channels, d_k, false, false),
            w_k: Dense::new(ps, rng, &format!("{name}.w_k"), d_text, d_k, false, false),
            w_v: Dense::new(ps, rng, &format!("{name}.w_v"), d_text, d_k, false, false),
            w_o: Dense::new(ps, rng, &format!("{name}.w_o"), d_k, channels, true, true),
            norm_ff: Norm::new(ps, rng, &format!("{name}.norm_ff"), channels),
            ff_in: Dense::new(
                ps,
                rng,
                &format!("{name}.ff_in"),
                channels,
                2 * channels,
                true,
                false,
            ),
            ff_out: Dense::new(
                ps,
                rng,
                &format!("{name}.ff_out"),
                2 * channels,
                channels,
                true,
                false,
            ),
            d_k,
        }
    }

    /// `h [B, C, L]`, `text [B, M, D]` with `mask [B, M]` → `[B, C, L]`.
    pub(crate) fn apply(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        text: Var,
        mask: &[bool],
    ) -> Result<AttentionOut> {
        let ht = g.transpose12(h)?;
        let q_in = g.layer_norm(ht, p.v(self.norm_q.gamma), p.v(self.norm_q.beta))?;
        let q = self.w_q.apply(g, p, q_in)?;
        let k = self.w_k.apply(g, p, text)?;
        let v = self.w_v.apply(g, p, text)?;
        let scores = g.matmul_nt(q, k, 1.0 / (self.d_k as f64).sqrt())?;
        let weights = g.masked_softmax(scores, mask.to_vec())?;
        let att = g.matmul(weights, v)?;
        let proj = self.w_o.apply(g, p, att)?;
        let h_attout = g.add(proj, ht)?;
        let f_in = g.layer_norm(h_attout, p.v(self.norm_ff.gamma), p.v(self.norm_ff.beta))?;
        let f1 = self.ff_in.apply(g, p, f_in)?;
        let f1 = g.silu(f1);
        let f2 = self.ff_out.apply(g, p, f1)?;
        let out = g.add(f2, h_attout)?;
        Ok(AttentionOut {
            out: g.transpose12(out)?,
            weights,
        })
    }

    pub fn output_projection(&self) -> ParamId {
        self.w_o.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embed_examples() {
        let e = time_embed(0.0, 8).unwrap();
        for pair in e.vector.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let e = time_embed(0.01, 2).unwrap();
        assert!((e.vector[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((e.vector[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
        let e = time_embed(1.0, 2).unwrap();
        assert!((e.vector[0] - 100f64.sin()).abs() < 1e-12);
        assert!((e.vector[1] - 100f64.cos()).abs() < 1e-12);
        assert!(matches!(time_embed(0.5, 3), Err(Error::Argument(_))));
        assert!(time_embed(1.5, 4).is_err());
    }

    #[test]
    fn time_embed_is_bounded_and_uses_geometric_frequencies() {
        let d = 16;
        let e = time_embed(0.37, d).unwrap();
        assert!(e.vector.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..d / 2 {
            let omega = 10000f64.powf(2.0 * i as f64 / d as f64);
            assert!((e.vector[2 * i] - (37.0 / omega).sin()).abs() < 1e-12);
        }
    }
}
