use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Hyperparameters of one selective-scan block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    /// Token feature width.
    pub d_model: usize,
    /// State entries per inner channel.
    pub d_state: usize,
    /// Width of the causal depthwise convolution.
    pub d_conv: usize,
    /// Inner width multiplier.
    pub expand: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            d_state: 16,
            d_conv: 4,
            expand: 2,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the step-size projection, `ceil(d_model / 16)`.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{prefix}.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Trainable scalar count of a block with this config.
    pub fn param_count(&self) -> usize {
        let (d, i, n, r, k) = (self.d_model, self.inner(), self.d_state, self.dt_rank(), self.d_conv);
        d + d * 2 * i + k * i + i + i * (r + 2 * n) + r * i + i + i * n + i + i * d
    }

    /// Multiply-accumulates for one token, the scan counted as one MAC per
    /// state update plus one per output contraction.
    pub fn macs_per_token(&self) -> usize {
        let (d, i, n, r, k) = (self.d_model, self.inner(), self.d_state, self.dt_rank(), self.d_conv);
        d * 2 * i + k * i + i * (r + 2 * n) + r * i + 2 * i * n + i * d
    }
}

/// Parameters of one selective-scan block.
///
/// Forward: RMS pre-norm, input projection split into main and gate halves,
/// causal depthwise conv + SiLU on main, input-dependent step size and
/// `B`, `C` projections, selective scan, SiLU gating, output projection and a
/// residual connection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub config: MambaConfig,
    pub norm: ParamId,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    /// `log(-A)`; the state matrix is `-exp(a_log)` and so always negative.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
}

impl MambaBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: MambaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(prefix)?;
        let (d, i, n, r, k) = (
            config.d_model,
            config.inner(),
            config.d_state,
            config.dt_rank(),
            config.d_conv,
        );
        let norm = store.add(format!("{prefix}.norm"), Tensor::full(&[d], T::one()));
        let in_proj = store.add_kaiming(format!("{prefix}.in_proj"), &[d, 2 * i], d, rng);
        let conv_w = store.add_kaiming(format!("{prefix}.conv_w"), &[k, i], k, rng);
        let conv_b = store.add_bias(format!("{prefix}.conv_b"), i, k, rng);
        let x_proj = store.add_kaiming(format!("{prefix}.x_proj"), &[i, r + 2 * n], i, rng);
        let dt_bound = 1.0 / (r as f64).sqrt();
        let dt_w = store.add(
            format!("{prefix}.dt_w"),
            Tensor::uniform(&[r, i], -dt_bound, dt_bound, rng),
        );
        // step sizes start log-uniform in [1e-3, 1e-1]; bias = softplus^-1(dt)
        let dt_bias: Vec<T> = (0..i)
            .map(|_| {
                let dt: f64 = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
                T::lit(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_b = store.add(format!("{prefix}.dt_b"), Tensor::from_vec(&[i], dt_bias));
        let a_init: Vec<T> = (0..i).flat_map(|_| (1..=n).map(|v| T::lit((v as f64).ln()))).collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::from_vec(&[i, n], a_init));
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full(&[i], T::one()));
        let out_proj = store.add_kaiming(format!("{prefix}.out_proj"), &[i, d], i, rng);
        Ok(MambaBlock {
            config,
            norm,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_w,
            dt_b,
            a_log,
            d_skip,
            out_proj,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 10] {
        [
            self.norm,
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.x_proj,
            self.dt_w,
            self.dt_b,
            self.a_log,
            self.d_skip,
            self.out_proj,
        ]
    }

    /// Maps `[seqs, len, d_model]` to the same shape.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cfg = self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.d_model {
            return Err(Error::Shape(format!(
                "mamba block expects [seqs, len, {}], got {shape:?}",
                cfg.d_model
            )));
        }
        let (i, n, r) = (cfg.inner(), cfg.d_state, cfg.dt_rank());

        let norm_w = g.param(store, self.norm);
        let xn = g.rms_norm(x, norm_w, NORM_EPS)?;
        let w_in = g.param(store, self.in_proj);
        let xz = g.linear(xn, w_in, None)?;
        let main = g.slice_last(xz, 0, i)?;
        let gate = g.slice_last(xz, i, i)?;

        let cw = g.param(store, self.conv_w);
        let cb = g.param(store, self.conv_b);
        let conv = g.causal_conv1d(main, cw, cb)?;
        let u = g.silu(conv);

        let w_x = g.param(store, self.x_proj);
        let x_dbl = g.linear(u, w_x, None)?;
        let dt_low = g.slice_last(x_dbl, 0, r)?;
        let b = g.slice_last(x_dbl, r, n)?;
        let c = g.slice_last(x_dbl, r + n, n)?;
        let dt_w = g.param(store, self.dt_w);
        let dt_b = g.param(store, self.dt_b);
        let dt_raw = g.linear(dt_low, dt_w, Some(dt_b))?;
        let delta = g.softplus(dt_raw);

        let a_log = g.param(store, self.a_log);
        let a_pos = g.exp(a_log);
        let a = g.scale(a_pos, -T::one());
        let d_skip = g.param(store, self.d_skip);
        let y = g.selective_scan(u, delta, a, b, c, d_skip)?;

        let gate_act = g.silu(gate);
        let gated = g.mul(y, gate_act)?;
        let w_out = g.param(store, self.out_proj);
        let out = g.linear(gated, w_out, None)?;
        g.add(out, x)
    }
}
