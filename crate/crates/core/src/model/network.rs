use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Fusion, ModelConfig};
use crate::compute::{BatchStats, Graph, NormMode, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::MambaBlock;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// 1x1 conv + batch norm + GELU from `bands` to `embed` channels.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
}

/// Multi-scale 3x3 + 5x5 convs followed by a scan over row-major pixels.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub conv3_w: ParamId,
    pub conv3_b: ParamId,
    pub conv5_w: ParamId,
    pub conv5_b: ParamId,
    pub mamba: MambaBlock,
}

/// Overlapping channel groups scanned as short sequences, pooled and
/// projected back to `embed`.
#[derive(Clone, Debug)]
pub struct SpectralBranch {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub position: ParamId,
    pub mamba: MambaBlock,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Scan path in parallel with 3x3 and 5x5 convs, concatenated and mapped
/// back to the band count by a 1x1 head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mamba: MambaBlock,
    pub conv3_w: ParamId,
    pub conv5_w: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Running-statistics update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// Intermediate nodes of a forward pass, exposed for inspection.
#[derive(Clone, Debug)]
pub struct Taps {
    pub features: Var,
    pub spatial: Option<Var>,
    pub spectral: Option<Var>,
    pub gate: Option<Var>,
    pub fused_pre: Var,
    pub fusion: Var,
}

pub struct ForwardOutput<T> {
    pub output: Var,
    pub taps: Taps,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Per-layer parameter and compute audit.
#[derive(Clone, Debug, Serialize)]
pub struct ModelAudit {
    pub params_total: usize,
    pub params_active: usize,
    pub macs_per_patch: u64,
    pub flops_per_patch: u64,
    pub layers: Vec<LayerAudit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerAudit {
    pub layer: String,
    pub params: usize,
    pub macs: u64,
}

/// The dual-branch reconstruction network. Parameter values live in a
/// [`ParamStore`]; this struct only holds their ids.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub config: ModelConfig,
    pub input: InputProjection,
    pub spatial: SpatialBranch,
    pub spectral: SpectralBranch,
    pub fusion: FusionLayer,
    pub decoder: Decoder,
}

fn conv_w<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add_kaiming(name, &[k, k, cin, cout], k * k * cin, rng)
}

impl DualBranchModel {
    /// Builds the network and a freshly initialized parameter store, seeded
    /// from `config.seed`.
    pub fn init<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (c, e) = (config.bands, config.embed);

        let w = conv_w(&mut s, "input.weight", 1, c, e, &mut rng);
        let input = InputProjection {
            weight: w,
            bias: s.add_bias("input.bias", e, c, &mut rng),
            bn_gamma: s.add("input.bn_gamma", Tensor::full(&[e], T::one())),
            bn_beta: s.add("input.bn_beta", Tensor::zeros(&[e])),
            bn_mean: s.add_buffer("input.bn_mean", Tensor::zeros(&[e])),
            bn_var: s.add_buffer("input.bn_var", Tensor::full(&[e], T::one())),
        };

        let conv3_w = conv_w(&mut s, "spatial.conv3_w", 3, e, e, &mut rng);
        let conv3_b = s.add_bias("spatial.conv3_b", e, 9 * e, &mut rng);
        let conv5_w = conv_w(&mut s, "spatial.conv5_w", 5, e, e, &mut rng);
        let conv5_b = s.add_bias("spatial.conv5_b", e, 25 * e, &mut rng);
        let mamba = MambaBlock::new(&mut s, "spatial.mamba", config.spatial, &mut rng)?;
        let spatial = SpatialBranch { conv3_w, conv3_b, conv5_w, conv5_b, mamba };

        let dm = config.spectral.d_model;
        let groups = config.group_count();
        let embed_w = s.add_kaiming("spectral.embed_w", &[1, dm], 1, &mut rng);
        let embed_b = s.add("spectral.embed_b", Tensor::zeros(&[dm]));
        let position = s.add(
            "spectral.position",
            Tensor::uniform(&[config.group_len, dm], -0.1, 0.1, &mut rng),
        );
        let mamba = MambaBlock::new(&mut s, "spectral.mamba", config.spectral, &mut rng)?;
        let proj_w = s.add_kaiming("spectral.proj_w", &[groups * dm, e], groups * dm, &mut rng);
        let proj_b = s.add_bias("spectral.proj_b", e, groups * dm, &mut rng);
        let spectral = SpectralBranch { embed_w, embed_b, position, mamba, proj_w, proj_b };

        let fusion = FusionLayer {
            gate_w: s.add_kaiming("fusion.gate_w", &[2 * e, e], 2 * e, &mut rng),
            gate_b: s.add("fusion.gate_b", Tensor::zeros(&[e])),
            proj_w: s.add_kaiming("fusion.proj_w", &[e, e], e, &mut rng),
            proj_b: s.add_bias("fusion.proj_b", e, e, &mut rng),
        };

        let mamba = MambaBlock::new(&mut s, "decoder.mamba", config.decoder, &mut rng)?;
        let decoder = Decoder {
            mamba,
            conv3_w: conv_w(&mut s, "decoder.conv3_w", 3, e, e, &mut rng),
            conv5_w: conv_w(&mut s, "decoder.conv5_w", 5, e, e, &mut rng),
            head_w: s.add_kaiming("decoder.head_w", &[3 * e, c], 3 * e, &mut rng),
            head_b: s.add_bias("decoder.head_b", c, 3 * e, &mut rng),
        };

        let model = DualBranchModel { config, input, spatial, spectral, fusion, decoder };
        Ok((model, s))
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let p = self.config.patch;
        match g.shape(x) {
            &[_, h, w, c] if h == p && w == p && c == self.config.bands => Ok(()),
            s => Err(Error::Shape(format!(
                "model expects [batch, {p}, {p}, {}], got {s:?}",
                self.config.bands
            ))),
        }
    }

    /// `[b,h,w,bands] -> [b,h,w,embed]`
    pub fn input_project<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<BnUpdate<T>>)> {
        let ip = &self.input;
        let w = g.param(store, ip.weight);
        let b = g.param(store, ip.bias);
        let z = g.conv2d(x, w, Some(b), 1)?;
        let gamma = g.param(store, ip.bn_gamma);
        let beta = g.param(store, ip.bn_beta);
        let (n, stats) = g.batch_norm(
            z,
            gamma,
            beta,
            mode,
            (store.value(ip.bn_mean), store.value(ip.bn_var)),
            BN_EPS,
        )?;
        let update = stats.map(|stats| BnUpdate {
            mean: ip.bn_mean,
            var: ip.bn_var,
            stats,
        });
        Ok((g.gelu(n), update))
    }

    /// Multi-scale convs, then one scan over the `h*w` pixels in row-major
    /// order (pixel `(r, c)` is step `r * w + c`).
    pub fn spatial_branch<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let &[b, h, w, e] = shape.as_slice() else {
            return Err(Error::Shape(format!("spatial branch expects [b,h,w,c], got {shape:?}")));
        };
        let sb = &self.spatial;
        let w3 = g.param(store, sb.conv3_w);
        let b3 = g.param(store, sb.conv3_b);
        let y3 = g.conv2d(f, w3, Some(b3), 3)?;
        let w5 = g.param(store, sb.conv5_w);
        let b5 = g.param(store, sb.conv5_b);
        let y5 = g.conv2d(f, w5, Some(b5), 5)?;
        let ms = g.add(y3, y5)?;
        let tokens = g.reshape(ms, &[b, h * w, e])?;
        let seq = sb.mamba.forward(g, store, tokens)?;
        g.reshape(seq, &shape)
    }

    /// Per pixel: `group_count` overlapping channel windows, each scanned as
    /// a `group_len`-step sequence of lifted scalars, mean-pooled, then all
    /// group descriptors concatenated and projected back to `embed`.
    pub fn spectral_branch<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(f).to_vec();
        let &[b, h, w, e] = shape.as_slice() else {
            return Err(Error::Shape(format!("spectral branch expects [b,h,w,c], got {shape:?}")));
        };
        if e != cfg.embed {
            return Err(Error::Shape(format!("spectral branch width {e} vs embed {}", cfg.embed)));
        }
        let pixels = b * h * w;
        let groups = cfg.group_count();
        let len = cfg.group_len;
        let dm = cfg.spectral.d_model;
        let index: Vec<usize> = (0..pixels)
            .flat_map(|p| {
                (0..groups).flat_map(move |j| (0..len).map(move |s| p * e + j * cfg.group_stride + s))
            })
            .collect();
        let seqs = pixels * groups;
        let sb = &self.spectral;
        let steps = g.gather(f, Arc::new(index), &[seqs, len, 1])?;
        let ew = g.param(store, sb.embed_w);
        let eb = g.param(store, sb.embed_b);
        let lifted = g.linear(steps, ew, Some(eb))?;
        let pos = g.param(store, sb.position);
        let tokens = g.add_bcast(lifted, pos)?;
        let scanned = sb.mamba.forward(g, store, tokens)?;
        let pooled = g.mean_mid(scanned, seqs, len, dm)?;
        let per_pixel = g.reshape(pooled, &[pixels, groups * dm])?;
        let pw = g.param(store, sb.proj_w);
        let pb = g.param(store, sb.proj_b);
        let back = g.linear(per_pixel, pw, Some(pb))?;
        g.reshape(back, &shape)
    }

    /// Merges branch features according to the configured [`Fusion`] and
    /// applies the 1x1 fusion projection. Returns `(pre_projection, gate,
    /// output)`.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        spatial: Option<Var>,
        spectral: Option<Var>,
    ) -> Result<(Var, Option<Var>, Var)> {
        let missing = || Error::InvalidInput(format!("{} fusion needs both branches", self.config.fusion));
        let (pre, gate) = match self.config.fusion {
            Fusion::Gated => {
                let (spa, spe) = (spatial.ok_or_else(missing)?, spectral.ok_or_else(missing)?);
                if g.shape(spa) != g.shape(spe) {
                    return Err(Error::Shape(format!(
                        "fusion inputs differ: {:?} vs {:?}",
                        g.shape(spa),
                        g.shape(spe)
                    )));
                }
                let cat = g.concat_last(&[spa, spe])?;
                let gw = g.param(store, self.fusion.gate_w);
                let gb = g.param(store, self.fusion.gate_b);
                let logits = g.linear(cat, gw, Some(gb))?;
                let gate = g.sigmoid(logits);
                (g.blend(spe, spa, gate)?, Some(gate))
            }
            Fusion::Addition => {
                let (spa, spe) = (spatial.ok_or_else(missing)?, spectral.ok_or_else(missing)?);
                (g.add(spa, spe)?, None)
            }
            Fusion::SpatialOnly => (spatial.ok_or_else(missing)?, None),
            Fusion::SpectralOnly => (spectral.ok_or_else(missing)?, None),
        };
        let pw = g.param(store, self.fusion.proj_w);
        let pb = g.param(store, self.fusion.proj_b);
        let out = g.linear(pre, pw, Some(pb))?;
        Ok((pre, gate, out))
    }

    /// `[b,h,w,embed] -> [b,h,w,bands]`
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let &[b, h, w, e] = shape.as_slice() else {
            return Err(Error::Shape(format!("decoder expects [b,h,w,c], got {shape:?}")));
        };
        let d = &self.decoder;
        let tokens = g.reshape(f, &[b, h * w, e])?;
        let seq = d.mamba.forward(g, store, tokens)?;
        let global = g.reshape(seq, &shape)?;
        let w3 = g.param(store, d.conv3_w);
        let local3 = g.conv2d(f, w3, None, 3)?;
        let w5 = g.param(store, d.conv5_w);
        let local5 = g.conv2d(f, w5, None, 5)?;
        let cat = g.concat_last(&[global, local3, local5])?;
        let hw = g.param(store, d.head_w);
        let hb = g.param(store, d.head_b);
        g.linear(cat, hw, Some(hb))
    }

    /// Full reconstruction of a `[batch, patch, patch, bands]` input.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: NormMode,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(g, x)?;
        let (features, bn) = self.input_project(g, store, x, mode)?;
        let fusion = self.config.fusion;
        let spatial = fusion
            .uses_spatial()
            .then(|| self.spatial_branch(g, store, features))
            .transpose()?;
        let spectral = fusion
            .uses_spectral()
            .then(|| self.spectral_branch(g, store, features))
            .transpose()?;
        let (fused_pre, gate, fused) = self.fuse(g, store, spatial, spectral)?;
        let output = self.decode(g, store, fused)?;
        Ok(ForwardOutput {
            output,
            taps: Taps {
                features,
                spatial,
                spectral,
                gate,
                fused_pre,
                fusion: fused,
            },
            bn_updates: bn.into_iter().collect(),
        })
    }

    /// Eval-mode reconstruction without recording gradients.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(batch);
        let out = self.forward(&mut g, store, x, NormMode::Eval)?;
        Ok(g.value(out.output).clone())
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for u in updates {
            let mean = store.value(u.mean).zip_map(&u.stats.mean, |r, b| (T::one() - m) * r + m * b);
            let var = store.value(u.var).zip_map(&u.stats.var, |r, b| (T::one() - m) * r + m * b);
            store.set_value(u.mean, mean)?;
            store.set_value(u.var, var)?;
        }
        Ok(())
    }

    fn ids_len<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
        ids.iter()
            .map(|&i| store.get(i))
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Parameter counts and an analytic multiply-accumulate estimate for
    /// one patch. Counts depend only on the config.
    pub fn audit<T: Real>(&self, store: &ParamStore<T>) -> ModelAudit {
        let cfg = &self.config;
        let px = (cfg.patch * cfg.patch) as u64;
        let (c, e) = (cfg.bands as u64, cfg.embed as u64);
        let groups = cfg.group_count() as u64;
        let len = cfg.group_len as u64;
        let dm = cfg.spectral.d_model as u64;
        let ip = &self.input;
        let sp = &self.spatial;
        let se = &self.spectral;
        let fu = &self.fusion;
        let de = &self.decoder;
        let mut layers = vec![
            LayerAudit {
                layer: "input_projection".into(),
                params: Self::ids_len(store, &[ip.weight, ip.bias, ip.bn_gamma, ip.bn_beta]),
                macs: px * c * e,
            },
            LayerAudit {
                layer: "spatial.msfe".into(),
                params: Self::ids_len(store, &[sp.conv3_w, sp.conv3_b, sp.conv5_w, sp.conv5_b]),
                macs: px * 34 * e * e,
            },
            LayerAudit {
                layer: "spatial.mamba".into(),
                params: Self::ids_len(store, &sp.mamba.param_ids()),
                macs: px * cfg.spatial.macs_per_token() as u64,
            },
            LayerAudit {
                layer: "spectral.grouped_mamba".into(),
                params: Self::ids_len(store, &[se.embed_w, se.embed_b, se.position])
                    + Self::ids_len(store, &se.mamba.param_ids()),
                macs: px * groups * len * (dm + cfg.spectral.macs_per_token() as u64),
            },
            LayerAudit {
                layer: "spectral.back_projection".into(),
                params: Self::ids_len(store, &[se.proj_w, se.proj_b]),
                macs: px * groups * dm * e,
            },
            LayerAudit {
                layer: "fusion.gate".into(),
                params: Self::ids_len(store, &[fu.gate_w, fu.gate_b]),
                macs: if cfg.fusion == Fusion::Gated { px * 2 * e * e } else { 0 },
            },
            LayerAudit {
                layer: "fusion.projection".into(),
                params: Self::ids_len(store, &[fu.proj_w, fu.proj_b]),
                macs: px * e * e,
            },
            LayerAudit {
                layer: "decoder.mamba".into(),
                params: Self::ids_len(store, &de.mamba.param_ids()),
                macs: px * cfg.decoder.macs_per_token() as u64,
            },
            LayerAudit {
                layer: "decoder.convs".into(),
                params: Self::ids_len(store, &[de.conv3_w, de.conv5_w]),
                macs: px * 34 * e * e,
            },
            LayerAudit {
                layer: "decoder.head".into(),
                params: Self::ids_len(store, &[de.head_w, de.head_b]),
                macs: px * 3 * e * c,
            },
        ];
        let fusion = cfg.fusion;
        for l in &mut layers {
            let unused = (!fusion.uses_spatial() && l.layer.starts_with("spatial"))
                || (!fusion.uses_spectral() && l.layer.starts_with("spectral"));
            if unused {
                l.macs = 0;
            }
        }
        let params_active = layers
            .iter()
            .filter(|l| {
                !((!fusion.uses_spatial() && l.layer.starts_with("spatial"))
                    || (!fusion.uses_spectral() && l.layer.starts_with("spectral"))
                    || (fusion != Fusion::Gated && l.layer == "fusion.gate"))
            })
            .map(|l| l.params)
            .sum();
        let macs: u64 = layers.iter().map(|l| l.macs).sum();
        ModelAudit {
            params_total: store.trainable_count(),
            params_active,
            macs_per_patch: macs,
            flops_per_patch: 2 * macs,
            layers,
        }
    }
}
