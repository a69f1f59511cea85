//! Central finite-difference gradient checks in f64.

use std::sync::Arc;

use dualscan::compute::{Graph, NormMode, ParamStore, Tensor, Var};
use dualscan::model::{DualBranchModel, Fusion, ModelConfig};
use dualscan::ssm::{MambaBlock, MambaConfig};
use dualscan::Result;

use super::{rng, uniform};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Below this magnitude both gradients count as zero.
const FLOOR: f64 = 1e-7;
const MAX_PROBES: usize = 48;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Entries to perturb: all of them for small tensors, an even spread
/// otherwise.
fn probes(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

fn projection(shape: &[usize]) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, &mut rng(991))
}

fn with_entry(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut v = t.data().to_vec();
    v[i] += delta;
    Tensor::new(t.shape(), v).unwrap()
}

type InputFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn input_loss(inputs: &[Tensor<f64>], f: &InputFn<'_>, w: Option<&Tensor<f64>>) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let w = w.cloned().unwrap_or_else(|| projection(g.shape(out)));
    let loss = g.weighted_sum(out, &w).unwrap();
    (g.value(loss).data()[0], w)
}

/// Worst relative error of `d sum(w * f(inputs)) / d inputs` over probed
/// entries of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], f: &InputFn<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let w = projection(g.shape(out));
    let loss = g.weighted_sum(out, &w).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in probes(input.len(), MAX_PROBES) {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k] = with_entry(input, i, delta);
                input_loss(&moved, f, Some(&w)).0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

type ParamFn<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

/// Worst relative error over probed entries of every trainable parameter.
pub fn check_params(store: &ParamStore<f64>, f: &ParamFn<'_>, per_param: usize) -> f64 {
    let mut store = store.clone();
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &store).unwrap();
    let w = projection(g.shape(out));
    let loss = g.weighted_sum(out, &w).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let value = store.value(id).clone();
        let analytic = store.get(id).grad.clone();
        for i in probes(value.len(), per_param) {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.set_value(id, with_entry(&value, i, delta)).unwrap();
                let mut g = Graph::new();
                let out = f(&mut g, &s).unwrap();
                let loss = g.weighted_sum(out, &w).unwrap();
                g.value(loss).data()[0]
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let e = rel_err(analytic.data()[i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// 8x8 patches of 12 bands, 16 embedding channels, groups of 8 with
/// stride 4.
pub fn toy_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        bands: 12,
        patch: 8,
        embed: 16,
        group_len: 8,
        group_stride: 4,
        spatial: MambaConfig::new(16),
        decoder: MambaConfig::new(16),
        fusion,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Every differentiable primitive plus the mamba block and the toy model,
/// as `(name, worst relative error)`.
pub fn suite() -> Vec<(String, f64)> {
    let mut r = rng(17);
    let mut out = Vec::new();
    let mut case = |name: &str, inputs: Vec<Tensor<f64>>, f: &InputFn<'_>| {
        out.push((name.to_string(), check_inputs(&inputs, f)));
    };

    let x = uniform(&[2, 3, 4], -1.5, 1.5, &mut r);
    let y = uniform(&[2, 3, 4], -1.5, 1.5, &mut r);
    let row = uniform(&[4], -1.0, 1.0, &mut r);
    case("add", vec![x.clone(), y.clone()], &|g, v| g.add(v[0], v[1]));
    case("sub", vec![x.clone(), y.clone()], &|g, v| g.sub(v[0], v[1]));
    case("mul", vec![x.clone(), y.clone()], &|g, v| g.mul(v[0], v[1]));
    case("add_bcast", vec![x.clone(), row.clone()], &|g, v| g.add_bcast(v[0], v[1]));
    case("mul_bcast", vec![x.clone(), row.clone()], &|g, v| g.mul_bcast(v[0], v[1]));
    case("scale", vec![x.clone()], &|g, v| Ok(g.scale(v[0], -0.7)));
    case("exp", vec![x.clone()], &|g, v| Ok(g.exp(v[0])));
    case("sigmoid", vec![x.clone()], &|g, v| Ok(g.sigmoid(v[0])));
    case("silu", vec![x.clone()], &|g, v| Ok(g.silu(v[0])));
    case("gelu", vec![x.clone()], &|g, v| Ok(g.gelu(v[0])));
    case("softplus", vec![x.clone()], &|g, v| Ok(g.softplus(v[0])));
    let gate = uniform(&[2, 3, 4], 0.05, 0.95, &mut r);
    case("blend", vec![x.clone(), y.clone(), gate], &|g, v| g.blend(v[0], v[1], v[2]));
    case("sum", vec![x.clone()], &|g, v| Ok(g.sum(v[0])));
    case("mean", vec![x.clone()], &|g, v| Ok(g.mean(v[0])));
    case("mean_mid", vec![x.clone()], &|g, v| g.mean_mid(v[0], 2, 3, 4));
    let target = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    case("mse", vec![x.clone()], &|g, v| g.mse(v[0], &target));
    case("reshape", vec![x.clone()], &|g, v| g.reshape(v[0], &[6, 4]));
    case("concat_last", vec![x.clone(), uniform(&[2, 3, 2], -1.0, 1.0, &mut r)], &|g, v| {
        g.concat_last(&[v[0], v[1]])
    });
    case("slice_last", vec![x.clone()], &|g, v| g.slice_last(v[0], 1, 2));
    let index = Arc::new(vec![0, 5, 5, 23, 11, 2]);
    case("gather", vec![x.clone()], &|g, v| g.gather(v[0], index.clone(), &[2, 3]));

    let w = uniform(&[4, 5], -0.5, 0.5, &mut r);
    let b = uniform(&[5], -0.5, 0.5, &mut r);
    case("linear", vec![x.clone(), w, b], &|g, v| g.linear(v[0], v[1], Some(v[2])));
    let img = uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut r);
    let k3 = uniform(&[3, 3, 3, 2], -0.5, 0.5, &mut r);
    let kb = uniform(&[2], -0.5, 0.5, &mut r);
    case("conv2d", vec![img.clone(), k3, kb], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 3));
    let k5 = uniform(&[5, 5, 3, 2], -0.5, 0.5, &mut r);
    case("conv2d_k5", vec![img, k5], &|g, v| g.conv2d(v[0], v[1], None, 5));
    let seq = uniform(&[2, 6, 3], -1.0, 1.0, &mut r);
    let cw = uniform(&[4, 3], -0.5, 0.5, &mut r);
    let cb = uniform(&[3], -0.5, 0.5, &mut r);
    case("causal_conv1d", vec![seq, cw, cb], &|g, v| g.causal_conv1d(v[0], v[1], v[2]));
    let gamma = uniform(&[4], 0.5, 1.5, &mut r);
    let beta = uniform(&[4], -0.5, 0.5, &mut r);
    let (rm, rv) = (Tensor::zeros(&[4]), Tensor::full(&[4], 1.0));
    case("batch_norm", vec![x.clone(), gamma.clone(), beta.clone()], &|g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], NormMode::Train, (&rm, &rv), 1e-5)?.0)
    });
    case("rms_norm", vec![x.clone(), gamma.clone()], &|g, v| g.rms_norm(v[0], v[1], 1e-5));
    case("layer_norm", vec![x.clone(), gamma, beta], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));

    let s = super::ScanCase::random(2, 7, 3, 4, &mut r);
    let scan_inputs = vec![
        Tensor::new(&[2, 7, 3], s.u.clone()).unwrap(),
        Tensor::new(&[2, 7, 3], s.delta.clone()).unwrap(),
        Tensor::new(&[3, 4], s.a.clone()).unwrap(),
        Tensor::new(&[2, 7, 4], s.b.clone()).unwrap(),
        Tensor::new(&[2, 7, 4], s.c.clone()).unwrap(),
        Tensor::new(&[3], s.d.clone()).unwrap(),
    ];
    case("selective_scan", scan_inputs, &|g, v| {
        g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
    });

    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "m", MambaConfig::new(6), &mut rng(5)).unwrap();
    let seq = uniform(&[2, 5, 6], -1.0, 1.0, &mut r);
    let bs = store.clone();
    case("mamba_block.input", vec![seq.clone()], &|g, v| block.forward(g, &bs, v[0]));
    out.push((
        "mamba_block.params".into(),
        check_params(
            &store,
            &|g, st| {
                let x = g.input(seq.clone());
                block.forward(g, st, x)
            },
            6,
        ),
    ));

    for fusion in Fusion::ALL {
        let (model, store) = DualBranchModel::init::<f64>(toy_config(fusion)).unwrap();
        let batch = uniform(&[2, 8, 8, 12], 0.0, 1.0, &mut r);
        let err = check_params(
            &store,
            &|g, st| {
                let x = g.input(batch.clone());
                Ok(model.forward(g, st, x, NormMode::Train)?.output)
            },
            4,
        );
        out.push((format!("toy_model.{fusion}"), err));
    }
    out
}
