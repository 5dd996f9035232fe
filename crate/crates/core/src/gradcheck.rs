//! Central finite-difference checks for every layer and loss, in f64.
//!
//! Each check draws a random problem, takes the analytic gradient of the
//! scalar `Σ r ⊙ output` (or of the loss itself), and compares it against
//! Richardson-extrapolated central differences `(f(x+h) - f(x-h)) / 2h`
//! coordinate by coordinate. The reported figure is
//! the largest relative error `|a - n| / max(|a|, |n|, floor)` over all
//! compared coordinates; the floor keeps exact zeros from dividing by zero.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{ce_loss, lsr_loss};
use crate::model::{build, fa_backward, fa_forward, Branch, MiniCnnOptions, NetworkSpec, NetworkState, Region};
use crate::nn::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Step for nonlinear layers and losses. Their inputs are drawn away from
/// kinks, so a larger step only trims round-off.
pub const STEP: f64 = 1e-3;
/// Step for layers that are linear in every checked coordinate (conv, dense,
/// FA, pooling by averaging, flatten). Central differences carry no
/// truncation error there, so a wide step only shrinks round-off.
pub const LINEAR_STEP: f64 = 1e-2;
/// Step for whole networks. Probes that would cross a ReLU or pooling kink
/// are detected and skipped rather than avoided by shrinking the step.
pub const NETWORK_STEP: f64 = 1e-4;
/// Coordinates compared per parameter tensor in the network check.
pub const NETWORK_COORDS: usize = 8;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks sit far outside the step.
fn off_kink_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn weighted_sum(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x` with step `step`, over the coordinates in `coords` (all when `None`).
pub fn compare(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: Option<&[usize]>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * h))
        };
        // Richardson extrapolation cancels the h^2 term of the central difference
        let coarse = central(step)?;
        let fine = central(step / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.gen_range(1..=3);
    let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
    let m = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let geom = ConvGeometry::new(rng.gen_range(1..=2), rng.gen_range(0..=1));
    let x = random_tensor(&[c, h, w], rng);
    let kern = random_tensor(&[m, c, k, k], rng);
    let bias = random_tensor(&[m], rng);
    let out = nn::conv2d_forward(&x, &kern, &bias, geom)?;
    let r = random_tensor(out.shape(), rng);
    let g = nn::conv2d_backward(&x, &kern, geom, &r)?;
    let e1 = compare(&x, &g.input, None, LINEAR_STEP, |x| Ok(weighted_sum(&nn::conv2d_forward(x, &kern, &bias, geom)?, &r)))?;
    let e2 = compare(&kern, &g.params["weight"], None, LINEAR_STEP, |k| {
        Ok(weighted_sum(&nn::conv2d_forward(&x, k, &bias, geom)?, &r))
    })?;
    let e3 = compare(&bias, &g.params["bias"], None, LINEAR_STEP, |b| Ok(weighted_sum(&nn::conv2d_forward(&x, &kern, b, geom)?, &r)))?;
    Ok(e1.max(e2).max(e3))
}

fn dense_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (i, o) = (rng.gen_range(1..=12), rng.gen_range(1..=6));
    let x = random_tensor(&[i], rng);
    let w = random_tensor(&[o, i], rng);
    let b = random_tensor(&[o], rng);
    let r = random_tensor(&[o], rng);
    let g = nn::dense_backward(&x, &w, &r)?;
    let e1 = compare(&x, &g.input, None, LINEAR_STEP, |x| Ok(weighted_sum(&nn::dense_forward(x, &w, &b)?, &r)))?;
    let e2 = compare(&w, &g.params["weight"], None, LINEAR_STEP, |w| Ok(weighted_sum(&nn::dense_forward(&x, w, &b)?, &r)))?;
    let e3 = compare(&b, &g.params["bias"], None, LINEAR_STEP, |b| Ok(weighted_sum(&nn::dense_forward(&x, &w, b)?, &r)))?;
    Ok(e1.max(e2).max(e3))
}

fn relu_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)];
    let x = off_kink_tensor(&shape, rng);
    let r = random_tensor(&shape, rng);
    let g = nn::relu_backward(&x, &r)?;
    compare(&x, &g.input, None, STEP, |x| Ok(weighted_sum(&nn::relu_forward(x), &r)))
}

fn maxpool_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7)];
    // distinct values spaced far apart relative to the step: no ties, no switches
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    values.shuffle(rng);
    let x = Tensor::new(shape.to_vec(), values)?;
    let out = nn::maxpool2x2_forward(&x)?;
    let r = random_tensor(out.shape(), rng);
    let g = nn::maxpool2x2_backward(&x, &r)?;
    compare(&x, &g.input, None, STEP, |x| Ok(weighted_sum(&nn::maxpool2x2_forward(x)?, &r)))
}

fn gap_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5)];
    let x = random_tensor(&shape, rng);
    let r = random_tensor(&[shape[0]], rng);
    let g = nn::global_avg_pool_backward(&x, &r)?;
    compare(&x, &g.input, None, LINEAR_STEP, |x| Ok(weighted_sum(&nn::global_avg_pool(x)?, &r)))
}

fn flatten_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let x = random_tensor(&shape, rng);
    let r = random_tensor(&[x.len()], rng);
    let analytic = r.clone().reshape(&shape)?;
    compare(&x, &analytic, None, LINEAR_STEP, |x| Ok(weighted_sum(&nn::flatten(x), &r)))
}

fn fa_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.gen_range(1..=2);
    let size = rng.gen_range(6..=9);
    let m = rng.gen_range(1..=3);
    let geom = ConvGeometry::new(1, 1);
    let x = random_tensor(&[c, size, size], rng);
    let main = random_tensor(&[m, c, 3, 3], rng);
    let main_b = random_tensor(&[m], rng);
    let regions: Vec<Region> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let (rh, rw) = (rng.gen_range(2..=size / 2 + 1), rng.gen_range(2..=size / 2 + 1));
            Region::new(
                rng.gen_range(0..=size - rh),
                rng.gen_range(0..=size - rw),
                rh,
                rw,
                rng.gen_range(0.1..1.0),
            )
        })
        .collect();
    let kernels: Vec<Tensor<f64>> = regions.iter().map(|_| random_tensor(&[m, c, 3, 3], rng)).collect();
    let biases: Vec<Tensor<f64>> = regions.iter().map(|_| random_tensor(&[m], rng)).collect();
    let branches = |ks: &[Tensor<f64>], bs: &[Tensor<f64>]| -> Vec<(Tensor<f64>, Tensor<f64>)> {
        ks.iter().cloned().zip(bs.iter().cloned()).collect()
    };
    let run = |x: &Tensor<f64>, mk: &Tensor<f64>, mb: &Tensor<f64>, kb: &[(Tensor<f64>, Tensor<f64>)]| {
        let br: Vec<Branch<f64>> = kb
            .iter()
            .zip(&regions)
            .map(|((k, b), region)| Branch {
                kernels: k,
                bias: b,
                region,
            })
            .collect();
        fa_forward(x, mk, mb, &br, geom)
    };
    let kb = branches(&kernels, &biases);
    let out = run(&x, &main, &main_b, &kb)?;
    let r = random_tensor(out.shape(), rng);
    let br: Vec<Branch<f64>> = kb
        .iter()
        .zip(&regions)
        .map(|((k, b), region)| Branch {
            kernels: k,
            bias: b,
            region,
        })
        .collect();
    let g = fa_backward(&x, &main, &br, geom, &r, true)?;
    let mut worst = compare(&x, &g.input, None, LINEAR_STEP, |x| Ok(weighted_sum(&run(x, &main, &main_b, &kb)?, &r)))?;
    worst = worst.max(compare(&main, &g.params["weight"], None, LINEAR_STEP, |mk| {
        Ok(weighted_sum(&run(&x, mk, &main_b, &kb)?, &r))
    })?);
    worst = worst.max(compare(&main_b, &g.params["bias"], None, LINEAR_STEP, |mb| {
        Ok(weighted_sum(&run(&x, &main, mb, &kb)?, &r))
    })?);
    for k in 0..kb.len() {
        worst = worst.max(compare(&kb[k].0, &g.params[&format!("branch{k}.weight")], None, LINEAR_STEP, |t| {
            let mut alt = kb.clone();
            alt[k].0 = t.clone();
            Ok(weighted_sum(&run(&x, &main, &main_b, &alt)?, &r))
        })?);
        worst = worst.max(compare(&kb[k].1, &g.params[&format!("branch{k}.bias")], None, LINEAR_STEP, |t| {
            let mut alt = kb.clone();
            alt[k].1 = t.clone();
            Ok(weighted_sum(&run(&x, &main, &main_b, &alt)?, &r))
        })?);
    }
    Ok(worst)
}

fn logits_and_label(rng: &mut ChaCha8Rng) -> (Tensor<f64>, usize) {
    let c = rng.gen_range(2..=10);
    (Tensor::from_fn(&[c], |_| rng.gen_range(-3.0..3.0)), rng.gen_range(0..c))
}

fn ce_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (z, y) = logits_and_label(rng);
    let out = ce_loss(z.data(), y, None)?;
    compare(&z, &Tensor::new(vec![z.len()], out.grad)?, None, STEP, |z| Ok(ce_loss(z.data(), y, None)?.loss))
}

fn wce_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (z, y) = logits_and_label(rng);
    let w: Vec<f64> = (0..z.len()).map(|_| rng.gen_range(0.1..3.0)).collect();
    let out = ce_loss(z.data(), y, Some(&w))?;
    compare(&z, &Tensor::new(vec![z.len()], out.grad)?, None, STEP, |z| Ok(ce_loss(z.data(), y, Some(&w))?.loss))
}

fn lsr_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (z, y) = logits_and_label(rng);
    let eps = rng.gen_range(0.0..1.0);
    let out = lsr_loss(z.data(), y, eps)?;
    compare(&z, &Tensor::new(vec![z.len()], out.grad)?, None, STEP, |z| Ok(lsr_loss(z.data(), y, eps)?.loss))
}

/// Small MiniCNN with an FA block; CE loss on one sample. A random subset of
/// each parameter tensor is compared, skipping coordinates whose probes would
/// cross a ReLU or pooling kink, where no finite difference is meaningful.
fn network_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let opts = MiniCnnOptions {
        conv_channels: [2, 3, 4],
        hidden: 8,
        ..MiniCnnOptions::default()
    };
    let classes = rng.gen_range(2..=5);
    let spec = NetworkSpec::mini_cnn([1, 16, 16], classes, &opts)?;
    let mut state = build::<f64>(&spec, rng.gen())?;
    // zero biases put pre-activations exactly on ReLU kinks wherever the
    // layer input is all zero; move to a generic point
    for (name, p) in state.params.iter_mut() {
        if name.ends_with("bias") {
            *p = Tensor::from_fn(p.shape(), |_| rng.gen_range(-0.2..0.2));
        }
    }
    let x = Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let label = rng.gen_range(0..classes);
    let (logits, cache) = state.forward_cached(&x)?;
    let d = ce_loss(logits.data(), label, None)?;
    let grads = state.backward_sample(&cache, &Tensor::new(vec![classes], d.grad)?)?;
    let loss_at = |s: &NetworkState<f64>| -> Result<f64> { Ok(ce_loss(s.forward_sample(&x)?.data(), label, None)?.loss) };
    let base = state.activation_pattern(&x)?;
    let mut worst = 0.0f64;
    for (name, p) in &state.params {
        let mut coords: Vec<usize> = (0..p.len()).collect();
        coords.shuffle(rng);
        let mut checked = 0;
        for i in coords {
            if checked == NETWORK_COORDS {
                break;
            }
            // probes at x_i +- h and +- h/2, all required to stay on the
            // linear piece of the unperturbed point
            let mut alt = state.clone();
            let mut values = [0.0; 4];
            let mut same_piece = true;
            for (slot, offset) in [NETWORK_STEP, -NETWORK_STEP, NETWORK_STEP / 2.0, -NETWORK_STEP / 2.0].into_iter().enumerate() {
                alt.params.get_mut(name).expect("same keys").data_mut()[i] = p.data()[i] + offset;
                if alt.activation_pattern(&x)? != base {
                    same_piece = false;
                    break;
                }
                values[slot] = loss_at(&alt)?;
            }
            if !same_piece {
                continue;
            }
            let coarse = (values[0] - values[1]) / (2.0 * NETWORK_STEP);
            let fine = (values[2] - values[3]) / NETWORK_STEP;
            worst = worst.max(relative_error(grads[name].data()[i], (4.0 * fine - coarse) / 3.0));
            checked += 1;
        }
    }
    Ok(worst)
}

type Instance = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Checked components, in report order.
pub const COMPONENTS: &[(&str, Instance)] = &[
    ("conv2d", conv_instance),
    ("dense", dense_instance),
    ("relu", relu_instance),
    ("maxpool2x2", maxpool_instance),
    ("global_avg_pool", gap_instance),
    ("flatten", flatten_instance),
    ("feature_fusion", fa_instance),
    ("ce", ce_instance),
    ("wce", wce_instance),
    ("lsr", lsr_instance),
];

/// Largest relative error per component over `instances` random problems.
pub fn layer_and_loss_suite(instances: usize, seed: u64) -> Result<BTreeMap<&'static str, f64>> {
    let mut out = BTreeMap::new();
    for (k, (name, f)) in COMPONENTS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(f(&mut rng)?);
        }
        out.insert(*name, worst);
    }
    Ok(out)
}

/// Largest relative error of the full-network check over `instances` draws.
pub fn network_suite(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(network_instance(&mut rng)?);
    }
    Ok(worst)
}
