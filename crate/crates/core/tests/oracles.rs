//! Implementations checked against independent brute-force oracles.

use fusionvote::data::{generate_synthetic, prototype, SynthConfig};
use fusionvote::ensemble::{noi, rank_vector, t2v, top1_vote};
use fusionvote::fga::{fuse_weights, select_parents, selection_probabilities};
use fusionvote::losses::{ce_loss, lsr_loss, pick_loss, LossKind, LossPolicy};
use fusionvote::model::{build, fa_forward, Branch, MiniCnnOptions, NetworkSpec, Region};
use fusionvote::nn::ConvGeometry;
use fusionvote::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn worked_example() -> Vec<Vec<f64>> {
    vec![
        vec![0.295, 0.138, -1.331, 0.917, -1.429, -0.502, -0.712],
        vec![0.312, 0.058, -1.383, 0.888, -1.426, -0.547, -0.495],
        vec![0.187, -0.119, -0.835, 1.715, -1.240, -0.118, -1.127],
        vec![1.518, -0.168, -1.641, 0.489, -1.482, -0.985, -0.491],
        vec![0.798, -0.210, -1.823, 0.753, -1.308, -0.582, -1.493],
        vec![0.403, -0.433, -1.392, -0.637, -0.493, -0.131, -1.072],
    ]
}

#[test]
fn t2v_six_network_worked_example() {
    let d = t2v(&worked_example(), 1.9, 1.0).unwrap();
    let want = [8.7, 0.0, 0.0, 7.7, 0.0, 1.0, 0.0];
    for (a, b) in d.aggregate.iter().zip(want) {
        assert!((a - b).abs() < 1e-9, "{:?}", d.aggregate);
    }
    assert_eq!(d.class, 0);
    // first row: top-1 is class 3, top-2 class 0
    assert_eq!(rank_vector(&worked_example()[0])[3], 6);
    assert_eq!(rank_vector(&worked_example()[0])[0], 5);
}

#[test]
fn top1_and_noi_on_worked_example() {
    let d = top1_vote(&worked_example()).unwrap();
    assert_eq!(d.aggregate, vec![3.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
    assert_eq!(d.class, 0);

    let d = noi(&worked_example()).unwrap();
    let mut want = vec![0.0f64; 7];
    for row in worked_example() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (w, v) in want.iter_mut().zip(&row) {
            *w += v.exp() / z;
        }
    }
    for (a, b) in d.aggregate.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9);
    }
}

/// Direct nested-loop FA: zero-padded cross-correlation of the image and of
/// each crop, with crop maps added at the crop position.
fn naive_fa(
    img: &[f64],
    [c, h, w]: [usize; 3],
    main: (&[f64], &[f64]),
    branches: &[(&[f64], &[f64], &Region)],
    m: usize,
    k: usize,
) -> Vec<f64> {
    let p = k / 2;
    let conv = |src: &dyn Fn(usize, isize, isize) -> f64, wt: &[f64], b: &[f64], oh: usize, ow: usize| {
        let mut out = vec![0.0; m * oh * ow];
        for o in 0..m {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = b[o];
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = src(ch, y as isize + ky as isize - p as isize, x as isize + kx as isize - p as isize);
                                s += v * wt[((o * c + ch) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = s;
                }
            }
        }
        out
    };
    let full = |ch: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[(ch * h + y as usize) * w + x as usize]
        }
    };
    let mut out = conv(&full, main.0, main.1, h, w);
    for (wt, b, r) in branches {
        let cropped = |ch: usize, y: isize, x: isize| {
            if y < 0 || x < 0 || y >= r.height as isize || x >= r.width as isize {
                0.0
            } else {
                img[(ch * h + r.top + y as usize) * w + r.left + x as usize]
            }
        };
        let part = conv(&cropped, wt, b, r.height, r.width);
        for o in 0..m {
            for y in 0..r.height {
                for x in 0..r.width {
                    out[(o * h + r.top + y) * w + r.left + x] += r.lambda * part[(o * r.height + y) * r.width + x];
                }
            }
        }
    }
    out
}

#[test]
fn fa_block_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    for _ in 0..10 {
        let (c, h, w, m, k) = (rng.gen_range(1..=3), rng.gen_range(6..=10), rng.gen_range(6..=10), rng.gen_range(1..=4), 3);
        let img = rand_t(&[c, h, w], &mut rng);
        let mk = rand_t(&[m, c, k, k], &mut rng);
        let mb = rand_t(&[m], &mut rng);
        let nb = rng.gen_range(0..=3);
        let regions: Vec<Region> = (0..nb)
            .map(|_| {
                let rh = rng.gen_range(2..=h);
                let rw = rng.gen_range(2..=w);
                Region::new(rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw), rh, rw, rng.gen_range(0.0..1.0))
            })
            .collect();
        let params: Vec<(Tensor<f64>, Tensor<f64>)> =
            regions.iter().map(|_| (rand_t(&[m, c, k, k], &mut rng), rand_t(&[m], &mut rng))).collect();
        let branches: Vec<Branch<f64>> = params
            .iter()
            .zip(&regions)
            .map(|((kernels, bias), region)| Branch { kernels, bias, region })
            .collect();
        let got = fa_forward(&img, &mk, &mb, &branches, ConvGeometry::new(1, 1)).unwrap();
        let naive_branches: Vec<(&[f64], &[f64], &Region)> =
            params.iter().zip(&regions).map(|((a, b), r)| (a.data(), b.data(), r)).collect();
        let want = naive_fa(img.data(), [c, h, w], (mk.data(), mb.data()), &naive_branches, m, k);
        assert_eq!(got.shape(), &[m, h, w]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn raw_pixel_three_nn_separates_classes() {
    let (train, test) = generate_synthetic(&SynthConfig::new(vec![120, 100, 80, 60, 40], 0.25, 16, 0.1, 5)).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let q = test.pixels(i);
        let mut d: Vec<(f32, usize)> = (0..train.len())
            .map(|j| {
                let dist = q.iter().zip(train.pixels(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
                (dist, train.labels()[j])
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut votes = vec![0usize; train.classes()];
        for &(_, l) in &d[..3] {
            votes[l] += 1;
        }
        // majority, ties to the nearest neighbour's class
        let top = *votes.iter().max().unwrap();
        let pred = if top == 1 { d[0].1 } else { votes.iter().position(|&v| v == top).unwrap() };
        correct += usize::from(pred == test.labels()[i]);
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.8, "3-NN accuracy {acc}");
}

#[test]
fn class_prototypes_are_far_apart() {
    let sigma = 0.1f32;
    for a in 0..5 {
        for b in a + 1..5 {
            let pa = prototype(a, 16);
            let pb = prototype(b, 16);
            let l2 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
            assert!(l2 > 3.0 * sigma, "classes {a},{b}: distance {l2}");
        }
    }
}

#[test]
fn pick_loss_frequencies_follow_probabilities() {
    let policy = LossPolicy::new(vec![(LossKind::Lsr, 0.5), (LossKind::Ce, 0.3), (LossKind::Wce, 0.2)], 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let mut counts = [0usize; 3];
    for b in 0..n {
        match pick_loss(&policy, b, &mut rng).unwrap() {
            LossKind::Lsr => counts[0] += 1,
            LossKind::Ce => counts[1] += 1,
            LossKind::Wce => counts[2] += 1,
        }
    }
    for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
        let f = *c as f64 / n as f64;
        // 5 standard deviations
        assert!((f - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
    }
}

#[test]
fn first_parent_frequencies_follow_boltzmann_weights() {
    let losses = [0.3, 0.5, 0.9, 1.4];
    let probs = selection_probabilities(&losses, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[select_parents(&losses, 0.5, 1, &mut rng).unwrap()[0]] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
    }
    // exact softmax of -loss/tau
    let z: f64 = losses.iter().map(|l| (-l / 0.5f64).exp()).sum();
    for (p, l) in probs.iter().zip(losses) {
        assert!((p - (-l / 0.5f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn lsr_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in 2..=10usize {
        let uniform = vec![0.37f64; c];
        for eps in [0.0, 0.1, 0.5] {
            let l = lsr_loss(&uniform, 0, eps).unwrap().loss;
            assert!((l - (c as f64).ln()).abs() < 1e-9);
        }
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0..c);
        // LSR = (1-eps) CE_y + eps/(C-1) sum_{j != y} CE_j
        let eps = 0.2;
        let ce = |j| ce_loss(&logits, j, None).unwrap().loss;
        let others: f64 = (0..c).filter(|&j| j != y).map(ce).sum();
        let want = (1.0 - eps) * ce(y) + eps / (c as f64 - 1.0) * others;
        assert!((lsr_loss(&logits, y, eps).unwrap().loss - want).abs() < 1e-9);
    }
}

#[test]
fn fusion_is_parameterwise_mean() {
    let opts = MiniCnnOptions {
        conv_channels: [3, 4, 5],
        hidden: 8,
        ..MiniCnnOptions::default()
    };
    let spec = NetworkSpec::mini_cnn([1, 16, 16], 4, &opts).unwrap();
    let parents: Vec<_> = (0..3).map(|s| build::<f64>(&spec, s).unwrap()).collect();
    let refs: Vec<_> = parents.iter().collect();
    let child = fuse_weights(&refs).unwrap();
    for (name, t) in &child.params {
        for (i, v) in t.data().iter().enumerate() {
            let mean = parents.iter().map(|p| p.params[name].data()[i]).sum::<f64>() / 3.0;
            assert!((v - mean).abs() < 1e-15, "{name}[{i}]");
        }
    }
    assert_eq!(child.epoch, 0);
}
