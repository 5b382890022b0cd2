#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemseg::autodiff::{Graph, NormMode, Padding, Var};
use stemseg::netarch::{he_init, ForwardPass, Mode, NetworkConfig};
use stemseg::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in [0.05, 1], random sign; keeps leaky ReLU away
/// from its kink by far more than the finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Builds a scalar from leaves on a fresh graph.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between the tape
/// gradient and central differences, over every coordinate of every input.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + H;
            let up = eval(&values);
            values[i].data_mut()[j] = orig - H;
            let down = eval(&values);
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Reduce any tensor to a scalar through fixed random weights, so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let mut r = rng(seed);
    let w = g.constant(Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0)));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

pub struct Case {
    pub name: &'static str,
    pub max_error: f64,
    pub instances: u64,
}

/// One entry per differentiable operation and loss.
pub fn gradient_suite() -> Vec<Case> {
    let mut cases = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(u64) -> (Vec<Tensor<f64>>, Box<Builder<'static>>)| {
        let mut worst = 0.0f64;
        for seed in 0..INSTANCES {
            let (inputs, build) = make(seed);
            worst = worst.max(max_relative_error(&inputs, build.as_ref()));
        }
        cases.push(Case {
            name,
            max_error: worst,
            instances: INSTANCES,
        });
    };

    run("conv2d same stride 1", &|s| {
        let mut r = rng(100 + s);
        let (c, f) = (r.gen_range(1..3), r.gen_range(1..3));
        let inputs = vec![
            uniform(&[2, c, 5, 4], -1.0, 1.0, &mut r),
            uniform(&[f, c, 3, 3], -1.0, 1.0, &mut r),
            uniform(&[f], -1.0, 1.0, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("conv2d same stride 2", &|s| {
        let mut r = rng(200 + s);
        let inputs = vec![uniform(&[1, 2, 7, 6], -1.0, 1.0, &mut r), uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], None, 2, Padding::Same).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("conv2d valid", &|s| {
        let mut r = rng(300 + s);
        let inputs = vec![uniform(&[2, 1, 6, 5], -1.0, 1.0, &mut r), uniform(&[3, 1, 2, 2], -1.0, 1.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], None, 2, Padding::Valid).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("transpose_conv2d", &|s| {
        let mut r = rng(400 + s);
        let inputs = vec![uniform(&[2, 2, 3, 2], -1.0, 1.0, &mut r), uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.transpose_conv2d(v[0], v[1], 2).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("leaky_relu", &|s| {
        let mut r = rng(500 + s);
        (
            vec![away_from_zero(&[2, 3, 4, 4], &mut r)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.leaky_relu(v[0], 0.01);
                weighted_sum(g, y, s)
            }),
        )
    });
    run("add and mul", &|s| {
        let mut r = rng(600 + s);
        let inputs = vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r), uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[0]).unwrap();
                weighted_sum(g, m, s)
            }),
        )
    });
    run("scale and sum", &|s| {
        let mut r = rng(700 + s);
        let k = r.gen_range(-3.0..3.0);
        (
            vec![uniform(&[1, 1, 4, 5], -1.0, 1.0, &mut r)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.scale(v[0], k);
                let sq = g.mul(y, y).unwrap();
                g.sum(sq)
            }),
        )
    });
    run("dropout", &|s| {
        let mut r = rng(800 + s);
        (
            vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.dropout(v[0], 1.0 / 3.0, true, &mut rng(s)).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("softmax", &|s| {
        let mut r = rng(900 + s);
        (
            vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut r)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.softmax(v[0]).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("concat", &|s| {
        let mut r = rng(1000 + s);
        let inputs = vec![uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r), uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r)];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.concat(&[v[0], v[1], v[0]]).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("batch_norm", &|s| {
        let mut r = rng(1100 + s);
        let inputs = vec![
            uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r),
            uniform(&[3], 0.5, 1.5, &mut r),
            uniform(&[3], -0.5, 0.5, &mut r),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train, 1e-5).unwrap();
                weighted_sum(g, y, s)
            }),
        )
    });
    run("weighted_cross_entropy", &|s| {
        let mut r = rng(1200 + s);
        let probs = uniform(&[2, 4, 3, 3], 0.05, 1.0, &mut r);
        let target: Vec<u8> = (0..18).map(|_| r.gen_range(0..4)).collect();
        (
            vec![probs],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                g.weighted_cross_entropy(v[0], &target, &[1.0, 10.0, 10.0, 10.0]).unwrap()
            }),
        )
    });
    run("soft_iou_loss", &|s| {
        let mut r = rng(1300 + s);
        let probs = uniform(&[2, 3, 3, 4], 0.01, 1.0, &mut r);
        let target: Vec<u8> = (0..24).map(|_| r.gen_range(0..3)).collect();
        (
            vec![probs],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.soft_iou_loss(v[0], &target, &[1, 2]).unwrap()),
        )
    });
    run("multi_task_loss", &|s| {
        let mut r = rng(1400 + s);
        // extreme alphas shrink one term until central differences drown in rounding
        let alpha = r.gen_range(0.2..0.8);
        let logits_p = uniform(&[1, 4, 2, 4], -2.0, 2.0, &mut r);
        let logits_s = uniform(&[1, 3, 2, 4], -2.0, 2.0, &mut r);
        let tp: Vec<u8> = (0..8).map(|_| r.gen_range(0..4)).collect();
        let ts: Vec<u8> = (0..8).map(|_| r.gen_range(0..3)).collect();
        (
            vec![logits_p, logits_s],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let pp = g.softmax(v[0]).unwrap();
                let ps = g.softmax(v[1]).unwrap();
                let lp = g.weighted_cross_entropy(pp, &tp, &[1.0, 10.0, 10.0, 10.0]).unwrap();
                let ls = g.soft_iou_loss(ps, &ts, &[1, 2]).unwrap();
                g.multi_task_loss(ls, lp, alpha).unwrap()
            }),
        )
    });
    cases
}

/// All-point interpolated AP by enumerating prefixes and, for each distinct
/// recall level, taking the best precision at any prefix reaching it.
pub fn brute_force_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut prefixes = Vec::new();
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prefixes.push((hits as f64 / num_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut levels: Vec<f64> = prefixes.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        if r <= prev {
            continue;
        }
        let best = prefixes.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// Random crop-stem probability blob (one connected argmax region) on an
/// otherwise soil mask; returns `[3, h, w]` channel-major probabilities.
pub fn gaussian_blob(seed: u64, w: usize, h: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let cx = r.gen_range(4.0..(w as f64 - 4.0));
    let cy = r.gen_range(4.0..(h as f64 - 4.0));
    let sigma = r.gen_range(1.5..3.0);
    let amp = r.gen_range(0.8..0.99);
    let plane = w * h;
    let mut p = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let crop = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            let dicot = 0.1 * (1.0 - crop);
            p[plane + y * w + x] = crop;
            p[2 * plane + y * w + x] = dicot;
            p[y * w + x] = 1.0 - crop - dicot;
        }
    }
    p
}

/// Direct summation over every pixel whose argmax is crop stem.
pub fn direct_centroid(p: &[f64], w: usize, h: usize) -> (f64, f64) {
    let plane = w * h;
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (soil, crop, dicot) = (p[i], p[plane + i], p[2 * plane + i]);
            if crop > soil && crop >= dicot {
                sx += crop * x as f64;
                sy += crop * y as f64;
                s += crop;
            }
        }
    }
    (sx / s, sy / s)
}

/// Sum of absolute encoder gradients under the given task weighting.
pub fn encoder_gradient_mass(alpha: f64) -> f64 {
    let cfg = NetworkConfig {
        dropout_p: 0.0,
        ..NetworkConfig::tiny()
    };
    let params = he_init::<f64>(&cfg, 5).unwrap();
    let mut r = rng(9);
    let x = uniform(&[2, 4, 8, 8], -0.5, 0.5, &mut r);
    let plant: Vec<u8> = (0..128).map(|_| r.gen_range(0..4)).collect();
    let stem: Vec<u8> = (0..128).map(|_| r.gen_range(0..3)).collect();
    let mut g = Graph::new();
    let mut fp = ForwardPass::new(&mut g, &params, &cfg, Mode::Train, 0);
    let xv = fp.graph().constant(x);
    let heads = fp.forward(xv).unwrap();
    let bound = fp.bound_params().clone();
    drop(fp);
    let lp = g.weighted_cross_entropy(heads.plant, &plant, &[1.0, 10.0, 10.0, 10.0]).unwrap();
    let ls = g.soft_iou_loss(heads.stem, &stem, &[1, 2]).unwrap();
    let total = g.multi_task_loss(ls, lp, alpha).unwrap();
    g.backward(total).unwrap();
    bound
        .iter()
        .filter(|(name, _)| name.starts_with("encoder."))
        .map(|(_, &v)| g.grad(v).map_or(0.0, |t: &Tensor<f64>| t.data().iter().map(|x| x.abs()).sum()))
        .sum()
}

