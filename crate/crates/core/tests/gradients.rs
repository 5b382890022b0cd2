mod common;

use common::*;
use rand::Rng;
use stemseg::autodiff::{Graph, Padding};

#[test]
fn every_operation_matches_central_differences() {
    let cases = gradient_suite();
    for c in &cases {
        println!("{:<24} max rel err {:.3e} over {} instances", c.name, c.max_error, c.instances);
    }
    for c in &cases {
        assert!(c.max_error < TOLERANCE, "{}: {:.3e}", c.name, c.max_error);
        assert!(c.instances >= 20);
    }
}

#[test]
fn transpose_conv_is_the_adjoint_of_strided_conv() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (b, c, f) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (2 * r.gen_range(1..5), 2 * r.gen_range(1..5));
        let x = uniform(&[b, c, h, w], -1.0, 1.0, &mut r);
        let y = uniform(&[b, f, h / 2, w / 2], -1.0, 1.0, &mut r);
        // conv2d kernel [F, C, 2, 2]; the transpose reads it as [F, C, 2, 2]
        // with F as its input channels.
        let k = uniform(&[f, c, 2, 2], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, yv, kv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(k));
        let cx = g.conv2d(xv, kv, None, 2, Padding::Valid).unwrap();
        let ty = g.transpose_conv2d(yv, kv, 2).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn encoder_learns_from_either_loss_alone() {
    let stem_only = encoder_gradient_mass(0.0);
    let plant_only = encoder_gradient_mass(1.0);
    assert!(stem_only > 0.0, "stem loss gives no encoder gradient");
    assert!(plant_only > 0.0, "plant loss gives no encoder gradient");
}
