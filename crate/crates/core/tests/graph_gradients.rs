//! Analytic gradients of every graph primitive against central differences.

mod common;

use common::*;
use spectrovq::nn::{AttnMask, Graph, Var};

const INSTANCES: u64 = 20;

fn check_many(name: &str, shapes: &[&[usize]], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut r, s, 1.0)).collect();
        let err = grad_check(build, &inputs);
        assert!(err < FD_TOL, "{name}: instance {seed} relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    check_many("add", &[&[3, 4], &[3, 4]], &|g, v| {
        let y = g.add(v[0], v[1]);
        weighted_sum(g, y, 1)
    });
    check_many("sub", &[&[3, 4], &[3, 4]], &|g, v| {
        let y = g.sub(v[0], v[1]);
        weighted_sum(g, y, 2)
    });
    check_many("mul", &[&[5], &[5]], &|g, v| {
        let y = g.mul(v[0], v[1]);
        weighted_sum(g, y, 3)
    });
    check_many("scale+square", &[&[2, 3]], &|g, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.square(y);
        g.mean(y)
    });
    check_many("abs", &[&[6]], &|g, v| {
        let y = g.abs(v[0]);
        weighted_sum(g, y, 4)
    });
    check_many("silu", &[&[2, 2, 3]], &|g, v| {
        let x = g.scale(v[0], 3.0);
        let y = g.silu(x);
        weighted_sum(g, y, 5)
    });
    check_many("broadcast", &[&[2, 3, 4], &[3, 4]], &|g, v| {
        let y = g.add_broadcast(v[0], v[1]);
        weighted_sum(g, y, 6)
    });
    check_many("reshape", &[&[2, 6]], &|g, v| {
        let y = g.reshape(v[0], &[3, 4]);
        weighted_sum(g, y, 7)
    });
}

#[test]
fn convolution_and_resampling() {
    for (stride, k, cin, cout) in [(1, 3, 2, 3), (2, 3, 2, 3), (1, 1, 2, 3), (2, 4, 2, 3), (1, 3, 6, 6), (1, 2, 2, 2)] {
        check_many(
            &format!("conv2d s{stride} k{k}"),
            &[&[2, cin, 7, 6], &[cout, cin, k, k], &[cout]],
            &|g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, k / 2);
                weighted_sum(g, y, 11)
            },
        );
    }
    check_many("upsample2x", &[&[2, 3, 3, 2]], &|g, v| {
        let y = g.upsample2x(v[0]);
        weighted_sum(g, y, 12)
    });
    check_many("global_avg_pool", &[&[2, 3, 4, 5]], &|g, v| {
        let y = g.global_avg_pool(v[0]);
        weighted_sum(g, y, 13)
    });
    check_many("tokens round trip", &[&[2, 3, 2, 4]], &|g, v| {
        let t = g.to_tokens(v[0]);
        let t2 = g.silu(t);
        let y = g.from_tokens(t2, 2, 4);
        weighted_sum(g, y, 14)
    });
}

#[test]
fn dense_and_normalization() {
    check_many("linear", &[&[2, 3, 4], &[4, 5], &[5]], &|g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        weighted_sum(g, y, 21)
    });
    check_many("layer_norm", &[&[3, 6], &[6], &[6]], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        weighted_sum(g, y, 22)
    });
}

#[test]
fn attention_variants() {
    for (heads, mask) in [(1, AttnMask::Full), (2, AttnMask::Causal), (3, AttnMask::Full)] {
        check_many(
            &format!("attention h{heads} {mask:?}"),
            &[&[2, 5, 6], &[2, 5, 6], &[2, 5, 6]],
            &|g, v| {
                let y = g.attention(v[0], v[1], v[2], heads, mask);
                weighted_sum(g, y, 31)
            },
        );
    }
}

#[test]
fn sequence_and_lookup_ops() {
    check_many("concat+slice", &[&[2, 3, 4], &[2, 2, 4]], &|g, v| {
        let c = g.concat_seq(v[0], v[1]);
        let s = g.slice_seq(c, 1, 3);
        weighted_sum(g, s, 41)
    });
    check_many("gather_rows", &[&[5, 3]], &|g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2]);
        weighted_sum(g, y, 42)
    });
    check_many("cross_entropy", &[&[4, 6]], &|g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]));
}

#[test]
fn straight_through_and_gan_terms() {
    // The estimator's backward is the downstream gradient evaluated at the
    // quantized point, so the oracle differentiates the downstream function
    // directly at `quantized`.
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let encoded = random_tensor(&mut r, &[3, 4], 1.0);
        let quantized = random_tensor(&mut r, &[3, 4], 1.0);
        let downstream = |g: &mut Graph, z: Var| {
            let y = g.square(z);
            let y = g.silu(y);
            weighted_sum(g, y, 51)
        };
        let mut g = Graph::new();
        let e = g.input(encoded.clone());
        let q = g.constant(quantized.clone());
        let z = g.straight_through(e, q);
        assert_eq!(g.value(z), &quantized);
        let loss = downstream(&mut g, z);
        let analytic = g.backward(loss).get(e).unwrap().clone();
        let eval = |ts: &[spectrovq::Tensor]| {
            let mut g = Graph::new();
            let z = g.constant(ts[0].clone());
            let l = downstream(&mut g, z);
            g.value(l).item()
        };
        let numeric = numeric_grads(&eval, &[quantized], FD_EPS);
        let err = rel_error(&analytic, &numeric[0]);
        assert!(err < FD_TOL, "straight_through instance {seed}: {err:e}");
    }
    check_many("bce real", &[&[2, 1, 3, 3]], &|g, v| {
        let x = g.scale(v[0], 4.0);
        g.bce_with_logits(x, true)
    });
    check_many("bce fake", &[&[2, 1, 3, 3]], &|g, v| {
        let x = g.scale(v[0], 4.0);
        g.bce_with_logits(x, false)
    });
}
