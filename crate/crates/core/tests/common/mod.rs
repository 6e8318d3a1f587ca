//! Shared finite-difference gradient checking used by the gradcheck and
//! acceptance test targets.
//!
//! Every check compares reverse-mode gradients against central differences
//! (h = 1e-6) of a scalar loss `sum(r .* f(x))` with a fixed random
//! projection `r`, and reports the worst relative error
//! |a - n| / max(1, |a|, |n|).

use stable_attn::attention::DeformableAttention;
use stable_attn::data;
use stable_attn::decoder::{self, IMG};
use stable_attn::dsp;
use stable_attn::prompts::{Box2, PromptSpec};
use stable_attn::rng::Rng;
use stable_attn::tensor::{Graph, ParamGroup, Var};
use stable_attn::train;

pub const FD_H: f64 = 1e-6;
/// Per-op tolerance on small instances.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for the composed full-forward path.
pub const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Worst relative error of d(loss)/d(x) at `x0` for the graph built by
/// `build`, where loss = sum(r .* build(g, x)).
pub fn gradcheck(shape: &[usize], x0: &[f64], build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let v = g.leaf(shape, x.to_vec(), true);
        let out = build(&mut g, v);
        let out_shape = g.shape(out).to_vec();
        let out_len = g.data(out).len();
        let mut pr = Rng::new(0x9e3779b97f4a7c15);
        let r: Vec<f64> = (0..out_len).map(|_| pr.range(-1.0, 1.0)).collect();
        let rv = g.constant(&out_shape, r);
        let prod = g.mul(out, rv).expect("projection shape");
        let loss = g.sum_all(prod);
        let lv = g.data(loss)[0];
        if want_grad {
            g.backward(loss).expect("backward");
            (lv, g.grad(v).to_vec())
        } else {
            (lv, Vec::new())
        }
    };
    let (_, analytic) = eval(x0, true);
    assert_eq!(analytic.len(), x0.len(), "leaf gradient missing");
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        xp[i] += FD_H;
        let mut xm = x0.to_vec();
        xm[i] -= FD_H;
        let numeric = (eval(&xp, false).0 - eval(&xm, false).0) / (2.0 * FD_H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn rand_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

/// Run `instances` random checks of one op and return the worst error.
fn repeat(
    instances: usize,
    seed: u64,
    mk: &dyn Fn(&mut Rng) -> (Vec<usize>, Vec<f64>, Box<dyn Fn(&mut Graph, Var) -> Var>),
) -> f64 {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = Rng::new(seed).derive(inst as u64);
        let (shape, x0, build) = mk(&mut rng);
        worst = worst.max(gradcheck(&shape, &x0, build.as_ref()));
    }
    worst
}

/// (op name, worst relative error over >= 10 random instances) for every
/// differentiable graph op.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let n = 10;
    let mut out: Vec<(&'static str, f64)> = Vec::new();

    out.push(("add", repeat(n, 0x01, &|rng| {
        let c = rand_vec(rng, 12, -2.0, 2.0);
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.add(x, cv).unwrap()
        }))
    })));

    out.push(("mul", repeat(n, 0x02, &|rng| {
        let c = rand_vec(rng, 12, -2.0, 2.0);
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.mul(x, cv).unwrap()
        }))
    })));

    out.push(("div_numerator", repeat(n, 0x03, &|rng| {
        let c = rand_vec(rng, 12, 0.5, 1.5);
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.div(x, cv).unwrap()
        }))
    })));

    out.push(("div_denominator", repeat(n, 0x04, &|rng| {
        let c = rand_vec(rng, 12, -2.0, 2.0);
        let x0 = rand_vec(rng, 12, 0.5, 1.5);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.div(cv, x).unwrap()
        }))
    })));

    out.push(("scale", repeat(n, 0x05, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| g.scale(x, -1.7)))
    })));

    out.push(("add_const", repeat(n, 0x06, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| g.add_const(x, 0.3)))
    })));

    out.push(("gelu", repeat(n, 0x07, &|rng| {
        let x0 = rand_vec(rng, 12, -3.0, 3.0);
        (vec![3, 4], x0, Box::new(|g, x| g.gelu(x)))
    })));

    out.push(("sigmoid", repeat(n, 0x08, &|rng| {
        let x0 = rand_vec(rng, 12, -4.0, 4.0);
        (vec![3, 4], x0, Box::new(|g, x| g.sigmoid(x)))
    })));

    out.push(("exp", repeat(n, 0x09, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| g.exp(x)))
    })));

    out.push(("scaled_tanh", repeat(n, 0x0a, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| g.scaled_tanh(x, 0.25).unwrap()))
    })));

    out.push(("reshape", repeat(n, 0x0b, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| {
            let y = g.reshape(x, &[2, 6]).unwrap();
            g.gelu(y)
        }))
    })));

    out.push(("matmul_left", repeat(n, 0x0c, &|rng| {
        let c = rand_vec(rng, 4 * 5, -1.0, 1.0);
        let x0 = rand_vec(rng, 3 * 4, -1.0, 1.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 5], c.clone());
            g.matmul(x, cv).unwrap()
        }))
    })));

    out.push(("matmul_right", repeat(n, 0x0d, &|rng| {
        let c = rand_vec(rng, 3 * 4, -1.0, 1.0);
        let x0 = rand_vec(rng, 4 * 5, -1.0, 1.0);
        (vec![4, 5], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.matmul(cv, x).unwrap()
        }))
    })));

    out.push(("matmul_tb_left", repeat(n, 0x0e, &|rng| {
        let c = rand_vec(rng, 5 * 4, -1.0, 1.0);
        let x0 = rand_vec(rng, 3 * 4, -1.0, 1.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[5, 4], c.clone());
            g.matmul_tb(x, cv).unwrap()
        }))
    })));

    out.push(("matmul_tb_right", repeat(n, 0x0f, &|rng| {
        let c = rand_vec(rng, 3 * 4, -1.0, 1.0);
        let x0 = rand_vec(rng, 5 * 4, -1.0, 1.0);
        (vec![5, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.matmul_tb(cv, x).unwrap()
        }))
    })));

    out.push(("add_bias_input", repeat(n, 0x10, &|rng| {
        let b = rand_vec(rng, 4, -1.0, 1.0);
        let x0 = rand_vec(rng, 3 * 4, -1.0, 1.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let bv = g.constant(&[4], b.clone());
            g.add_bias(x, bv).unwrap()
        }))
    })));

    out.push(("add_bias_bias", repeat(n, 0x11, &|rng| {
        let c = rand_vec(rng, 3 * 4, -1.0, 1.0);
        let x0 = rand_vec(rng, 4, -1.0, 1.0);
        (vec![4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.add_bias(cv, x).unwrap()
        }))
    })));

    out.push(("softmax_rows", repeat(n, 0x12, &|rng| {
        let x0 = rand_vec(rng, 3 * 6, -3.0, 3.0);
        (vec![3, 6], x0, Box::new(|g, x| g.softmax_rows(x).unwrap()))
    })));

    out.push(("layer_norm_input", repeat(n, 0x13, &|rng| {
        let gamma = rand_vec(rng, 6, 0.5, 1.5);
        let beta = rand_vec(rng, 6, -0.5, 0.5);
        let x0 = rand_vec(rng, 4 * 6, -2.0, 2.0);
        (vec![4, 6], x0, Box::new(move |g, x| {
            let gm = g.constant(&[6], gamma.clone());
            let bt = g.constant(&[6], beta.clone());
            g.layer_norm(x, gm, bt, 1e-5).unwrap()
        }))
    })));

    out.push(("layer_norm_gamma", repeat(n, 0x14, &|rng| {
        let c = rand_vec(rng, 4 * 6, -2.0, 2.0);
        let beta = rand_vec(rng, 6, -0.5, 0.5);
        let x0 = rand_vec(rng, 6, 0.5, 1.5);
        (vec![6], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 6], c.clone());
            let bt = g.constant(&[6], beta.clone());
            g.layer_norm(cv, x, bt, 1e-5).unwrap()
        }))
    })));

    out.push(("layer_norm_beta", repeat(n, 0x15, &|rng| {
        let c = rand_vec(rng, 4 * 6, -2.0, 2.0);
        let gamma = rand_vec(rng, 6, 0.5, 1.5);
        let x0 = rand_vec(rng, 6, -0.5, 0.5);
        (vec![6], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 6], c.clone());
            let gm = g.constant(&[6], gamma.clone());
            g.layer_norm(cv, gm, x, 1e-5).unwrap()
        }))
    })));

    out.push(("conv_1x1_input", repeat(n, 0x16, &|rng| {
        let w = rand_vec(rng, 3 * 2, -1.0, 1.0);
        let b = rand_vec(rng, 2, -1.0, 1.0);
        let x0 = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        (vec![4, 4, 3], x0, Box::new(move |g, x| {
            let wv = g.constant(&[3, 2], w.clone());
            let bv = g.constant(&[2], b.clone());
            g.conv_1x1(x, wv, bv).unwrap()
        }))
    })));

    out.push(("conv_1x1_weight", repeat(n, 0x17, &|rng| {
        let c = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        let b = rand_vec(rng, 2, -1.0, 1.0);
        let x0 = rand_vec(rng, 3 * 2, -1.0, 1.0);
        (vec![3, 2], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 4, 3], c.clone());
            let bv = g.constant(&[2], b.clone());
            g.conv_1x1(cv, x, bv).unwrap()
        }))
    })));

    out.push(("conv_1x1_bias", repeat(n, 0x18, &|rng| {
        let c = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        let w = rand_vec(rng, 3 * 2, -1.0, 1.0);
        let x0 = rand_vec(rng, 2, -1.0, 1.0);
        (vec![2], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 4, 3], c.clone());
            let wv = g.constant(&[3, 2], w.clone());
            g.conv_1x1(cv, wv, x).unwrap()
        }))
    })));

    out.push(("depthwise_conv5x5_input", repeat(n, 0x19, &|rng| {
        let w = rand_vec(rng, 5 * 5 * 2, -0.5, 0.5);
        let b = rand_vec(rng, 2, -0.5, 0.5);
        let x0 = rand_vec(rng, 6 * 6 * 2, -1.0, 1.0);
        (vec![6, 6, 2], x0, Box::new(move |g, x| {
            let wv = g.constant(&[5, 5, 2], w.clone());
            let bv = g.constant(&[2], b.clone());
            g.depthwise_conv5x5(x, wv, bv).unwrap()
        }))
    })));

    out.push(("depthwise_conv5x5_weight", repeat(n, 0x1a, &|rng| {
        let c = rand_vec(rng, 6 * 6 * 2, -1.0, 1.0);
        let b = rand_vec(rng, 2, -0.5, 0.5);
        let x0 = rand_vec(rng, 5 * 5 * 2, -0.5, 0.5);
        (vec![5, 5, 2], x0, Box::new(move |g, x| {
            let cv = g.constant(&[6, 6, 2], c.clone());
            let bv = g.constant(&[2], b.clone());
            g.depthwise_conv5x5(cv, x, bv).unwrap()
        }))
    })));

    out.push(("depthwise_conv5x5_bias", repeat(n, 0x1b, &|rng| {
        let c = rand_vec(rng, 6 * 6 * 2, -1.0, 1.0);
        let w = rand_vec(rng, 5 * 5 * 2, -0.5, 0.5);
        let x0 = rand_vec(rng, 2, -0.5, 0.5);
        (vec![2], x0, Box::new(move |g, x| {
            let cv = g.constant(&[6, 6, 2], c.clone());
            let wv = g.constant(&[5, 5, 2], w.clone());
            g.depthwise_conv5x5(cv, wv, x).unwrap()
        }))
    })));

    out.push(("grid_sample_features", repeat(n, 0x1c, &|rng| {
        let loc = rand_vec(rng, 3 * 3 * 2, -0.9, 0.9);
        let x0 = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        (vec![4, 4, 3], x0, Box::new(move |g, x| {
            let lv = g.constant(&[3, 3, 2], loc.clone());
            g.grid_sample_bilinear(x, lv).unwrap()
        }))
    })));

    out.push(("grid_sample_locations", repeat(n, 0x1d, &|rng| {
        let c = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        let x0 = rand_vec(rng, 3 * 3 * 2, -0.9, 0.9);
        (vec![3, 3, 2], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 4, 3], c.clone());
            g.grid_sample_bilinear(cv, x).unwrap()
        }))
    })));

    out.push(("mul_channels_features", repeat(n, 0x1e, &|rng| {
        let a = rand_vec(rng, 4 * 4, 0.2, 1.8);
        let x0 = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        (vec![4, 4, 3], x0, Box::new(move |g, x| {
            let av = g.constant(&[4, 4, 1], a.clone());
            g.mul_channels(x, av).unwrap()
        }))
    })));

    out.push(("mul_channels_amplitude", repeat(n, 0x1f, &|rng| {
        let c = rand_vec(rng, 4 * 4 * 3, -1.0, 1.0);
        let x0 = rand_vec(rng, 4 * 4, 0.2, 1.8);
        (vec![4, 4, 1], x0, Box::new(move |g, x| {
            let cv = g.constant(&[4, 4, 3], c.clone());
            g.mul_channels(cv, x).unwrap()
        }))
    })));

    out.push(("scale_by_input", repeat(n, 0x20, &|rng| {
        let s = rng.range(0.5, 1.5);
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let sv = g.scalar(s);
            g.scale_by(x, sv).unwrap()
        }))
    })));

    out.push(("scale_by_scalar", repeat(n, 0x21, &|rng| {
        let c = rand_vec(rng, 12, -2.0, 2.0);
        let x0 = vec![rng.range(0.5, 1.5)];
        (vec![1], x0, Box::new(move |g, x| {
            let cv = g.constant(&[3, 4], c.clone());
            g.scale_by(cv, x).unwrap()
        }))
    })));

    out.push(("slice_rows", repeat(n, 0x22, &|rng| {
        let x0 = rand_vec(rng, 5 * 4, -2.0, 2.0);
        (vec![5, 4], x0, Box::new(|g, x| g.slice_rows(x, 1, 4).unwrap()))
    })));

    out.push(("slice_cols", repeat(n, 0x23, &|rng| {
        let x0 = rand_vec(rng, 5 * 4, -2.0, 2.0);
        (vec![5, 4], x0, Box::new(|g, x| g.slice_cols(x, 1, 3).unwrap()))
    })));

    out.push(("concat_rows", repeat(n, 0x24, &|rng| {
        let c = rand_vec(rng, 2 * 4, -2.0, 2.0);
        let x0 = rand_vec(rng, 3 * 4, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(move |g, x| {
            let cv = g.constant(&[2, 4], c.clone());
            g.concat_rows(&[x, cv, x]).unwrap()
        }))
    })));

    out.push(("sum_all", repeat(n, 0x25, &|rng| {
        let x0 = rand_vec(rng, 12, -2.0, 2.0);
        (vec![3, 4], x0, Box::new(|g, x| {
            let y = g.gelu(x);
            g.sum_all(y)
        }))
    })));

    out.push(("bce_with_logits_mean", repeat(n, 0x26, &|rng| {
        let target: Vec<f64> = (0..12).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
        let x0 = rand_vec(rng, 12, -3.0, 3.0);
        (vec![3, 4], x0, Box::new(move |g, x| g.bce_with_logits_mean(x, &target).unwrap()))
    })));

    out
}

/// Worst relative error of the full deformable cross-attention path with
/// respect to the offset-network (adapter) parameters, on a real scene.
pub fn deformable_path_grad_err() -> f64 {
    let mut rng = Rng::new(0xdcaa);
    let mut base = decoder::init_base(&mut rng);
    base.frozen = true; // skip base gradients; only the adapter is under test
    let mut adapter = dsp::init_adapter(&mut rng);
    // wake the zero-initialized offset heads so offsets and amplitudes move
    for l in 0..decoder::LAYERS {
        for suffix in ["conv_out.w", "conv_out.b"] {
            let name = format!("dsp.l{l}.{suffix}");
            for v in &mut adapter.get_mut(&name).data {
                *v = 0.4 * rng.gaussian();
            }
        }
    }
    let scene = &data::generate_dataset(1, 0.3, &Rng::new(5))[0];
    let gt = Box2::around_mask(&scene.target_mask).expect("nonempty target");
    let prompt = PromptSpec::gt_box(gt);
    let proj: Vec<f64> = {
        let mut r = Rng::new(0x99aa);
        (0..IMG * IMG).map(|_| r.range(-1.0, 1.0)).collect()
    };
    let loss_of = |adapter: &ParamGroup, sink: Option<&mut ParamGroup>| -> f64 {
        let mut g = Graph::new();
        let out = train::forward_scene(
            &mut g,
            &base,
            Some(adapter),
            &DeformableAttention,
            &scene.image,
            &prompt,
            None,
            0.25,
        )
        .expect("forward");
        let pv = g.constant(&[IMG, IMG], proj.clone());
        let prod = g.mul(out.full_logits, pv).unwrap();
        let loss = g.sum_all(prod);
        let lv = g.data(loss)[0];
        if let Some(grp) = sink {
            g.backward(loss).expect("backward");
            grp.absorb_grads(&g);
        }
        lv
    };

    let mut grads = adapter.clone();
    grads.zero_grads();
    loss_of(&adapter, Some(&mut grads));

    let names: Vec<String> = adapter
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("dsp."))
        .collect();
    let mut idx_rng = Rng::new(0x1d1d);
    let mut worst = 0.0f64;
    for name in &names {
        let len = adapter.get(name).data.len();
        for _ in 0..3.min(len) {
            let i = idx_rng.below(len);
            let orig = adapter.get(name).data[i];
            adapter.get_mut(name).data[i] = orig + FD_H;
            let lp = loss_of(&adapter, None);
            adapter.get_mut(name).data[i] = orig - FD_H;
            let lm = loss_of(&adapter, None);
            adapter.get_mut(name).data[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_H);
            let analytic = grads.get(name).grad[i];
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
