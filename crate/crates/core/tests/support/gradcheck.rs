//! Central finite-difference checks for every differentiable op.

#![allow(dead_code)]

use deconf_core::autodiff::{Graph, Segment, Var};
use deconf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 20;
const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
/// Floor on the relative-error denominator so gradients that are exactly
/// zero are compared on an absolute scale.
const FLOOR: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Scalar objective `sum(w ⊙ op(inputs))` with a fixed random `w`, so every
/// output coordinate contributes to the checked gradient.
fn objective<F>(op: &F, inputs: &[Tensor], w: &Tensor, grads: bool) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let out = op(&mut g, &vars);
    let wv = g.leaf(w.clone(), false);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.grad(v)).collect())
}

fn check<F>(name: &str, op: F, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = op(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let w = random(rng, &out_shape, 1.0);
    let (_, analytic) = objective(&op, &inputs, &w, true);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (objective(&op, &plus, &w, false).0 - objective(&op, &minus, &w, false).0) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if !(rel <= REL_TOL) {
                return Err(format!("{name}: input {i} entry {j}: analytic {a} numeric {numeric} rel {rel:e}"));
            }
        }
    }
    Ok(())
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ tag)
}

fn random_segments(rng: &mut ChaCha8Rng, total_max: usize) -> (Vec<Segment>, usize) {
    let n = rng.random_range(1..=3);
    let mut segs = Vec::new();
    let mut start = 0;
    for _ in 0..n {
        let len = rng.random_range(1..=total_max / n);
        segs.push(Segment { start, len });
        start += len;
    }
    (segs, start)
}

pub fn matmul(instances: usize) -> Result<(), String> {
    let mut r = rng(1);
    for _ in 0..instances {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let ins = vec![random(&mut r, &[m, k], 1.0), random(&mut r, &[k, n], 1.0)];
        check("matmul", |g, v| g.matmul(v[0], v[1]).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn add_mul_scale(instances: usize) -> Result<(), String> {
    let mut r = rng(2);
    for _ in 0..instances {
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        let c = r.random_range(-2.0..2.0);
        let ins = vec![random(&mut r, &shape, 1.0), random(&mut r, &shape, 1.0)];
        check("add", |g, v| g.add(v[0], v[1]).unwrap(), ins.clone(), &mut r)?;
        check("mul", |g, v| g.mul(v[0], v[1]).unwrap(), ins.clone(), &mut r)?;
        check("scale", move |g, v| g.scale(v[0], c).unwrap(), ins[..1].to_vec(), &mut r)?;
    }
    Ok(())
}

pub fn add_row(instances: usize) -> Result<(), String> {
    let mut r = rng(3);
    for _ in 0..instances {
        let (m, n) = (r.random_range(1..5), r.random_range(1..5));
        let ins = vec![random(&mut r, &[m, n], 1.0), random(&mut r, &[n], 1.0)];
        check("add_row", |g, v| g.add_row(v[0], v[1]).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn gelu(instances: usize) -> Result<(), String> {
    let mut r = rng(4);
    for _ in 0..instances {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let ins = vec![random(&mut r, &shape, 3.0)];
        check("gelu", |g, v| g.gelu(v[0]).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn softmax_rows(instances: usize) -> Result<(), String> {
    let mut r = rng(5);
    for _ in 0..instances {
        let shape = [r.random_range(1..4), r.random_range(2..6)];
        let ins = vec![random(&mut r, &shape, 2.0)];
        check("softmax_rows", |g, v| g.softmax_rows(v[0]).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn layer_norm(instances: usize) -> Result<(), String> {
    let mut r = rng(6);
    for _ in 0..instances {
        let (m, n) = (r.random_range(1..4), r.random_range(2..6));
        let ins = vec![random(&mut r, &[m, n], 2.0), random(&mut r, &[n], 1.5), random(&mut r, &[n], 1.0)];
        check("layer_norm", |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn embedding(instances: usize) -> Result<(), String> {
    let mut r = rng(7);
    for _ in 0..instances {
        let (rows, d) = (r.random_range(2..6), r.random_range(1..4));
        let ids: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..rows)).collect();
        let ins = vec![random(&mut r, &[rows, d], 1.0)];
        check("embedding", move |g, v| g.embedding(v[0], &ids).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn segment_mean(instances: usize) -> Result<(), String> {
    let mut r = rng(8);
    for _ in 0..instances {
        let (segs, t) = random_segments(&mut r, 9);
        let d = r.random_range(1..4);
        let ins = vec![random(&mut r, &[t, d], 1.0)];
        check("segment_mean", move |g, v| g.segment_mean(v[0], &segs).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn dropout_with_fixed_mask(instances: usize) -> Result<(), String> {
    let mut r = rng(9);
    for _ in 0..instances {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let mask: Vec<f64> = (0..shape[0] * shape[1]).map(|_| if r.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
        let ins = vec![random(&mut r, &shape, 1.0)];
        check("dropout", move |g, v| g.dropout_with_mask(v[0], mask.clone()).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn attention(instances: usize) -> Result<(), String> {
    let mut r = rng(10);
    for _ in 0..instances {
        let heads = r.random_range(1..=2);
        let d = heads * r.random_range(1..=3);
        let (segs, t) = random_segments(&mut r, 7);
        let ins = vec![random(&mut r, &[t, d], 1.0), random(&mut r, &[t, d], 1.0), random(&mut r, &[t, d], 1.0)];
        check("attention", move |g, v| g.attention(v[0], v[1], v[2], &segs, heads).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn cross_entropy(instances: usize) -> Result<(), String> {
    let mut r = rng(11);
    for _ in 0..instances {
        let (n, c) = (r.random_range(1..5), r.random_range(2..4));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let ins = vec![random(&mut r, &[n, c], 2.0)];
        check("cross_entropy", move |g, v| g.cross_entropy(v[0], &labels).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn sum(instances: usize) -> Result<(), String> {
    let mut r = rng(12);
    for _ in 0..instances {
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        let ins = vec![random(&mut r, &shape, 1.0)];
        check("sum", |g, v| g.sum(v[0]).unwrap(), ins, &mut r)?;
    }
    Ok(())
}

pub fn composed_encoder_block(instances: usize) -> Result<(), String> {
    // Attention, residual, norm and feed-forward chained as in one layer.
    let mut r = rng(13);
    for _ in 0..instances {
        let (segs, t) = random_segments(&mut r, 6);
        let d = 4;
        let ins = vec![
            random(&mut r, &[t, d], 1.0),
            random(&mut r, &[d, d], 0.5),
            random(&mut r, &[d, d], 0.5),
            random(&mut r, &[d], 1.0),
            random(&mut r, &[d], 1.0),
        ];
        check(
            "block",
            move |g, v| {
                let q = g.matmul(v[0], v[1]).unwrap();
                let k = g.matmul(v[0], v[2]).unwrap();
                let a = g.attention(q, k, v[0], &segs, 2).unwrap();
                let res = g.add(a, v[0]).unwrap();
                let n = g.layer_norm(res, v[3], v[4], 1e-5).unwrap();
                let h = g.gelu(n).unwrap();
                g.segment_mean(h, &segs).unwrap()
            },
            ins,
            &mut r,
        )?;
    }
    Ok(())
}

type OpCheck = fn(usize) -> Result<(), String>;

/// Every op family with its checker.
pub const ALL: &[(&str, OpCheck)] = &[
    ("matmul", matmul),
    ("add/mul/scale", add_mul_scale),
    ("add_row", add_row),
    ("gelu", gelu),
    ("softmax_rows", softmax_rows),
    ("layer_norm", layer_norm),
    ("embedding", embedding),
    ("segment_mean", segment_mean),
    ("dropout", dropout_with_fixed_mask),
    ("attention", attention),
    ("cross_entropy", cross_entropy),
    ("sum", sum),
    ("encoder block", composed_encoder_block),
];
