//! Finite-difference gradient checks shared by the gradient and acceptance
//! suites. Every instance draws its shapes and values from a seed.

#![allow(dead_code)]

use layerfed::autodiff::{ParamId, Tape, Var};
use layerfed::encoder::{EncoderConfig, KeptSet, LayeredEncoder};
use layerfed::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 4] = ["x0", "x1", "x2", "x3"];
const STEP: f32 = 1e-2;
const ABS_TOL: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

pub const OPS: [&str; 19] = [
    "matmul",
    "matmul-shared",
    "matmul-batched",
    "add",
    "add-broadcast",
    "mul",
    "mul-broadcast",
    "scale",
    "gelu",
    "relu",
    "layernorm",
    "softmax",
    "l2-normalize",
    "xent",
    "reshape",
    "permute",
    "mean-tokens",
    "concat-rows",
    "nt-xent",
];

pub fn random(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar probe `Σ w ⊙ out` with fixed random weights.
fn probe(tape: &mut Tape, out: &Var) -> Result<Var> {
    let n = out.value().numel();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(random(&[n, 1], -1.0, 1.0, 777));
    tape.matmul(&flat, &w)
}

/// Richardson-extrapolated central difference, fourth order in `STEP`.
fn derivative(f: impl Fn(f32) -> f64) -> f64 {
    let central = |h: f32| (f(h) - f(-h)) / (2.0 * f64::from(h));
    (4.0 * central(STEP) - central(2.0 * STEP)) / 3.0
}

fn close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= ABS_TOL || err <= REL_TOL * numeric.abs()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn eval(inputs: &[Tensor], f: &OpFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    f64::from(probe(&mut tape, &out).unwrap().value().item())
}

fn compare(label: &str, inputs: &[Tensor], f: &OpFn) -> std::result::Result<(), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        inputs.iter().enumerate().map(|(i, t)| tape.param(ParamId::new(i, NAMES[i]), t.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| format!("{label}: {e}"))?;
    let loss = probe(&mut tape, &out).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = &grads[&ParamId::new(i, NAMES[i])];
        if analytic.shape() != input.shape() {
            return Err(format!(
                "{label}: gradient shape {:?} for input {i} of shape {:?}",
                analytic.shape(),
                input.shape()
            ));
        }
        let stride = (input.numel() / 24).max(1);
        for j in (0..input.numel()).step_by(stride) {
            let numeric = derivative(|h| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += h;
                eval(&moved, f)
            });
            let a = f64::from(analytic.data()[j]);
            if !close(a, numeric) {
                return Err(format!("{label}: input {i} element {j}: analytic {a} numeric {numeric}"));
            }
        }
    }
    Ok(())
}

/// Builds one random instance of `op` and checks its gradient.
pub fn check_op(op: &str, seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c, d) = (dim(1, 4), dim(1, 5), dim(1, 5), dim(2, 6));
    let s = seed * 16;
    let label = format!("{op} #{seed}");
    let (inputs, f): (Vec<Tensor>, OpFn) = match op {
        "matmul" => (
            vec![random(&[b, c], -1.0, 1.0, s), random(&[c, d], -1.0, 1.0, s + 1)],
            Box::new(|t, v| t.matmul(&v[0], &v[1])),
        ),
        "matmul-shared" => (
            vec![random(&[a, b, c], -1.0, 1.0, s), random(&[c, d], -1.0, 1.0, s + 1)],
            Box::new(|t, v| t.matmul(&v[0], &v[1])),
        ),
        "matmul-batched" => (
            vec![random(&[a, b, c], -1.0, 1.0, s), random(&[a, c, d], -1.0, 1.0, s + 1)],
            Box::new(|t, v| t.matmul(&v[0], &v[1])),
        ),
        "add" | "mul" => {
            let shape = [a, b, d];
            let inputs = vec![random(&shape, -1.0, 1.0, s), random(&shape, -1.0, 1.0, s + 1)];
            let f: OpFn =
                if op == "add" { Box::new(|t, v| t.add(&v[0], &v[1])) } else { Box::new(|t, v| t.mul(&v[0], &v[1])) };
            (inputs, f)
        }
        "add-broadcast" | "mul-broadcast" => {
            let rhs = if seed.is_multiple_of(2) { vec![d] } else { vec![1] };
            let inputs = vec![random(&[a, b, d], -1.0, 1.0, s), random(&rhs, -1.0, 1.0, s + 1)];
            let f: OpFn = if op == "add-broadcast" {
                Box::new(|t, v| t.add(&v[0], &v[1]))
            } else {
                Box::new(|t, v| t.mul(&v[0], &v[1]))
            };
            (inputs, f)
        }
        "scale" => {
            let factor = -1.7 + seed as f32 * 0.3;
            (vec![random(&[b, d], -1.0, 1.0, s)], Box::new(move |t, v| t.scale(&v[0], factor)))
        }
        "gelu" => (vec![random(&[b, d], -3.0, 3.0, s)], Box::new(|t, v| t.gelu(&v[0]))),
        "relu" => {
            // keep away from the kink at zero
            let mut x = random(&[b, d], 0.1, 2.0, s);
            let mut signs = ChaCha8Rng::seed_from_u64(s + 1);
            for v in x.data_mut() {
                if signs.random_bool(0.5) {
                    *v = -*v;
                }
            }
            (vec![x], Box::new(|t, v| t.relu(&v[0])))
        }
        "layernorm" => (
            vec![random(&[a, b, d], -2.0, 2.0, s), random(&[d], 0.5, 1.5, s + 1), random(&[d], -0.5, 0.5, s + 2)],
            Box::new(|t, v| t.layernorm(&v[0], &v[1], &v[2], 1e-5)),
        ),
        "softmax" => (vec![random(&[a, b, d], -2.0, 2.0, s)], Box::new(|t, v| t.softmax(&v[0]))),
        "l2-normalize" => (vec![random(&[b, d], -1.0, 1.0, s)], Box::new(|t, v| t.l2_normalize(&v[0]))),
        "xent" => {
            let mut lr = ChaCha8Rng::seed_from_u64(s + 1);
            let labels: Vec<usize> = (0..b).map(|_| lr.random_range(0..d)).collect();
            (vec![random(&[b, d], -2.0, 2.0, s)], Box::new(move |t, v| t.softmax_cross_entropy(&v[0], &labels)))
        }
        "reshape" => (
            vec![random(&[b, 2 * d], -1.0, 1.0, s)],
            Box::new(move |t, v| {
                let r = t.reshape(&v[0], &[2 * b, d])?;
                t.gelu(&r)
            }),
        ),
        "permute" => {
            let axes = [[2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0]][seed as usize % 4];
            (
                vec![random(&[a, b, d], -1.0, 1.0, s)],
                Box::new(move |t, v| {
                    let p = t.permute(&v[0], &axes)?;
                    t.gelu(&p)
                }),
            )
        }
        "mean-tokens" => (vec![random(&[a, b, d], -1.0, 1.0, s)], Box::new(|t, v| t.mean_tokens(&v[0]))),
        "concat-rows" => (
            vec![random(&[b, d], -1.0, 1.0, s), random(&[c, d], -1.0, 1.0, s + 1)],
            Box::new(|t, v| t.concat_rows(&[&v[0], &v[1]])),
        ),
        "nt-xent" => {
            let n = b + 1;
            (
                vec![random(&[n, d], -1.0, 1.0, s), random(&[n, d], -1.0, 1.0, s + 1)],
                Box::new(|t, v| {
                    let x = t.l2_normalize(&v[0])?;
                    let y = t.l2_normalize(&v[1])?;
                    layerfed::ssl::nt_xent_on(t, &x, &y, 0.5)
                }),
            )
        }
        other => return Err(format!("unknown op {other}")),
    };
    compare(&label, &inputs, &f)
}

fn encoder_loss(encoder: &LayeredEncoder, images: &Tensor, kept: &KeptSet, tap: usize) -> f64 {
    let mut tape = Tape::new();
    let rep = encoder.forward_on(&mut tape, images, kept, tap).unwrap();
    let z = encoder.project_on(&mut tape, tap, &rep).unwrap();
    f64::from(probe(&mut tape, &z).unwrap().value().item())
}

/// A tiny encoder with a random kept set: either all kept layers train
/// (end-to-end) or only the tap does (layer-wise).
pub fn check_encoder(seed: u64) -> std::result::Result<(), String> {
    let config = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        width: 8,
        heads: 2,
        mlp_ratio: 2.0,
        num_blocks: 3,
        head_dim_out: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tap = rng.random_range(1..=3);
    let mut layers = vec![0];
    layers.extend((1..tap).filter(|_| rng.random_bool(0.5)));
    layers.push(tap);
    let kept = KeptSet::new(layers.clone()).unwrap();
    let trainable = if rng.random_bool(0.5) { layers } else { vec![tap] };
    let images = random(&[2, 3, 8, 8], 0.0, 1.0, seed * 7 + 1);

    let mut encoder = LayeredEncoder::init(config, seed).unwrap();
    // the default init is so small that layernorm inputs are nearly
    // constant and central differences lose accuracy
    let ids: Vec<ParamId> = encoder.params().map(|p| p.id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = encoder.param_mut(id).unwrap();
        let base = if id.name.ends_with(".g") { 1.0 } else { 0.0 };
        p.value = random(p.value.shape(), base - 0.4, base + 0.4, seed * 1000 + i as u64);
    }
    encoder.set_trainable_layers(&trainable, Some(tap)).unwrap();
    let mut tape = Tape::new();
    let rep = encoder.forward_on(&mut tape, &images, &kept, tap).unwrap();
    let z = encoder.project_on(&mut tape, tap, &rep).unwrap();
    let loss = probe(&mut tape, &z).unwrap();
    let grads = tape.backward(&loss).unwrap();
    if grads.keys().copied().collect::<Vec<_>>() != encoder.trainable_ids() {
        return Err(format!("encoder #{seed}: gradient keys differ from the trainable set"));
    }
    for (id, g) in &grads {
        let len = g.numel();
        for j in (0..len).step_by((len / 4).max(1)) {
            let numeric = derivative(|h| {
                let mut moved = encoder.clone();
                moved.param_mut(*id).unwrap().value.data_mut()[j] += h;
                encoder_loss(&moved, &images, &kept, tap)
            });
            let a = f64::from(g.data()[j]);
            if !close(a, numeric) {
                return Err(format!("encoder #{seed} kept {kept} {id}[{j}]: analytic {a} numeric {numeric}"));
            }
        }
    }
    Ok(())
}
