//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use progdistill::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Uniform in `±[margin, hi)`, keeping values away from the ReLU kink.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(margin..hi);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Direct nested-loop dilated convolution, stride 1, zero padding `pad`.
/// `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, kh, kw]`.
pub fn conv_reference(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    dil: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let oh = (h + 2 * pad.0).checked_sub(dil.0 * (kh - 1)).expect("kernel taller than input");
    let ow = (wd + 2 * pad.1).checked_sub(dil.1 * (kw - 1)).expect("kernel wider than input");
    let mut y = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy + i * dil.0) as isize - pad.0 as isize;
                                let ix = (ox + j * dil.1) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    y[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, [n, co, oh, ow])
}

/// Builds the graph with every input as a parameter and returns the scalar
/// loss value.
fn eval_loss(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

/// Largest relative error, over the inputs, between the tape gradient and
/// central differences with step `h`. The error of one input is
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
pub fn gradcheck(inputs: &[Tensor<f64>], h: f64, build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            *slot = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// `Σ r ⊙ y`: a fixed random projection to a scalar, so every output element
/// receives a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed);
    let weights = g.constant(random_tensor(&mut r, &shape, -1.0, 1.0));
    let prod = g.mul(y, weights).unwrap();
    g.sum(prod).unwrap()
}

/// Softmax of one row by direct exponentiation.
pub fn softmax_reference(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// FLOPs of the residual network by visiting every output position and
/// kernel tap of every convolution (two FLOPs per multiply-accumulate), plus
/// one per element for each skip addition and for the average pool. Frames
/// come from `floor((ms − 30) / 10) + 1`.
pub fn enumerate_flops(input_ms: u32, features: usize, channels: usize, blocks: usize, kernel: (usize, usize)) -> u64 {
    let frames = ((input_ms - 30) / 10 + 1) as usize;
    let mut in_channels = vec![1];
    in_channels.extend(std::iter::repeat(channels).take(2 * blocks + 1));
    let mut macs = 0u64;
    for c_in in in_channels {
        for _y in 0..frames {
            for _x in 0..features {
                for _o in 0..channels {
                    for _c in 0..c_in {
                        for _i in 0..kernel.0 {
                            for _j in 0..kernel.1 {
                                macs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let plane = (channels * frames * features) as u64;
    2 * macs + blocks as u64 * plane + plane
}

/// Layers covered by the finite-difference suite.
pub const GRADCHECK_LAYERS: [&str; 12] = [
    "conv_same",
    "conv_valid",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "avg_pool",
    "linear",
    "softmax_ce_classes",
    "softmax_ce_distribution",
    "softmax_kl",
    "add",
    "mul",
];

/// Finite-difference step used by the suite.
pub const GRADCHECK_H: f64 = 1e-4;

/// Relative gradient error of `layer` on one random instance drawn from
/// `seed`.
pub fn gradcheck_layer(layer: &str, seed: u64) -> f64 {
    use progdistill::tensor::{BatchNormStats, Mode, Padding, Target};

    let mut r = rng(seed ^ 0x9e37_79b9);
    let n = r.gen_range(1..=3);
    let c = r.gen_range(1..=3);
    let h = r.gen_range(3..=6);
    let w = r.gen_range(3..=6);
    let h_step = GRADCHECK_H;
    match layer {
        "conv_same" | "conv_valid" => {
            let padding = if layer == "conv_same" { Padding::Same } else { Padding::Valid };
            let co = r.gen_range(1..=3);
            let (kh, kw) = if padding == Padding::Same {
                ([1, 3][r.gen_range(0..2)], [1, 3][r.gen_range(0..2)])
            } else {
                (r.gen_range(1..=3), r.gen_range(1..=3))
            };
            let dil = (r.gen_range(1..=3), r.gen_range(1..=3));
            let (h, w) = (h + dil.0 * (kh - 1), w + dil.1 * (kw - 1));
            let x = random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
            let k = random_tensor(&mut r, &[co, c, kh, kw], -1.0, 1.0);
            gradcheck(&[x, k], h_step, &|g, v| {
                let y = g.conv2d(v[0], v[1], dil, padding).unwrap();
                project(g, y, seed)
            })
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if layer == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            let n = n.max(2);
            let x = random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
            let gamma = random_tensor(&mut r, &[c], 0.5, 1.5);
            let beta = random_tensor(&mut r, &[c], -0.5, 0.5);
            let mut stats = BatchNormStats::new(c);
            for ch in 0..c {
                stats.mean[ch] = r.gen_range(-0.5..0.5);
                stats.var[ch] = r.gen_range(0.5..2.0);
            }
            gradcheck(&[x, gamma, beta], h_step, &|g, v| {
                let mut s = stats.clone();
                let y = g.batch_norm(v[0], v[1], v[2], &mut s, mode).unwrap();
                project(g, y, seed)
            })
        }
        "relu" => {
            let x = away_from_zero(&mut r, &[n, c, h, w], 1e-2, 2.0);
            gradcheck(&[x], h_step, &|g, v| {
                let y = g.relu(v[0]).unwrap();
                project(g, y, seed)
            })
        }
        "avg_pool" => {
            let x = random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
            gradcheck(&[x], h_step, &|g, v| {
                let y = g.global_avg_pool(v[0]).unwrap();
                project(g, y, seed)
            })
        }
        "linear" => {
            let (i, o) = (r.gen_range(1..=6), r.gen_range(1..=6));
            let x = random_tensor(&mut r, &[n, i], -1.0, 1.0);
            let wt = random_tensor(&mut r, &[o, i], -1.0, 1.0);
            let b = random_tensor(&mut r, &[o], -1.0, 1.0);
            gradcheck(&[x, wt, b], h_step, &|g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                project(g, y, seed)
            })
        }
        "softmax_ce_classes" | "softmax_ce_distribution" | "softmax_kl" => {
            let k = r.gen_range(2..=12);
            let z = random_tensor(&mut r, &[n, k], -3.0, 3.0);
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let mut t = random_tensor(&mut r, &[n, k], 0.0, 1.0);
            for row in t.data_mut().chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            gradcheck(&[z], h_step, &|g, v| {
                let p = g.softmax(v[0]).unwrap();
                match layer {
                    "softmax_ce_classes" => g.cross_entropy(p, Target::Classes(labels.clone())).unwrap(),
                    "softmax_ce_distribution" => g.cross_entropy(p, Target::Distribution(t.clone())).unwrap(),
                    _ => g.kl_divergence(p, t.clone()).unwrap(),
                }
            })
        }
        "add" | "mul" => {
            let a = random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
            let b = random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
            gradcheck(&[a, b], h_step, &|g, v| {
                let y = if layer == "add" { g.add(v[0], v[1]) } else { g.mul(v[0], v[1]) }.unwrap();
                project(g, y, seed)
            })
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// One convolution case of the exhaustive sweep.
#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub input: [usize; 4],
    pub weight: [usize; 4],
    pub dilation: (usize, usize),
    pub same: bool,
}

/// Every shape with batch and channels ≤ 2, spatial ≤ 8×8, kernels ≤ 3×3 and
/// dilations in {1, 2, 4}, under both paddings where they apply.
pub fn conv_cases() -> Vec<ConvCase> {
    let mut out = Vec::new();
    for n in 1..=2 {
        for ci in 1..=2 {
            for co in 1..=2 {
                for h in 1..=8 {
                    for w in 1..=8 {
                        for kh in 1..=3 {
                            for kw in 1..=3 {
                                for dh in [1, 2, 4] {
                                    for dw in [1, 2, 4] {
                                        for same in [false, true] {
                                            let fits = if same {
                                                kh % 2 == 1 && kw % 2 == 1
                                            } else {
                                                dh * (kh - 1) < h && dw * (kw - 1) < w
                                            };
                                            if fits {
                                                out.push(ConvCase {
                                                    input: [n, ci, h, w],
                                                    weight: [co, ci, kh, kw],
                                                    dilation: (dh, dw),
                                                    same,
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Largest absolute difference between `Graph::conv2d` and the nested-loop
/// reference for one case with random data.
pub fn conv_case_error(case: &ConvCase, seed: u64) -> f64 {
    use progdistill::tensor::Padding;
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &case.input, -1.0, 1.0);
    let k = random_tensor(&mut r, &case.weight, -1.0, 1.0);
    let pad = if case.same {
        (case.dilation.0 * (case.weight[2] - 1) / 2, case.dilation.1 * (case.weight[3] - 1) / 2)
    } else {
        (0, 0)
    };
    let (want, shape) = conv_reference(x.data(), case.input, k.data(), case.weight, case.dilation, pad);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(k);
    let padding = if case.same { Padding::Same } else { Padding::Valid };
    let y = g.conv2d(xv, kv, case.dilation, padding).expect("conv2d");
    let got = g.value(y);
    assert_eq!(got.shape(), &shape, "{case:?}");
    got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
