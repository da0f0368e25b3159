//! Reference implementations in f64 and a finite-difference gradient
//! checker shared by the integration tests.
#![allow(dead_code)]

use onelayer_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale]`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Like [`random_tensor`] but keeps entries at least `gap` away from zero,
/// for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32, gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(gap..=scale);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Repeats `small` across `big`'s leading axes and combines pointwise.
pub fn broadcast(big: &[f64], small: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    big.iter()
        .enumerate()
        .map(|(i, &x)| f(x, small[i % small.len()]))
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let z: f64 = (0..len).map(|j| x[at(j)].exp()).sum();
            for j in 0..len {
                out[at(j)] = x[at(j)].exp() / z;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let cols = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let sd = (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(c, v)| (v - mean) / sd * gain[c] + bias[c]));
    }
    out
}

pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[usize], ignore: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t == ignore {
            continue;
        }
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    total / count as f64
}

pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = (0..rank).map(|d| idx[d] * strides[perm[d]]).sum();
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all inputs, `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖)`.
    pub rel_err: f64,
    /// Forward discrepancy against the oracle, relative to `max(‖out‖, 1)`
    /// so outputs that cancel to near zero are not penalized for f32 rounding.
    pub forward_err: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(a.iter().copied()).max(norm(b.iter().copied()));
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `Σ c ⊙ op(inputs)` (random fixed `c`) with
/// central differences of the f64 `oracle`.
pub fn check_gradients(
    inputs: &[Tensor],
    seed: u64,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut tape, &vars).unwrap();
    let out_shape = tape.shape(out).to_vec();
    let c = random_tensor(&mut rng(seed ^ 0x5eed), &out_shape, 1.0);
    let c64 = to64(&c);
    let cv = tape.constant(c);
    let weighted = tape.mul(out, cv).unwrap();
    let loss = tape.sum(weighted);
    let forward = to64(tape.value(out));
    tape.backward(loss).unwrap();

    let xs: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let expected = oracle(&xs);
    let forward_err = norm(forward.iter().zip(&expected).map(|(a, b)| a - b)) / norm(expected.iter().copied()).max(1.0);
    let f = |x: &[Vec<f64>]| -> f64 { oracle(x).iter().zip(&c64).map(|(a, b)| a * b).sum() };

    let mut rel_err: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.iter().map(|&x| f64::from(x)).collect(),
            None => vec![0.0; xs[i].len()],
        };
        let mut numeric = vec![0.0; xs[i].len()];
        let mut x = xs.clone();
        for j in 0..xs[i].len() {
            let h = 1e-6 * xs[i][j].abs().max(1.0);
            x[i][j] = xs[i][j] + h;
            let up = f(&x);
            x[i][j] = xs[i][j] - h;
            let down = f(&x);
            x[i][j] = xs[i][j];
            numeric[j] = (up - down) / (2.0 * h);
        }
        rel_err = rel_err.max(relative(&analytic, &numeric));
    }
    GradCheck { rel_err, forward_err }
}

/// A named differentiable op with a random-case generator, its tape form and
/// its f64 oracle.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> GradCheck,
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |seed| {
                let mut r = rng(seed);
                let (m, k, n) = (dims(&mut r, 1, 5), dims(&mut r, 1, 6), dims(&mut r, 1, 5));
                let a = random_tensor(&mut r, &[m, k], 1.0);
                let b = random_tensor(&mut r, &[k, n], 1.0);
                check_gradients(&[a, b], seed, |t, v| t.matmul(v[0], v[1]), move |x| matmul(&x[0], &x[1], m, k, n))
            },
        },
        OpCase {
            name: "matmul_nt",
            run: |seed| {
                let mut r = rng(seed);
                let (m, k, n) = (dims(&mut r, 1, 5), dims(&mut r, 1, 6), dims(&mut r, 1, 5));
                let a = random_tensor(&mut r, &[m, k], 1.0);
                let b = random_tensor(&mut r, &[n, k], 1.0);
                check_gradients(
                    &[a, b],
                    seed,
                    |t, v| t.matmul_nt(v[0], v[1]),
                    move |x| matmul(&x[0], &transpose(&x[1], n, k), m, k, n),
                )
            },
        },
        OpCase {
            name: "batch_matmul",
            run: |seed| {
                let mut r = rng(seed);
                let (bs, m, k, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
                let trans = r.gen_bool(0.5);
                let a = random_tensor(&mut r, &[bs, m, k], 1.0);
                let b = random_tensor(&mut r, &if trans { [bs, n, k] } else { [bs, k, n] }, 1.0);
                check_gradients(
                    &[a, b],
                    seed,
                    move |t, v| t.batch_matmul(v[0], v[1], trans),
                    move |x| {
                        (0..bs)
                            .flat_map(|i| {
                                let ai = &x[0][i * m * k..(i + 1) * m * k];
                                let bi = &x[1][i * k * n..(i + 1) * k * n];
                                let bi = if trans { transpose(bi, n, k) } else { bi.to_vec() };
                                matmul(ai, &bi, m, k, n)
                            })
                            .collect()
                    },
                )
            },
        },
        OpCase {
            name: "add",
            run: |seed| {
                let mut r = rng(seed);
                let (rows, cols) = (dims(&mut r, 1, 4), dims(&mut r, 1, 5));
                let a = random_tensor(&mut r, &[rows, cols], 1.0);
                let b = if r.gen_bool(0.5) {
                    random_tensor(&mut r, &[cols], 1.0)
                } else {
                    random_tensor(&mut r, &[rows, cols], 1.0)
                };
                check_gradients(&[a, b], seed, |t, v| t.add(v[0], v[1]), |x| broadcast(&x[0], &x[1], |p, q| p + q))
            },
        },
        OpCase {
            name: "mul",
            run: |seed| {
                let mut r = rng(seed);
                let (rows, cols) = (dims(&mut r, 1, 4), dims(&mut r, 1, 5));
                let a = random_tensor(&mut r, &[rows, cols], 1.0);
                let b = if r.gen_bool(0.5) {
                    random_tensor(&mut r, &[cols], 1.0)
                } else {
                    random_tensor(&mut r, &[rows, cols], 1.0)
                };
                check_gradients(&[a, b], seed, |t, v| t.mul(v[0], v[1]), |x| broadcast(&x[0], &x[1], |p, q| p * q))
            },
        },
        OpCase {
            name: "scale",
            run: |seed| {
                let mut r = rng(seed);
                let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
                let a = random_tensor(&mut r, &shape, 1.0);
                let f: f32 = r.gen_range(-3.0..3.0);
                check_gradients(&[a], seed, move |t, v| Ok(t.scale(v[0], f)), move |x| {
                    x[0].iter().map(|v| v * f64::from(f)).collect()
                })
            },
        },
        OpCase {
            name: "relu",
            run: |seed| {
                let mut r = rng(seed);
                let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 6)];
                let a = away_from_zero(&mut r, &shape, 2.0, 1e-2);
                check_gradients(&[a], seed, |t, v| Ok(t.relu(v[0])), |x| {
                    x[0].iter().map(|v| v.max(0.0)).collect()
                })
            },
        },
        OpCase {
            name: "gelu",
            run: |seed| {
                let mut r = rng(seed);
                let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 6)];
                let a = random_tensor(&mut r, &shape, 3.0);
                check_gradients(&[a], seed, |t, v| Ok(t.gelu(v[0])), |x| x[0].iter().map(|&v| gelu(v)).collect())
            },
        },
        OpCase {
            name: "softmax",
            run: |seed| {
                let mut r = rng(seed);
                let shape = vec![dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 2, 5)];
                let axis = r.gen_range(0..3);
                let a = random_tensor(&mut r, &shape, 3.0);
                check_gradients(&[a], seed, move |t, v| t.softmax(v[0], axis), move |x| {
                    softmax(&x[0], &shape, axis)
                })
            },
        },
        OpCase {
            name: "layer_norm",
            run: |seed| {
                let mut r = rng(seed);
                // Two columns normalize to ±1 whatever the input, leaving an x-gradient
                // of order eps that f32 cannot resolve.
                let (rows, cols) = (dims(&mut r, 1, 4), dims(&mut r, 3, 8));
                let a = random_tensor(&mut r, &[rows, cols], 2.0);
                let g = random_tensor(&mut r, &[cols], 1.5);
                let b = random_tensor(&mut r, &[cols], 1.0);
                check_gradients(&[a, g, b], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), |x| {
                    layer_norm(&x[0], &x[1], &x[2], 1e-5)
                })
            },
        },
        OpCase {
            name: "cross_entropy",
            run: |seed| {
                let mut r = rng(seed);
                let (rows, vocab) = (dims(&mut r, 1, 5), dims(&mut r, 2, 6));
                let a = random_tensor(&mut r, &[rows, vocab], 3.0);
                let ignore = 0;
                let mut targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..vocab)).collect();
                if targets.iter().all(|&t| t == ignore) {
                    targets[0] = vocab - 1;
                }
                let tt = targets.clone();
                check_gradients(&[a], seed, move |t, v| t.cross_entropy(v[0], &tt, ignore), move |x| {
                    vec![cross_entropy(&x[0], vocab, &targets, ignore)]
                })
            },
        },
        OpCase {
            name: "straight_through",
            run: |seed| {
                let mut r = rng(seed);
                let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
                let hard = random_tensor(&mut r, &shape, 1.0);
                let soft = random_tensor(&mut r, &shape, 1.0);
                // Surrogate: the hard value, moving one-for-one with `soft`.
                let (h64, s64) = (to64(&hard), to64(&soft));
                check_gradients(
                    &[soft],
                    seed,
                    move |t, v| {
                        let h = t.constant(hard.clone());
                        t.straight_through(h, v[0])
                    },
                    move |x| (0..x[0].len()).map(|i| h64[i] + x[0][i] - s64[i]).collect(),
                )
            },
        },
        OpCase {
            name: "gather",
            run: |seed| {
                let mut r = rng(seed);
                let (vocab, dim) = (dims(&mut r, 1, 6), dims(&mut r, 1, 4));
                let ids: Vec<usize> = (0..dims(&mut r, 1, 8)).map(|_| r.gen_range(0..vocab)).collect();
                let table = random_tensor(&mut r, &[vocab, dim], 1.0);
                let idc = ids.clone();
                check_gradients(&[table], seed, move |t, v| t.gather(v[0], &idc), move |x| {
                    ids.iter().flat_map(|&i| x[0][i * dim..(i + 1) * dim].to_vec()).collect()
                })
            },
        },
        OpCase {
            name: "reshape",
            run: |seed| {
                let mut r = rng(seed);
                let (a, b) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
                let x = random_tensor(&mut r, &[a, b, 2], 1.0);
                check_gradients(&[x], seed, move |t, v| t.reshape(v[0], &[2 * a, b]), |x| x[0].clone())
            },
        },
        OpCase {
            name: "permute",
            run: |seed| {
                let mut r = rng(seed);
                let shape = vec![dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
                let mut perm = vec![0, 1, 2, 3];
                for i in (1..4).rev() {
                    perm.swap(i, r.gen_range(0..=i));
                }
                let x = random_tensor(&mut r, &shape, 1.0);
                let p = perm.clone();
                check_gradients(&[x], seed, move |t, v| t.permute(v[0], &p), move |x| permute(&x[0], &shape, &perm))
            },
        },
        OpCase {
            name: "transpose",
            run: |seed| {
                let mut r = rng(seed);
                let (rows, cols) = (dims(&mut r, 1, 5), dims(&mut r, 1, 5));
                let x = random_tensor(&mut r, &[rows, cols], 1.0);
                check_gradients(&[x], seed, |t, v| t.transpose(v[0]), move |x| transpose(&x[0], rows, cols))
            },
        },
        OpCase {
            name: "sum",
            run: |seed| {
                let mut r = rng(seed);
                let shape = [dims(&mut r, 1, 5), dims(&mut r, 1, 5)];
                let x = random_tensor(&mut r, &shape, 1.0);
                check_gradients(&[x], seed, |t, v| Ok(t.sum(v[0])), |x| vec![x[0].iter().sum()])
            },
        },
    ]
}

/// Score gradient of `Σ c ⊙ (x · (W ⊙ TopK(S)))` against `(∂L/∂W_eff) ⊙ W`
/// with `∂L/∂W_eff` from central differences.
pub fn ste_composite(seed: u64) -> SteCheck {
    use onelayer_core::supermask::{masked_weight, SupermaskTensor};
    use std::sync::Arc;

    let mut r = rng(seed);
    let (m, k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 6), dims(&mut r, 1, 6));
    let sigma: f32 = [0.1, 0.3, 0.5, 0.7, 1.0][r.gen_range(0..5)];
    let x = random_tensor(&mut r, &[m, k], 1.0);
    let w = Arc::new(random_tensor(&mut r, &[k, n], 1.0));
    let s = random_tensor(&mut r, &[k, n], 1.0);
    let c = random_tensor(&mut r, &[m, n], 1.0);
    let st = SupermaskTensor::new(w.clone(), s, sigma).unwrap();
    let w_eff = to64(&st.effective_weight());

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = masked_weight(&mut tape, &st).unwrap();
    let y = tape.matmul(xv, vars.effective).unwrap();
    let cv = tape.constant(c.clone());
    let prod = tape.mul(y, cv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = tape
        .grad(vars.scores.unwrap())
        .unwrap()
        .iter()
        .map(|&g| f64::from(g))
        .collect();

    let (x64, c64, w64) = (to64(&x), to64(&c), to64(&w));
    let f = |we: &[f64]| -> f64 { matmul(&x64, we, m, k, n).iter().zip(&c64).map(|(a, b)| a * b).sum() };
    let mut we = w_eff.clone();
    let expected: Vec<f64> = (0..we.len())
        .map(|j| {
            let h = 1e-6 * w_eff[j].abs().max(1.0);
            we[j] = w_eff[j] + h;
            let up = f(&we);
            we[j] = w_eff[j] - h;
            let down = f(&we);
            we[j] = w_eff[j];
            (up - down) / (2.0 * h) * w64[j]
        })
        .collect();
    let elementwise = analytic
        .iter()
        .zip(&expected)
        .map(|(a, e)| {
            let scale = a.abs().max(e.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - e).abs() / scale
            }
        })
        .fold(0.0, f64::max);
    SteCheck {
        rel_err: relative(&analytic, &expected),
        elementwise,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SteCheck {
    /// Norm-wise relative error of the score gradient.
    pub rel_err: f64,
    /// Largest per-entry relative error.
    pub elementwise: f64,
}
