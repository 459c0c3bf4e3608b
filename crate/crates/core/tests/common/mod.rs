//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadoc::numerics::{Tape, Tensor, Var};
use shadoc::Result;

pub const FD_STEP: f64 = 1e-5;

/// Elementwise relative error with a small absolute floor so that
/// near-zero gradients compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Central-difference check of `loss(inputs)` against the tape's backward.
///
/// Every element is checked unless `max_per_input` is set, in which case a
/// seeded subset of that many elements is probed per input tensor.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], max_per_input: Option<usize>, loss: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let l = loss(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let l = loss(&mut tape, &vars).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        let n = inputs[i].numel();
        let idx: Vec<usize> = match max_per_input {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in idx {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Reduce an arbitrary output to a scalar through a fixed random cotangent.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random_tensor(&shape, seed, -1.0, 1.0));
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

/// Exhaustive recursive edit distance (exponential; short strings only).
pub fn levenshtein_recursive(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((ca, ra)), Some((cb, rb))) => {
            if ca == cb {
                levenshtein_recursive(ra, rb)
            } else {
                1 + levenshtein_recursive(ra, b)
                    .min(levenshtein_recursive(a, rb))
                    .min(levenshtein_recursive(ra, rb))
            }
        }
    }
}

/// SSIM by direct per-window summation: explicit 2-D Gaussian weights,
/// centered second moments, no separable filtering.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize, channels: usize) -> f64 {
    const WIN: usize = 11;
    let sigma: f64 = 1.5;
    let mut kernel = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *k;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let px = |img: &[f64], y: usize, x: usize| 255.0 * img[(y * w + x) * channels + ch];
        for y0 in 0..=h - WIN {
            for x0 in 0..=w - WIN {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[i][j] / total;
                        mx += k * px(a, y0 + i, x0 + j);
                        my += k * px(b, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[i][j] / total;
                        let dx = px(a, y0 + i, x0 + j) - mx;
                        let dy = px(b, y0 + i, x0 + j) - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

type Check = (&'static str, f64);

/// Finite-difference error of every tape primitive on small random inputs.
pub fn primitive_checks() -> Vec<Check> {
    let r = |shape: &[usize], seed: u64| random_tensor(shape, seed, -1.0, 1.0);
    // keep values away from kinks of relu/abs/clamp
    let away = |shape: &[usize], seed: u64| {
        let t = random_tensor(shape, seed, 0.05, 1.0);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
            .collect();
        Tensor::new(shape, data).unwrap()
    };
    let mut out: Vec<Check> = Vec::new();
    let mut check = |name: &'static str,
                     inputs: Vec<Tensor<f64>>,
                     f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| {
        let err = gradcheck(&inputs, None, |t, v| {
            let y = f(t, v)?;
            project(t, y, 99)
        });
        out.push((name, err));
    };

    check("add", vec![r(&[3, 4], 1), r(&[3, 4], 2)], &|t, v| t.add(v[0], v[1]));
    check("sub", vec![r(&[3, 4], 3), r(&[3, 4], 4)], &|t, v| t.sub(v[0], v[1]));
    check("mul", vec![r(&[3, 4], 5), r(&[3, 4], 6)], &|t, v| t.mul(v[0], v[1]));
    check("add_row", vec![r(&[3, 4], 7), r(&[4], 8)], &|t, v| t.add_row(v[0], v[1]));
    check("scale", vec![r(&[5], 9)], &|t, v| t.scale(v[0], -1.7));
    check("add_scalar", vec![r(&[5], 10)], &|t, v| t.add_scalar(v[0], 0.3));
    check("matmul", vec![r(&[3, 5], 11), r(&[5, 2], 12)], &|t, v| t.matmul(v[0], v[1]));
    check("transpose", vec![r(&[3, 5], 13)], &|t, v| t.transpose(v[0]));
    check("reshape", vec![r(&[3, 4], 14)], &|t, v| t.reshape(v[0], [2, 6]));
    check("slice_cols", vec![r(&[3, 6], 15)], &|t, v| t.slice_cols(v[0], 2, 5));
    check("concat_cols", vec![r(&[3, 2], 16), r(&[3, 4], 17)], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
    check("concat", vec![r(&[2, 3, 3], 18), r(&[1, 3, 3], 19)], &|t, v| {
        t.concat(&[v[0], v[1]])
    });
    check("relu", vec![away(&[4, 4], 20)], &|t, v| t.relu(v[0]));
    check("gelu", vec![r(&[4, 4], 21)], &|t, v| t.gelu(v[0]));
    check("sigmoid", vec![r(&[4, 4], 22)], &|t, v| t.sigmoid(v[0]));
    check("abs", vec![away(&[4, 4], 23)], &|t, v| t.abs(v[0]));
    check("clamp", vec![away(&[4, 4], 24)], &|t, v| t.clamp(v[0], -0.5, 0.5));
    check("softmax_rows", vec![r(&[3, 5], 25)], &|t, v| t.softmax(v[0], 1));
    check("softmax_cols", vec![r(&[3, 5], 26)], &|t, v| t.softmax(v[0], 0));
    check(
        "layernorm",
        vec![r(&[3, 6], 27), r(&[6], 28), r(&[6], 29)],
        &|t, v| t.layernorm(v[0], v[1], v[2], 1e-5),
    );
    check(
        "conv2d_3x3",
        vec![r(&[2, 6, 5], 30), r(&[3, 2, 3, 3], 31), r(&[3], 32)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check(
        "conv2d_stride2",
        vec![r(&[2, 7, 7], 33), r(&[2, 2, 3, 3], 34)],
        &|t, v| t.conv2d(v[0], v[1], None, 2, 1),
    );
    check(
        "conv2d_1x1",
        vec![r(&[3, 4, 4], 35), r(&[2, 3, 1, 1], 36), r(&[2], 37)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    );
    check("adaptive_avg_pool", vec![r(&[2, 7, 6], 38)], &|t, v| {
        t.adaptive_avg_pool(v[0], 3, 2)
    });
    check("resize_up", vec![r(&[2, 3, 4], 39)], &|t, v| t.resize_bilinear(v[0], 7, 9));
    check("resize_down", vec![r(&[2, 8, 8], 40)], &|t, v| t.resize_bilinear(v[0], 3, 5));
    check("gap", vec![r(&[3, 4, 5], 41)], &|t, v| t.gap(v[0]));
    check("scale_channels", vec![r(&[3, 4, 4], 42), r(&[3], 43)], &|t, v| {
        t.scale_channels(v[0], v[1])
    });
    check("scatter_rows", vec![r(&[3, 2], 44)], &|t, v| {
        t.scatter_rows(v[0], vec![4, 0, 2], 5)
    });
    check("sum", vec![r(&[3, 4], 45)], &|t, v| t.sum(v[0]));
    check("mean", vec![r(&[3, 4], 46)], &|t, v| t.mean(v[0]));
    out
}
