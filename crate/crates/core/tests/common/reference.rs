//! Naive f64 re-implementation of the network, used only as a test oracle.
//! Direct-loop convolutions, no im2col, no shared code with the engine.

use protofed::nn::{ModelArch, ModelParams};
use protofed::Tensor;

pub struct RefParams {
    pub arch: ModelArch,
    pub tensors: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn from_params(p: &ModelParams) -> Self {
        RefParams {
            arch: *p.arch(),
            tensors: p
                .tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }
}

/// Activation pattern of one forward pass: relu on/off bits and pool winners.
/// Finite differences are only meaningful when this does not change.
#[derive(PartialEq, Eq, Debug)]
pub struct Pattern(Vec<u32>);

fn conv_relu(
    x: &[f64],
    cin: usize,
    side: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
    k: usize,
    pattern: &mut Vec<u32>,
) -> Vec<f64> {
    let out = side - k + 1;
    let mut y = vec![0.0; cout * out * out];
    for o in 0..cout {
        for oy in 0..out {
            for ox in 0..out {
                let mut acc = b[o];
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += w[((o * cin + c) * k + ky) * k + kx]
                                * x[(c * side + oy + ky) * side + ox + kx];
                        }
                    }
                }
                pattern.push((acc > 0.0) as u32);
                y[(o * out + oy) * out + ox] = acc.max(0.0);
            }
        }
    }
    y
}

fn pool(x: &[f64], ch: usize, side: usize, p: usize, pattern: &mut Vec<u32>) -> Vec<f64> {
    let ps = side / p;
    let mut y = vec![0.0; ch * ps * ps];
    for c in 0..ch {
        for py in 0..ps {
            for px in 0..ps {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let v = x[(c * side + py * p + dy) * side + px * p + dx];
                        if v > best {
                            best = v;
                            arg = dy * p + dx;
                        }
                    }
                }
                pattern.push(arg as u32);
                y[(c * ps + py) * ps + px] = best;
            }
        }
    }
    y
}

fn dense(x: &[f64], w: &[f64], b: &[f64], out: usize, relu: bool, pattern: &mut Vec<u32>) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|o| {
            let v = b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>();
            if relu {
                pattern.push((v > 0.0) as u32);
                v.max(0.0)
            } else {
                v
            }
        })
        .collect()
}

/// Embedding and logits of one sample.
pub fn sample_forward(p: &RefParams, x: &[f64], pattern: &mut Vec<u32>) -> (Vec<f64>, Vec<f64>) {
    let a = &p.arch;
    let t = &p.tensors;
    let h = conv_relu(x, 1, a.input_side, &t[0], &t[1], a.conv1_channels, a.conv1_kernel, pattern);
    let h = pool(&h, a.conv1_channels, a.conv1_out(), a.pool, pattern);
    let h = conv_relu(&h, a.conv1_channels, a.pool1_side(), &t[2], &t[3], a.conv2_channels, a.conv2_kernel, pattern);
    let h = pool(&h, a.conv2_channels, a.conv2_out(), a.pool, pattern);
    let e = dense(&h, &t[4], &t[5], a.embed_dim, true, pattern);
    let logits = dense(&e, &t[6], &t[7], a.classes, false, pattern);
    (e, logits)
}

pub fn batch_rows(batch: &Tensor) -> Vec<Vec<f64>> {
    (0..batch.rows())
        .map(|i| batch.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Mean cross-entropy of the batch plus the activation pattern.
pub fn loss(p: &RefParams, rows: &[Vec<f64>], labels: &[usize]) -> (f64, Pattern) {
    let mut pattern = Vec::new();
    let mut total = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let (_, logits) = sample_forward(p, x, &mut pattern);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    (total / rows.len() as f64, Pattern(pattern))
}

pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because a ±eps perturbation crossed a relu/pool kink.
    pub kinked: usize,
}

/// Relative error with a floor on the denominator so that entries whose
/// true derivative is numerically zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences (step `eps`) over every parameter entry, compared
/// against the analytic gradient tensors.
pub fn check_gradients(params: &ModelParams, grads: &[Tensor], batch: &Tensor, labels: &[usize], eps: f64) -> GradCheck {
    let mut rp = RefParams::from_params(params);
    let rows = batch_rows(batch);
    let (_, base) = loss(&rp, &rows, labels);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinked: 0,
    };
    for (ti, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.data().iter().enumerate() {
            let orig = rp.tensors[ti][j];
            rp.tensors[ti][j] = orig + eps;
            let (lp, pp) = loss(&rp, &rows, labels);
            rp.tensors[ti][j] = orig - eps;
            let (lm, pm) = loss(&rp, &rows, labels);
            rp.tensors[ti][j] = orig;
            if pp != base || pm != base {
                out.kinked += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic as f64, numeric));
            out.checked += 1;
        }
    }
    out
}
