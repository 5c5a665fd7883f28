//! Forward pass, embedding tap and hand-written backpropagation.

use super::linalg::{col2im, gemm, im2col, max_pool, View};
use super::{
    Gradients, ModelArch, ModelParams, CONV1_B, CONV1_W, CONV2_B, CONV2_W, FC1_B, FC1_W, FC2_B,
    FC2_W,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intermediate values kept for the backward pass.
struct Trace {
    batch: usize,
    col1: Vec<f32>,
    act1: Vec<f32>,
    arg1: Vec<u32>,
    col2: Vec<f32>,
    act2: Vec<f32>,
    arg2: Vec<u32>,
    flat: Vec<f32>,
    embedding: Vec<f32>,
}

fn check_batch(arch: &ModelArch, batch: &Tensor) -> Result<usize> {
    let s = arch.input_side;
    match batch.shape() {
        [b, 1, h, w] if *h == s && *w == s => Ok(*b),
        other => Err(Error::invalid(format!(
            "batch shape {other:?} does not match [B, 1, {s}, {s}]"
        ))),
    }
}

fn add_bias_relu(out: &mut [f32], bias: &[f32], positions: usize) {
    for (c, plane) in out.chunks_mut(positions).enumerate() {
        let b = bias[c];
        for v in plane {
            *v = (*v + b).max(0.0);
        }
    }
}

/// Valid convolution + bias + relu + max-pool over one sample.
#[allow(clippy::too_many_arguments)]
fn conv_block(
    input: &[f32],
    in_ch: usize,
    side: usize,
    k: usize,
    weight: &[f32],
    bias: &[f32],
    out_ch: usize,
    pool: usize,
    col: &mut [f32],
    act: &mut [f32],
    pooled: &mut [f32],
    arg: &mut [u32],
) {
    let out = side - k + 1;
    let positions = out * out;
    let kk = in_ch * k * k;
    im2col(input, in_ch, side, k, col);
    gemm(
        out_ch,
        kk,
        positions,
        View::row_major(weight, kk),
        View::row_major(col, positions),
        0.0,
        act,
    );
    add_bias_relu(act, bias, positions);
    max_pool(act, out_ch, out, pool, pooled, arg);
}

/// `y = relu?(x W^T + b)` for a row-major batch.
fn dense(x: &[f32], rows: usize, w: &Tensor, b: &Tensor, relu: bool) -> Vec<f32> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * out];
    gemm(
        rows,
        inp,
        out,
        View::row_major(x, inp),
        View::transposed(w.data(), inp),
        0.0,
        &mut y,
    );
    for row in y.chunks_mut(out) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
            if relu {
                *v = v.max(0.0);
            }
        }
    }
    y
}

fn run_extractor(params: &ModelParams, batch: &Tensor, keep: bool) -> Result<Trace> {
    let arch = params.arch();
    let b = check_batch(arch, batch)?;
    let t = params.tensors();
    let (c1, k1, c2, k2, pool) = (
        arch.conv1_channels,
        arch.conv1_kernel,
        arch.conv2_channels,
        arch.conv2_kernel,
        arch.pool,
    );
    let (o1, p1, o2) = (arch.conv1_out(), arch.pool1_side(), arch.conv2_out());
    let col1_len = k1 * k1 * o1 * o1;
    let act1_len = c1 * o1 * o1;
    let pool1_len = c1 * p1 * p1;
    let col2_len = c1 * k2 * k2 * o2 * o2;
    let act2_len = c2 * o2 * o2;
    let flat_len = arch.flat_dim();

    // Without `keep` only one sample's scratch is held at a time.
    let slots = if keep { b } else { 1 };
    let mut col1 = vec![0.0; slots * col1_len];
    let mut act1 = vec![0.0; slots * act1_len];
    let mut arg1 = vec![0u32; slots * pool1_len];
    let mut pooled1 = vec![0.0; pool1_len];
    let mut col2 = vec![0.0; slots * col2_len];
    let mut act2 = vec![0.0; slots * act2_len];
    let mut arg2 = vec![0u32; b * flat_len];
    let mut flat = vec![0.0; b * flat_len];

    for s in 0..b {
        let slot = if keep { s } else { 0 };
        conv_block(
            batch.row(s),
            1,
            arch.input_side,
            k1,
            t[CONV1_W].data(),
            t[CONV1_B].data(),
            c1,
            pool,
            &mut col1[slot * col1_len..(slot + 1) * col1_len],
            &mut act1[slot * act1_len..(slot + 1) * act1_len],
            &mut pooled1,
            &mut arg1[slot * pool1_len..(slot + 1) * pool1_len],
        );
        conv_block(
            &pooled1,
            c1,
            p1,
            k2,
            t[CONV2_W].data(),
            t[CONV2_B].data(),
            c2,
            pool,
            &mut col2[slot * col2_len..(slot + 1) * col2_len],
            &mut act2[slot * act2_len..(slot + 1) * act2_len],
            &mut flat[s * flat_len..(s + 1) * flat_len],
            &mut arg2[s * flat_len..(s + 1) * flat_len],
        );
    }
    let embedding = dense(&flat, b, &t[FC1_W], &t[FC1_B], true);
    Ok(Trace {
        batch: b,
        col1,
        act1,
        arg1,
        col2,
        act2,
        arg2,
        flat,
        embedding,
    })
}

/// Feature-extractor output: the rectified fc1 activations, `B x d`.
pub fn embed(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let trace = run_extractor(params, batch, false)?;
    Tensor::new(vec![trace.batch, params.arch().embed_dim], trace.embedding)
}

/// Classifier head applied to precomputed embeddings, `B x d -> B x C`.
pub fn head(params: &ModelParams, embeddings: &Tensor) -> Result<Tensor> {
    let d = params.arch().embed_dim;
    if embeddings.shape().len() != 2 || embeddings.shape()[1] != d {
        return Err(Error::invalid(format!(
            "embedding shape {:?} does not match [B, {d}]",
            embeddings.shape()
        )));
    }
    let t = params.tensors();
    let rows = embeddings.rows();
    let logits = dense(embeddings.data(), rows, &t[FC2_W], &t[FC2_B], false);
    Tensor::new(vec![rows, params.arch().classes], logits)
}

/// Logits, `B x C`. Identical to `head(embed(x))`.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    head(params, &embed(params, batch)?)
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grads(params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let arch = *params.arch();
    let b = check_batch(&arch, batch)?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= arch.classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            arch.classes
        )));
    }
    let trace = run_extractor(params, batch, true)?;
    let t = params.tensors();
    let classes = arch.classes;
    let d = arch.embed_dim;
    let logits = dense(&trace.embedding, b, &t[FC2_W], &t[FC2_B], false);

    // Softmax cross-entropy; loss accumulated in f64.
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; b * classes];
    let inv_b = 1.0 / b as f64;
    for (s, row) in logits.chunks(classes).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= row[labels[s]] as f64 - log_z;
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - log_z).exp();
            let target = if j == labels[s] { 1.0 } else { 0.0 };
            dlogits[s * classes + j] = ((p - target) * inv_b) as f32;
        }
    }
    loss *= inv_b;

    let mut grads = Gradients::zeros_like(params);
    let g = grads.tensors_mut();

    // fc2
    dense_backward(&dlogits, &trace.embedding, b, d, classes, w_and_b(g, FC2_W, FC2_B));
    let mut dh = vec![0.0f32; b * d];
    gemm(
        b,
        classes,
        d,
        View::row_major(&dlogits, classes),
        View::row_major(t[FC2_W].data(), d),
        0.0,
        &mut dh,
    );
    for (dv, &h) in dh.iter_mut().zip(&trace.embedding) {
        if h <= 0.0 {
            *dv = 0.0;
        }
    }

    // fc1
    let flat_len = arch.flat_dim();
    dense_backward(&dh, &trace.flat, b, flat_len, d, w_and_b(g, FC1_W, FC1_B));
    let mut dflat = vec![0.0f32; b * flat_len];
    gemm(
        b,
        d,
        flat_len,
        View::row_major(&dh, d),
        View::row_major(t[FC1_W].data(), flat_len),
        0.0,
        &mut dflat,
    );

    // conv blocks, one sample at a time
    let (c1, k1, c2, k2) = (
        arch.conv1_channels,
        arch.conv1_kernel,
        arch.conv2_channels,
        arch.conv2_kernel,
    );
    let (o1, p1, o2) = (arch.conv1_out(), arch.pool1_side(), arch.conv2_out());
    let pos1 = o1 * o1;
    let pos2 = o2 * o2;
    let kk1 = k1 * k1;
    let kk2 = c1 * k2 * k2;
    let col1_len = kk1 * pos1;
    let col2_len = kk2 * pos2;
    let act1_len = c1 * pos1;
    let act2_len = c2 * pos2;
    let pool1_len = c1 * p1 * p1;

    let (g_conv1, g_conv2) = g.split_at_mut(CONV2_W);
    let (g_conv1_w, g_conv1_b) = w_and_b(g_conv1, CONV1_W, CONV1_B);
    let (g_conv2_w, g_conv2_b) = w_and_b(g_conv2, 0, 1);

    let mut dact2 = vec![0.0f32; act2_len];
    let mut dcol2 = vec![0.0f32; col2_len];
    let mut dpool1 = vec![0.0f32; pool1_len];
    let mut dact1 = vec![0.0f32; act1_len];
    for s in 0..b {
        let act2 = &trace.act2[s * act2_len..(s + 1) * act2_len];
        let col2 = &trace.col2[s * col2_len..(s + 1) * col2_len];
        let act1 = &trace.act1[s * act1_len..(s + 1) * act1_len];
        let col1 = &trace.col1[s * col1_len..(s + 1) * col1_len];

        dact2.fill(0.0);
        let arg2 = &trace.arg2[s * flat_len..(s + 1) * flat_len];
        for (&src, &gv) in arg2.iter().zip(&dflat[s * flat_len..(s + 1) * flat_len]) {
            dact2[src as usize] += gv;
        }
        relu_mask(&mut dact2, act2);
        conv_weight_grad(&dact2, col2, c2, kk2, pos2, g_conv2_w, g_conv2_b);
        gemm(
            kk2,
            c2,
            pos2,
            View::transposed(t[CONV2_W].data(), kk2),
            View::row_major(&dact2, pos2),
            0.0,
            &mut dcol2,
        );
        dpool1.fill(0.0);
        col2im(&dcol2, c1, p1, k2, &mut dpool1);

        dact1.fill(0.0);
        let arg1 = &trace.arg1[s * pool1_len..(s + 1) * pool1_len];
        for (&src, &gv) in arg1.iter().zip(&dpool1) {
            dact1[src as usize] += gv;
        }
        relu_mask(&mut dact1, act1);
        conv_weight_grad(&dact1, col1, c1, kk1, pos1, g_conv1_w, g_conv1_b);
    }

    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::invalid("non-finite loss or gradient"));
    }
    Ok((loss, grads))
}

/// Disjoint mutable borrows of a weight tensor and the bias right after it.
fn w_and_b(g: &mut [Tensor], w: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    debug_assert_eq!(b, w + 1);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[w], &mut hi[0])
}

fn relu_mask(grad: &mut [f32], act: &[f32]) {
    for (gv, &a) in grad.iter_mut().zip(act) {
        if a <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Accumulates `dW += dOut * col^T` and `db += rowsum(dOut)`.
fn conv_weight_grad(
    dout: &[f32],
    col: &[f32],
    out_ch: usize,
    kk: usize,
    positions: usize,
    gw: &mut Tensor,
    gb: &mut Tensor,
) {
    gemm(
        out_ch,
        positions,
        kk,
        View::row_major(dout, positions),
        View::transposed(col, positions),
        1.0,
        gw.data_mut(),
    );
    for (c, plane) in dout.chunks(positions).enumerate() {
        gb.data_mut()[c] += plane.iter().sum::<f32>();
    }
}

/// `dW = dY^T x`, `db = colsum(dY)` for a dense layer.
fn dense_backward(
    dy: &[f32],
    x: &[f32],
    rows: usize,
    inp: usize,
    out: usize,
    (gw, gb): (&mut Tensor, &mut Tensor),
) {
    gemm(
        out,
        rows,
        inp,
        View::transposed(dy, out),
        View::row_major(x, inp),
        0.0,
        gw.data_mut(),
    );
    let gbd = gb.data_mut();
    gbd.fill(0.0);
    for row in dy.chunks(out) {
        for (acc, v) in gbd.iter_mut().zip(row) {
            *acc += v;
        }
    }
}
