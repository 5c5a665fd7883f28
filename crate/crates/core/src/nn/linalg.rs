//! Dense kernels used by the CNN: a bounds-checked `sgemm` wrapper,
//! im2col / col2im for valid convolutions and non-overlapping max-pooling.

/// Strided view of a row-major-or-not matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n` and row-major `c: m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32]) {
    a.check(m, k);
    b.check(k, n);
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `channels x side x side` image into a `(channels*k*k) x (out*out)`
/// patch matrix, `out = side - k + 1`.
pub(crate) fn im2col(input: &[f32], channels: usize, side: usize, k: usize, col: &mut [f32]) {
    let out = side - k + 1;
    let positions = out * out;
    for c in 0..channels {
        let plane = &input[c * side * side..(c + 1) * side * side];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..out {
                    let src = &plane[(oy + ky) * side + kx..(oy + ky) * side + kx + out];
                    dst[oy * out..(oy + 1) * out].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(col: &[f32], channels: usize, side: usize, k: usize, grad: &mut [f32]) {
    let out = side - k + 1;
    let positions = out * out;
    for c in 0..channels {
        let plane = &mut grad[c * side * side..(c + 1) * side * side];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..out {
                    let dst = &mut plane[(oy + ky) * side + kx..(oy + ky) * side + kx + out];
                    for (d, s) in dst.iter_mut().zip(&src[oy * out..(oy + 1) * out]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `pool x pool` max-pooling over `channels` planes.
/// Records the flat source index of each window maximum (first maximum wins).
pub(crate) fn max_pool(
    input: &[f32],
    channels: usize,
    side: usize,
    pool: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let pside = side / pool;
    for c in 0..channels {
        let base = c * side * side;
        for py in 0..pside {
            for px in 0..pside {
                let mut best_idx = base + py * pool * side + px * pool;
                let mut best = input[best_idx];
                for dy in 0..pool {
                    for dx in 0..pool {
                        let idx = base + (py * pool + dy) * side + px * pool + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * pside + py) * pside + px;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}
