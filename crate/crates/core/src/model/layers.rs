//! Dense kernels for the backbone.
//!
//! Activations are stored channel-major over the whole batch: `[C][N][H][W]`.
//! A 3x3 convolution with stride 2 and zero padding 1 lowers to
//! `out[Cout][M] = weight[Cout][Cin*9] * col[Cin*9][M]` with `M = N*Ho*Wo`,
//! so each layer's output is already laid out as the next layer's input.
//! Stride 2 is conv, ReLU, then keep every other pixel in each direction,
//! computed without the discarded positions.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        self.h.div_ceil(2)
    }
    pub fn wo(&self) -> usize {
        self.w.div_ceil(2)
    }
    /// Rows of the lowered matrix.
    pub fn k(&self) -> usize {
        self.cin * 9
    }
    /// Columns of the lowered matrix.
    pub fn m(&self) -> usize {
        self.n * self.ho() * self.wo()
    }
}

pub(crate) fn im2col(input: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (ho, wo, m) = (g.ho(), g.wo(), g.m());
    debug_assert_eq!(input.len(), g.cin * g.n * g.h * g.w);
    debug_assert_eq!(col.len(), g.k() * m);
    for ci in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * m..][..m];
                for n in 0..g.n {
                    let plane = &input[(ci * g.n + n) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let dst = &mut row[(n * ho + oy) * wo..][..wo];
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `grad_in`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, grad_in: &mut [f32]) {
    let (ho, wo, m) = (g.ho(), g.wo(), g.m());
    for ci in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * m..][..m];
                for n in 0..g.n {
                    let plane = &mut grad_in[(ci * g.n + n) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[(n * ho + oy) * wo..][..wo];
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c`, with `c` row-major.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides describe the three slices exactly, as
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// `-log softmax(logits)[target]`, computed in f64.
pub(crate) fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - logits[target] as f64
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
