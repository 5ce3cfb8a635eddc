//! Slice-level numeric kernels shared by the eager layer functions and the
//! graph operators. All loops accumulate in a fixed order so results are
//! reproducible bit for bit.

/// Lower bound applied inside `ln` so saturated softmax outputs stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        // four k steps per pass over the row; each element still adds them in order
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[kk], a_row[kk + 1], a_row[kk + 2], a_row[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                let mut v = c_row[j];
                v += a0 * b0[j];
                v += a1 * b1[j];
                v += a2 * b2[j];
                v += a3 * b3[j];
                c_row[j] = v;
            }
            kk += 4;
        }
        for kk in kk..k {
            let aik = a_row[kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `m×k` and `b` as `n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + 4 <= n {
            let d = dot4(a_row, &b[j * k..(j + 4) * k]);
            for (t, v) in d.into_iter().enumerate() {
                c[i * n + j + t] += v;
            }
            j += 4;
        }
        for j in j..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Four dot products of `a` against consecutive rows of `b`, each summed
/// exactly as [`dot`] would.
fn dot4(a: &[f64], b: &[f64]) -> [f64; 4] {
    let k = a.len();
    let rows = [&b[..k], &b[k..2 * k], &b[2 * k..3 * k], &b[3 * k..4 * k]];
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = k / 4;
    for c in 0..chunks {
        let i = c * 4;
        let av = [a[i], a[i + 1], a[i + 2], a[i + 3]];
        for (r, row) in rows.iter().enumerate() {
            for l in 0..4 {
                acc[r][l] += av[l] * row[i + l];
            }
        }
    }
    let mut out = [0.0; 4];
    for (r, row) in rows.iter().enumerate() {
        let mut tail = 0.0;
        for i in chunks * 4..k {
            tail += a[i] * row[i];
        }
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

/// Geometry of a 2D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> Option<usize> {
        out_extent(self.height, self.kernel_h, self.stride, self.padding)
    }

    pub fn out_width(&self) -> Option<usize> {
        out_extent(self.width, self.kernel_w, self.stride, self.padding)
    }

    /// Length of one flattened receptive field (`D'·kh·kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one `C×H×W` sample into a `(C·kh·kw) × (A·B)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry, out_h: usize, out_w: usize, col: &mut [f64]) {
    let positions = out_h * out_w;
    debug_assert_eq!(col.len(), g.patch_len() * positions);
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let dst = &mut col[row * positions..(row + 1) * positions];
                for a in 0..out_h {
                    let y = (a * g.stride + i) as isize - pad;
                    let dst_row = &mut dst[a * out_w..(a + 1) * out_w];
                    if y < 0 || y >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    if g.stride == 1 {
                        // columns map to a contiguous source run plus zero borders
                        let lo = g.padding.saturating_sub(j).min(out_w);
                        let hi = (g.width + g.padding).saturating_sub(j).clamp(lo, out_w);
                        dst_row.fill(0.0);
                        if hi > lo {
                            let start = lo + j - g.padding;
                            dst_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (b, d) in dst_row.iter_mut().enumerate() {
                        let xx = (b * g.stride + j) as isize - pad;
                        *d = if xx < 0 || xx >= g.width as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column-matrix gradient back onto the `C×H×W` input, accumulating.
pub fn col2im(col: &[f64], g: &ConvGeometry, out_h: usize, out_w: usize, dx: &mut [f64]) {
    let positions = out_h * out_w;
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let src = &col[row * positions..(row + 1) * positions];
                for a in 0..out_h {
                    let y = (a * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for b in 0..out_w {
                        let xx = (b * g.stride + j) as isize - pad;
                        if xx >= 0 && xx < g.width as isize {
                            dst[xx as usize] += src[a * out_w + b];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Linear activation of one sample: `out[d, a, b] = Σ w·x + bias[d]`.
pub fn conv2d_sample(
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
    out: &mut [f64],
) {
    let positions = out_h * out_w;
    let filters = bias.len();
    im2col(x, g, out_h, out_w, col);
    out.fill(0.0);
    gemm_nn(filters, g.patch_len(), positions, weights, col, out);
    for (d, &b) in bias.iter().enumerate() {
        for v in &mut out[d * positions..(d + 1) * positions] {
            *v += b;
        }
    }
}

/// 2×2 / stride-2 max pooling of one `D×H×W` sample. `argmax` receives the
/// flat in-sample index of each selected input cell; ties keep the first
/// cell in row-major window order.
pub fn maxpool2_sample(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / 2, width / 2);
    for d in 0..channels {
        let base = d * height * width;
        for a in 0..oh {
            for b in 0..ow {
                let mut best_idx = base + (2 * a) * width + 2 * b;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * a + di) * width + 2 * b + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = d * oh * ow + a * ow + b;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Numerically stable softmax of `logits` written into `probs`.
pub fn softmax_into(logits: &[f64], probs: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &a) in probs.iter_mut().zip(logits) {
        *p = (a - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
}

/// Shannon entropy (nats) of a probability vector with the log floor applied.
pub fn entropy_of_probs(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * safe_ln(p)).sum::<f64>()
}

/// `ln softmax(logits)[index]` computed via log-sum-exp.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&a| (a - max).exp()).sum();
    logits[index] - max - sum.ln()
}
