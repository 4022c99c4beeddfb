//! CHW tensors and the handful of layers the U-shaped network needs, each
//! with a hand-written backward pass. Convolutions lower to `dgemm`.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    fn channel(&self, c: usize) -> &[f64] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Row-major `C = op(A)·op(B) + beta·C` with `op(A)` m×k and `op(B)` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let sa = if trans_a { (1, m) } else { (k, 1) };
    let sb = if trans_b { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, sa, b, sb, c, (n, 1), beta);
}

/// `C = A·B + beta·C` with explicit (row, column) strides for every operand.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || (last(m, k, sa) < a.len() && last(k, n, sb) < b.len()));
    assert!(last(m, n, sc) < c.len());
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Upper bound on the elements of one unfolded tile, sized to stay in cache.
const TILE_ELEMS: usize = 1 << 15;

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Row bands `[y0, y1)` whose unfolded size stays within [`TILE_ELEMS`].
fn row_tiles(k: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (TILE_ELEMS / (k * w).max(1)).clamp(1, h.max(1));
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

/// Unfolds the 3×3 zero-padded neighbourhoods of output rows `[y0, y1)` into
/// `col`, a (c·9)×((y1−y0)·w) matrix. Every entry is written.
fn im2col3_rows(x: &Tensor, y0: usize, y1: usize, col: &mut [f64]) {
    let (h, w) = (x.h, x.w);
    let tn = (y1 - y0) * w;
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * tn..][..tn];
                for y in y0..y1 {
                    let dst_row = &mut row[(y - y0) * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst_row[0] = 0.0;
                            dst_row[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst_row.copy_from_slice(src_row),
                        _ => {
                            dst_row[..w - 1].copy_from_slice(&src_row[1..]);
                            dst_row[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3_rows`]: accumulates `col` into `x`.
fn col2im3_rows(col: &[f64], y0: usize, y1: usize, x: &mut Tensor) {
    let (h, w) = (x.h, x.w);
    let tn = (y1 - y0) * w;
    let hw = h * w;
    for ci in 0..x.c {
        let dst = &mut x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * tn..][..tn];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w..][..w];
                    let src_row = &row[(y - y0) * w..][..w];
                    match kx {
                        0 => add_into(&mut dst_row[..w - 1], &src_row[1..]),
                        1 => add_into(dst_row, src_row),
                        _ => add_into(&mut dst_row[1..], &src_row[..w - 1]),
                    }
                }
            }
        }
    }
}

/// Unfolds 3×3 zero-padded neighbourhoods into a (c·9)×(h·w) matrix.
#[cfg(test)]
fn im2col3(x: &Tensor) -> Vec<f64> {
    let mut col = vec![0.0; x.c * 9 * x.hw()];
    im2col3_rows(x, 0, x.h, &mut col);
    col
}

/// Adjoint of [`im2col3`].
#[cfg(test)]
fn col2im3(col: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let mut x = Tensor::zeros(c, h, w);
    col2im3_rows(col, 0, h, &mut x);
    x
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], hw: usize) {
    for (co, chunk) in out.chunks_exact_mut(hw).enumerate() {
        let b = bias[co];
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate_bias_grad(dout: &[f64], db: &mut [f64], hw: usize) {
    for (co, chunk) in dout.chunks_exact(hw).enumerate() {
        db[co] += chunk.iter().sum::<f64>();
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is cout × (cin·9).
/// Works through row bands so the unfolded input stays cache-resident.
pub(crate) fn conv3_forward(x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let cout = bias.len();
    let hw = x.hw();
    let k = x.c * 9;
    let mut out = Tensor::zeros(cout, x.h, x.w);
    SCRATCH.with_borrow_mut(|(col, _)| {
        for (y0, y1) in row_tiles(k, x.h, x.w) {
            let tn = (y1 - y0) * x.w;
            col.resize(k * tn, 0.0);
            im2col3_rows(x, y0, y1, col);
            gemm_strided(
                cout,
                k,
                tn,
                weight,
                (k, 1),
                col,
                (tn, 1),
                &mut out.data[y0 * x.w..],
                (hw, 1),
                0.0,
            );
        }
    });
    add_bias(&mut out.data, bias, hw);
    out
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
pub(crate) fn conv3_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let cout = dout.c;
    let hw = x.hw();
    let k = x.c * 9;
    accumulate_bias_grad(&dout.data, dbias, hw);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.c, x.h, x.w));
    SCRATCH.with_borrow_mut(|(col, dcol)| {
        for (y0, y1) in row_tiles(k, x.h, x.w) {
            let tn = (y1 - y0) * x.w;
            let dout_tile = &dout.data[y0 * x.w..];
            col.resize(k * tn, 0.0);
            im2col3_rows(x, y0, y1, col);
            gemm_strided(
                cout,
                tn,
                k,
                dout_tile,
                (hw, 1),
                col,
                (1, tn),
                dweight,
                (k, 1),
                1.0,
            );
            if let Some(dx) = dx.as_mut() {
                dcol.resize(k * tn, 0.0);
                gemm_strided(
                    k,
                    cout,
                    tn,
                    weight,
                    (1, k),
                    dout_tile,
                    (hw, 1),
                    dcol,
                    (tn, 1),
                    0.0,
                );
                col2im3_rows(dcol, y0, y1, dx);
            }
        }
    });
    dx
}

/// 2×2 stride-2 transposed convolution. `weight` is (cout·4) × cin, row
/// `co·4 + dy·2 + dx`.
pub(crate) fn convt2_forward(x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let cout = bias.len();
    let hw = x.hw();
    let mut y = vec![0.0; cout * 4 * hw];
    gemm(cout * 4, x.c, hw, weight, false, &x.data, false, &mut y, 0.0);
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(cout, oh, ow);
    for co in 0..cout {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let src = &y[(co * 4 + d) * hw..][..hw];
            for i in 0..x.h {
                for j in 0..x.w {
                    out.data[co * oh * ow + (2 * i + dy) * ow + 2 * j + dx] = src[i * x.w + j] + bias[co];
                }
            }
        }
    }
    out
}

pub(crate) fn convt2_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let cout = dout.c;
    let hw = x.hw();
    let (oh, ow) = (dout.h, dout.w);
    let mut dy = vec![0.0; cout * 4 * hw];
    for co in 0..cout {
        for d in 0..4 {
            let (ddy, ddx) = (d / 2, d % 2);
            let dst = &mut dy[(co * 4 + d) * hw..][..hw];
            for i in 0..x.h {
                for j in 0..x.w {
                    dst[i * x.w + j] = dout.data[co * oh * ow + (2 * i + ddy) * ow + 2 * j + ddx];
                }
            }
        }
    }
    accumulate_bias_grad(&dout.data, dbias, oh * ow);
    gemm(cout * 4, hw, x.c, &dy, false, &x.data, true, dweight, 1.0);
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    gemm(x.c, cout * 4, hw, weight, true, &dy, false, &mut dx.data, 0.0);
    dx
}

/// Pointwise convolution to a single output channel. `weight` has length c.
pub(crate) fn conv1_forward(x: &Tensor, weight: &[f64], bias: f64) -> Vec<f64> {
    let hw = x.hw();
    let mut out = vec![bias; hw];
    gemm(1, x.c, hw, weight, false, &x.data, false, &mut out, 1.0);
    out
}

pub(crate) fn conv1_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut f64,
) -> Tensor {
    let hw = x.hw();
    gemm(1, hw, x.c, dout, false, &x.data, true, dweight, 1.0);
    *dbias += dout.iter().sum::<f64>();
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    gemm(x.c, 1, hw, weight, true, dout, false, &mut dx.data, 0.0);
    dx
}

/// Slope of the activation for negative inputs.
pub(crate) const LEAK: f64 = 0.01;

/// Leaky rectifier `max(x, LEAK·x)`.
pub(crate) fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAK;
        }
    }
}

/// Scales `grad` by the activation's slope, read off its output (the sign of
/// the output equals the sign of the input).
pub(crate) fn relu_backward_inplace(activated: &Tensor, grad: &mut Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g *= LEAK;
        }
    }
}

/// 2×2 max pooling; also returns the flat input index of each maximum.
pub(crate) fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut argmax = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * x.w + 2 * j;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + dy) * x.w + 2 * j + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * oh * ow + i * ow + j;
                out.data[o] = x.data[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_backward(dout: &Tensor, argmax: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &idx) in dout.data.iter().zip(argmax) {
        dx.data[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbour ×2 up-sampling.
pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                out.data[c * oh * ow + y * ow + xx] = x.data[c * x.hw() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[c * h * w + (y / 2) * w + xx / 2] += dout.data[c * dout.hw() + y * dout.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub(crate) fn split(grad: Tensor, first_channels: usize) -> (Tensor, Tensor) {
    let at = first_channels * grad.hw();
    let second = Tensor::from_vec(grad.c - first_channels, grad.h, grad.w, grad.data[at..].to_vec());
    let mut first_data = grad.data;
    first_data.truncate(at);
    (
        Tensor::from_vec(first_channels, second.h, second.w, first_data),
        second,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
        let cout = bias.len();
        let mut out = Tensor::zeros(cout, x.h, x.w);
        for co in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = bias[co];
                    for ci in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += weight[co * x.c * 9 + ci * 9 + (ky * 3 + kx) as usize]
                                    * x.data[ci * x.hw() + sy as usize * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[co * x.hw() + y as usize * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 7919 % 101) as f64 / 50.0 - 1.0) * scale)
            .collect()
    }

    #[test]
    fn conv3_matches_direct_summation() {
        let x = Tensor::from_vec(2, 5, 4, seq(40, 1.0));
        let w = seq(3 * 2 * 9, 0.3);
        let b = vec![0.1, -0.2, 0.05];
        let fast = conv3_forward(&x, &w, &b);
        let slow = naive_conv3(&x, &w, &b);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Tensor::from_vec(2, 4, 3, seq(24, 1.0));
        let y = seq(2 * 9 * 12, 0.5);
        let lhs: f64 = im2col3(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im3(&y, 2, 4, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn convt2_places_each_kernel_tap() {
        let x = Tensor::from_vec(1, 1, 1, vec![2.0]);
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let out = convt2_forward(&x, &w, &[0.5]);
        assert_eq!(out.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (p, idx) = maxpool2_forward(&x);
        assert_eq!(p.data, vec![4.0]);
        assert_eq!(idx, vec![1]);
        let up = upsample2_forward(&p);
        assert_eq!(up.data, vec![4.0; 4]);
        assert_eq!(upsample2_backward(&up).data, vec![16.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, 2, seq(8, 1.0));
        let (a2, b2) = split(concat(&a, &b), 1);
        assert_eq!((a2, b2), (a, b));
    }
}
