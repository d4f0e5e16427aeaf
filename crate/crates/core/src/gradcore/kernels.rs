//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! slices in NCHW order.

use crate::par;

/// Images per im2col block. Fixed so reductions do not depend on thread count.
pub(crate) const GROUP: usize = 16;

/// `c = a·b + beta·c` for row/column strided matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k` when
/// `stride == 1`: input index is `o + k - pad`.
fn valid_range(out: usize, inp: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out);
    let hi = (inp + pad).saturating_sub(k).min(out).max(lo);
    (lo, hi)
}

/// `col` (`patch × imgs·OHW`, column = img·OHW + p) for a block of images.
fn im2col(g: &ConvGeom, x: &[f32], imgs: usize) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let width = imgs * ohw;
    let k = g.kernel;
    let mut col = vec![0.0f32; g.patch() * width];
    for img in 0..imgs {
        let xi = &x[img * g.in_len()..(img + 1) * g.in_len()];
        for c in 0..g.in_c {
            let plane = &xi[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * width + img * ohw..][..ohw];
                    if g.stride == 1 {
                        let (y0, y1) = valid_range(oh, g.in_h, ky, g.pad);
                        let (x0, x1) = valid_range(ow, g.in_w, kx, g.pad);
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let src = &plane[iy * g.in_w + x0 + kx - g.pad..][..x1 - x0];
                            dst[oy * ow + x0..oy * ow + x1].copy_from_slice(src);
                        }
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add `col` back into image gradients. Inverse layout of `im2col`.
fn col2im(g: &ConvGeom, col: &[f32], imgs: usize) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let width = imgs * ohw;
    let k = g.kernel;
    let mut dx = vec![0.0f32; imgs * g.in_len()];
    for img in 0..imgs {
        let di = &mut dx[img * g.in_len()..(img + 1) * g.in_len()];
        for c in 0..g.in_c {
            let plane = &mut di[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * width + img * ohw..][..ohw];
                    if g.stride == 1 {
                        let (y0, y1) = valid_range(oh, g.in_h, ky, g.pad);
                        let (x0, x1) = valid_range(ow, g.in_w, kx, g.pad);
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let dst = &mut plane[iy * g.in_w + x0 + kx - g.pad..][..x1 - x0];
                            dst.iter_mut()
                                .zip(&src[oy * ow + x0..oy * ow + x1])
                                .for_each(|(d, s)| *d += s);
                        }
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `a·b` into a fresh `m × n` row-major buffer.
#[allow(clippy::too_many_arguments)]
fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
) -> Vec<f32> {
    let mut c: Vec<f32> = Vec::with_capacity(m * n);
    if m * n == 0 {
        return c;
    }
    if k == 0 {
        c.resize(m * n, 0.0);
        return c;
    }
    let last = |r: usize, c: usize, (rs, cs): (usize, usize)| (r - 1) * rs + (c - 1) * cs;
    assert!(last(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: with beta = 0 sgemm never reads C, and it writes all m·n
    // entries of the row-major destination, which fits in the capacity.
    unsafe {
        matrixmultiply::sgemm(
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
            0.0,
            c.spare_capacity_mut().as_mut_ptr() as *mut f32,
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

fn group_span(g: &ConvGeom, gi: usize) -> (usize, usize) {
    let start = gi * GROUP;
    (start, GROUP.min(g.batch - start))
}

/// Returns the output and the per-group column blocks for backward.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    keep_cols: bool,
) -> (Vec<f32>, Vec<Vec<f32>>) {
    let patch = g.patch();
    let ohw = g.out_hw();
    let groups = g.batch.div_ceil(GROUP);
    let blocks: Vec<(Vec<f32>, Vec<f32>)> = par::map_range(groups, |gi| {
        let (start, imgs) = group_span(g, gi);
        let width = imgs * ohw;
        let col = im2col(g, &x[start * g.in_len()..], imgs);
        let tmp = gemm_new(g.out_c, patch, width, weight, (patch, 1), &col, (width, 1));
        (col, tmp)
    });
    let mut out = Vec::with_capacity(g.batch * g.out_c * ohw);
    let mut cols = Vec::with_capacity(if keep_cols { groups } else { 0 });
    for (gi, (col, tmp)) in blocks.into_iter().enumerate() {
        let (_, imgs) = group_span(g, gi);
        let width = imgs * ohw;
        for img in 0..imgs {
            for (co, &b) in bias.iter().enumerate() {
                out.extend(tmp[co * width + img * ohw..][..ohw].iter().map(|v| v + b));
            }
        }
        if keep_cols {
            cols.push(col);
        }
    }
    (out, cols)
}

/// Gradients of a convolution. `want_dx`/`want_dw` skip unneeded work.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[Vec<f32>],
    weight: &[f32],
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<(Vec<f32>, Vec<f32>)>) {
    let patch = g.patch();
    let ohw = g.out_hw();
    let groups = g.batch.div_ceil(GROUP);
    let parts: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = par::map_range(groups, |gi| {
        let (start, imgs) = group_span(g, gi);
        let width = imgs * ohw;
        let mut dyg = Vec::with_capacity(g.out_c * width);
        for co in 0..g.out_c {
            for img in 0..imgs {
                dyg.extend_from_slice(&dy[((start + img) * g.out_c + co) * ohw..][..ohw]);
            }
        }
        let dw = want_dw.then(|| gemm_new(g.out_c, width, patch, &dyg, (width, 1), &cols[gi], (1, width)));
        let dx = want_dx.then(|| {
            let dcol = gemm_new(patch, g.out_c, width, weight, (1, patch), &dyg, (width, 1));
            col2im(g, &dcol, imgs)
        });
        (dx, dw)
    });
    let mut dx_all = want_dx.then(|| Vec::with_capacity(g.batch * g.in_len()));
    let mut dw_all = want_dw.then(|| vec![0.0f32; g.out_c * patch]);
    for (dx, dw) in parts {
        if let (Some(all), Some(dx)) = (&mut dx_all, dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (&mut dw_all, dw) {
            all.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
    }
    let dparams = dw_all.map(|dw| {
        let mut db = vec![0.0f32; g.out_c];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[(b * g.out_c + co) * ohw..][..ohw].iter().sum::<f32>();
            }
        }
        (dw, db)
    });
    (dx_all, dparams)
}

/// `y[B,O] = x[B,I]·Wᵀ + b` with `W` stored `[O,I]`.
pub(crate) fn dense_forward(
    batch: usize,
    inp: usize,
    out: usize,
    x: &[f32],
    w: &[f32],
    b: &[f32],
) -> Vec<f32> {
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(batch, inp, out, x, (inp, 1), w, (1, inp), 1.0, &mut y, (out, 1));
    y
}

pub(crate) fn dense_backward_input(
    batch: usize,
    inp: usize,
    out: usize,
    w: &[f32],
    dy: &[f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; batch * inp];
    gemm(batch, out, inp, dy, (out, 1), w, (inp, 1), 0.0, &mut dx, (inp, 1));
    dx
}

pub(crate) fn dense_backward_params(
    batch: usize,
    inp: usize,
    out: usize,
    x: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; out * inp];
    gemm(out, batch, inp, dy, (1, out), x, (inp, 1), 0.0, &mut dw, (inp, 1));
    let mut db = vec![0.0f32; out];
    for row in dy.chunks(out) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (dw, db)
}

/// Max pooling without padding. Returns output and flat argmax indices into `x`.
pub(crate) fn maxpool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    if k == 2 && s == 2 {
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let r1 = r0 + w;
                for ox in 0..ow {
                    let c = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                    let mut best = c[0];
                    for &i in &c[1..] {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
        return (y, idx);
    }
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * s * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * s + ky) * w + ox * s + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

/// Per-channel batch mean and biased variance over `B×H×W`.
pub(crate) fn channel_stats(x: &[f32], batch: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..batch {
            s += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0f64;
        for b in 0..batch {
            ss += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / n) as f32;
    }
    (mean, var)
}
