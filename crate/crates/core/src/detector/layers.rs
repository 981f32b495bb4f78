//! Forward and backward kernels: GEMM-backed convolution, nearest upsampling,
//! RoIAlign and fully connected layers. Tensors are planar `C x H x W` slices.

/// `c = a' * b' + beta * c` where `a'` is `m x k`, `b'` is `k x n`, all row-major;
/// `trans_a` / `trans_b` mean the stored matrix is the transpose.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // row-major buffers whose lengths are asserted in debug builds and
    // guaranteed by every caller in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A square-kernel convolution with zero padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvOut {
    pub cols: Vec<f64>,
    pub y: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.k;
        let pad = (k / 2) as isize;
        let n = oh * ow;
        let mut cols = vec![0.0; self.cin * k * k * n];
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.k;
        let pad = (k / 2) as isize;
        let n = oh * ow;
        let mut dx = vec![0.0; self.cin * h * w];
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h: usize, w: usize) -> ConvOut {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let (oh, ow) = self.out_dims(h, w);
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        let cols = self.im2col(x, h, w, oh, ow);
        let mut y = vec![0.0; self.cout * n];
        for (o, row) in y.chunks_exact_mut(n).enumerate() {
            row.fill(p[self.b + o]);
        }
        gemm(
            self.cout,
            kk,
            n,
            &p[self.w..self.w + self.cout * kk],
            false,
            &cols,
            false,
            &mut y,
            1.0,
        );
        if self.relu {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        ConvOut {
            cols,
            y,
            h,
            w,
            oh,
            ow,
        }
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient when asked.
    pub fn backward(
        &self,
        p: &[f64],
        out: &ConvOut,
        dy: &mut [f64],
        g: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let n = out.oh * out.ow;
        let kk = self.cin * self.k * self.k;
        if self.relu {
            for (d, y) in dy.iter_mut().zip(&out.y) {
                if *y <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        for (o, row) in dy.chunks_exact(n).enumerate() {
            g[self.b + o] += row.iter().sum::<f64>();
        }
        gemm(
            self.cout,
            n,
            kk,
            dy,
            false,
            &out.cols,
            true,
            &mut g[self.w..self.w + self.cout * kk],
            1.0,
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.cout,
            n,
            &p[self.w..self.w + self.cout * kk],
            true,
            dy,
            false,
            &mut dcols,
            0.0,
        );
        Some(self.col2im(&dcols, out.h, out.w, out.oh, out.ow))
    }
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` tensor.
pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                y[(ch * oh + oy) * ow + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub(crate) fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ch * h + oy / 2) * w + ox / 2] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// Bilinear taps of one RoIAlign output bin: `(spatial index, weight)`.
pub(crate) type BinTaps = Vec<(usize, f64)>;

/// RoIAlign (pixel-aligned) of `bbox` (image coordinates `x1, y1, x2, y2`)
/// from a `c x h x w` map at `stride`. Output layout is `c x grid x grid`.
pub(crate) fn roi_align(
    feat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    stride: f64,
    bbox: [f64; 4],
    grid: usize,
    sampling: usize,
) -> (Vec<f64>, Vec<BinTaps>) {
    let x1 = bbox[0] / stride - 0.5;
    let y1 = bbox[1] / stride - 0.5;
    let bin_w = (bbox[2] - bbox[0]) / stride / grid as f64;
    let bin_h = (bbox[3] - bbox[1]) / stride / grid as f64;
    let norm = 1.0 / (sampling * sampling) as f64;
    let mut taps: Vec<BinTaps> = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut bin: BinTaps = Vec::with_capacity(4 * sampling * sampling);
            for sy in 0..sampling {
                let y = y1 + (gy as f64 + (sy as f64 + 0.5) / sampling as f64) * bin_h;
                for sx in 0..sampling {
                    let x = x1 + (gx as f64 + (sx as f64 + 0.5) / sampling as f64) * bin_w;
                    bilinear_taps(x, y, h, w, norm, &mut bin);
                }
            }
            taps.push(bin);
        }
    }
    let gg = grid * grid;
    let mut out = vec![0.0; c * gg];
    for ch in 0..c {
        let plane = &feat[ch * h * w..(ch + 1) * h * w];
        for (b, bin) in taps.iter().enumerate() {
            out[ch * gg + b] = bin.iter().map(|&(i, wt)| wt * plane[i]).sum();
        }
    }
    (out, taps)
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize, scale: f64, out: &mut BinTaps) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, scale * hy * hx));
    out.push((y0 * w + x1, scale * hy * lx));
    out.push((y1 * w + x0, scale * ly * hx));
    out.push((y1 * w + x1, scale * ly * lx));
}

/// Scatters pooled-feature gradients back onto the map.
pub(crate) fn roi_align_backward(
    dpooled: &[f64],
    taps: &[BinTaps],
    c: usize,
    hw: usize,
    dfeat: &mut [f64],
) {
    let gg = taps.len();
    for ch in 0..c {
        let plane = &mut dfeat[ch * hw..(ch + 1) * hw];
        for (b, bin) in taps.iter().enumerate() {
            let d = dpooled[ch * gg + b];
            if d == 0.0 {
                continue;
            }
            for &(i, wt) in bin {
                plane[i] += wt * d;
            }
        }
    }
}

/// Fully connected layer over a batch of rows: `y[r] = W x[r] + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
    pub relu: bool,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.dout];
        for row in y.chunks_exact_mut(self.dout) {
            row.copy_from_slice(&p[self.b..self.b + self.dout]);
        }
        gemm(
            rows,
            self.din,
            self.dout,
            x,
            false,
            &p[self.w..self.w + self.dout * self.din],
            true,
            &mut y,
            1.0,
        );
        if self.relu {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        y: &[f64],
        dy: &mut [f64],
        rows: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        if self.relu {
            for (d, v) in dy.iter_mut().zip(y) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        for row in dy.chunks_exact(self.dout) {
            for (gb, d) in g[self.b..self.b + self.dout].iter_mut().zip(row) {
                *gb += d;
            }
        }
        gemm(
            self.dout,
            rows,
            self.din,
            dy,
            true,
            x,
            false,
            &mut g[self.w..self.w + self.dout * self.din],
            1.0,
        );
        let mut dx = vec![0.0; rows * self.din];
        gemm(
            rows,
            self.dout,
            self.din,
            dy,
            false,
            &p[self.w..self.w + self.dout * self.din],
            false,
            &mut dx,
            0.0,
        );
        dx
    }
}
