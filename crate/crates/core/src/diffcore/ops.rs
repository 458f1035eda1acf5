//! Slice kernels behind the tape ops. Layouts are row-major; feature maps are
//! channel-first (C×H×W).

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cj, bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `dC · Bᵀ` for `dC: m×n`, `B: k×n`.
pub(crate) fn matmul_a_bt(dc: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            da[i * k + p] = dc[i * n..(i + 1) * n]
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    da
}

/// `Aᵀ · dC` for `A: m×k`, `dC: m×n`.
pub(crate) fn matmul_at_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for (dbj, dcj) in db[p * n..(p + 1) * n]
                .iter_mut()
                .zip(&dc[i * n..(i + 1) * n])
            {
                *dbj += aip * dcj;
            }
        }
    }
    db
}

/// Valid destination range for a tap offset `d ∈ {-1, 0, 1}` over extent `n`:
/// destination indices `i` with `0 <= i + d < n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

pub(crate) fn conv3x3_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            let k = &kernel[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for (tap, &wt) in k.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dy = tap as isize / 3 - 1;
                let dx = tap as isize % 3 - 1;
                let (y0, y1) = tap_range(dy, h);
                let (x0, x1) = tap_range(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let drow = &mut dst[y * w + x0..y * w + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3x3_grad_input(
    dout: &[f64],
    kernel: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut din = vec![0.0; cin * plane];
    for ci in 0..cin {
        let dst = &mut din[ci * plane..(ci + 1) * plane];
        for co in 0..cout {
            let g = &dout[co * plane..(co + 1) * plane];
            let k = &kernel[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for (tap, &wt) in k.iter().enumerate() {
                let dy = tap as isize / 3 - 1;
                let dx = tap as isize % 3 - 1;
                let (y0, y1) = tap_range(dy, h);
                let (x0, x1) = tap_range(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let drow = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    let grow = &g[y * w + x0..y * w + x1];
                    for (d, s) in drow.iter_mut().zip(grow) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn conv3x3_grad_kernel(
    dout: &[f64],
    input: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut dk = vec![0.0; cout * cin * 9];
    for co in 0..cout {
        let g = &dout[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for tap in 0..9 {
                let dy = tap as isize / 3 - 1;
                let dx = tap as isize % 3 - 1;
                let (y0, y1) = tap_range(dy, h);
                let (x0, x1) = tap_range(dx, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let grow = &g[y * w + x0..y * w + x1];
                    let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                }
                dk[(co * cin + ci) * 9 + tap] = acc;
            }
        }
    }
    dk
}

pub(crate) fn down2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                let s = p[r0 + 2 * xx] + p[r0 + 2 * xx + 1] + p[r1 + 2 * xx] + p[r1 + 2 * xx + 1];
                out.push(0.25 * s);
            }
        }
    }
    out
}

pub(crate) fn down2x_grad(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[ch * h * w + y * w + x] = 0.25 * g[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    dx
}

pub(crate) fn up2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(x[ch * h * w + (y / 2) * w + xx / 2]);
            }
        }
    }
    out
}

pub(crate) fn up2x_grad(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ch * 4 * h * w;
                let (r0, r1) = (2 * y * ow, (2 * y + 1) * ow);
                dx[ch * h * w + y * w + x] = g[base + r0 + 2 * x]
                    + g[base + r0 + 2 * x + 1]
                    + g[base + r1 + 2 * x]
                    + g[base + r1 + 2 * x + 1];
            }
        }
    }
    dx
}

/// Max-stabilized log-softmax over `l` channels for each of `npix` pixels.
pub(crate) fn log_softmax_channels(x: &[f64], l: usize, npix: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * npix];
    for p in 0..npix {
        let mut m = f64::NEG_INFINITY;
        for c in 0..l {
            m = m.max(x[c * npix + p]);
        }
        let mut s = 0.0;
        for c in 0..l {
            s += (x[c * npix + p] - m).exp();
        }
        let lse = m + s.ln();
        for c in 0..l {
            out[c * npix + p] = x[c * npix + p] - lse;
        }
    }
    out
}

pub(crate) fn log_softmax_grad(g: &[f64], y: &[f64], l: usize, npix: usize) -> Vec<f64> {
    let mut dx = vec![0.0; l * npix];
    for p in 0..npix {
        let gs: f64 = (0..l).map(|c| g[c * npix + p]).sum();
        for c in 0..l {
            dx[c * npix + p] = g[c * npix + p] - y[c * npix + p].exp() * gs;
        }
    }
    dx
}
