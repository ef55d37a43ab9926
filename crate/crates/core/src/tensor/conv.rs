//! GEMM kernels for "same"-padded 3-D cross-correlation.
//!
//! Every product (output, input gradient, weight gradient) can be formed by
//! gathering shifted copies of the tensor on one side of the convolution
//! (im2col) or by a GEMM followed by a shifted scatter-add into the other
//! side (col2im). The side with fewer channels is expanded, which keeps the
//! scratch traffic proportional to `min(cin, cout)`. Scratch matrices cover
//! short runs of pixel positions so they stay cache-resident.

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: [usize; 3],
}

const CHUNK_ELEMS: usize = 1 << 18;

impl ConvGeom {
    fn taps(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    fn vol(&self) -> usize {
        self.h * self.w * self.f
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Expand the input side rather than the output side.
    fn gather_input(&self) -> bool {
        self.cin <= self.cout
    }

    fn chunk(&self, channels: usize) -> usize {
        (CHUNK_ELEMS / (channels * self.taps() * self.f).max(1)).clamp(1, self.positions())
    }

    /// Tap displacements `(dh, dw, df)` in weight order.
    fn offsets(&self) -> Vec<[isize; 3]> {
        let [kh, kw, kf] = self.k;
        let mut out = Vec::with_capacity(self.taps());
        for i in 0..kh {
            for j in 0..kw {
                for t in 0..kf {
                    out.push([
                        i as isize - (kh / 2) as isize,
                        j as isize - (kw / 2) as isize,
                        t as isize - (kf / 2) as isize,
                    ]);
                }
            }
        }
        out
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the assertions above bound every element the kernel touches.
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

/// Frames `t` with `0 ≤ t + d < f`.
fn frame_range(f: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (f as isize - d).clamp(0, f as isize) as usize;
    (lo.min(hi), hi)
}

/// `col[(c, tap), p·F + t] = src[c, p + s·d, t + s·d_t]` for positions in
/// `p0..p1`, zero outside the volume.
#[allow(clippy::too_many_arguments)]
fn gather(
    src: &[f32],
    channels: usize,
    g: &ConvGeom,
    sign: isize,
    p0: usize,
    p1: usize,
    col: &mut [f32],
) {
    let (hh, ww, ff) = (g.h as isize, g.w as isize, g.f);
    let vol = g.vol();
    let n = (p1 - p0) * ff;
    let offs = g.offsets();
    for c in 0..channels {
        let sc = &src[c * vol..(c + 1) * vol];
        for (tap, d) in offs.iter().enumerate() {
            let [dh, dw, dt] = d.map(|v| v * sign);
            let (lo, hi) = frame_range(ff, dt);
            let row = &mut col[(c * offs.len() + tap) * n..(c * offs.len() + tap + 1) * n];
            for p in p0..p1 {
                let dst = &mut row[(p - p0) * ff..(p - p0 + 1) * ff];
                let sh = (p / g.w) as isize + dh;
                let sw = (p % g.w) as isize + dw;
                if sh < 0 || sh >= hh || sw < 0 || sw >= ww || lo >= hi {
                    dst.fill(0.0);
                    continue;
                }
                let s0 = ((sh as usize * g.w + sw as usize) * ff + lo) as isize + dt;
                let s0 = s0 as usize;
                dst[..lo].fill(0.0);
                dst[hi..].fill(0.0);
                dst[lo..hi].copy_from_slice(&sc[s0..s0 + (hi - lo)]);
            }
        }
    }
}

/// `dst[c, p + s·d, t + s·d_t] += col[(c, tap), p·F + t]`, the adjoint of
/// [`gather`].
fn scatter(
    col: &[f32],
    channels: usize,
    g: &ConvGeom,
    sign: isize,
    p0: usize,
    p1: usize,
    dst: &mut [f32],
) {
    let (hh, ww, ff) = (g.h as isize, g.w as isize, g.f);
    let vol = g.vol();
    let n = (p1 - p0) * ff;
    let offs = g.offsets();
    for c in 0..channels {
        let dc = &mut dst[c * vol..(c + 1) * vol];
        for (tap, d) in offs.iter().enumerate() {
            let [dh, dw, dt] = d.map(|v| v * sign);
            let (lo, hi) = frame_range(ff, dt);
            if lo >= hi {
                continue;
            }
            let row = &col[(c * offs.len() + tap) * n..(c * offs.len() + tap + 1) * n];
            for p in p0..p1 {
                let sh = (p / g.w) as isize + dh;
                let sw = (p % g.w) as isize + dw;
                if sh < 0 || sh >= hh || sw < 0 || sw >= ww {
                    continue;
                }
                let s0 = (((sh as usize * g.w + sw as usize) * ff + lo) as isize + dt) as usize;
                let src = &row[(p - p0) * ff + lo..(p - p0) * ff + hi];
                for (o, v) in dc[s0..s0 + (hi - lo)].iter_mut().zip(src) {
                    *o += *v;
                }
            }
        }
    }
}

/// Weights `[cout, cin, taps]` rearranged as `[(cout, tap), cin]`.
fn weight_by_out_tap(weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let t = g.taps();
    let mut out = vec![0.0f32; weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for tap in 0..t {
                out[(co * t + tap) * g.cin + ci] = weight[(co * g.cin + ci) * t + tap];
            }
        }
    }
    out
}

/// Weights `[cout, cin, taps]` rearranged as `[cin, (cout, tap)]`.
fn weight_by_in(weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let t = g.taps();
    let mut out = vec![0.0f32; weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for tap in 0..t {
                out[ci * g.cout * t + co * t + tap] = weight[(co * g.cin + ci) * t + tap];
            }
        }
    }
    out
}

pub(super) fn forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let vol = g.vol();
    let t = g.taps();
    let mut out = vec![0.0f32; g.batch * g.cout * vol];
    let mut col = Vec::new();
    let wt = (t > 1 && !g.gather_input()).then(|| weight_by_out_tap(weight, g));
    for b in 0..g.batch {
        let xb = &x[b * g.cin * vol..(b + 1) * g.cin * vol];
        let ob = &mut out[b * g.cout * vol..(b + 1) * g.cout * vol];
        if t == 1 {
            gemm(
                g.cout,
                g.cin,
                vol,
                weight,
                (g.cin, 1),
                xb,
                (vol, 1),
                0.0,
                ob,
                (vol, 1),
            );
        } else if let Some(wt) = &wt {
            // Z[(co, tap), q] = Σ_ci W · x[ci, q], then y[co, q − d] += Z.
            let step = g.chunk(g.cout);
            let mut p0 = 0;
            while p0 < g.positions() {
                let p1 = (p0 + step).min(g.positions());
                let n = (p1 - p0) * g.f;
                col.resize(g.cout * t * n, 0.0);
                gemm(
                    g.cout * t,
                    g.cin,
                    n,
                    wt,
                    (g.cin, 1),
                    &xb[p0 * g.f..],
                    (vol, 1),
                    0.0,
                    &mut col,
                    (n, 1),
                );
                scatter(&col, g.cout, g, -1, p0, p1, ob);
                p0 = p1;
            }
        } else {
            let kdim = g.cin * t;
            let step = g.chunk(g.cin);
            let mut p0 = 0;
            while p0 < g.positions() {
                let p1 = (p0 + step).min(g.positions());
                let n = (p1 - p0) * g.f;
                col.resize(kdim * n, 0.0);
                gather(xb, g.cin, g, 1, p0, p1, &mut col);
                gemm(
                    g.cout,
                    kdim,
                    n,
                    weight,
                    (kdim, 1),
                    &col,
                    (n, 1),
                    0.0,
                    &mut ob[p0 * g.f..],
                    (vol, 1),
                );
                p0 = p1;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * vol..(co + 1) * vol] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(super) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(super) fn backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let vol = g.vol();
    let t = g.taps();
    let kdim = g.cin * t;
    let mut dx = need_dx.then(|| vec![0.0f32; g.batch * g.cin * vol]);
    let mut dw = need_dw.then(|| vec![0.0f32; g.cout * kdim]);
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for b in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let s: f64 = dout[(b * g.cout + co) * vol..(b * g.cout + co + 1) * vol]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                *d += s as f32;
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let gather_in = t == 1 || g.gather_input();
    let w_in = (!gather_in && need_dx).then(|| weight_by_in(weight, g));
    let mut dw_in = (!gather_in && need_dw).then(|| vec![0.0f32; g.cin * g.cout * t]);
    for b in 0..g.batch {
        let xb = &x[b * g.cin * vol..(b + 1) * g.cin * vol];
        let gb = &dout[b * g.cout * vol..(b + 1) * g.cout * vol];
        if t == 1 {
            if let Some(dw) = dw.as_mut() {
                // dW[cout×cin] += dOut[cout×vol] · xᵀ[vol×cin]
                gemm(
                    g.cout,
                    vol,
                    g.cin,
                    gb,
                    (vol, 1),
                    xb,
                    (1, vol),
                    1.0,
                    dw,
                    (kdim, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * g.cin * vol..(b + 1) * g.cin * vol];
                gemm(
                    g.cin,
                    g.cout,
                    vol,
                    weight,
                    (1, kdim),
                    gb,
                    (vol, 1),
                    0.0,
                    dxb,
                    (vol, 1),
                );
            }
        } else if gather_in {
            let step = g.chunk(g.cin);
            let mut p0 = 0;
            while p0 < g.positions() {
                let p1 = (p0 + step).min(g.positions());
                let n = (p1 - p0) * g.f;
                let gchunk = &gb[p0 * g.f..];
                if let Some(dw) = dw.as_mut() {
                    col.resize(kdim * n, 0.0);
                    gather(xb, g.cin, g, 1, p0, p1, &mut col);
                    gemm(
                        g.cout,
                        n,
                        kdim,
                        gchunk,
                        (vol, 1),
                        &col,
                        (1, n),
                        1.0,
                        dw,
                        (kdim, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(kdim * n, 0.0);
                    gemm(
                        kdim,
                        g.cout,
                        n,
                        weight,
                        (1, kdim),
                        gchunk,
                        (vol, 1),
                        0.0,
                        &mut dcol,
                        (n, 1),
                    );
                    let dxb = &mut dx[b * g.cin * vol..(b + 1) * g.cin * vol];
                    scatter(&dcol, g.cin, g, 1, p0, p1, dxb);
                }
                p0 = p1;
            }
        } else {
            // One gather of shifted output gradients serves both
            // dx[ci, q] = Σ W[co, ci, tap] · dy[co, q − d] and
            // dW[co, ci, tap] = Σ_q x[ci, q] · dy[co, q − d].
            let odim = g.cout * t;
            let step = g.chunk(g.cout);
            let mut p0 = 0;
            while p0 < g.positions() {
                let p1 = (p0 + step).min(g.positions());
                let n = (p1 - p0) * g.f;
                col.resize(odim * n, 0.0);
                gather(gb, g.cout, g, -1, p0, p1, &mut col);
                if let Some(acc) = dw_in.as_mut() {
                    gemm(
                        g.cin,
                        n,
                        odim,
                        &xb[p0 * g.f..],
                        (vol, 1),
                        &col,
                        (1, n),
                        1.0,
                        acc,
                        (odim, 1),
                    );
                }
                if let (Some(dx), Some(w_in)) = (dx.as_mut(), w_in.as_ref()) {
                    let dxb = &mut dx[b * g.cin * vol..(b + 1) * g.cin * vol];
                    gemm(
                        g.cin,
                        odim,
                        n,
                        w_in,
                        (odim, 1),
                        &col,
                        (n, 1),
                        0.0,
                        &mut dxb[p0 * g.f..],
                        (vol, 1),
                    );
                }
                p0 = p1;
            }
        }
    }
    if let (Some(dw), Some(acc)) = (dw.as_mut(), dw_in) {
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for tap in 0..t {
                    dw[(co * g.cin + ci) * t + tap] = acc[ci * g.cout * t + co * t + tap];
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}
