//! Neural building blocks: direct 3D convolution, pooling, transposed
//! convolution, normalization, softmax and channel concat.
//!
//! All kernels are single monolithic autodiff ops with hand-derived backward
//! passes; every one of them is covered by the finite-difference suite.

use crate::error::{Error, Result};
use crate::tensor::{make_result, Tensor};

/// Convolution geometry. Output extent per axis is
/// `floor((in + 2*pad - kernel) / stride) + 1` and must stay >= 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn unit_stride(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            pad: [pad; 3],
        }
    }

    pub fn out_extent(&self, axis: usize, in_extent: usize) -> Result<usize> {
        let k = self.kernel[axis];
        let s = self.stride[axis];
        let p = self.pad[axis];
        let padded = in_extent + 2 * p;
        if padded < k {
            return Err(Error::Shape(format!(
                "conv kernel {k} exceeds padded extent {padded} on axis {axis}"
            )));
        }
        let o = (padded - k) / s + 1;
        if o == 0 {
            return Err(Error::Shape("degenerate conv output extent".into()));
        }
        Ok(o)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("{what} must be rank 5 (N,C,D,H,W), got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// Row-blocked unit-stride path: each output row is accumulated in a small
/// local buffer and written once, so activations stream through L1 instead
/// of the whole output plane being revisited per (channel, tap) pair.
fn conv3d_forward_unit(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    os: [usize; 3],
) -> Vec<f32> {
    let [n_b, cin, d, h, wd] = xs;
    let cout = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = os;
    let o_sp = od * oh * ow;
    let mut y = vec![0.0f32; n_b * cout * o_sp];
    let mut buf = vec![0.0f32; ow];

    for n in 0..n_b {
        for o_d in 0..od {
            for o_h in 0..oh {
                for co in 0..cout {
                    buf.fill(b.map(|b| b[co]).unwrap_or(0.0));
                    for ci in 0..cin {
                        let x_base = (n * cin + ci) * d * h * wd;
                        let w_base = (co * cin + ci) * kd * kh * kw;
                        for zk in 0..kd {
                            let id = o_d as isize + zk as isize - pd as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for yk in 0..kh {
                                let ih = o_h as isize + yk as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                if kw == 3 && pw == 1 {
                                    // fused 3-tap row pass: one sweep instead of
                                    // three separately bounded axpys
                                    let r = &x[x_row..x_row + wd];
                                    let w0 = w[w_base + (zk * kh + yk) * 3];
                                    let w1 = w[w_base + (zk * kh + yk) * 3 + 1];
                                    let w2 = w[w_base + (zk * kh + yk) * 3 + 2];
                                    buf[0] += w1 * r[0];
                                    if ow > 1 {
                                        buf[0] += w2 * r[1];
                                        buf[ow - 1] += w0 * r[ow - 2] + w1 * r[ow - 1];
                                        for i in 1..ow - 1 {
                                            buf[i] += w0 * r[i - 1] + w1 * r[i] + w2 * r[i + 1];
                                        }
                                    }
                                    continue;
                                }
                                for xk in 0..kw {
                                    let wv = w[w_base + (zk * kh + yk) * kw + xk];
                                    let off = xk as isize - pw as isize;
                                    let lo = (-off).max(0) as usize;
                                    let hi =
                                        (ow as isize).min(wd as isize - off).max(lo as isize) as usize;
                                    if hi > lo {
                                        let xi = (lo as isize + off) as usize;
                                        let xsl = &x[x_row + xi..x_row + xi + (hi - lo)];
                                        for (a, &v) in buf[lo..hi].iter_mut().zip(xsl) {
                                            *a += wv * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let y_row = ((n * cout + co) * od + o_d) * oh * ow + o_h * ow;
                    y[y_row..y_row + ow].copy_from_slice(&buf);
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    os: [usize; 3],
) -> Vec<f32> {
    if spec.stride == [1, 1, 1] {
        return conv3d_forward_unit(x, xs, w, b, spec, os);
    }
    let [n_b, cin, d, h, wd] = xs;
    let cout = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = os;
    let o_sp = od * oh * ow;
    let mut y = vec![0.0f32; n_b * cout * o_sp];

    for n in 0..n_b {
        for co in 0..cout {
            let y_base = (n * cout + co) * o_sp;
            if let Some(b) = b {
                y[y_base..y_base + o_sp].fill(b[co]);
            }
            for ci in 0..cin {
                let x_base = (n * cin + ci) * d * h * wd;
                for zk in 0..kd {
                    for yk in 0..kh {
                        for xk in 0..kw {
                            let wv = w[(((co * cin + ci) * kd + zk) * kh + yk) * kw + xk];
                            let off_d = zk as isize - pd as isize;
                            let off_h = yk as isize - ph as isize;
                            let off_w = xk as isize - pw as isize;
                            for o_d in 0..od {
                                let id = o_d as isize * sd as isize + off_d;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for o_h in 0..oh {
                                    let ih = o_h as isize * sh as isize + off_h;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let y_row = y_base + (o_d * oh + o_h) * ow;
                                    let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                    if sw == 1 {
                                        let lo = (-off_w).max(0) as usize;
                                        let hi = (ow as isize).min(wd as isize - off_w).max(lo as isize) as usize;
                                        if hi > lo {
                                            let xi = (lo as isize + off_w) as usize;
                                            let (ys, xsl) = (
                                                &mut y[y_row + lo..y_row + hi],
                                                &x[x_row + xi..x_row + xi + (hi - lo)],
                                            );
                                            for (a, &v) in ys.iter_mut().zip(xsl) {
                                                *a += wv * v;
                                            }
                                        }
                                    } else {
                                        for o_w in 0..ow {
                                            let iw = o_w as isize * sw as isize + off_w;
                                            if iw >= 0 && iw < wd as isize {
                                                y[y_row + o_w] += wv * x[x_row + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Direct 3D convolution with zero padding. `x`: (N,Cin,D,H,W),
/// `w`: (Cout,Cin,kd,kh,kw), `b`: (Cout).
pub fn conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = dims5(x, "conv3d input")?;
    let ws = dims5(w, "conv3d weight")?;
    if ws != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv3d weight shape {ws:?} does not match spec {:?}",
            spec.weight_shape()
        )));
    }
    if xs[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv3d input has {} channels, spec expects {}",
            xs[1], spec.in_channels
        )));
    }
    if let Some(b) = b {
        if b.shape() != vec![spec.out_channels] {
            return Err(Error::Shape("conv3d bias must be (Cout,)".into()));
        }
    }
    let os = [
        spec.out_extent(0, xs[2])?,
        spec.out_extent(1, xs[3])?,
        spec.out_extent(2, xs[4])?,
    ];
    let y = conv3d_forward(&x.data(), xs, &w.data(), b.map(|b| b.to_vec()).as_deref(), spec, os);
    let out_shape = vec![xs[0], spec.out_channels, os[0], os[1], os[2]];

    let spec = *spec;
    let (xc, wc) = (x.clone(), w.clone());
    let bc = b.cloned();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(make_result(out_shape, y, parents, move |gy| {
        let (gx, gw, gb) = conv3d_backward(
            gy,
            &xc.data(),
            xs,
            &wc.data(),
            &spec,
            os,
            xc.requires_grad(),
            wc.requires_grad(),
            has_bias && bc.as_ref().unwrap().requires_grad(),
        );
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(gb);
        }
        out
    }))
}

/// Unit-stride input gradient, blocked so each input row is accumulated in a
/// local buffer and written once.
fn conv3d_backward_gx_unit(
    gy: &[f32],
    xs: [usize; 5],
    w: &[f32],
    spec: &ConvSpec,
    os: [usize; 3],
) -> Vec<f32> {
    let [n_b, cin, d, h, wd] = xs;
    let cout = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = os;
    let mut gx = vec![0.0f32; n_b * cin * d * h * wd];
    let mut buf = vec![0.0f32; wd];

    for n in 0..n_b {
        for id in 0..d {
            for ih in 0..h {
                for ci in 0..cin {
                    buf.fill(0.0);
                    for co in 0..cout {
                        let gy_base = (n * cout + co) * od * oh * ow;
                        let w_base = (co * cin + ci) * kd * kh * kw;
                        for zk in 0..kd {
                            let o_d = id as isize - (zk as isize - pd as isize);
                            if o_d < 0 || o_d >= od as isize {
                                continue;
                            }
                            for yk in 0..kh {
                                let o_h = ih as isize - (yk as isize - ph as isize);
                                if o_h < 0 || o_h >= oh as isize {
                                    continue;
                                }
                                let gy_row = gy_base + (o_d as usize * oh + o_h as usize) * ow;
                                if kw == 3 && pw == 1 {
                                    // fused 3-tap row pass (flipped kernel)
                                    let g = &gy[gy_row..gy_row + ow];
                                    let w0 = w[w_base + (zk * kh + yk) * 3];
                                    let w1 = w[w_base + (zk * kh + yk) * 3 + 1];
                                    let w2 = w[w_base + (zk * kh + yk) * 3 + 2];
                                    buf[0] += w1 * g[0];
                                    if wd > 1 {
                                        buf[0] += w0 * g[1];
                                        buf[wd - 1] += w2 * g[wd - 2] + w1 * g[wd - 1];
                                        for i in 1..wd - 1 {
                                            buf[i] += w0 * g[i + 1] + w1 * g[i] + w2 * g[i - 1];
                                        }
                                    }
                                    continue;
                                }
                                for xk in 0..kw {
                                    let wv = w[w_base + (zk * kh + yk) * kw + xk];
                                    let off = xk as isize - pw as isize;
                                    let lo = off.max(0) as usize;
                                    let hi =
                                        (wd as isize).min(ow as isize + off).max(lo as isize) as usize;
                                    if hi > lo {
                                        let gi = (lo as isize - off) as usize;
                                        let gys = &gy[gy_row + gi..gy_row + gi + (hi - lo)];
                                        for (a, &g) in buf[lo..hi].iter_mut().zip(gys) {
                                            *a += wv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let x_row = ((n * cin + ci) * d + id) * h * wd + ih * wd;
                    gx[x_row..x_row + wd].copy_from_slice(&buf);
                }
            }
        }
    }
    gx
}

/// Unit-stride weight gradient via per-row dot products, accumulated in f64
/// for a deterministic, well-conditioned reduction.
fn conv3d_backward_gw_unit(
    gy: &[f32],
    x: &[f32],
    xs: [usize; 5],
    spec: &ConvSpec,
    os: [usize; 3],
) -> Vec<f32> {
    let [n_b, cin, d, h, wd] = xs;
    let cout = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = os;
    let mut acc = vec![0.0f64; cout * cin * kd * kh * kw];

    for n in 0..n_b {
        for o_d in 0..od {
            for o_h in 0..oh {
                for co in 0..cout {
                    let gy_row = ((n * cout + co) * od + o_d) * oh * ow + o_h * ow;
                    for ci in 0..cin {
                        let x_base = (n * cin + ci) * d * h * wd;
                        let w_base = (co * cin + ci) * kd * kh * kw;
                        for zk in 0..kd {
                            let id = o_d as isize + zk as isize - pd as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for yk in 0..kh {
                                let ih = o_h as isize + yk as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                for xk in 0..kw {
                                    let off = xk as isize - pw as isize;
                                    let lo = (-off).max(0) as usize;
                                    let hi =
                                        (ow as isize).min(wd as isize - off).max(lo as isize) as usize;
                                    if hi > lo {
                                        let xi = (lo as isize + off) as usize;
                                        let xsl = &x[x_row + xi..x_row + xi + (hi - lo)];
                                        let gys = &gy[gy_row + lo..gy_row + hi];
                                        // Eight partial accumulators so the dot
                                        // product vectorizes under strict FP.
                                        let mut lanes = [0.0f32; 8];
                                        let mut cx = xsl.chunks_exact(8);
                                        let mut cg = gys.chunks_exact(8);
                                        for (a, b) in (&mut cx).zip(&mut cg) {
                                            for l in 0..8 {
                                                lanes[l] += a[l] * b[l];
                                            }
                                        }
                                        let mut dot = lanes.iter().sum::<f32>();
                                        for (&xv, &g) in
                                            cx.remainder().iter().zip(cg.remainder())
                                        {
                                            dot += xv * g;
                                        }
                                        acc[w_base + (zk * kh + yk) * kw + xk] += dot as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward(
    gy: &[f32],
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    spec: &ConvSpec,
    os: [usize; 3],
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let [n_b, cin, d, h, wd] = xs;
    let cout = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let [od, oh, ow] = os;
    let o_sp = od * oh * ow;

    let gb = if need_gb {
        let mut gb = vec![0.0f32; cout];
        for n in 0..n_b {
            for co in 0..cout {
                let base = (n * cout + co) * o_sp;
                let mut acc = 0.0f64;
                for &g in &gy[base..base + o_sp] {
                    acc += g as f64;
                }
                gb[co] += acc as f32;
            }
        }
        Some(gb)
    } else {
        None
    };

    if [sd, sh, sw] == [1, 1, 1] {
        let gx = need_gx.then(|| conv3d_backward_gx_unit(gy, xs, w, spec, os));
        let gw = need_gw.then(|| conv3d_backward_gw_unit(gy, x, xs, spec, os));
        return (gx, gw, gb);
    }

    let mut gx = if need_gx { Some(vec![0.0f32; x.len()]) } else { None };
    let mut gw = if need_gw { Some(vec![0.0f32; w.len()]) } else { None };

    for n in 0..n_b {
        for co in 0..cout {
            let y_base = (n * cout + co) * o_sp;
            for ci in 0..cin {
                let x_base = (n * cin + ci) * d * h * wd;
                for zk in 0..kd {
                    for yk in 0..kh {
                        for xk in 0..kw {
                            let w_idx = (((co * cin + ci) * kd + zk) * kh + yk) * kw + xk;
                            let wv = w[w_idx];
                            let off_d = zk as isize - pd as isize;
                            let off_h = yk as isize - ph as isize;
                            let off_w = xk as isize - pw as isize;
                            let mut w_acc = 0.0f64;
                            for o_d in 0..od {
                                let id = o_d as isize * sd as isize + off_d;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for o_h in 0..oh {
                                    let ih = o_h as isize * sh as isize + off_h;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let y_row = y_base + (o_d * oh + o_h) * ow;
                                    let x_row = x_base + (id as usize * h + ih as usize) * wd;
                                    if sw == 1 {
                                        let lo = (-off_w).max(0) as usize;
                                        let hi = (ow as isize).min(wd as isize - off_w).max(lo as isize) as usize;
                                        if hi <= lo {
                                            continue;
                                        }
                                        let xi = (lo as isize + off_w) as usize;
                                        if let Some(gx) = gx.as_mut() {
                                            let rows = &mut gx[x_row + xi..x_row + xi + (hi - lo)];
                                            let gys = &gy[y_row + lo..y_row + hi];
                                            for (a, &g) in rows.iter_mut().zip(gys) {
                                                *a += wv * g;
                                            }
                                        }
                                        if need_gw {
                                            let xsl = &x[x_row + xi..x_row + xi + (hi - lo)];
                                            let gys = &gy[y_row + lo..y_row + hi];
                                            let mut acc = 0.0f32;
                                            for (&xv, &g) in xsl.iter().zip(gys) {
                                                acc += xv * g;
                                            }
                                            w_acc += acc as f64;
                                        }
                                    } else {
                                        for o_w in 0..ow {
                                            let iw = o_w as isize * sw as isize + off_w;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            let g = gy[y_row + o_w];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[x_row + iw as usize] += wv * g;
                                            }
                                            if need_gw {
                                                w_acc += (x[x_row + iw as usize] * g) as f64;
                                            }
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[w_idx] += w_acc as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// max_pool3d
// ---------------------------------------------------------------------------

/// 2x2x2 max pooling with stride 2. Gradient routes to the first maximal
/// element of each window (lowest linear index). All spatial extents must be
/// even; callers pad first.
pub fn max_pool3d(x: &Tensor) -> Result<Tensor> {
    let [n_b, c, d, h, w] = dims5(x, "max_pool3d input")?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool3d requires even spatial extents, got ({d},{h},{w})"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let o_sp = od * oh * ow;
    let xd = x.data();
    let mut y = vec![0.0f32; n_b * c * o_sp];
    let mut arg = vec![0u32; n_b * c * o_sp];
    for nc in 0..n_b * c {
        let x_base = nc * d * h * w;
        let y_base = nc * o_sp;
        for o_d in 0..od {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = x_base
                                    + ((2 * o_d + dz) * h + 2 * o_h + dy) * w
                                    + 2 * o_w
                                    + dx;
                                let v = xd[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    y[y_base + (o_d * oh + o_h) * ow + o_w] = best;
                    arg[y_base + (o_d * oh + o_h) * ow + o_w] = best_idx;
                }
            }
        }
    }
    drop(xd);
    let n_in = x.numel();
    Ok(make_result(
        vec![n_b, c, od, oh, ow],
        y,
        vec![x.clone()],
        move |gy| {
            let mut gx = vec![0.0f32; n_in];
            for (o, &a) in arg.iter().enumerate() {
                gx[a as usize] += gy[o];
            }
            vec![Some(gx)]
        },
    ))
}

// ---------------------------------------------------------------------------
// conv_transpose3d
// ---------------------------------------------------------------------------

/// Stride-2 transposed convolution with a fixed 2x2x2 kernel; doubles every
/// spatial extent. `w`: (Cin,Cout,2,2,2). This is the exact linear adjoint of
/// a stride-2, pad-0, 2x2x2 conv3d.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n_b, cin, d, h, wd] = dims5(x, "conv_transpose3d input")?;
    let ws = dims5(w, "conv_transpose3d weight")?;
    if ws[0] != cin || ws[2] != 2 || ws[3] != 2 || ws[4] != 2 {
        return Err(Error::Shape(format!(
            "conv_transpose3d weight must be (Cin={cin},Cout,2,2,2), got {ws:?}"
        )));
    }
    let cout = ws[1];
    if let Some(b) = b {
        if b.shape() != vec![cout] {
            return Err(Error::Shape("conv_transpose3d bias must be (Cout,)".into()));
        }
    }
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let o_sp = od * oh * ow;
    let xd = x.data();
    let wdat = w.data();
    let mut y = vec![0.0f32; n_b * cout * o_sp];
    for n in 0..n_b {
        for co in 0..cout {
            let y_base = (n * cout + co) * o_sp;
            if let Some(b) = b {
                y[y_base..y_base + o_sp].fill(b.value_at(co));
            }
            for ci in 0..cin {
                let x_base = (n * cin + ci) * d * h * wd;
                for zk in 0..2usize {
                    for yk in 0..2usize {
                        for xk in 0..2usize {
                            let wv = wdat[(((ci * cout + co) * 2 + zk) * 2 + yk) * 2 + xk];
                            for id in 0..d {
                                for ih in 0..h {
                                    let x_row = x_base + (id * h + ih) * wd;
                                    let y_row = y_base + ((2 * id + zk) * oh + 2 * ih + yk) * ow + xk;
                                    for iw in 0..wd {
                                        y[y_row + 2 * iw] += wv * xd[x_row + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wdat);

    let (xc, wc) = (x.clone(), w.clone());
    let bc = b.cloned();
    let has_bias = b.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(make_result(
        vec![n_b, cout, od, oh, ow],
        y,
        parents,
        move |gy| {
            let xd = xc.data();
            let wdat = wc.data();
            let o_sp = od * oh * ow;
            let gb = if has_bias && bc.as_ref().unwrap().requires_grad() {
                let mut gb = vec![0.0f32; cout];
                for n in 0..n_b {
                    for co in 0..cout {
                        let base = (n * cout + co) * o_sp;
                        let mut acc = 0.0f64;
                        for &g in &gy[base..base + o_sp] {
                            acc += g as f64;
                        }
                        gb[co] += acc as f32;
                    }
                }
                Some(gb)
            } else {
                None
            };
            let need_gx = xc.requires_grad();
            let need_gw = wc.requires_grad();
            let mut gx = if need_gx { Some(vec![0.0f32; xd.len()]) } else { None };
            let mut gw = if need_gw { Some(vec![0.0f32; wdat.len()]) } else { None };
            for n in 0..n_b {
                for co in 0..cout {
                    let y_base = (n * cout + co) * o_sp;
                    for ci in 0..cin {
                        let x_base = (n * cin + ci) * d * h * wd;
                        for zk in 0..2usize {
                            for yk in 0..2usize {
                                for xk in 0..2usize {
                                    let w_idx = (((ci * cout + co) * 2 + zk) * 2 + yk) * 2 + xk;
                                    let wv = wdat[w_idx];
                                    let mut w_acc = 0.0f64;
                                    for id in 0..d {
                                        for ih in 0..h {
                                            let x_row = x_base + (id * h + ih) * wd;
                                            let y_row =
                                                y_base + ((2 * id + zk) * oh + 2 * ih + yk) * ow + xk;
                                            for iw in 0..wd {
                                                let g = gy[y_row + 2 * iw];
                                                if let Some(gx) = gx.as_mut() {
                                                    gx[x_row + iw] += wv * g;
                                                }
                                                if need_gw {
                                                    w_acc += (xd[x_row + iw] * g) as f64;
                                                }
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[w_idx] += w_acc as f32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut out = vec![gx, gw];
            if has_bias {
                out.push(gb);
            }
            out
        },
    ))
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Exponential running statistics for batch norm (per channel).
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalization over (N, spatial) per channel. Constant channels
/// normalize to 0 (then take the affine beta) because the variance term is
/// `sqrt(0 + eps)`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    momentum: f32,
    mode: NormMode,
    running: Option<&mut RunningStats>,
) -> Result<Tensor> {
    norm_impl(x, gamma, beta, eps, momentum, mode, running, false)
}

/// Instance normalization: statistics per (n, channel) over spatial only.
/// No running statistics; eval behaves like train.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    norm_impl(x, gamma, beta, eps, 0.0, NormMode::Train, None, true)
}

#[allow(clippy::too_many_arguments)]
fn norm_impl(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    momentum: f32,
    mode: NormMode,
    running: Option<&mut RunningStats>,
    per_instance: bool,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Contract("normalization requires eps > 0".into()));
    }
    let [n_b, c, d, h, w] = dims5(x, "norm input")?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(Error::Shape(format!("gamma/beta must have length {c}")));
    }
    let sp = d * h * w;
    let n_groups = if per_instance { n_b * c } else { c };
    let group_count = if per_instance { sp } else { n_b * sp };

    let xd = x.data();
    let gd = gamma.to_vec();
    let bd = beta.to_vec();

    // statistics per group
    let (mean, var) = if mode == NormMode::Train || per_instance {
        let mut mean = vec![0.0f64; n_groups];
        let mut var = vec![0.0f64; n_groups];
        for n in 0..n_b {
            for ch in 0..c {
                let g = if per_instance { n * c + ch } else { ch };
                let base = (n * c + ch) * sp;
                let mut s = 0.0f64;
                for &v in &xd[base..base + sp] {
                    s += v as f64;
                }
                mean[g] += s;
            }
        }
        for m in &mut mean {
            *m /= group_count as f64;
        }
        for n in 0..n_b {
            for ch in 0..c {
                let g = if per_instance { n * c + ch } else { ch };
                let base = (n * c + ch) * sp;
                let m = mean[g];
                let mut s = 0.0f64;
                for &v in &xd[base..base + sp] {
                    let dvi = v as f64 - m;
                    s += dvi * dvi;
                }
                var[g] += s;
            }
        }
        for v in &mut var {
            *v /= group_count as f64;
        }
        (
            mean.iter().map(|&m| m as f32).collect::<Vec<f32>>(),
            var.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
        )
    } else {
        let r = running
            .as_ref()
            .ok_or_else(|| Error::Contract("eval-mode batch_norm requires running stats".into()))?;
        (r.mean.clone(), r.var.clone())
    };

    if mode == NormMode::Train && !per_instance {
        if let Some(r) = running {
            for ch in 0..c {
                r.mean[ch] = (1.0 - momentum) * r.mean[ch] + momentum * mean[ch];
                r.var[ch] = (1.0 - momentum) * r.var[ch] + momentum * var[ch];
            }
        }
    }

    let istd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0f32; xd.len()];
    for n in 0..n_b {
        for ch in 0..c {
            let g = if per_instance { n * c + ch } else { ch };
            let base = (n * c + ch) * sp;
            let (m, is, ga, be) = (mean[g], istd[g], gd[ch], bd[ch]);
            for i in 0..sp {
                y[base + i] = ga * (xd[base + i] - m) * is + be;
            }
        }
    }
    drop(xd);

    // Eval mode treats mean/var as constants; train mode differentiates
    // through the batch statistics.
    let stats_are_const = mode == NormMode::Eval && !per_instance;
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Ok(make_result(
        vec![n_b, c, d, h, w],
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let xd = xc.data();
            let gd = gc.data();
            let m_count = group_count as f64;

            // per-group sums of gy and gy*xhat
            let mut sum_gy = vec![0.0f64; n_groups];
            let mut sum_gy_xhat = vec![0.0f64; n_groups];
            for n in 0..n_b {
                for ch in 0..c {
                    let g = if per_instance { n * c + ch } else { ch };
                    let base = (n * c + ch) * sp;
                    let (m, is) = (mean[g], istd[g]);
                    let mut a = 0.0f64;
                    let mut b = 0.0f64;
                    for i in 0..sp {
                        let gyv = gy[base + i] as f64;
                        a += gyv;
                        b += gyv * ((xd[base + i] - m) * is) as f64;
                    }
                    sum_gy[g] += a;
                    sum_gy_xhat[g] += b;
                }
            }

            let gx = if xc.requires_grad() {
                let mut gx = vec![0.0f32; xd.len()];
                for n in 0..n_b {
                    for ch in 0..c {
                        let g = if per_instance { n * c + ch } else { ch };
                        let base = (n * c + ch) * sp;
                        let (m, is, ga) = (mean[g] as f64, istd[g] as f64, gd[ch] as f64);
                        if stats_are_const {
                            for i in 0..sp {
                                gx[base + i] = (gy[base + i] as f64 * ga * is) as f32;
                            }
                        } else {
                            let k = ga * is / m_count;
                            for i in 0..sp {
                                let xhat = (xd[base + i] as f64 - m) * is;
                                gx[base + i] = (k
                                    * (m_count * gy[base + i] as f64
                                        - sum_gy[g]
                                        - xhat * sum_gy_xhat[g]))
                                    as f32;
                            }
                        }
                    }
                }
                Some(gx)
            } else {
                None
            };

            // gamma/beta gradients are per channel in both modes
            let ggamma = if gc.requires_grad() {
                let mut gg = vec![0.0f32; c];
                if per_instance {
                    for n in 0..n_b {
                        for ch in 0..c {
                            gg[ch] += sum_gy_xhat[n * c + ch] as f32;
                        }
                    }
                } else {
                    for ch in 0..c {
                        gg[ch] = sum_gy_xhat[ch] as f32;
                    }
                }
                Some(gg)
            } else {
                None
            };
            let gbeta = if bc.requires_grad() {
                let mut gb = vec![0.0f32; c];
                if per_instance {
                    for n in 0..n_b {
                        for ch in 0..c {
                            gb[ch] += sum_gy[n * c + ch] as f32;
                        }
                    }
                } else {
                    for ch in 0..c {
                        gb[ch] = sum_gy[ch] as f32;
                    }
                }
                Some(gb)
            } else {
                None
            };
            vec![gx, ggamma, gbeta]
        },
    ))
}

// ---------------------------------------------------------------------------
// softmax over channels
// ---------------------------------------------------------------------------

/// Per-voxel softmax across the channel axis of an (N,C,D,H,W) tensor, with
/// max subtraction for stability.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let [n_b, c, d, h, w] = dims5(x, "softmax input")?;
    if c < 2 {
        return Err(Error::Shape("softmax_channels requires C >= 2".into()));
    }
    let sp = d * h * w;
    let xd = x.data();
    let mut y = vec![0.0f32; xd.len()];
    for n in 0..n_b {
        for v in 0..sp {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[(n * c + ch) * sp + v]);
            }
            let mut z = 0.0f32;
            for ch in 0..c {
                let e = (xd[(n * c + ch) * sp + v] - m).exp();
                y[(n * c + ch) * sp + v] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for ch in 0..c {
                y[(n * c + ch) * sp + v] *= inv;
            }
        }
    }
    drop(xd);
    let probs = y.clone();
    Ok(make_result(
        vec![n_b, c, d, h, w],
        y,
        vec![x.clone()],
        move |gy| {
            let mut gx = vec![0.0f32; probs.len()];
            for n in 0..n_b {
                for v in 0..sp {
                    let mut dot = 0.0f32;
                    for ch in 0..c {
                        let i = (n * c + ch) * sp + v;
                        dot += gy[i] * probs[i];
                    }
                    for ch in 0..c {
                        let i = (n * c + ch) * sp + v;
                        gx[i] = probs[i] * (gy[i] - dot);
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

// ---------------------------------------------------------------------------
// channel concat
// ---------------------------------------------------------------------------

/// Concatenates two (N,C,D,H,W) tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sa = dims5(a, "concat lhs")?;
    let sb = dims5(b, "concat rhs")?;
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!(
            "concat_channels shape mismatch: {sa:?} vs {sb:?}"
        )));
    }
    let [n_b, ca, d, h, w] = sa;
    let cb = sb[1];
    let sp = d * h * w;
    let ad = a.data();
    let bd = b.data();
    let mut y = vec![0.0f32; n_b * (ca + cb) * sp];
    for n in 0..n_b {
        let y_base = n * (ca + cb) * sp;
        y[y_base..y_base + ca * sp].copy_from_slice(&ad[n * ca * sp..(n + 1) * ca * sp]);
        y[y_base + ca * sp..y_base + (ca + cb) * sp]
            .copy_from_slice(&bd[n * cb * sp..(n + 1) * cb * sp]);
    }
    drop(ad);
    drop(bd);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(make_result(
        vec![n_b, ca + cb, d, h, w],
        y,
        vec![a.clone(), b.clone()],
        move |gy| {
            let ga = if ac.requires_grad() {
                let mut g = vec![0.0f32; n_b * ca * sp];
                for n in 0..n_b {
                    let y_base = n * (ca + cb) * sp;
                    g[n * ca * sp..(n + 1) * ca * sp]
                        .copy_from_slice(&gy[y_base..y_base + ca * sp]);
                }
                Some(g)
            } else {
                None
            };
            let gb = if bc.requires_grad() {
                let mut g = vec![0.0f32; n_b * cb * sp];
                for n in 0..n_b {
                    let y_base = n * (ca + cb) * sp;
                    g[n * cb * sp..(n + 1) * cb * sp]
                        .copy_from_slice(&gy[y_base + ca * sp..y_base + (ca + cb) * sp]);
                }
                Some(g)
            } else {
                None
            };
            vec![ga, gb]
        },
    ))
}

/// Per-voxel argmax over the channel axis: (N,C,D,H,W) -> labels of length
/// N*D*H*W. Ties resolve to the lowest channel index.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u8>> {
    let [n_b, c, d, h, w] = dims5(logits, "argmax input")?;
    let sp = d * h * w;
    let xd = logits.data();
    let mut out = vec![0u8; n_b * sp];
    for n in 0..n_b {
        for v in 0..sp {
            let mut best = xd[n * c * sp + v];
            let mut best_c = 0usize;
            for ch in 1..c {
                let val = xd[(n * c + ch) * sp + v];
                if val > best {
                    best = val;
                    best_c = ch;
                }
            }
            out[n * sp + v] = best_c as u8;
        }
    }
    Ok(out)
}
