//! Dense, convolution, and transposed-convolution primitives with explicit
//! backward passes, on flat `f64` buffers.
//!
//! Tensors are stored channel-major: a (C, H, W) activation lives at
//! `x[(c*H + y)*W + x]`. Convolution weights are `[out][in][k][k]`;
//! transposed-convolution weights are `[in][out][k][k]`, which makes a
//! transposed convolution with the same flat buffer the exact adjoint of the
//! corresponding convolution. All loops accumulate in a fixed order, so every
//! result is bit-reproducible.

/// Output spatial size of a convolution: floor((n + 2p − k)/s) + 1.
pub fn conv_out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Output spatial size of a transposed convolution: (n−1)·s − 2p + k.
pub fn tconv_out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n - 1) * s + k - 2 * p
}

/// Cross-correlation of a (ci, h, w) input with co kernels, zero-padded.
/// Weights are `[co][ci][k][k]`. Returns the (co, ho, wo) output.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    co: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(wt.len(), co * ci * k * k);
    debug_assert_eq!(b.len(), co);
    let ho = conv_out_dim(h, k, s, p);
    let wo = conv_out_dim(w, k, s, p);
    let mut y = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        let iy = (s * oy + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (s * ox + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * wt[((o * ci + c) * k + ky) * k + kx];
                        }
                    }
                }
                y[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    y
}

/// Gradients of a convolution: returns (dx, dwt, db) given the upstream
/// gradient dy of shape (co, ho, wo).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    k: usize,
    s: usize,
    p: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ho = conv_out_dim(h, k, s, p);
    let wo = conv_out_dim(w, k, s, p);
    debug_assert_eq!(dy.len(), co * ho * wo);
    let mut dx = vec![0.0; ci * h * w];
    let mut dwt = vec![0.0; co * ci * k * k];
    let mut db = vec![0.0; co];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(o * ho + oy) * wo + ox];
                db[o] += g;
                for c in 0..ci {
                    for ky in 0..k {
                        let iy = (s * oy + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (s * ox + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + ix as usize;
                            let wi = ((o * ci + c) * k + ky) * k + kx;
                            dx[xi] += g * wt[wi];
                            dwt[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (dx, dwt, db)
}

/// Transposed convolution (the adjoint scatter of `conv_forward`). Input is
/// (ci, h, w), weights `[ci][co][k][k]`, output (co, ho, wo) with
/// ho = (h−1)·s + k − 2p.
#[allow(clippy::too_many_arguments)]
pub fn tconv_forward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    co: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(wt.len(), ci * co * k * k);
    debug_assert_eq!(b.len(), co);
    let ho = tconv_out_dim(h, k, s, p);
    let wo = tconv_out_dim(w, k, s, p);
    let mut y = vec![0.0; co * ho * wo];
    for (o, &bias) in b.iter().enumerate() {
        for v in &mut y[o * ho * wo..(o + 1) * ho * wo] {
            *v = bias;
        }
    }
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let xv = x[(c * h + iy) * w + ix];
                for o in 0..co {
                    for ky in 0..k {
                        let oy = (s * iy + ky) as isize - p as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (s * ix + kx) as isize - p as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            y[(o * ho + oy as usize) * wo + ox as usize]
                                += xv * wt[((c * co + o) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of a transposed convolution: (dx, dwt, db) for dy of shape
/// (co, ho, wo).
#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    k: usize,
    s: usize,
    p: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ho = tconv_out_dim(h, k, s, p);
    let wo = tconv_out_dim(w, k, s, p);
    debug_assert_eq!(dy.len(), co * ho * wo);
    let mut dx = vec![0.0; ci * h * w];
    let mut dwt = vec![0.0; ci * co * k * k];
    let mut db = vec![0.0; co];
    for o in 0..co {
        for v in &dy[o * ho * wo..(o + 1) * ho * wo] {
            db[o] += v;
        }
    }
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let xi = (c * h + iy) * w + ix;
                let xv = x[xi];
                let mut acc = 0.0;
                for o in 0..co {
                    for ky in 0..k {
                        let oy = (s * iy + ky) as isize - p as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (s * ix + kx) as isize - p as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let g = dy[(o * ho + oy as usize) * wo + ox as usize];
                            let wi = ((c * co + o) * k + ky) * k + kx;
                            acc += g * wt[wi];
                            dwt[wi] += g * xv;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (dx, dwt, db)
}

/// Fully connected layer: y = W x + b with W stored `[no][ni]`.
pub fn dense_forward(x: &[f64], wt: &[f64], b: &[f64], ni: usize, no: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), ni);
    debug_assert_eq!(wt.len(), no * ni);
    let mut y = Vec::with_capacity(no);
    for o in 0..no {
        let row = &wt[o * ni..(o + 1) * ni];
        let mut acc = b[o];
        for i in 0..ni {
            acc += row[i] * x[i];
        }
        y.push(acc);
    }
    y
}

pub fn dense_backward(
    x: &[f64],
    wt: &[f64],
    ni: usize,
    no: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(dy.len(), no);
    let mut dx = vec![0.0; ni];
    let mut dwt = vec![0.0; no * ni];
    let db = dy.to_vec();
    for o in 0..no {
        let g = dy[o];
        let row = &wt[o * ni..(o + 1) * ni];
        let drow = &mut dwt[o * ni..(o + 1) * ni];
        for i in 0..ni {
            dx[i] += g * row[i];
            drow[i] = g * x[i];
        }
    }
    (dx, dwt, db)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// dL/dx given the pre-activation and upstream gradient; the subgradient at
/// exactly zero is taken as zero.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect()
}

/// Per-pixel softmax over the class axis of (m, hw) logits plus cross-entropy
/// against a target distribution. Returns the summed cross-entropy over
/// pixels and the softmax probabilities; the gradient of the summed loss
/// w.r.t. the logits is simply probs − target. Computed in log-sum-exp form,
/// so zero probabilities never reach a logarithm.
pub fn softmax_ce(logits: &[f64], m: usize, hw: usize, target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), m * hw);
    debug_assert_eq!(target.len(), m * hw);
    let mut probs = vec![0.0; m * hw];
    let mut ce = 0.0;
    for px in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for mm in 0..m {
            max = max.max(logits[mm * hw + px]);
        }
        let mut z = 0.0;
        for mm in 0..m {
            z += (logits[mm * hw + px] - max).exp();
        }
        let lse = max + z.ln();
        for mm in 0..m {
            let l = logits[mm * hw + px];
            probs[mm * hw + px] = (l - lse).exp();
            let t = target[mm * hw + px];
            if t != 0.0 {
                ce += t * (lse - l);
            }
        }
    }
    (ce, probs)
}
