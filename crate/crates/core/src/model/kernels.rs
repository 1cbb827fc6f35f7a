//! Stride-1, same-padded 1D convolution over channel-major buffers.
//!
//! Buffers hold `channels * n` values; row `c` is `buf[c * n..(c + 1) * n]`.
//! Kernels are `[out][in][k]` with odd `k` and padding `k / 2` on both sides.

pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub n: usize,
}

/// Output positions computed per register tile.
const TILE: usize = 8;

/// Instantiates `$f::<K>` for the common kernel widths so their tap loops
/// unroll; `K = 0` reads the width at runtime. Every instantiation runs the
/// same operations in the same order.
macro_rules! by_width {
    ($k:expr, $f:ident($($arg:expr),*)) => {
        match $k {
            3 => $f::<3>($($arg),*),
            5 => $f::<5>($($arg),*),
            7 => $f::<7>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

pub(crate) fn conv_forward(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    by_width!(s.k, forward_k(s, x, w, b, y))
}

fn forward_k<const K: usize>(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let n = s.n;
    let k = if K == 0 { s.k } else { K };
    let pad = k / 2;
    let right = k - 1 - pad;
    debug_assert_eq!(x.len(), s.cin * n);
    debug_assert_eq!(y.len(), s.cout * n);
    let row = s.cin * k;
    let mut o = 0;
    // Pairs of output channels share every input load.
    while o + 1 < s.cout {
        let (w0, w1) = (&w[o * row..(o + 1) * row], &w[(o + 1) * row..(o + 2) * row]);
        let mut t0 = 0;
        while t0 < n {
            if t0 >= pad && t0 + TILE + right <= n {
                let mut a0 = [b[o]; TILE];
                let mut a1 = [b[o + 1]; TILE];
                for i in 0..s.cin {
                    let xi = &x[i * n..(i + 1) * n];
                    for j in 0..k {
                        let (v0, v1) = (w0[i * k + j], w1[i * k + j]);
                        let src: &[f64; TILE] = xi[t0 + j - pad..t0 + j - pad + TILE].try_into().unwrap();
                        for u in 0..TILE {
                            a0[u] += v0 * src[u];
                            a1[u] += v1 * src[u];
                        }
                    }
                }
                y[o * n + t0..o * n + t0 + TILE].copy_from_slice(&a0);
                y[(o + 1) * n + t0..(o + 1) * n + t0 + TILE].copy_from_slice(&a1);
            } else {
                for t in t0..(t0 + TILE).min(n) {
                    y[o * n + t] = edge_forward(s, x, w0, b[o], t);
                    y[(o + 1) * n + t] = edge_forward(s, x, w1, b[o + 1], t);
                }
            }
            t0 += TILE;
        }
        o += 2;
    }
    if o < s.cout {
        let wo = &w[o * row..(o + 1) * row];
        let mut t0 = 0;
        while t0 < n {
            if t0 >= pad && t0 + TILE + right <= n {
                let mut acc = [b[o]; TILE];
                for i in 0..s.cin {
                    let xi = &x[i * n..(i + 1) * n];
                    for j in 0..k {
                        let wv = wo[i * k + j];
                        let src: &[f64; TILE] = xi[t0 + j - pad..t0 + j - pad + TILE].try_into().unwrap();
                        for u in 0..TILE {
                            acc[u] += wv * src[u];
                        }
                    }
                }
                y[o * n + t0..o * n + t0 + TILE].copy_from_slice(&acc);
            } else {
                for t in t0..(t0 + TILE).min(n) {
                    y[o * n + t] = edge_forward(s, x, wo, b[o], t);
                }
            }
            t0 += TILE;
        }
    }
}

/// One output position near the sequence ends, zero-padded.
fn edge_forward(s: &ConvShape, x: &[f64], wo: &[f64], bias: f64, t: usize) -> f64 {
    let (n, k, pad) = (s.n, s.k, s.k / 2);
    let mut acc = bias;
    for i in 0..s.cin {
        for j in 0..k {
            let src = (t + j) as isize - pad as isize;
            if src >= 0 && (src as usize) < n {
                acc += wo[i * k + j] * x[i * n + src as usize];
            }
        }
    }
    acc
}

/// Accumulates `dw`, `db` and (optionally) `dx` for upstream gradient `dy`.
pub(crate) fn conv_backward(
    s: &ConvShape,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = s.n;
    for o in 0..s.cout {
        let dyo = &dy[o * n..(o + 1) * n];
        db[o] += dyo.iter().sum::<f64>();
        for i in 0..s.cin {
            let base = (o * s.cin + i) * s.k;
            by_width!(s.k, weight_grads(dyo, &x[i * n..(i + 1) * n], &mut dw[base..base + s.k]));
        }
    }
    if let Some(dx) = dx {
        by_width!(s.k, conv_backward_input(s, w, dy, dx));
    }
}

/// `dw[j] += sum_t dy[t] * x[t + j - pad]`, up to three taps per sweep.
fn weight_grads<const K: usize>(dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let k = if K == 0 { dw.len() } else { K };
    let mut j = 0;
    while j < k {
        j += match k - j {
            1 => tap_group::<1>(dy, x, dw, j),
            2 => tap_group::<2>(dy, x, dw, j),
            _ => tap_group::<3>(dy, x, dw, j),
        };
    }
}

/// Taps `j..j + G` of [`weight_grads`]: lane-wise sums over the interior
/// tiles, then the zero-padded ends. Returns `G`.
fn tap_group<const G: usize>(dy: &[f64], x: &[f64], dw: &mut [f64], j: usize) -> usize {
    let (n, k) = (dy.len(), dw.len());
    let pad = k / 2;
    let right = k - 1 - pad;
    let tiles = if n >= pad + right { (n - pad - right) / TILE } else { 0 };
    let body_end = pad + tiles * TILE;
    let mut acc = [[0.0; TILE]; G];
    for m in 0..tiles {
        let t0 = pad + m * TILE;
        let d: &[f64; TILE] = dy[t0..t0 + TILE].try_into().unwrap();
        for (g, a) in acc.iter_mut().enumerate() {
            let src = t0 + j + g - pad;
            let xg: &[f64; TILE] = x[src..src + TILE].try_into().unwrap();
            for u in 0..TILE {
                a[u] += d[u] * xg[u];
            }
        }
    }
    for (g, a) in acc.iter().enumerate() {
        let mut sum = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
        for t in (0..pad.min(n)).chain(body_end.max(pad.min(n))..n) {
            let src = (t + j + g) as isize - pad as isize;
            if src >= 0 && (src as usize) < n {
                sum += dy[t] * x[src as usize];
            }
        }
        dw[j + g] += sum;
    }
    G
}

/// `dx[i, t] += sum_o sum_j w[o, i, j] * dy[o, t - j + pad]`.
fn conv_backward_input<const K: usize>(s: &ConvShape, w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = s.n;
    let k = if K == 0 { s.k } else { K };
    let pad = k / 2;
    let right = k - 1 - pad;
    let wt = |o: usize, i: usize| &w[(o * s.cin + i) * k..(o * s.cin + i + 1) * k];
    let edge = |i: usize, t: usize| -> f64 {
        let mut acc = 0.0;
        for o in 0..s.cout {
            for (j, wv) in wt(o, i).iter().enumerate() {
                let src = (t + pad) as isize - j as isize;
                if src >= 0 && (src as usize) < n {
                    acc += wv * dy[o * n + src as usize];
                }
            }
        }
        acc
    };
    let interior = |t0: usize| t0 >= right && t0 + TILE + pad <= n;
    let mut i = 0;
    // Pairs of input channels share every upstream-gradient load.
    while i + 1 < s.cin {
        let mut t0 = 0;
        while t0 < n {
            if interior(t0) {
                let mut a0 = [0.0; TILE];
                let mut a1 = [0.0; TILE];
                for o in 0..s.cout {
                    let dyo = &dy[o * n..(o + 1) * n];
                    let (w0, w1) = (wt(o, i), wt(o, i + 1));
                    for j in 0..k {
                        let src: &[f64; TILE] = dyo[t0 + pad - j..t0 + pad - j + TILE].try_into().unwrap();
                        let (v0, v1) = (w0[j], w1[j]);
                        for u in 0..TILE {
                            a0[u] += v0 * src[u];
                            a1[u] += v1 * src[u];
                        }
                    }
                }
                for u in 0..TILE {
                    dx[i * n + t0 + u] += a0[u];
                    dx[(i + 1) * n + t0 + u] += a1[u];
                }
            } else {
                for t in t0..(t0 + TILE).min(n) {
                    dx[i * n + t] += edge(i, t);
                    dx[(i + 1) * n + t] += edge(i + 1, t);
                }
            }
            t0 += TILE;
        }
        i += 2;
    }
    if i < s.cin {
        let mut t0 = 0;
        while t0 < n {
            if interior(t0) {
                let mut acc = [0.0; TILE];
                for o in 0..s.cout {
                    let dyo = &dy[o * n..(o + 1) * n];
                    for (j, &wv) in wt(o, i).iter().enumerate() {
                        let src: &[f64; TILE] = dyo[t0 + pad - j..t0 + pad - j + TILE].try_into().unwrap();
                        for u in 0..TILE {
                            acc[u] += wv * src[u];
                        }
                    }
                }
                for u in 0..TILE {
                    dx[i * n + t0 + u] += acc[u];
                }
            } else {
                for t in t0..(t0 + TILE).min(n) {
                    dx[i * n + t] += edge(i, t);
                }
            }
            t0 += TILE;
        }
    }
}
