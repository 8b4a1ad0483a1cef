//! Numeric kernels behind the tape ops.
//!
//! Parallel kernels split work at fixed chunk boundaries with no cross-chunk
//! reductions, so outputs are bit-identical for any worker count.

use rayon::prelude::*;

use super::step::in_front;
use super::Arr;
use crate::geometry::{Intrinsics, Pose};

/// Below this element count the rayon dispatch overhead dominates.
const PAR_MIN: usize = 16 * 1024;
const CHUNK: usize = 8 * 1024;

fn flat(a: &Arr) -> &[f64] {
    match a.as_slice() {
        Some(s) => s,
        None => panic!(
            "tensor values are standard layout (shape {:?}, strides {:?})",
            a.dim(),
            a.strides()
        ),
    }
}

/// Output buffer handed to the filler as disjoint chunks covering the whole
/// length; every element is written exactly once.
fn fill_uninit(len: usize, fill: impl FnOnce(&mut [f64])) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    // Safety: `fill` initializes every element; f64 has no drop glue.
    #[allow(clippy::uninit_vec)]
    unsafe {
        out.set_len(len);
    }
    fill(&mut out);
    out
}

pub(super) fn map(a: &Arr, f: impl Fn(f64) -> f64 + Sync) -> Arr {
    let src = flat(a);
    let out = fill_uninit(src.len(), |out| {
        if src.len() < PAR_MIN {
            for (o, &x) in out.iter_mut().zip(src) {
                *o = f(x);
            }
        } else {
            out.par_chunks_mut(CHUNK)
                .zip(src.par_chunks(CHUNK))
                .for_each(|(oc, sc)| {
                    for (o, &x) in oc.iter_mut().zip(sc) {
                        *o = f(x);
                    }
                });
        }
    });
    Arr::from_shape_vec(a.raw_dim(), out).expect("shape")
}

pub(super) fn zip2(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64 + Sync) -> Arr {
    debug_assert_eq!(a.dim(), b.dim());
    let sa = flat(a);
    let sb = flat(b);
    let out = fill_uninit(sa.len(), |out| {
        if sa.len() < PAR_MIN {
            for i in 0..sa.len() {
                out[i] = f(sa[i], sb[i]);
            }
        } else {
            out.par_chunks_mut(CHUNK)
                .zip(sa.par_chunks(CHUNK).zip(sb.par_chunks(CHUNK)))
                .for_each(|(oc, (ac, bc))| {
                    for i in 0..oc.len() {
                        oc[i] = f(ac[i], bc[i]);
                    }
                });
        }
    });
    Arr::from_shape_vec(a.raw_dim(), out).expect("shape")
}

pub(super) fn add_row(a: &Arr, row: &Arr) -> Arr {
    let src = flat(a);
    let r = flat(row);
    let w = row.ncols();
    let out = fill_uninit(src.len(), |out| {
        for (orow, srow) in out.chunks_mut(w).zip(src.chunks(w)) {
            for j in 0..w {
                orow[j] = srow[j] + r[j];
            }
        }
    });
    Arr::from_shape_vec(a.raw_dim(), out).expect("shape")
}

/// Serial summation in index order: deterministic by construction.
pub(super) fn sum_det(a: &Arr) -> f64 {
    flat(a).iter().sum()
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn softmax_rows(a: &Arr) -> Arr {
    let w = a.ncols();
    let src = flat(a);
    let out = fill_uninit(src.len(), |out| {
        let body = |(orow, srow): (&mut [f64], &[f64])| {
            let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(srow) {
                *o = (x - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        };
        if src.len() < PAR_MIN {
            out.chunks_mut(w).zip(src.chunks(w)).for_each(body);
        } else {
            out.par_chunks_mut(w).zip(src.par_chunks(w)).for_each(body);
        }
    });
    Arr::from_shape_vec(a.raw_dim(), out).expect("shape")
}

pub(super) fn softmax_rows_backward(y: &Arr, adj: &Arr) -> Arr {
    let w = y.ncols();
    let ys = flat(y);
    let gs = flat(adj);
    let out = fill_uninit(ys.len(), |out| {
        let body = |(drow, (yr, gr)): (&mut [f64], (&[f64], &[f64]))| {
            let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
            for j in 0..w {
                drow[j] = yr[j] * (gr[j] - dot);
            }
        };
        if ys.len() < PAR_MIN {
            out.chunks_mut(w)
                .zip(ys.chunks(w).zip(gs.chunks(w)))
                .for_each(body);
        } else {
            out.par_chunks_mut(w)
                .zip(ys.par_chunks(w).zip(gs.par_chunks(w)))
                .for_each(body);
        }
    });
    Arr::from_shape_vec(y.raw_dim(), out).expect("shape")
}

/// Row-normalized values and per-row `1/sqrt(var + eps)`.
pub(super) fn layer_norm_stats(a: &Arr, eps: f64) -> (Arr, Vec<f64>) {
    let w = a.ncols() as f64;
    let mut xhat = a.clone();
    let mut inv_std = Vec::with_capacity(a.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / w;
        let mut var = 0.0;
        for x in row.iter() {
            let d = x - mean;
            var += d * d;
        }
        var /= w;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for x in row.iter_mut() {
            *x = (*x - mean) * istd;
        }
    }
    (xhat, inv_std)
}

fn cam_coords(pose: &Pose, p: [f64; 3]) -> [f64; 3] {
    let r = &pose.rotation;
    let t = &pose.translation;
    [
        r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2] + t[0],
        r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2] + t[1],
        r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2] + t[2],
    ]
}

/// d(pixel)/d(world point): the 2×3 pinhole Jacobian chained with R.
fn pixel_jacobian(pose: &Pose, k: &Intrinsics, cam: [f64; 3]) -> [[f64; 3]; 2] {
    let [x, y, z] = cam;
    let r = &pose.rotation;
    // J_pi = [[fx/z, 0, -fx x / z^2], [0, fy/z, -fy y / z^2]]
    let jp = [
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ];
    let mut out = [[0.0; 3]; 2];
    for (row, jrow) in out.iter_mut().zip(jp) {
        for (col, o) in row.iter_mut().enumerate() {
            *o = jrow[0] * r[(0, col)] + jrow[1] * r[(1, col)] + jrow[2] * r[(2, col)];
        }
    }
    out
}

pub(super) fn point_reproj_forward(
    pred: &Arr,
    pose: &Pose,
    k: &Intrinsics,
    observed: &Arr,
    penalty: f64,
) -> Arr {
    let n = pred.nrows();
    let mut out = Arr::zeros((n, 1));
    for i in 0..n {
        let cam = cam_coords(pose, [pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]]);
        if !in_front(cam[2]) {
            out[(i, 0)] = penalty;
            continue;
        }
        let u = k.fx * cam[0] / cam[2] + k.cx;
        let v = k.fy * cam[1] / cam[2] + k.cy;
        let du = u - observed[(i, 0)];
        let dv = v - observed[(i, 1)];
        out[(i, 0)] = (du * du + dv * dv).sqrt();
    }
    out
}

pub(super) fn point_reproj_backward(
    pred: &Arr,
    pose: &Pose,
    k: &Intrinsics,
    observed: &Arr,
    adj: &Arr,
) -> Arr {
    let n = pred.nrows();
    let mut d = Arr::zeros((n, 3));
    for i in 0..n {
        let cam = cam_coords(pose, [pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]]);
        if !in_front(cam[2]) {
            continue; // constant penalty: zero gradient
        }
        let u = k.fx * cam[0] / cam[2] + k.cx;
        let v = k.fy * cam[1] / cam[2] + k.cy;
        let du = u - observed[(i, 0)];
        let dv = v - observed[(i, 1)];
        let res = (du * du + dv * dv).sqrt().max(1e-12);
        let j = pixel_jacobian(pose, k, cam);
        let g = adj[(i, 0)] / res;
        for col in 0..3 {
            d[(i, col)] = g * (du * j[0][col] + dv * j[1][col]);
        }
    }
    d
}

pub(super) fn line_reproj_forward(
    pred: &Arr,
    pose: &Pose,
    k: &Intrinsics,
    lines: &[(f64, f64, f64)],
    penalty: f64,
) -> Arr {
    let n = pred.nrows();
    let mut out = Arr::zeros((n, 1));
    for i in 0..n {
        let (nx, ny, c) = lines[i];
        let cam_a = cam_coords(pose, [pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]]);
        let cam_b = cam_coords(pose, [pred[(i, 3)], pred[(i, 4)], pred[(i, 5)]]);
        if !in_front(cam_a[2]) || !in_front(cam_b[2]) {
            out[(i, 0)] = penalty;
            continue;
        }
        let mut res = 0.0;
        for cam in [cam_a, cam_b] {
            let u = k.fx * cam[0] / cam[2] + k.cx;
            let v = k.fy * cam[1] / cam[2] + k.cy;
            res += (nx * u + ny * v - c).abs();
        }
        out[(i, 0)] = res;
    }
    out
}

pub(super) fn line_reproj_backward(
    pred: &Arr,
    pose: &Pose,
    k: &Intrinsics,
    lines: &[(f64, f64, f64)],
    adj: &Arr,
) -> Arr {
    let n = pred.nrows();
    let mut d = Arr::zeros((n, 6));
    for i in 0..n {
        let (nx, ny, c) = lines[i];
        let cam_a = cam_coords(pose, [pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]]);
        let cam_b = cam_coords(pose, [pred[(i, 3)], pred[(i, 4)], pred[(i, 5)]]);
        if !in_front(cam_a[2]) || !in_front(cam_b[2]) {
            continue;
        }
        let g = adj[(i, 0)];
        for (e, cam) in [cam_a, cam_b].into_iter().enumerate() {
            let u = k.fx * cam[0] / cam[2] + k.cx;
            let v = k.fy * cam[1] / cam[2] + k.cy;
            let s = nx * u + ny * v - c;
            let sign = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            let j = pixel_jacobian(pose, k, cam);
            for col in 0..3 {
                d[(i, 3 * e + col)] = g * sign * (nx * j[0][col] + ny * j[1][col]);
            }
        }
    }
    d
}
