//! Recorded operations and their vector-Jacobian products.

use ndarray::prelude::*;
use ndarray::Zip;

use super::kernels;
use super::{Arr, TapeInner};
use crate::geometry::{Intrinsics, Pose, MIN_DEPTH};

#[derive(Clone)]
pub(super) enum Step {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    MulElem {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        row: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
        heights: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        end: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    MeanRows {
        a: usize,
        n: usize,
    },
    SumAll {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
    },
    LayerNormRows {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Arr,
        inv_std: Vec<f64>,
    },
    SumRowNorms {
        a: usize,
    },
    Bce {
        a: usize,
        labels: Vec<f64>,
        clamp: f64,
    },
    PointReproj {
        a: usize,
        pose: Pose,
        intr: Intrinsics,
        observed: Arr,
    },
    LineReproj {
        a: usize,
        pose: Pose,
        intr: Intrinsics,
        /// Unit normal (nx, ny) and offset c of each observed segment's line.
        lines: Vec<(f64, f64, f64)>,
    },
}

impl Step {
    pub(super) fn backward(
        &self,
        tape: &TapeInner,
        out_idx: usize,
        adj: &Arr,
        seeds: &mut [Option<Arr>],
    ) {
        match self {
            Step::Leaf => {}

            Step::Add { a, b } => {
                if tape.needs_grad(*a) {
                    TapeInner::accumulate(seeds, *a, adj.clone());
                }
                if tape.needs_grad(*b) {
                    TapeInner::accumulate(seeds, *b, adj.clone());
                }
            }

            Step::Sub { a, b } => {
                if tape.needs_grad(*a) {
                    TapeInner::accumulate(seeds, *a, adj.clone());
                }
                if tape.needs_grad(*b) {
                    TapeInner::accumulate(seeds, *b, kernels::map(adj, |x| -x));
                }
            }

            Step::MulElem { a, b } => {
                if tape.needs_grad(*a) {
                    let d = kernels::zip2(adj, tape.value(*b), |g, y| g * y);
                    TapeInner::accumulate(seeds, *a, d);
                }
                if tape.needs_grad(*b) {
                    let d = kernels::zip2(adj, tape.value(*a), |g, x| g * x);
                    TapeInner::accumulate(seeds, *b, d);
                }
            }

            Step::AddRow { a, row } => {
                if tape.needs_grad(*a) {
                    TapeInner::accumulate(seeds, *a, adj.clone());
                }
                if tape.needs_grad(*row) {
                    let summed = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                    TapeInner::accumulate(seeds, *row, summed);
                }
            }

            Step::Scale { a, c } => {
                if tape.needs_grad(*a) {
                    let factor = if tape.corrupt_hook { c * 1.001 } else { *c };
                    TapeInner::accumulate(seeds, *a, kernels::map(adj, |x| factor * x));
                }
            }

            Step::Matmul { a, b, ta, tb } => {
                let av = tape.value(*a);
                let bv = tape.value(*b);
                if tape.needs_grad(*a) {
                    let da = match (ta, tb) {
                        (false, false) => adj.dot(&bv.t()),
                        (true, false) => bv.dot(&adj.t()),
                        (false, true) => adj.dot(bv),
                        (true, true) => bv.t().dot(&adj.t()),
                    };
                    TapeInner::accumulate(seeds, *a, da);
                }
                if tape.needs_grad(*b) {
                    let db = match (ta, tb) {
                        (false, false) => av.t().dot(adj),
                        (true, false) => av.dot(adj),
                        (false, true) => adj.t().dot(av),
                        (true, true) => adj.t().dot(&av.t()),
                    };
                    TapeInner::accumulate(seeds, *b, db);
                }
            }

            Step::ConcatCols { parts, widths } => {
                let mut start = 0;
                for (part, w) in parts.iter().zip(widths) {
                    if tape.needs_grad(*part) {
                        let d = adj.slice(s![.., start..start + w]).to_owned();
                        TapeInner::accumulate(seeds, *part, d);
                    }
                    start += w;
                }
            }

            Step::ConcatRows { parts, heights } => {
                let mut start = 0;
                for (part, h) in parts.iter().zip(heights) {
                    if tape.needs_grad(*part) {
                        let d = adj.slice(s![start..start + h, ..]).to_owned();
                        TapeInner::accumulate(seeds, *part, d);
                    }
                    start += h;
                }
            }

            Step::SliceCols { a, start, end } => {
                if tape.needs_grad(*a) {
                    let mut d = Arr::zeros(tape.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*end]).assign(adj);
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::SliceRows { a, start, end } => {
                if tape.needs_grad(*a) {
                    let mut d = Arr::zeros(tape.value(*a).raw_dim());
                    d.slice_mut(s![*start..*end, ..]).assign(adj);
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::GatherRows { a, idx } => {
                if tape.needs_grad(*a) {
                    let mut d = Arr::zeros(tape.value(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(i);
                        dst += &adj.row(r);
                    }
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::MeanRows { a, n } => {
                if tape.needs_grad(*a) {
                    let scaled = kernels::map(adj, |x| x / *n as f64);
                    let d = scaled
                        .broadcast((*n, adj.ncols()))
                        .expect("broadcast")
                        .to_owned();
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::SumAll { a } => {
                if tape.needs_grad(*a) {
                    let d = Arr::from_elem(tape.value(*a).raw_dim(), adj[(0, 0)]);
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::Relu { a } => {
                if tape.needs_grad(*a) {
                    let y = tape.value(out_idx);
                    let d = kernels::zip2(adj, y, |g, y| if y > 0.0 { g } else { 0.0 });
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::Sigmoid { a } => {
                if tape.needs_grad(*a) {
                    let y = tape.value(out_idx);
                    let d = kernels::zip2(adj, y, |g, y| g * y * (1.0 - y));
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::Tanh { a } => {
                if tape.needs_grad(*a) {
                    let y = tape.value(out_idx);
                    let d = kernels::zip2(adj, y, |g, y| g * (1.0 - y * y));
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::SoftmaxRows { a } => {
                if tape.needs_grad(*a) {
                    let y = tape.value(out_idx);
                    TapeInner::accumulate(seeds, *a, kernels::softmax_rows_backward(y, adj));
                }
            }

            Step::LayerNormRows {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = tape.value(*gamma);
                if tape.needs_grad(*a) {
                    let w = xhat.ncols() as f64;
                    let mut d = Arr::zeros(xhat.raw_dim());
                    for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let adj_row = adj.row(i);
                        let xh = xhat.row(i);
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..xh.len() {
                            let g = adj_row[j] * gv[(0, j)];
                            mean_g += g;
                            mean_gx += g * xh[j];
                        }
                        mean_g /= w;
                        mean_gx /= w;
                        for j in 0..xh.len() {
                            let g = adj_row[j] * gv[(0, j)];
                            drow[j] = inv_std[i] * (g - mean_g - xh[j] * mean_gx);
                        }
                    }
                    TapeInner::accumulate(seeds, *a, d);
                }
                if tape.needs_grad(*gamma) {
                    let mut d = Arr::zeros((1, xhat.ncols()));
                    Zip::from(adj.rows()).and(xhat.rows()).for_each(|ar, xr| {
                        for j in 0..xr.len() {
                            d[(0, j)] += ar[j] * xr[j];
                        }
                    });
                    TapeInner::accumulate(seeds, *gamma, d);
                }
                if tape.needs_grad(*beta) {
                    let d = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                    TapeInner::accumulate(seeds, *beta, d);
                }
            }

            Step::SumRowNorms { a } => {
                if tape.needs_grad(*a) {
                    let av = tape.value(*a);
                    let g = adj[(0, 0)];
                    let mut d = Arr::zeros(av.raw_dim());
                    for (mut drow, arow) in d.rows_mut().into_iter().zip(av.rows()) {
                        let norm = arow.dot(&arow).sqrt().max(1e-12);
                        for j in 0..arow.len() {
                            drow[j] = g * arow[j] / norm;
                        }
                    }
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::Bce { a, labels, clamp } => {
                if tape.needs_grad(*a) {
                    let av = tape.value(*a);
                    let g = adj[(0, 0)];
                    let mut d = Arr::zeros(av.raw_dim());
                    for (i, &y) in labels.iter().enumerate() {
                        let p = av[(i, 0)];
                        // Gradient vanishes where the clamp is active.
                        if p > *clamp && p < 1.0 - *clamp {
                            d[(i, 0)] = g * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                    TapeInner::accumulate(seeds, *a, d);
                }
            }

            Step::PointReproj {
                a,
                pose,
                intr,
                observed,
            } => {
                if tape.needs_grad(*a) {
                    let av = tape.value(*a);
                    TapeInner::accumulate(
                        seeds,
                        *a,
                        kernels::point_reproj_backward(av, pose, intr, observed, adj),
                    );
                }
            }

            Step::LineReproj {
                a,
                pose,
                intr,
                lines,
            } => {
                if tape.needs_grad(*a) {
                    let av = tape.value(*a);
                    TapeInner::accumulate(
                        seeds,
                        *a,
                        kernels::line_reproj_backward(av, pose, intr, lines, adj),
                    );
                }
            }
        }
    }
}

/// Depth test shared by the reprojection kernels.
pub(super) fn in_front(z: f64) -> bool {
    z > MIN_DEPTH
}
