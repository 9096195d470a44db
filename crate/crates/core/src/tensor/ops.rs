//! Structured tape operations: convolution, pooling, resampling, and the
//! channel bookkeeping the networks need. Feature maps are `[C, H, W]`;
//! vectors are `[N]`; dense weights are `[M, N]`.

use super::{scalar_value, Arr, Var};
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis, IxDyn};

/// Geometry of a 2-d convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn unit(kernel: usize) -> Self {
        Conv2dSpec {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Conv2dSpec {
            kernel,
            stride,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec {
            kernel,
            stride: 1,
            padding: dilation * (kernel / 2),
            dilation,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let eff = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding).saturating_sub(eff) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(eff) / self.stride + 1;
        (oh, ow)
    }
}

/// Lower `[C, H, W]` into a `[C*k*k, oh*ow]` patch matrix (zero padded).
pub fn im2col(x: &Arr, spec: Conv2dSpec) -> Array2<f64> {
    let (c, h, w) = chw(x);
    let (oh, ow) = spec.out_size(h, w);
    let k = spec.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = xs[base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back into `[C, H, W]`.
pub fn col2im(cols: &ArrayView2<f64>, c: usize, h: usize, w: usize, spec: Conv2dSpec) -> Arr {
    let (oh, ow) = spec.out_size(h, w);
    let k = spec.kernel;
    let mut x = Arr::zeros(IxDyn(&[c, h, w]));
    let xs = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xs[base + ix as usize] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

fn chw(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2-d array")
}

/// Reshape an owned matmul result into an n-d gradient or activation.
///
/// `ndarray`'s `dot` allocates its output column-major whenever both
/// operands have unit stride on axis 0 (for example `g.dot(&cols.t())`
/// when the convolution output is spatially 1x1), and a column-major
/// buffer cannot be reinterpreted with a row-major reshape. Copy it into
/// row-major order first when that happens.
fn reshape_matmul(mat: Array2<f64>, shape: &[usize]) -> Arr {
    let mat = if mat.is_standard_layout() {
        mat
    } else {
        let dim = mat.raw_dim();
        Array2::from_shape_vec(dim, mat.iter().copied().collect())
            .expect("row-major rebuild preserves the element count")
    };
    mat.into_shape_with_order(IxDyn(shape))
        .expect("matmul output has the product shape")
}

fn weight_matrix(w: &Arr) -> (Array2<f64>, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "conv weight must be [O, C, k, k], got {s:?}");
    let (o, c, k) = (s[0], s[1], s[2]);
    assert_eq!(s[2], s[3], "conv kernels are square");
    let m = w
        .view()
        .into_shape_with_order((o, c * k * k))
        .expect("contiguous weight")
        .to_owned();
    (m, o, c, k)
}

/// 2-d convolution. `x` is `[C, H, W]`, `weight` is `[O, C, k, k]`,
/// `bias` is `[O]`. Patches are re-lowered in the backward closure instead
/// of being captured, keeping the tape memory proportional to activations.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
    let tape = x.tape;
    let value = tape.with_values2(x.id, weight.id, |xv, wv| {
        let (c, h, w) = chw(xv);
        let (wm, o, wc, _k) = weight_matrix(wv);
        assert_eq!(c, wc, "conv2d: input channels {c} != weight channels {wc}");
        let (oh, ow) = spec.out_size(h, w);
        let cols = im2col(xv, spec);
        let mut out = reshape_matmul(wm.dot(&cols), &[o, oh, ow]);
        tape.with_value(bias.id, |bv| {
            assert_eq!(bv.shape(), [o], "conv2d: bias shape");
            for (mut plane, &b) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                plane += b;
            }
        });
        out
    });

    tape.push(
        value,
        vec![x.id, weight.id, bias.id],
        Some(Box::new(move |g, parents, _| {
            let (xv, wv) = (parents[0], parents[1]);
            let (c, h, w) = chw(xv);
            let (wm, o, _wc, k) = weight_matrix(wv);
            let (oh, ow) = spec.out_size(h, w);
            let g2 = g
                .view()
                .into_shape_with_order((o, oh * ow))
                .expect("contiguous grad");

            let cols = im2col(xv, spec);
            let dw = reshape_matmul(g2.dot(&cols.t()), &[o, c, k, k]);
            let db = Arr::from_shape_vec(
                IxDyn(&[o]),
                g2.axis_iter(Axis(0)).map(|r| r.sum()).collect(),
            )
            .expect("bias grad");
            let dcols = wm.t().dot(&g2);
            let dx = col2im(&dcols.view(), c, h, w, spec);
            vec![dx, dw, db]
        })),
    )
}

/// Dense layer: `weight [M, N] . x [N] + bias [M]`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let tape = x.tape;
    let value = tape.with_values2(x.id, weight.id, |xv, wv| {
        let w2 = as2(wv);
        let x1: ArrayView1<f64> = xv.view().into_dimensionality().expect("1-d input");
        let mut y = w2.dot(&x1);
        tape.with_value(bias.id, |bv| {
            let b1: ArrayView1<f64> = bv.view().into_dimensionality().expect("1-d bias");
            y += &b1;
        });
        y.into_dyn()
    });
    tape.push(
        value,
        vec![x.id, weight.id, bias.id],
        Some(Box::new(|g, parents, _| {
            let (xv, wv) = (parents[0], parents[1]);
            let g1: ArrayView1<f64> = g.view().into_dimensionality().expect("1-d grad");
            let w2 = as2(wv);
            let x1: ArrayView1<f64> = xv.view().into_dimensionality().expect("1-d input");
            let dx = w2.t().dot(&g1).into_dyn();
            let m = g1.len();
            let n = x1.len();
            let mut dw = Array2::<f64>::zeros((m, n));
            for i in 0..m {
                for j in 0..n {
                    dw[(i, j)] = g1[i] * x1[j];
                }
            }
            vec![dx, dw.into_dyn(), g.clone()]
        })),
    )
}

/// Mean over the spatial axes: `[C, H, W] -> [C]`.
pub fn global_avg_pool(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| {
        let (c, h, w) = chw(xv);
        let n = (h * w) as f64;
        Arr::from_shape_vec(
            IxDyn(&[c]),
            xv.axis_iter(Axis(0)).map(|p| p.sum() / n).collect(),
        )
        .expect("gap output")
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            let (c, h, w) = chw(parents[0]);
            let n = (h * w) as f64;
            let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
            for (mut plane, &gc) in dx.axis_iter_mut(Axis(0)).zip(g.iter()) {
                plane.fill(gc / n);
            }
            vec![dx]
        })),
    )
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped,
/// matching the strided-convolution halving used elsewhere.
pub fn max_pool2(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| {
        let (c, h, w) = chw(xv);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "max_pool2: input too small ({h}x{w})");
        Arr::from_shape_fn(IxDyn(&[c, oh, ow]), |ix| {
            let (ci, oy, ox) = (ix[0], ix[1], ix[2]);
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(xv[[ci, 2 * oy + dy, 2 * ox + dx]]);
                }
            }
            best
        })
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            let xv = parents[0];
            let (c, h, w) = chw(xv);
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (mut by, mut bx, mut best) = (0, 0, f64::NEG_INFINITY);
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                let v = xv[[ci, 2 * oy + dy, 2 * ox + dx_]];
                                if v > best {
                                    best = v;
                                    by = dy;
                                    bx = dx_;
                                }
                            }
                        }
                        dx[[ci, 2 * oy + by, 2 * ox + bx]] += g[[ci, oy, ox]];
                    }
                }
            }
            vec![dx]
        })),
    )
}

/// Per-axis source index pair and blend weight for align-corners=false
/// bilinear sampling.
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            }
        })
        .collect()
}

/// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
pub fn bilinear_resize(x: Var<'_>, out_h: usize, out_w: usize) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| bilinear_resize_arr(xv, out_h, out_w));
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |g, parents, _| {
            let (c, h, w) = chw(parents[0]);
            let ys = bilinear_axis(h, out_h);
            let xs = bilinear_axis(w, out_w);
            let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = g[[ci, oy, ox]];
                        dx[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                        dx[[ci, y0, x1]] += (1.0 - wy) * wx * gv;
                        dx[[ci, y1, x0]] += wy * (1.0 - wx) * gv;
                        dx[[ci, y1, x1]] += wy * wx * gv;
                    }
                }
            }
            vec![dx]
        })),
    )
}

/// Value-level bilinear resize (shared by the tape op and plain image code).
pub fn bilinear_resize_arr(x: &Arr, out_h: usize, out_w: usize) -> Arr {
    let (c, h, w) = chw(x);
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    Arr::from_shape_fn(IxDyn(&[c, out_h, out_w]), |ix| {
        let (ci, oy, ox) = (ix[0], ix[1], ix[2]);
        let (y0, y1, wy) = ys[oy];
        let (x0, x1, wx) = xs[ox];
        (1.0 - wy) * ((1.0 - wx) * x[[ci, y0, x0]] + wx * x[[ci, y0, x1]])
            + wy * ((1.0 - wx) * x[[ci, y1, x0]] + wx * x[[ci, y1, x1]])
    })
}

/// Concatenate `[C_i, H, W]` maps along the channel axis.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_channels: no inputs");
    let tape = parts[0].tape;
    let mut channel_counts = Vec::with_capacity(parts.len());
    let mut planes: Vec<Arr> = Vec::with_capacity(parts.len());
    for p in parts {
        planes.push(p.value());
    }
    let (_, h, w) = chw(&planes[0]);
    let mut total = 0;
    for pl in &planes {
        let (c, ph, pw) = chw(pl);
        assert_eq!((ph, pw), (h, w), "concat_channels: spatial sizes differ");
        channel_counts.push(c);
        total += c;
    }
    let mut value = Arr::zeros(IxDyn(&[total, h, w]));
    let mut at = 0;
    for (pl, &c) in planes.iter().zip(&channel_counts) {
        let p3: ArrayView3<f64> = pl.view().into_dimensionality().expect("3-d");
        value.slice_mut(ndarray::s![at..at + c, .., ..]).assign(&p3);
        at += c;
    }
    let parent_ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(
        value,
        parent_ids,
        Some(Box::new(move |g, _, _| {
            let mut out = Vec::with_capacity(channel_counts.len());
            let mut at = 0;
            for &c in &channel_counts {
                out.push(g.slice(ndarray::s![at..at + c, .., ..]).to_owned().into_dyn());
                at += c;
            }
            out
        })),
    )
}

/// Reorder channels of `[C, H, W]` so output channel `i` is input channel
/// `perm[i]`. `perm` must be a permutation of `0..C`.
pub fn permute_channels<'t>(x: Var<'t>, perm: &[usize]) -> Var<'t> {
    let tape = x.tape;
    let perm = perm.to_vec();
    let value = tape.with_value(x.id, |xv| {
        let (c, h, w) = chw(xv);
        assert_eq!(perm.len(), c, "permute_channels: bad permutation length");
        let mut out = Arr::zeros(IxDyn(&[c, h, w]));
        for (i, &src) in perm.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&xv.index_axis(Axis(0), src));
        }
        out
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |g, parents, _| {
            let mut dx = Arr::zeros(parents[0].raw_dim());
            for (i, &src) in perm.iter().enumerate() {
                dx.index_axis_mut(Axis(0), src)
                    .assign(&g.index_axis(Axis(0), i));
            }
            vec![dx]
        })),
    )
}

/// Contiguous slice of a 1-d vector.
pub fn slice1d(x: Var<'_>, start: usize, len: usize) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| {
        assert_eq!(xv.ndim(), 1, "slice1d expects a vector");
        xv.slice(ndarray::s![start..start + len]).to_owned().into_dyn()
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(move |g, parents, _| {
            let mut dx = Arr::zeros(parents[0].raw_dim());
            let g1: ArrayView1<f64> = g.view().into_dimensionality().expect("1-d");
            dx.slice_mut(ndarray::s![start..start + len]).assign(&g1);
            vec![dx]
        })),
    )
}

/// Forward difference along the horizontal axis of an `[H, W]` map:
/// `d[y, x] = m[y, x+1] - m[y, x]`, and 0 at the last column so a constant
/// map has an identically zero difference field.
pub fn forward_diff_x(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| forward_diff_x_arr(xv));
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            let s = parents[0].shape();
            let (h, w) = (s[0], s[1]);
            let mut dx = Arr::zeros(parents[0].raw_dim());
            for y in 0..h {
                for xi in 0..w - 1 {
                    let gv = g[[y, xi]];
                    dx[[y, xi + 1]] += gv;
                    dx[[y, xi]] -= gv;
                }
            }
            vec![dx]
        })),
    )
}

/// Vertical counterpart of [`forward_diff_x`].
pub fn forward_diff_y(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| forward_diff_y_arr(xv));
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            let s = parents[0].shape();
            let (h, w) = (s[0], s[1]);
            let mut dx = Arr::zeros(parents[0].raw_dim());
            for y in 0..h - 1 {
                for xi in 0..w {
                    let gv = g[[y, xi]];
                    dx[[y + 1, xi]] += gv;
                    dx[[y, xi]] -= gv;
                }
            }
            vec![dx]
        })),
    )
}

/// Value-level horizontal forward difference (0 at the last column).
pub fn forward_diff_x_arr(m: &Arr) -> Arr {
    let s = m.shape();
    assert_eq!(s.len(), 2, "forward_diff expects [H, W]");
    let (h, w) = (s[0], s[1]);
    Arr::from_shape_fn(IxDyn(&[h, w]), |ix| {
        let (y, x) = (ix[0], ix[1]);
        if x + 1 < w {
            m[[y, x + 1]] - m[[y, x]]
        } else {
            0.0
        }
    })
}

/// Value-level vertical forward difference (0 at the last row).
pub fn forward_diff_y_arr(m: &Arr) -> Arr {
    let s = m.shape();
    assert_eq!(s.len(), 2, "forward_diff expects [H, W]");
    let (h, w) = (s[0], s[1]);
    Arr::from_shape_fn(IxDyn(&[h, w]), |ix| {
        let (y, x) = (ix[0], ix[1]);
        if y + 1 < h {
            m[[y + 1, x]] - m[[y, x]]
        } else {
            0.0
        }
    })
}

/// Elementwise `max(a, b)` with the subgradient routed to `a` on ties.
pub fn max_elem<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = a.tape;
    let value = tape.with_values2(a.id, b.id, |av, bv| {
        assert_eq!(av.shape(), bv.shape(), "max_elem: shape mismatch");
        let mut out = av.clone();
        out.zip_mut_with(bv, |o, &y| *o = o.max(y));
        out
    });
    tape.push(
        value,
        vec![a.id, b.id],
        Some(Box::new(|g, parents, _| {
            let (av, bv) = (parents[0], parents[1]);
            let mut da = Arr::zeros(av.raw_dim());
            let mut db = Arr::zeros(bv.raw_dim());
            for (((da, db), (&a, &b)), &gv) in da
                .iter_mut()
                .zip(db.iter_mut())
                .zip(av.iter().zip(bv.iter()))
                .zip(g.iter())
            {
                if a >= b {
                    *da = gv;
                } else {
                    *db = gv;
                }
            }
            vec![da, db]
        })),
    )
}

/// Drop a leading singleton axis: `[1, H, W] -> [H, W]`.
pub fn squeeze_leading(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| {
        assert_eq!(xv.shape()[0], 1, "squeeze_leading needs a singleton axis");
        let rest: Vec<usize> = xv.shape()[1..].to_vec();
        xv.clone()
            .into_shape_with_order(IxDyn(&rest))
            .expect("contiguous squeeze")
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            vec![g
                .clone()
                .into_shape_with_order(parents[0].raw_dim())
                .expect("contiguous unsqueeze")]
        })),
    )
}

/// Add a leading singleton axis: `[H, W] -> [1, H, W]`. Inverse of
/// [`squeeze_leading`]; used to stack a single-channel map under an RGB
/// image before a convolution.
pub fn unsqueeze_leading(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let value = tape.with_value(x.id, |xv| {
        let mut shape = vec![1];
        shape.extend_from_slice(xv.shape());
        xv.clone()
            .into_shape_with_order(IxDyn(&shape))
            .expect("contiguous unsqueeze")
    });
    tape.push(
        value,
        vec![x.id],
        Some(Box::new(|g, parents, _| {
            vec![g
                .clone()
                .into_shape_with_order(parents[0].raw_dim())
                .expect("contiguous squeeze")]
        })),
    )
}

/// Minimum of several scalar nodes. The gradient flows only to the first
/// minimiser, which is what winner-takes-all multi-head training needs.
pub fn min_of<'t>(items: &[Var<'t>]) -> Var<'t> {
    assert!(!items.is_empty(), "min_of: no inputs");
    let tape = items[0].tape;
    let values: Vec<f64> = items.iter().map(|v| v.scalar()).collect();
    let (best_i, best) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| {
            if v < bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let n = items.len();
    tape.push(
        super::scalar(best),
        items.iter().map(|v| v.id).collect(),
        Some(Box::new(move |g, _, _| {
            let gv = scalar_value(g);
            (0..n)
                .map(|i| super::scalar(if i == best_i { gv } else { 0.0 }))
                .collect()
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tape};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, 3x3 kernel, known values.
        let x = Arr::from_shape_vec(
            IxDyn(&[1, 3, 3]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Arr::zeros(IxDyn(&[1, 1, 3, 3]));
        let mut w = w;
        w[[0, 0, 1, 1]] = 1.0; // identity kernel
        let b = Arr::from_elem(IxDyn(&[1]), 0.5);

        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let bv = tape.leaf(b);
        let y = conv2d(xv, wv, bv, Conv2dSpec::unit(3));
        let yv = y.value();
        assert_eq!(yv.shape(), &[1, 3, 3]);
        for (a, b) in yv.iter().zip(x.iter()) {
            assert!((a - (b + 0.5)).abs() < 1e-12, "identity kernel plus bias");
        }
    }

    #[test]
    fn conv2d_strided_output_size() {
        let spec = Conv2dSpec::strided(3, 2);
        assert_eq!(spec.out_size(64, 64), (32, 32));
        assert_eq!(spec.out_size(8, 8), (4, 4));
        let spec = Conv2dSpec::dilated(3, 6);
        assert_eq!(spec.out_size(8, 8), (8, 8));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in [
            Conv2dSpec::unit(3),
            Conv2dSpec::strided(3, 2),
            Conv2dSpec::dilated(3, 2),
            Conv2dSpec::unit(1),
        ] {
            let x = rand_arr(&[2, 6, 5], &mut rng);
            let w = rand_arr(&[3, 2, spec.kernel, spec.kernel], &mut rng);
            let b = rand_arr(&[3], &mut rng);

            let tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let loss = conv2d(xv, wv, bv, spec).square().sum();
            let g = tape.backward(loss);
            let analytic = [g.wrt(xv), g.wrt(wv), g.wrt(bv)];

            let f = |inputs: &[Arr]| {
                let tape = Tape::new();
                let xv = tape.leaf(inputs[0].clone());
                let wv = tape.leaf(inputs[1].clone());
                let bv = tape.leaf(inputs[2].clone());
                conv2d(xv, wv, bv, spec).square().sum().scalar()
            };
            let numeric = gradcheck::finite_diff(&f, &[x, w, b]);
            let err = gradcheck::max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "conv2d {spec:?}: max rel error {err}");
        }
    }

    #[test]
    fn conv2d_with_one_by_one_output_backpropagates() {
        // A stride-2 conv on a 2x2 map collapses to a single output pixel,
        // the stride pattern that makes `dot` return a column-major matrix
        // in the weight-gradient product.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let spec = Conv2dSpec::strided(3, 2);
        assert_eq!(spec.out_size(2, 2), (1, 1), "test needs a 1x1 output");

        let x = rand_arr(&[2, 2, 2], &mut rng);
        let w = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);

        let tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let loss = conv2d(xv, wv, bv, spec).square().sum();
        let g = tape.backward(loss);
        let analytic = [g.wrt(xv), g.wrt(wv), g.wrt(bv)];

        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let xv = tape.leaf(inputs[0].clone());
            let wv = tape.leaf(inputs[1].clone());
            let bv = tape.leaf(inputs[2].clone());
            conv2d(xv, wv, bv, spec).square().sum().scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[x, w, b]);
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "1x1-output conv gradients: max rel error {err}");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_arr(&[5], &mut rng);
        let w = rand_arr(&[3, 5], &mut rng);
        let b = rand_arr(&[3], &mut rng);

        let tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let loss = linear(xv, wv, bv).square().sum();
        let g = tape.backward(loss);
        let analytic = [g.wrt(xv), g.wrt(wv), g.wrt(bv)];

        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let xv = tape.leaf(inputs[0].clone());
            let wv = tape.leaf(inputs[1].clone());
            let bv = tape.leaf(inputs[2].clone());
            linear(xv, wv, bv).square().sum().scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[x, w, b]);
        assert!(gradcheck::max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);

        // Each case builds a scalar from a single [C, H, W] input.
        let cases: Vec<(&str, Box<dyn Fn(Var<'_>) -> Var<'_>>)> = vec![
            ("gap", Box::new(|x| global_avg_pool(x).square().sum())),
            ("maxpool", Box::new(|x| max_pool2(x).square().sum())),
            (
                "resize_up",
                Box::new(|x| bilinear_resize(x, 7, 9).square().sum()),
            ),
            (
                "resize_down",
                Box::new(|x| bilinear_resize(x, 2, 3).square().sum()),
            ),
            (
                "permute",
                Box::new(|x| permute_channels(x, &[2, 0, 1]).square().sum()),
            ),
        ];
        for (name, build) in &cases {
            let x = rand_arr(&[3, 4, 6], &mut rng);
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let g = tape.backward(build(xv));
            let analytic = [g.wrt(xv)];
            let f = |inputs: &[Arr]| {
                let tape = Tape::new();
                build(tape.leaf(inputs[0].clone())).scalar()
            };
            let numeric = gradcheck::finite_diff(&f, &[x]);
            let err = gradcheck::max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "{name}: max rel error {err}");
        }
    }

    #[test]
    fn forward_diff_gradients_and_values() {
        let m = Arr::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 4.0, 0.0, 1.0, 3.0]).unwrap();
        let dx = forward_diff_x_arr(&m);
        assert_eq!(
            dx.as_slice().unwrap(),
            &[1.0, 2.0, 0.0, 1.0, 2.0, 0.0],
            "horizontal differences, zero at the last column"
        );
        let dy = forward_diff_y_arr(&m);
        assert_eq!(
            dy.as_slice().unwrap(),
            &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0],
            "vertical differences, zero at the last row"
        );
        let flat = Arr::from_elem(IxDyn(&[3, 4]), 0.7);
        assert!(
            forward_diff_x_arr(&flat).iter().all(|&v| v == 0.0)
                && forward_diff_y_arr(&flat).iter().all(|&v| v == 0.0),
            "constant maps must have identically zero differences"
        );

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_arr(&[4, 5], &mut rng);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = forward_diff_x(xv)
            .square()
            .sum()
            .add(forward_diff_y(xv).square().sum());
        let g = tape.backward(loss);
        let analytic = [g.wrt(xv)];
        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let xv = tape.leaf(inputs[0].clone());
            forward_diff_x(xv)
                .square()
                .sum()
                .add(forward_diff_y(xv).square().sum())
                .scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[x]);
        assert!(gradcheck::max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn max_elem_routes_gradient_to_larger_input() {
        let a = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![0.9, 0.1, 0.4, 0.8]).unwrap();
        let b = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![0.2, 0.7, 0.6, 0.3]).unwrap();

        let tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = max_elem(av, bv);
        assert_eq!(out.value().as_slice().unwrap(), &[0.9, 0.7, 0.6, 0.8]);
        let loss = out.square().sum();
        let g = tape.backward(loss);
        let analytic = [g.wrt(av), g.wrt(bv)];
        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let (av, bv) = (tape.leaf(inputs[0].clone()), tape.leaf(inputs[1].clone()));
            max_elem(av, bv).square().sum().scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[a, b]);
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "max_elem gradient mismatch: {err}");
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = rand_arr(&[2, 3, 3], &mut rng);
        let b = rand_arr(&[1, 3, 3], &mut rng);

        let tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let cat = concat_channels(&[av, bv]);
        assert_eq!(cat.shape(), vec![3, 3, 3]);
        let loss = cat.square().sum();
        let g = tape.backward(loss);
        let analytic = [g.wrt(av), g.wrt(bv)];
        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let av = tape.leaf(inputs[0].clone());
            let bv = tape.leaf(inputs[1].clone());
            concat_channels(&[av, bv]).square().sum().scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[a, b]);
        assert!(gradcheck::max_rel_error(&analytic, &numeric) < 1e-6);

        let v = rand_arr(&[8], &mut rng);
        let tape = Tape::new();
        let vv = tape.leaf(v.clone());
        let loss = slice1d(vv, 2, 4).square().sum();
        let g = tape.backward(loss);
        let gv = g.wrt(vv);
        for i in 0..8 {
            let expect = if (2..6).contains(&i) { 2.0 * v[[i]] } else { 0.0 };
            assert!((gv[[i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn min_of_routes_gradient_to_single_winner() {
        let tape = Tape::new();
        let a = tape.leaf_scalar(3.0);
        let b = tape.leaf_scalar(1.0);
        let c = tape.leaf_scalar(2.0);
        let m = min_of(&[a, b, c]);
        assert_eq!(m.scalar(), 1.0);
        let g = tape.backward(m.mul_scalar(5.0));
        assert_eq!(crate::tensor::scalar_value(&g.wrt(a)), 0.0);
        assert_eq!(crate::tensor::scalar_value(&g.wrt(b)), 5.0);
        assert_eq!(crate::tensor::scalar_value(&g.wrt(c)), 0.0);
    }

    #[test]
    fn unsqueeze_then_squeeze_round_trips_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x0 = rand_arr(&[4, 5], &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let lifted = unsqueeze_leading(x);
        assert_eq!(lifted.shape(), vec![1, 4, 5]);
        let back = squeeze_leading(lifted);
        assert_eq!(back.value(), x0, "shape round trip preserves values");
        let g = tape.backward(lifted.mul_scalar(3.0).sum());
        let dx = g.wrt(x);
        assert_eq!(dx.shape(), &[4, 5]);
        assert!(dx.iter().all(|&v| v == 3.0), "gradient reshapes back");
    }

    #[test]
    fn bilinear_resize_identity_and_constant_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_arr(&[2, 5, 7], &mut rng);
        let same = bilinear_resize_arr(&x, 5, 7);
        assert!(
            x.iter().zip(same.iter()).all(|(a, b)| (a - b).abs() < 1e-12),
            "resize to the same size is the identity"
        );
        let c = Arr::from_elem(IxDyn(&[1, 4, 4]), 0.7);
        let up = bilinear_resize_arr(&c, 9, 13);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = Conv2dSpec::strided(3, 2);
        let x = rand_arr(&[2, 5, 6], &mut rng);
        let cols = im2col(&x, spec);
        let c = Array2::from_shape_fn(cols.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &c).sum();
        let back = col2im(&c.view(), 2, 5, 6, spec);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity: {lhs} vs {rhs}");
    }
}
