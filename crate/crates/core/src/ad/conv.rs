//! Strided 2-D convolution and transposed convolution tape ops.
//!
//! Both directions share one im2col/col2im pair parameterized by a sampling
//! grid, and both run one GEMM per sample so a sample's output never depends
//! on its batch context. Weight-gradient reductions accumulate over a fixed
//! chunk partition in index order, which keeps results bit-identical between
//! the rayon and sequential builds.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Ix1, Ix4};

use super::ops::v1;
use super::tape::{BackStep, NodeId, Tape};
use crate::parallel;

/// Chunk count for weight-gradient partial sums. Fixed (not thread-count
/// dependent) so that float summation order never varies between runs.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvT2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvT2dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
        )
    }
}

/// Gather image patches: `image[C,H,W]` sampled over a `(gh,gw)` grid with
/// kernel `k`, stride `s`, padding `p` into `[C·k·k, gh·gw]`.
fn im2col(
    image: ArrayView3<'_, f64>,
    grid: (usize, usize),
    k: usize,
    s: usize,
    p: usize,
) -> Array2<f64> {
    let (c_n, h, w) = image.dim();
    let (gh, gw) = grid;
    let mut cols = Array2::<f64>::zeros((c_n * k * k, gh * gw));
    for c in 0..c_n {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oh in 0..gh {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..gw {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, oh * gw + ow]] = image[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-accumulate the adjoint of [`im2col`] back into image space.
fn col2im(
    cols: ArrayView2<'_, f64>,
    grid: (usize, usize),
    k: usize,
    s: usize,
    p: usize,
    image_shape: (usize, usize, usize),
) -> Array3<f64> {
    let (c_n, h, w) = image_shape;
    let (gh, gw) = grid;
    let mut image = Array3::<f64>::zeros(image_shape);
    for c in 0..c_n {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oh in 0..gh {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..gw {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        image[[c, ih as usize, iw as usize]] += cols[[row, oh * gw + ow]];
                    }
                }
            }
        }
    }
    image
}

fn v4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4-d node")
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let chunks = GRAD_CHUNKS.min(n.max(1));
    (0..chunks)
        .map(|i| (i * n / chunks, (i + 1) * n / chunks))
        .collect()
}

impl Tape {
    /// `x[B,IC,H,W] ⋆ w[OC,IC,k,k] + b[OC]` -> `[B,OC,OH,OW]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec) -> NodeId {
        let xs = v4(self.value(x));
        let (batch, ic, h, wd) = xs.dim();
        assert_eq!(ic, spec.in_ch, "conv2d: input channel mismatch");
        let (oh, ow) = spec.out_hw(h, wd);
        let w2 = weight_matrix_conv(v4(self.value(w)));
        let bias = v1(self.value(b)).to_owned();
        let per_sample = parallel::map_indexed(batch, |i| {
            let cols = im2col(xs.index_axis(ndarray::Axis(0), i), (oh, ow), spec.kernel, spec.stride, spec.pad);
            let mut y = w2.dot(&cols);
            for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
            y
        });
        let mut out = Array4::<f64>::zeros((batch, spec.out_ch, oh, ow));
        for (i, y) in per_sample.into_iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(y.as_slice().unwrap());
        }
        self.push_op(
            out.into_dyn(),
            &[x, w, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let xs = v4(t.value(x));
                    let ws = v4(t.value(w));
                    let gd = v4(g);
                    let (batch, _, h, wd) = xs.dim();
                    let (oh, ow) = spec.out_hw(h, wd);
                    let w2 = weight_matrix_conv(ws);
                    let ickk = spec.in_ch * spec.kernel * spec.kernel;
                    if t.wants(x) {
                        let dxs = parallel::map_indexed(batch, |i| {
                            let gy = flatten_hw(gd.index_axis(ndarray::Axis(0), i));
                            let dcols = w2.t().dot(&gy);
                            col2im(
                                dcols.view(),
                                (oh, ow),
                                spec.kernel,
                                spec.stride,
                                spec.pad,
                                (spec.in_ch, h, wd),
                            )
                        });
                        let mut dx = Array4::<f64>::zeros(xs.raw_dim());
                        for (i, d) in dxs.into_iter().enumerate() {
                            dx.index_axis_mut(ndarray::Axis(0), i).assign(&d);
                        }
                        grads.accum(x, dx.into_dyn());
                    }
                    if t.wants(w) {
                        let partials = parallel::map_indexed(chunk_ranges(batch).len(), |ci| {
                            let (lo, hi) = chunk_ranges(batch)[ci];
                            let mut acc = Array2::<f64>::zeros((spec.out_ch, ickk));
                            for i in lo..hi {
                                let cols = im2col(
                                    xs.index_axis(ndarray::Axis(0), i),
                                    (oh, ow),
                                    spec.kernel,
                                    spec.stride,
                                    spec.pad,
                                );
                                let gy = flatten_hw(gd.index_axis(ndarray::Axis(0), i));
                                acc += &gy.dot(&cols.t());
                            }
                            acc
                        });
                        let mut dw2 = Array2::<f64>::zeros((spec.out_ch, ickk));
                        for p in partials {
                            dw2 += &p;
                        }
                        let dw = dw2
                            .into_shape_with_order((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
                            .unwrap();
                        grads.accum(w, dw.into_dyn());
                    }
                    if t.wants(b) {
                        let mut db = Array1::<f64>::zeros(spec.out_ch);
                        for i in 0..batch {
                            for oc in 0..spec.out_ch {
                                db[oc] += gd
                                    .index_axis(ndarray::Axis(0), i)
                                    .index_axis(ndarray::Axis(0), oc)
                                    .sum();
                            }
                        }
                        grads.accum(b, db.into_dyn());
                    }
                }),
            },
        )
    }

    /// Transposed convolution `x[B,IC,H,W]`, `w[IC,OC,k,k]`, `b[OC]`
    /// -> `[B,OC,OH,OW]` with `OH = (H−1)·s − 2p + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvT2dSpec) -> NodeId {
        let xs = v4(self.value(x));
        let (batch, ic, h, wd) = xs.dim();
        assert_eq!(ic, spec.in_ch, "conv_transpose2d: input channel mismatch");
        assert!(spec.out_pad < spec.stride.max(1), "out_pad must be < stride");
        let (oh, ow) = spec.out_hw(h, wd);
        let w2 = weight_matrix_convt(v4(self.value(w)));
        let bias = v1(self.value(b)).to_owned();
        let per_sample = parallel::map_indexed(batch, |i| {
            let xmat = flatten_hw(xs.index_axis(ndarray::Axis(0), i));
            let cols = w2.t().dot(&xmat);
            let mut y = col2im(
                cols.view(),
                (h, wd),
                spec.kernel,
                spec.stride,
                spec.pad,
                (spec.out_ch, oh, ow),
            );
            for (mut plane, &bv) in y.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + bv);
            }
            y
        });
        let mut out = Array4::<f64>::zeros((batch, spec.out_ch, oh, ow));
        for (i, y) in per_sample.into_iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(&y);
        }
        self.push_op(
            out.into_dyn(),
            &[x, w, b],
            BackStep {
                run: Box::new(move |t, _v, g, grads| {
                    let xs = v4(t.value(x));
                    let ws = v4(t.value(w));
                    let gd = v4(g);
                    let (batch, _, h, wd) = xs.dim();
                    let w2 = weight_matrix_convt(ws);
                    let ockk = spec.out_ch * spec.kernel * spec.kernel;
                    if t.wants(x) {
                        let dxs = parallel::map_indexed(batch, |i| {
                            let dcols = im2col(
                                gd.index_axis(ndarray::Axis(0), i),
                                (h, wd),
                                spec.kernel,
                                spec.stride,
                                spec.pad,
                            );
                            w2.dot(&dcols)
                        });
                        let mut dx = Array4::<f64>::zeros(xs.raw_dim());
                        for (i, d) in dxs.into_iter().enumerate() {
                            dx.index_axis_mut(ndarray::Axis(0), i)
                                .as_slice_mut()
                                .unwrap()
                                .copy_from_slice(d.as_slice().unwrap());
                        }
                        grads.accum(x, dx.into_dyn());
                    }
                    if t.wants(w) {
                        let partials = parallel::map_indexed(chunk_ranges(batch).len(), |ci| {
                            let (lo, hi) = chunk_ranges(batch)[ci];
                            let mut acc = Array2::<f64>::zeros((spec.in_ch, ockk));
                            for i in lo..hi {
                                let dcols = im2col(
                                    gd.index_axis(ndarray::Axis(0), i),
                                    (h, wd),
                                    spec.kernel,
                                    spec.stride,
                                    spec.pad,
                                );
                                let xmat = flatten_hw(xs.index_axis(ndarray::Axis(0), i));
                                acc += &xmat.dot(&dcols.t());
                            }
                            acc
                        });
                        let mut dw2 = Array2::<f64>::zeros((spec.in_ch, ockk));
                        for p in partials {
                            dw2 += &p;
                        }
                        let dw = dw2
                            .into_shape_with_order((spec.in_ch, spec.out_ch, spec.kernel, spec.kernel))
                            .unwrap();
                        grads.accum(w, dw.into_dyn());
                    }
                    if t.wants(b) {
                        let mut db = Array1::<f64>::zeros(spec.out_ch);
                        for i in 0..batch {
                            for oc in 0..spec.out_ch {
                                db[oc] += gd
                                    .index_axis(ndarray::Axis(0), i)
                                    .index_axis(ndarray::Axis(0), oc)
                                    .sum();
                            }
                        }
                        grads.accum(b, db.into_dyn());
                    }
                }),
            },
        )
    }
}

/// `[OC,IC,k,k]` weights as a `[OC, IC·k·k]` GEMM operand.
fn weight_matrix_conv(w: ArrayView4<'_, f64>) -> Array2<f64> {
    let (oc, ic, k, _) = w.dim();
    w.to_owned().into_shape_with_order((oc, ic * k * k)).unwrap()
}

/// `[IC,OC,k,k]` weights as a `[IC, OC·k·k]` GEMM operand.
fn weight_matrix_convt(w: ArrayView4<'_, f64>) -> Array2<f64> {
    let (ic, oc, k, _) = w.dim();
    w.to_owned().into_shape_with_order((ic, oc * k * k)).unwrap()
}

/// `[C,H,W]` view flattened to `[C, H·W]`.
fn flatten_hw(a: ArrayView3<'_, f64>) -> Array2<f64> {
    let (c, h, w) = a.dim();
    a.to_owned().into_shape_with_order((c, h * w)).unwrap()
}

#[allow(dead_code)]
fn v1_owned(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

#[cfg(test)]
mod tests {
    use super::super::numeric_grad;
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, s: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(s, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct-loop convolution; the oracle the GEMM path is checked against.
    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        spec: Conv2dSpec,
    ) -> Array4<f64> {
        let (batch, _, h, wd) = x.dim();
        let (oh, ow) = spec.out_hw(h, wd);
        let mut out = Array4::<f64>::zeros((batch, spec.out_ch, oh, ow));
        for n in 0..batch {
            for oc in 0..spec.out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[oc];
                        for c in 0..spec.in_ch {
                            for ki in 0..spec.kernel {
                                for kj in 0..spec.kernel {
                                    let ih = (i * spec.stride + ki) as isize - spec.pad as isize;
                                    let iw = (j * spec.stride + kj) as isize - spec.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd
                                    {
                                        acc += x[[n, c, ih as usize, iw as usize]]
                                            * w[[oc, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[n, oc, i, j]] = acc;
                    }
                }
            }
        }
        out
    }

    /// Direct-loop transposed convolution oracle.
    fn convt2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        spec: ConvT2dSpec,
    ) -> Array4<f64> {
        let (batch, _, h, wd) = x.dim();
        let (oh, ow) = spec.out_hw(h, wd);
        let mut out = Array4::<f64>::zeros((batch, spec.out_ch, oh, ow));
        for n in 0..batch {
            for oc in 0..spec.out_ch {
                for plane in out
                    .index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), oc)
                    .iter_mut()
                {
                    *plane = b[oc];
                }
            }
            for c in 0..spec.in_ch {
                for i in 0..h {
                    for j in 0..wd {
                        for oc in 0..spec.out_ch {
                            for ki in 0..spec.kernel {
                                for kj in 0..spec.kernel {
                                    let ohh = (i * spec.stride + ki) as isize - spec.pad as isize;
                                    let oww = (j * spec.stride + kj) as isize - spec.pad as isize;
                                    if ohh >= 0
                                        && oww >= 0
                                        && (ohh as usize) < oh
                                        && (oww as usize) < ow
                                    {
                                        out[[n, oc, ohh as usize, oww as usize]] +=
                                            x[[n, c, i, j]] * w[[c, oc, ki, kj]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = Conv2dSpec { in_ch: 3, out_ch: 4, kernel: 3, stride: 2, pad: 1 };
        let x = rand4(&mut rng, (2, 3, 7, 7));
        let w = rand4(&mut rng, (4, 3, 3, 3));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
        let mut t = Tape::new();
        let (xn, wn, bn) = (
            t.constant(x.clone().into_dyn()),
            t.constant(w.clone().into_dyn()),
            t.constant(b.clone().into_dyn()),
        );
        let y = t.conv2d(xn, wn, bn, spec);
        let naive = conv2d_naive(&x, &w, &b, spec);
        let diff = (t.value(y) - &naive.into_dyn()).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn convt2d_matches_naive_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // 4 -> 7 with out_pad 0, then 7 -> 14 with out_pad 1 (the decoder path).
        for (hin, out_pad, hout) in [(4usize, 0usize, 7usize), (7, 1, 14)] {
            let spec = ConvT2dSpec {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
                out_pad,
            };
            assert_eq!(spec.out_hw(hin, hin).0, hout);
            let x = rand4(&mut rng, (2, 2, hin, hin));
            let w = rand4(&mut rng, (2, 3, 3, 3));
            let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
            let mut t = Tape::new();
            let (xn, wn, bn) = (
                t.constant(x.clone().into_dyn()),
                t.constant(w.clone().into_dyn()),
                t.constant(b.clone().into_dyn()),
            );
            let y = t.conv_transpose2d(xn, wn, bn, spec);
            let naive = convt2d_naive(&x, &w, &b, spec);
            let diff = (t.value(y) - &naive.into_dyn()).mapv(f64::abs);
            assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = Conv2dSpec { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let x = rand4(&mut rng, (2, 2, 6, 6));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));

        // w.r.t. input, weights and bias in turn
        for probe in 0..3 {
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            let at: ArrayD<f64> = match probe {
                0 => xc.clone().into_dyn(),
                1 => wc.clone().into_dyn(),
                _ => bc.clone().into_dyn(),
            };
            let build = move |t: &mut Tape, leaf: NodeId| {
                let xn = if probe == 0 { leaf } else { t.constant(xc.clone().into_dyn()) };
                let wn = if probe == 1 { leaf } else { t.constant(wc.clone().into_dyn()) };
                let bn = if probe == 2 { leaf } else { t.constant(bc.clone().into_dyn()) };
                let y = t.conv2d(xn, wn, bn, spec);
                let y2 = t.sqr(y);
                t.sum_all(y2)
            };
            let mut tape = Tape::new();
            let leaf = tape.leaf(at.clone());
            let root = build(&mut tape, leaf);
            let grads = tape.backward(root);
            let analytic = grads.dense(&tape, leaf);
            let numeric = numeric_grad(
                |v| {
                    let mut t = Tape::new();
                    let l = t.constant(v.clone());
                    let r = build(&mut t, l);
                    t.scalar(r)
                },
                &at,
                1e-6,
            );
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                assert!(
                    (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-5,
                    "probe {probe}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn convt2d_gradients_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = ConvT2dSpec { in_ch: 3, out_ch: 2, kernel: 3, stride: 2, pad: 1, out_pad: 1 };
        let x = rand4(&mut rng, (2, 3, 4, 4));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5));
        for probe in 0..3 {
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            let at: ArrayD<f64> = match probe {
                0 => xc.clone().into_dyn(),
                1 => wc.clone().into_dyn(),
                _ => bc.clone().into_dyn(),
            };
            let build = move |t: &mut Tape, leaf: NodeId| {
                let xn = if probe == 0 { leaf } else { t.constant(xc.clone().into_dyn()) };
                let wn = if probe == 1 { leaf } else { t.constant(wc.clone().into_dyn()) };
                let bn = if probe == 2 { leaf } else { t.constant(bc.clone().into_dyn()) };
                let y = t.conv_transpose2d(xn, wn, bn, spec);
                let y2 = t.sqr(y);
                t.sum_all(y2)
            };
            let mut tape = Tape::new();
            let leaf = tape.leaf(at.clone());
            let root = build(&mut tape, leaf);
            let grads = tape.backward(root);
            let analytic = grads.dense(&tape, leaf);
            let numeric = numeric_grad(
                |v| {
                    let mut t = Tape::new();
                    let l = t.constant(v.clone());
                    let r = build(&mut t, l);
                    t.scalar(r)
                },
                &at,
                1e-6,
            );
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                assert!(
                    (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-5,
                    "probe {probe}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn batched_conv_equals_single_sample_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let spec = Conv2dSpec { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let x = rand4(&mut rng, (4, 2, 6, 6));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let mut t = Tape::new();
        let (xn, wn, bn) = (
            t.constant(x.clone().into_dyn()),
            t.constant(w.clone().into_dyn()),
            t.constant(b.clone().into_dyn()),
        );
        let batched = t.conv2d(xn, wn, bn, spec);
        for i in 0..4 {
            let xi = x.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
            let mut t1 = Tape::new();
            let (x1, w1, b1) = (
                t1.constant(xi.into_dyn()),
                t1.constant(w.clone().into_dyn()),
                t1.constant(b.clone().into_dyn()),
            );
            let single = t1.conv2d(x1, w1, b1, spec);
            let bslice = v4(t.value(batched)).index_axis(Axis(0), i).to_owned();
            let sslice = v4(t1.value(single)).index_axis(Axis(0), 0).to_owned();
            assert_eq!(bslice, sslice, "sample {i} differs between batch sizes");
        }
    }
}
