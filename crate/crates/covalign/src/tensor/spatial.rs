//! Spatial operations: 2-D cross-correlation, per-pixel channel softmax,
//! and bilinear upsampling.
//!
//! Bilinear convention (align-corners-false): an output index `o` along an
//! axis of `out` samples maps to the source coordinate
//!
//! ```text
//! src = clamp((o + 0.5) * (in / out) - 0.5, 0, in - 1)
//! i0 = floor(src);  i1 = min(i0 + 1, in - 1);  f = src - i0
//! value = (1 - f) * x[i0] + f * x[i1]
//! ```
//!
//! applied separably to rows and columns. The operator is linear, so its
//! gradient is the transpose scatter of the same weights.

use super::{Tape, Tensor};

impl Tape {
    /// Cross-correlation of `input [Cin,H,W]` with `kernel [Cout,Cin,k,k]`.
    ///
    /// `k` must be odd and the output extents
    /// `H' = (H + 2*padding - k) / stride + 1` (likewise `W'`) must be at
    /// least 1. Registers exact analytic gradients for both operands.
    pub fn conv2d(&self, input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
        let is = input.shape();
        let ks = kernel.shape();
        assert_eq!(is.len(), 3, "conv2d: input must be [Cin,H,W], got {is:?}");
        assert_eq!(
            ks.len(),
            4,
            "conv2d: kernel must be [Cout,Cin,k,k], got {ks:?}"
        );
        let (cin, h, w) = (is[0], is[1], is[2]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        assert_eq!(kcin, cin, "conv2d: channel mismatch {cin} vs kernel {kcin}");
        assert_eq!(kh, kw, "conv2d: kernel must be square, got {kh}x{kw}");
        assert!(kh % 2 == 1, "conv2d: kernel size {kh} must be odd");
        assert!(stride >= 1, "conv2d: stride must be positive");
        let k = kh;
        assert!(
            h + 2 * padding >= k && w + 2 * padding >= k,
            "conv2d: kernel {k} exceeds padded input {h}x{w}+2*{padding}"
        );
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;

        let data = {
            let (xi, xk) = (input.data(), kernel.data());
            conv2d_forward(&xi, cin, h, w, &xk, cout, k, stride, padding, oh, ow)
        };
        let rg = self.wants_grad(&[input, kernel]);
        let out = self.emit("conv2d", vec![cout, oh, ow], data, rg);
        if rg {
            let (inp, ker, o) = (input.clone(), kernel.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if inp.requires_grad() {
                    let d = {
                        let xk = ker.data();
                        conv2d_grad_input(&g, cin, h, w, &xk, cout, k, stride, padding, oh, ow)
                    };
                    inp.accumulate_grad(&d);
                }
                if ker.requires_grad() {
                    let d = {
                        let xi = inp.data();
                        conv2d_grad_kernel(&g, &xi, cin, h, w, cout, k, stride, padding, oh, ow)
                    };
                    ker.accumulate_grad(&d);
                }
            });
        }
        out
    }

    /// Per-pixel softmax over the channel axis of `[N,H,W]`, stabilized by
    /// max subtraction. Every pixel's channel values sum to 1.
    pub fn softmax_channel(&self, logits: &Tensor) -> Tensor {
        let s = logits.shape();
        assert_eq!(s.len(), 3, "softmax_channel: expected [N,H,W], got {s:?}");
        let (n, h, w) = (s[0], s[1], s[2]);
        assert!(n >= 2, "softmax_channel: need at least 2 channels");
        let hw = h * w;
        let data = {
            let x = logits.data();
            let mut y = vec![0.0; n * hw];
            for p in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..n {
                    mx = mx.max(x[c * hw + p]);
                }
                let mut z = 0.0;
                for c in 0..n {
                    let e = (x[c * hw + p] - mx).exp();
                    y[c * hw + p] = e;
                    z += e;
                }
                for c in 0..n {
                    y[c * hw + p] /= z;
                }
            }
            y
        };
        let rg = self.wants_grad(&[logits]);
        let out = self.emit("softmax_channel", vec![n, h, w], data, rg);
        if rg {
            let (t, o) = (logits.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d = {
                    let y = o.data();
                    let mut d = vec![0.0; n * hw];
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += g[c * hw + p] * y[c * hw + p];
                        }
                        for c in 0..n {
                            d[c * hw + p] = y[c * hw + p] * (g[c * hw + p] - dot);
                        }
                    }
                    d
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// Bilinear upsampling of `[N,h,w]` to `[N,out_h,out_w]` using the
    /// align-corners-false convention documented in the module header.
    pub fn upsample_bilinear(&self, t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
        let s = t.shape();
        assert_eq!(s.len(), 3, "upsample_bilinear: expected [N,h,w], got {s:?}");
        let (n, h, w) = (s[0], s[1], s[2]);
        assert!(
            out_h >= h && out_w >= w,
            "upsample_bilinear: output {out_h}x{out_w} smaller than input {h}x{w}"
        );
        let ys = axis_samples(h, out_h);
        let xs = axis_samples(w, out_w);
        let data = {
            let x = t.data();
            let mut y = vec![0.0; n * out_h * out_w];
            for c in 0..n {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let r0 = &plane[y0 * w..y0 * w + w];
                    let r1 = &plane[y1 * w..y1 * w + w];
                    let orow = &mut y[(c * out_h + oy) * out_w..(c * out_h + oy + 1) * out_w];
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                        let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                        orow[ox] = (1.0 - fy) * top + fy * bot;
                    }
                }
            }
            y
        };
        let rg = self.wants_grad(&[t]);
        let out = self.emit("upsample_bilinear", vec![n, out_h, out_w], data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let mut d = vec![0.0; n * h * w];
                for c in 0..n {
                    let plane = &mut d[c * h * w..(c + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let go = g[(c * out_h + oy) * out_w + ox];
                            plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * go;
                            plane[y0 * w + x1] += (1.0 - fy) * fx * go;
                            plane[y1 * w + x0] += fy * (1.0 - fx) * go;
                            plane[y1 * w + x1] += fy * fx * go;
                        }
                    }
                }
                t.accumulate_grad(&d);
            });
        }
        out
    }
}

/// Per-output-index sampling table `(i0, i1, frac)` for one axis.
fn axis_samples(inn: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inn as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5)
                .max(0.0)
                .min((inn - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inn - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Valid output range along one axis for a given kernel offset, or `None`
/// if no output position reads inside the input.
fn valid_range(
    out: usize,
    inn: usize,
    stride: usize,
    koff: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    let s = stride as i64;
    let lo_num = pad as i64 - koff as i64;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = inn as i64 - 1 + pad as i64 - koff as i64;
    if hi_num < 0 {
        return None;
    }
    let hi = (out as i64 - 1).min(hi_num / s);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            let kbase = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                let Some((oy_lo, oy_hi)) = valid_range(oh, h, stride, ky, pad) else {
                    continue;
                };
                for kx in 0..k {
                    let wgt = kernel[kbase + ky * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = valid_range(ow, w, stride, kx, pad) else {
                        continue;
                    };
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let irow = iy * w;
                        let orow = (co * oh + oy) * ow;
                        let mut ix = ox_lo * stride + kx - pad;
                        for ox in ox_lo..=ox_hi {
                            out[orow + ox] += wgt * plane[irow + ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input(
    g: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut d = vec![0.0; cin * h * w];
    for co in 0..cout {
        for ci in 0..cin {
            let plane = &mut d[ci * h * w..(ci + 1) * h * w];
            let kbase = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                let Some((oy_lo, oy_hi)) = valid_range(oh, h, stride, ky, pad) else {
                    continue;
                };
                for kx in 0..k {
                    let wgt = kernel[kbase + ky * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi)) = valid_range(ow, w, stride, kx, pad) else {
                        continue;
                    };
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let irow = iy * w;
                        let orow = (co * oh + oy) * ow;
                        let mut ix = ox_lo * stride + kx - pad;
                        for ox in ox_lo..=ox_hi {
                            plane[irow + ix] += wgt * g[orow + ox];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
    d
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_kernel(
    g: &[f64],
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut d = vec![0.0; cout * cin * k * k];
    for co in 0..cout {
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            let kbase = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                let Some((oy_lo, oy_hi)) = valid_range(oh, h, stride, ky, pad) else {
                    continue;
                };
                for kx in 0..k {
                    let Some((ox_lo, ox_hi)) = valid_range(ow, w, stride, kx, pad) else {
                        continue;
                    };
                    let mut acc = 0.0;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - pad;
                        let irow = iy * w;
                        let orow = (co * oh + oy) * ow;
                        let mut ix = ox_lo * stride + kx - pad;
                        for ox in ox_lo..=ox_hi {
                            acc += g[orow + ox] * plane[irow + ix];
                            ix += stride;
                        }
                    }
                    d[kbase + ky * k + kx] += acc;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Naive six-nested-loop reference for cross-correlation, written
    /// independently of the production kernel.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        input: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        kernel: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as i64 * stride as i64 + ky as i64 - pad as i64;
                                let ix = ox as i64 * stride as i64 + kx as i64 - pad as i64;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    acc += input[(ci * h + iy as usize) * w + ix as usize]
                                        * kernel[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn box_sum_identity() {
        let tape = Tape::new();
        let input = Tensor::from_vec(&[1, 3, 3], vec![1.0; 9]);
        let kernel = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let out = tape.conv2d(&input, &kernel, 1, 1);
        let v = out.to_vec();
        assert_eq!(v[4], 9.0); // center
        assert_eq!(v[0], 4.0); // corner
        assert_eq!(v[8], 4.0);
        assert_eq!(v[1], 6.0); // edge
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(&[2, 4, 4], data.clone());
        let mut kvals = vec![0.0; 2 * 2 * 9];
        kvals[4] = 1.0; // out channel 0 <- in channel 0, center tap
        kvals[3 * 9 + 4] = 1.0; // out channel 1 <- in channel 1
        let kernel = Tensor::from_vec(&[2, 2, 3, 3], kvals);
        let tape = Tape::new();
        let out = tape.conv2d(&input, &kernel, 1, 1);
        assert_eq!(out.to_vec(), data);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let input: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv_oracle(&input, 2, 5, 5, &kernel, 3, 3, stride, pad);
            let tape = Tape::new();
            let out = tape.conv2d(
                &Tensor::from_vec(&[2, 5, 5], input.clone()),
                &Tensor::from_vec(&[3, 2, 3, 3], kernel.clone()),
                stride,
                pad,
            );
            let got = out.to_vec();
            assert_eq!(got.len(), expect.len());
            for (a, e) in got.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let tape = Tape::new();
        let logits = Tensor::zeros(&[7, 2, 2]);
        let y = tape.softmax_channel(&logits);
        for v in y.to_vec() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_under_huge_logits() {
        let tape = Tape::new();
        let mut vals = vec![0.0; 3 * 1];
        vals[0] = 1000.0;
        let logits = Tensor::from_vec(&[3, 1, 1], vals);
        let y = tape.softmax_channel(&logits).to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1] >= 0.0 && y[2] >= 0.0);
    }

    #[test]
    fn softmax_channel_sums_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vals: Vec<f64> = (0..3 * 2 * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tape = Tape::new();
        let y = tape
            .softmax_channel(&Tensor::from_vec(&[3, 2, 2], vals))
            .to_vec();
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| y[c * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_input_stays_constant() {
        let tape = Tape::new();
        let t = Tensor::full(&[1, 2, 2], 0.7);
        let u = tape.upsample_bilinear(&t, 8, 8);
        for v in u.to_vec() {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn upsample_single_pixel_broadcasts() {
        let tape = Tape::new();
        let t = Tensor::from_vec(&[1, 1, 1], vec![-2.5]);
        let u = tape.upsample_bilinear(&t, 4, 4);
        for v in u.to_vec() {
            assert_eq!(v, -2.5);
        }
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_hand_evaluation() {
        // Hand evaluation of the documented convention for input
        // [[0,1],[2,3]]: fractions along each axis are (0, .25, .75, 0)
        // with index pairs (0,1),(0,1),(0,1),(1,1).
        let tape = Tape::new();
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let u = tape.upsample_bilinear(&t, 4, 4).to_vec();
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, e) in u.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Vec<f64> = (0..bytes(1, 4, 4)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |inp: &[f64], ker: &[f64]| {
            let tape = Tape::inference();
            let out = tape.conv2d(
                &Tensor::from_vec(&[1, 4, 4], inp.to_vec()),
                &Tensor::from_vec(&[2, 1, 3, 3], ker.to_vec()),
                1,
                1,
            );
            tape.mean(&tape.mul(&out, &out)).item()
        };

        let tape = Tape::new();
        let ti = Tensor::param(&[1, 4, 4], input.clone());
        let tk = Tensor::param(&[2, 1, 3, 3], kernel.clone());
        let out = tape.conv2d(&ti, &tk, 1, 1);
        let loss = tape.mean(&tape.mul(&out, &out));
        tape.backward(&loss);

        let h = 1e-5;
        let gi = ti.grad().unwrap();
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += h;
            let up = loss_of(&p, &kernel);
            p[i] -= 2.0 * h;
            let dn = loss_of(&p, &kernel);
            let fd = (up - dn) / (2.0 * h);
            assert!((gi[i] - fd).abs() / fd.abs().max(1.0) < 1e-6);
        }
        let gk = tk.grad().unwrap();
        for i in 0..kernel.len() {
            let mut p = kernel.clone();
            p[i] += h;
            let up = loss_of(&input, &p);
            p[i] -= 2.0 * h;
            let dn = loss_of(&input, &p);
            let fd = (up - dn) / (2.0 * h);
            assert!((gk[i] - fd).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }

    fn bytes(c: usize, h: usize, w: usize) -> usize {
        c * h * w
    }
}
