//! Minimal neural-network building blocks: convolution via column
//! unrolling and matrix multiply, pooling, bilinear resampling, and an
//! adaptive-moment optimizer. Everything is `f32`, single precision being
//! plenty for image-to-image regression, and every backward pass is the
//! exact adjoint of its forward so gradient checks close to rounding.

use ndarray::{Array2, Array4, ArrayView2};
use rand_chacha::ChaCha8Rng;

// --- random init -------------------------------------------------------------

/// Standard normal draw (Box-Muller); `rand` ships only uniform sources.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// --- im2col / col2im ---------------------------------------------------------

/// Unroll sliding `k x k` windows (stride 1, zero padding `pad`) into a
/// `(C*k*k, B*H*W)` column matrix so convolution becomes one gemm.
pub fn im2col(x: &Array4<f32>, k: usize, pad: usize) -> Array2<f32> {
    let (b_n, c_n, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c_n * k * k, b_n * h * w));
    for b in 0..b_n {
        for c in 0..c_n {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for i in 0..h {
                        let si = i as i64 + ki as i64 - pad as i64;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as i64 + kj as i64 - pad as i64;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            cols[[row, (b * h + i) * w + j]] =
                                x[[b, c, si as usize, sj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add columns back onto the image grid.
pub fn col2im(cols: &Array2<f32>, dim: (usize, usize, usize, usize), k: usize, pad: usize) -> Array4<f32> {
    let (b_n, c_n, h, w) = dim;
    let mut x = Array4::<f32>::zeros(dim);
    for b in 0..b_n {
        for c in 0..c_n {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for i in 0..h {
                        let si = i as i64 + ki as i64 - pad as i64;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as i64 + kj as i64 - pad as i64;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            x[[b, c, si as usize, sj as usize]] +=
                                cols[[row, (b * h + i) * w + j]];
                        }
                    }
                }
            }
        }
    }
    x
}

// --- convolution -------------------------------------------------------------

/// Same-padded stride-1 convolution; weights stored pre-unrolled as
/// `(out_ch, in_ch*k*k)` so forward and both backward products are gemms.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f32>,
    pub bias: Vec<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        let fan_in = in_ch * k * k;
        let scale = (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| (randn(rng) * scale) as f32);
        Conv2d {
            weight,
            bias: vec![0.0; out_ch],
            in_ch,
            out_ch,
            k,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b_n, c_n, h, w) = x.dim();
        assert_eq!(c_n, self.in_ch, "channel mismatch");
        let pad = self.k / 2;
        let cols = im2col(x, self.k, pad);
        let out2 = self.weight.dot(&cols);
        let mut out = Array4::<f32>::zeros((b_n, self.out_ch, h, w));
        for b in 0..b_n {
            for o in 0..self.out_ch {
                let bias = self.bias[o];
                for i in 0..h {
                    for j in 0..w {
                        out[[b, o, i, j]] = out2[[o, (b * h + i) * w + j]] + bias;
                    }
                }
            }
        }
        out
    }

    /// Gradients w.r.t. input, weight, and bias. The input columns are
    /// recomputed rather than cached; they are too large to keep per layer.
    pub fn backward(
        &self,
        x: &Array4<f32>,
        grad_out: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>, Vec<f32>) {
        let (b_n, _, h, w) = x.dim();
        let pad = self.k / 2;
        let mut go2 = Array2::<f32>::zeros((self.out_ch, b_n * h * w));
        let mut grad_bias = vec![0.0f32; self.out_ch];
        for b in 0..b_n {
            for o in 0..self.out_ch {
                let mut acc = 0.0f32;
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_out[[b, o, i, j]];
                        go2[[o, (b * h + i) * w + j]] = g;
                        acc += g;
                    }
                }
                grad_bias[o] += acc;
            }
        }
        let cols = im2col(x, self.k, pad);
        let grad_weight = go2.dot(&cols.t());
        let grad_cols = self.weight.t().dot(&go2);
        let grad_x = col2im(&grad_cols, x.dim(), self.k, pad);
        (grad_x, grad_weight, grad_bias)
    }
}

// --- activations and pooling -------------------------------------------------

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array4<f32>, grad_out: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// 2x2 max pooling (stride 2). Returns the pooled map and the winning slot
/// (0..4, row-major within the window) for the backward scatter.
pub fn maxpool2(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (b_n, c_n, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents");
    let mut y = Array4::<f32>::zeros((b_n, c_n, h / 2, w / 2));
    let mut idx = Array4::<u8>::zeros((b_n, c_n, h / 2, w / 2));
    for b in 0..b_n {
        for c in 0..c_n {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut best = f32::NEG_INFINITY;
                    let mut slot = 0u8;
                    for s in 0..4u8 {
                        let v = x[[b, c, 2 * i + (s / 2) as usize, 2 * j + (s % 2) as usize]];
                        if v > best {
                            best = v;
                            slot = s;
                        }
                    }
                    y[[b, c, i, j]] = best;
                    idx[[b, c, i, j]] = slot;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(grad_out: &Array4<f32>, idx: &Array4<u8>, in_dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let (b_n, c_n, oh, ow) = grad_out.dim();
    let mut g = Array4::<f32>::zeros(in_dim);
    for b in 0..b_n {
        for c in 0..c_n {
            for i in 0..oh {
                for j in 0..ow {
                    let s = idx[[b, c, i, j]];
                    g[[b, c, 2 * i + (s / 2) as usize, 2 * j + (s % 2) as usize]] +=
                        grad_out[[b, c, i, j]];
                }
            }
        }
    }
    g
}

// --- bilinear resampling -----------------------------------------------------

/// Source coordinate for output pixel `o` when resizing `n_in -> n_out`
/// with half-pixel centers, clamped to the valid range.
fn src_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let s = s.clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Bilinear resize of a single-channel image.
pub fn resize_bilinear(x: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let mut y = Array2::<f32>::zeros((out_h, out_w));
    for i in 0..out_h {
        let (i0, i1, fi) = src_coord(i, h, out_h);
        for j in 0..out_w {
            let (j0, j1, fj) = src_coord(j, w, out_w);
            y[[i, j]] = (1.0 - fi) * ((1.0 - fj) * x[[i0, j0]] + fj * x[[i0, j1]])
                + fi * ((1.0 - fj) * x[[i1, j0]] + fj * x[[i1, j1]]);
        }
    }
    y
}

/// Double the spatial extent of every channel bilinearly.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (b_n, c_n, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((b_n, c_n, 2 * h, 2 * w));
    for b in 0..b_n {
        for c in 0..c_n {
            let plane = resize_bilinear(
                x.index_axis(ndarray::Axis(0), b).index_axis(ndarray::Axis(0), c),
                2 * h,
                2 * w,
            );
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y[[b, c, i, j]] = plane[[i, j]];
                }
            }
        }
    }
    y
}

/// Exact adjoint of `upsample2`: distribute each output gradient onto the
/// source pixels with the interpolation weights.
pub fn upsample2_adjoint(grad_out: &Array4<f32>) -> Array4<f32> {
    let (b_n, c_n, oh, ow) = grad_out.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Array4::<f32>::zeros((b_n, c_n, h, w));
    for b in 0..b_n {
        for c in 0..c_n {
            for i in 0..oh {
                let (i0, i1, fi) = src_coord(i, h, oh);
                for j in 0..ow {
                    let (j0, j1, fj) = src_coord(j, w, ow);
                    let gv = grad_out[[b, c, i, j]];
                    g[[b, c, i0, j0]] += (1.0 - fi) * (1.0 - fj) * gv;
                    g[[b, c, i0, j1]] += (1.0 - fi) * fj * gv;
                    g[[b, c, i1, j0]] += fi * (1.0 - fj) * gv;
                    g[[b, c, i1, j1]] += fi * fj * gv;
                }
            }
        }
    }
    g
}

// --- optimizer ---------------------------------------------------------------

/// Adaptive-moment gradient descent over one flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t);
        let b2c = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut r = rng(seed);
        Array4::from_shape_fn(dim, |_| r.gen_range(-1.0f32..1.0))
    }

    fn dot4(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let x = random4((2, 3, 5, 4), 1);
        let cols = im2col(&x, 3, 1);
        let mut r = rng(2);
        let c = Array2::from_shape_fn(cols.dim(), |_| r.gen_range(-1.0f32..1.0));
        let lhs: f64 = cols.iter().zip(c.iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let back = col2im(&c, x.dim(), 3, 1);
        let rhs = dot4(&x, &back);
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = random4((1, 2, 6, 6), 3);
        let mut conv = Conv2d::new(2, 2, 3, &mut rng(4));
        conv.weight.fill(0.0);
        for c in 0..2 {
            conv.weight[[c, c * 9 + 4]] = 1.0; // center tap of channel c
        }
        conv.bias = vec![0.0; 2];
        let y = conv.forward(&x);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x1x2x2 input, 3x3 averaging kernel with zero padding.
        let mut x = Array4::<f32>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = 2.0;
        x[[0, 0, 1, 0]] = 3.0;
        x[[0, 0, 1, 1]] = 4.0;
        let mut conv = Conv2d::new(1, 1, 3, &mut rng(5));
        conv.weight.fill(1.0);
        conv.bias = vec![0.5];
        let y = conv.forward(&x);
        // Every output sees all four inputs (kernel covers the whole image).
        for v in y.iter() {
            assert!((v - 10.5).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_backward_matches_directional_derivative() {
        let x = random4((2, 3, 6, 5), 6);
        let conv = Conv2d::new(3, 4, 3, &mut rng(7));
        let r = random4((2, 4, 6, 5), 8);
        // L = <conv(x), r> is linear in x, so <grad_x, dx> = L(x+dx) - L(x)
        // exactly (up to rounding).
        let y = conv.forward(&x);
        let l0 = dot4(&y, &r);
        let (gx, gw, gb) = conv.backward(&x, &r);
        let dx = random4(x.dim(), 9);
        let y1 = conv.forward(&(&x + &dx.mapv(|v| v * 1e-2)));
        let l1 = dot4(&y1, &r);
        let predicted: f64 = dot4(&gx, &dx) * 1e-2;
        assert!(
            ((l1 - l0) - predicted).abs() < 1e-3 * predicted.abs().max(1e-6),
            "dL {} vs predicted {}",
            l1 - l0,
            predicted
        );
        // Same trick for the weight gradient.
        let mut conv2 = conv.clone();
        let mut rw = rng(10);
        let dw = Array2::from_shape_fn(conv.weight.dim(), |_| rw.gen_range(-1.0f32..1.0));
        conv2.weight = &conv.weight + &dw.mapv(|v| v * 1e-2);
        let l2 = dot4(&conv2.forward(&x), &r);
        let pred_w: f64 = gw
            .iter()
            .zip(dw.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum::<f64>()
            * 1e-2;
        assert!(((l2 - l0) - pred_w).abs() < 1e-3 * pred_w.abs().max(1e-6));
        // Bias gradient is the plain sum of output gradients.
        let by_hand: f32 = r.index_axis(ndarray::Axis(1), 0).iter().sum();
        assert!((gb[0] - by_hand).abs() < 1e-4 * by_hand.abs().max(1.0));
    }

    #[test]
    fn maxpool_selects_maximum_and_routes_gradient() {
        let mut x = Array4::<f32>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = 5.0;
        x[[0, 0, 1, 0]] = 2.0;
        x[[0, 0, 1, 1]] = 3.0;
        let (y, idx) = maxpool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let mut g = Array4::<f32>::zeros((1, 1, 1, 1));
        g[[0, 0, 0, 0]] = 7.0;
        let gx = maxpool2_backward(&g, &idx, x.dim());
        assert_eq!(gx[[0, 0, 0, 1]], 7.0);
        assert_eq!(gx.sum(), 7.0);
    }

    #[test]
    fn relu_zeroes_negative_gradients() {
        let x = random4((1, 2, 4, 4), 11);
        let y = relu(&x);
        assert!(y.iter().all(|v| *v >= 0.0));
        let g = random4(x.dim(), 12);
        let gx = relu_backward(&x, &g);
        for ((xv, gv), gxv) in x.iter().zip(g.iter()).zip(gx.iter()) {
            if *xv > 0.0 {
                assert_eq!(gv, gxv);
            } else {
                assert_eq!(*gxv, 0.0);
            }
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Array4::<f32>::from_elem((1, 2, 4, 4), 3.25);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 2, 8, 8));
        for v in y.iter() {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_and_adjoint_satisfy_dot_identity() {
        let x = random4((2, 3, 4, 5), 13);
        let y = upsample2(&x);
        let g = random4(y.dim(), 14);
        let lhs = dot4(&y, &g);
        let rhs = dot4(&x, &upsample2_adjoint(&g));
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn resize_trivial_inputs() {
        let zero = Array2::<f32>::zeros((16, 13));
        assert!(resize_bilinear(zero.view(), 64, 64).iter().all(|v| *v == 0.0));
        let c = Array2::<f32>::from_elem((16, 13), 2.5);
        let y = resize_bilinear(c.view(), 64, 64);
        for v in y.iter() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_hot_corner_stays_in_corner_block() {
        let mut x = Array2::<f32>::zeros((16, 13));
        x[[0, 0]] = 1.0;
        let y = resize_bilinear(x.view(), 64, 64);
        let mut best = (0usize, 0usize);
        let mut best_v = f32::NEG_INFINITY;
        for i in 0..64 {
            for j in 0..64 {
                if y[[i, j]] > best_v {
                    best_v = y[[i, j]];
                    best = (i, j);
                }
            }
        }
        // One source cell maps to roughly a 4x5 block of output pixels.
        assert!(best.0 < 4 && best.1 < 5, "max at {best:?}");
        assert!(best_v > 0.9);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f32];
        let mut opt = Adam::new(1);
        opt.step(&mut p, &[0.3], 0.05);
        // Bias correction makes the first update exactly lr-sized.
        assert!((p[0] - (1.0 - 0.05)).abs() < 1e-4);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f32, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }
}
