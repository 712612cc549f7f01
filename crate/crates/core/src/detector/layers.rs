//! Minimal convolution layer with hand-written backward passes (CHW, f64).

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major `c`).
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches, given
    // that callers pass strides describing dense m×k / k×n views of `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `cout × (cin·kernel·kernel)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// He-uniform initialization.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: (0..cout * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![0.0; self.fan_in() * p];
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut x = vec![0.0; self.cin * h * w];
        for c in 0..self.cin {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvCache) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let (oh, ow) = self.out_size(h, w);
        let p = oh * ow;
        let col = self.im2col(x, h, w, oh, ow);
        let mut out = vec![0.0; self.cout * p];
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(self.bias[o]);
        }
        let kk = self.fan_in();
        gemm(
            self.cout,
            kk,
            p,
            &self.weight,
            (kk as isize, 1),
            &col,
            (p as isize, 1),
            1.0,
            &mut out,
        );
        (
            out,
            ConvCache {
                col,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Gradient with respect to the layer input.
    pub fn backward_input(&self, cache: &ConvCache, dout: &[f64]) -> Vec<f64> {
        let p = cache.out_h * cache.out_w;
        let kk = self.fan_in();
        let mut dcol = vec![0.0; kk * p];
        gemm(
            kk,
            self.cout,
            p,
            &self.weight,
            (1, kk as isize),
            dout,
            (p as isize, 1),
            0.0,
            &mut dcol,
        );
        self.col2im(&dcol, cache.in_h, cache.in_w, cache.out_h, cache.out_w)
    }

    /// Accumulates weight and bias gradients into `dw` / `db`.
    pub fn accumulate_param_grads(
        &self,
        cache: &ConvCache,
        dout: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) {
        let p = cache.out_h * cache.out_w;
        let kk = self.fan_in();
        gemm(
            self.cout,
            p,
            kk,
            dout,
            (p as isize, 1),
            &cache.col,
            (1, p as isize),
            1.0,
            dw,
        );
        for (o, chunk) in dout.chunks(p).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the (post-activation) output was not positive.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = conv.out_size(h, w);
        let k = conv.kernel;
        let mut out = vec![0.0; conv.cout * oh * ow];
        for o in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[o * conv.fan_in() + (c * k + ky) * k + kx]
                                    * x[c * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let mut conv = Conv2d::new(3, 4, 3, stride, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let (h, w) = (7, 6);
            let x: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, _) = conv.forward(&x, h, w);
            let expect = naive_conv(&conv, &x, h, w);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let (h, w) = (5, 5);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, cache) = conv.forward(&x, h, w);
        let upstream: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |conv: &Conv2d, x: &[f64]| -> f64 {
            conv.forward(x, h, w)
                .0
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dx = conv.backward_input(&cache, &upstream);
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; conv.bias.len()];
        conv.accumulate_param_grads(&cache, &upstream, &mut dw, &mut db);
        let step = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += step;
            let mut xm = x.clone();
            xm[i] -= step;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * step);
            assert!((fd - dx[i]).abs() < 1e-7, "input {i}: {fd} vs {}", dx[i]);
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight[i] += step;
            let mut cm = conv.clone();
            cm.weight[i] -= step;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * step);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        let upstream_sum: Vec<f64> = upstream.chunks(out.len() / 3).map(|c| c.iter().sum()).collect();
        for (a, b) in db.iter().zip(&upstream_sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
