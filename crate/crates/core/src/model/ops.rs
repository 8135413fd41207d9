//! Dense row-major kernels shared by the reference networks.
//!
//! Weight matrices are stored `[in, out]`, so a batch of rows `x` (n × in)
//! maps to `x · W + b` (n × out).

/// Offsets of an affine map inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Affine {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Affine {
    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.inp);
        let w = &p[self.w..self.w + self.inp * self.out];
        let b = &p[self.b..self.b + self.out];
        let mut y = Vec::with_capacity(n * self.out);
        for r in 0..n {
            y.extend_from_slice(b);
            let row = &mut y[r * self.out..];
            for (i, &xi) in x[r * self.inp..(r + 1) * self.inp].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (yo, &wio) in row[..self.out].iter_mut().zip(&w[i * self.out..(i + 1) * self.out]) {
                    *yo += xi * wio;
                }
            }
        }
        y
    }

    /// Accumulates weight and bias gradients into `grad` and returns dL/dx.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], n: usize, grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(dy.len(), n * self.out);
        {
            let gw = &mut grad[self.w..self.w + self.inp * self.out];
            for r in 0..n {
                let dyr = &dy[r * self.out..(r + 1) * self.out];
                for (i, &xi) in x[r * self.inp..(r + 1) * self.inp].iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &d) in gw[i * self.out..(i + 1) * self.out].iter_mut().zip(dyr) {
                        *g += xi * d;
                    }
                }
            }
        }
        {
            let gb = &mut grad[self.b..self.b + self.out];
            for r in 0..n {
                for (g, &d) in gb.iter_mut().zip(&dy[r * self.out..(r + 1) * self.out]) {
                    *g += d;
                }
            }
        }
        let w = &p[self.w..self.w + self.inp * self.out];
        let mut dx = vec![0.0; n * self.inp];
        for r in 0..n {
            let dyr = &dy[r * self.out..(r + 1) * self.out];
            for i in 0..self.inp {
                dx[r * self.inp + i] = w[i * self.out..(i + 1) * self.out]
                    .iter()
                    .zip(dyr)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        dx
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> (Vec<f64>, LnCache) {
        let d = self.dim;
        let g = &p[self.gain..self.gain + d];
        let b = &p[self.bias..self.bias + d];
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let xh = (row[k] - mean) * is;
                xhat[r * d + k] = xh;
                y[r * d + k] = g[k] * xh + b[k];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &LnCache, dy: &[f64], n: usize, grad: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        for r in 0..n {
            for k in 0..d {
                grad[self.gain + k] += dy[r * d + k] * cache.xhat[r * d + k];
                grad[self.bias + k] += dy[r * d + k];
            }
        }
        let g = &p[self.gain..self.gain + d];
        let mut dx = vec![0.0; n * d];
        for r in 0..n {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dxh: Vec<f64> = (0..d).map(|k| dy[r * d + k] * g[k]).collect();
            let m1 = dxh.iter().sum::<f64>() / d as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for k in 0..d {
                dx[r * d + k] = cache.inv_std[r] * (dxh[k] - m1 - xh[k] * m2);
            }
        }
        dx
    }
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}
