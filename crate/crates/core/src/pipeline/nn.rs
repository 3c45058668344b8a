//! The handful of layers the toy models need, on B×C×H×W tensors.

use ndarray::{concatenate, Array4, Axis};

use crate::rng::{keyed_stream, standard_normals};
use crate::tensor::ActivationTensor;

/// Deterministic weights: N(0,1)·scale from a stream keyed by (seed, name).
pub(crate) fn init_normals(init_seed: u64, name: &str, n: usize, scale: f32) -> Vec<f32> {
    let mut rng = keyed_stream("toy-weights", &[&init_seed.to_le_bytes(), name.as_bytes()]);
    standard_normals(&mut rng, n).into_iter().map(|v| v * scale).collect()
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    cin: usize,
    cout: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv2d {
    pub(crate) fn init(init_seed: u64, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = (cin * 9) as f32;
        Self {
            cin,
            cout,
            weight: init_normals(init_seed, &format!("{name}.weight"), cout * cin * 9, (2.0 / fan_in).sqrt()),
            bias: init_normals(init_seed, &format!("{name}.bias"), cout, 0.1),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.cout, self.cin, 3, 3], vec![self.cout]]
    }

    pub fn forward(&self, x: &ActivationTensor) -> ActivationTensor {
        let [b, cin, h, w] = x.shape();
        assert_eq!(cin, self.cin, "conv input channels");
        let xs = x.as_slice();
        let plane = h * w;
        let mut out = vec![0f32; b * self.cout * plane];
        for bi in 0..b {
            for co in 0..self.cout {
                let o = &mut out[(bi * self.cout + co) * plane..][..plane];
                o.fill(self.bias[co]);
                for ci in 0..cin {
                    let src = &xs[(bi * cin + ci) * plane..][..plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = self.weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                            let dx = kx as isize - 1;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx).min(w as isize) as usize;
                            for y in 0..h {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let srow = &src[sy as usize * w..][..w];
                                let orow = &mut o[y * w..][..w];
                                for xx in x0..x1 {
                                    orow[xx] += wv * srow[(xx as isize + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        ActivationTensor::from_vec([b, self.cout, h, w], out).expect("conv output shape")
    }
}

pub(crate) fn silu(x: &ActivationTensor) -> ActivationTensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

pub(crate) fn tanh(x: &ActivationTensor) -> ActivationTensor {
    x.map(f32::tanh)
}

/// 2×2 average pooling; H and W must be even.
pub(crate) fn avg_pool2(x: &ActivationTensor) -> ActivationTensor {
    let [b, c, h, w] = x.shape();
    let a = x.array();
    let out = Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, y, xx)| {
        let (y, xx) = (2 * y, 2 * xx);
        (a[[bi, ci, y, xx]] + a[[bi, ci, y, xx + 1]] + a[[bi, ci, y + 1, xx]] + a[[bi, ci, y + 1, xx + 1]]) * 0.25
    });
    ActivationTensor::new(out).expect("pool shape")
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(x: &ActivationTensor) -> ActivationTensor {
    let [b, c, h, w] = x.shape();
    let a = x.array();
    let out = Array4::from_shape_fn((b, c, h * 2, w * 2), |(bi, ci, y, xx)| a[[bi, ci, y / 2, xx / 2]]);
    ActivationTensor::new(out).expect("upsample shape")
}

pub(crate) fn cat_channels(a: &ActivationTensor, b: &ActivationTensor) -> ActivationTensor {
    let joined = concatenate(Axis(1), &[a.array().view(), b.array().view()]).expect("matching spatial dims");
    ActivationTensor::new(joined).expect("cat shape")
}

/// Add `bias[c]` to every element of channel `c`.
pub(crate) fn add_channel_bias(x: &mut ActivationTensor, bias: &[f32]) {
    let [b, c, h, w] = x.shape();
    let plane = h * w;
    let s = x.as_mut_slice();
    for bi in 0..b {
        for (ci, &v) in bias.iter().enumerate().take(c) {
            for o in &mut s[(bi * c + ci) * plane..][..plane] {
                *o += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv2d, x: &ActivationTensor) -> Vec<f64> {
        let [b, cin, h, w] = x.shape();
        let a = x.array();
        let mut out = Vec::new();
        for bi in 0..b {
            for co in 0..conv.cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight[((co * cin + ci) * 3 + ky) * 3 + kx] as f64;
                                    acc += wv * a[[bi, ci, sy as usize, sx as usize]] as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let conv = Conv2d::init(3, "t", 2, 3);
        let x = ActivationTensor::from_vec([2, 2, 5, 4], init_normals(9, "x", 80, 1.0)).unwrap();
        let got = conv.forward(&x);
        assert_eq!(got.shape(), [2, 3, 5, 4]);
        for (g, e) in got.as_slice().iter().zip(naive_conv(&conv, &x)) {
            assert!((*g as f64 - e).abs() < 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn pool_and_upsample() {
        let x = ActivationTensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(avg_pool2(&x).as_slice(), &[3.0]);
        let up = upsample2(&x);
        assert_eq!(up.shape(), [1, 1, 4, 4]);
        assert!(avg_pool2(&up).bit_eq(&x));
    }

    #[test]
    fn init_is_keyed() {
        assert_eq!(init_normals(1, "a", 4, 1.0), init_normals(1, "a", 4, 1.0));
        assert_ne!(init_normals(1, "a", 4, 1.0), init_normals(2, "a", 4, 1.0));
        assert_ne!(init_normals(1, "a", 4, 1.0), init_normals(1, "b", 4, 1.0));
    }
}
