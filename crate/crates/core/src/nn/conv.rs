use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// 2-D convolution over a single `(C, H, W)` sample, lowered to a matrix
/// product through im2col.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Saved activations needed by the backward pass.
#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f32>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    pub fn init<R: Rng>(&self, rng: &mut R, store: &mut ParamStore) {
        store.insert(self.weight_name(), kaiming_normal(rng, &self.weight_shape(), self.fan_in()));
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_channels])));
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn weight_matrix(&self, store: &ParamStore) -> Result<Array2<f32>> {
        let w = store.get(&self.weight_name())?;
        if w.shape() != self.weight_shape() {
            return Err(Error::Dimension(format!(
                "{}: weight shape {:?}, expected {:?}",
                self.weight_name(),
                w.shape(),
                self.weight_shape()
            )));
        }
        let w = w.view().into_dimensionality::<Ix4>().expect("rank checked");
        Ok(w
            .to_shape((self.out_channels, self.fan_in()))
            .expect("contiguous reshape")
            .into_owned())
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Result<(Array3<f32>, ConvCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "{}: input has {c} channels, expected {}",
                self.name, self.in_channels
            )));
        }
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.padding, oh, ow);
        let weight = self.weight_matrix(store)?;
        let bias = store.get(&self.bias_name())?;
        let mut out = weight.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("gemm output is contiguous");
        Ok((out, ConvCache { cols, in_h: h, in_w: w }))
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input
    /// gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dy: &Array3<f32>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Array3<f32>>> {
        let (oc, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let dw = dy2.dot(&cache.cols.t());
        let db: Array1<f32> = dy2.sum_axis(Axis(1));
        grads.accumulate(
            &self.weight_name(),
            dw.into_shape_with_order(IxDyn(&self.weight_shape())).expect("contiguous"),
        );
        grads.accumulate(&self.bias_name(), db.into_dyn());
        if !want_input_grad {
            return Ok(None);
        }
        let weight = self.weight_matrix(store)?;
        let dcols = weight.t().dot(&dy2);
        Ok(Some(col2im(
            &dcols,
            self.in_channels,
            cache.in_h,
            cache.in_w,
            self.kernel,
            self.stride,
            self.padding,
            oh,
            ow,
        )))
    }
}

pub(crate) fn kaiming_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng) as f32)
}

fn im2col(x: &Array3<f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, store: &ParamStore, x: &Array3<f32>) -> Array3<f32> {
        let w = store.get(&conv.weight_name()).unwrap();
        let b = store.get(&conv.bias_name()).unwrap();
        let (_, h, wd) = x.dim();
        let (oh, ow) = conv.output_size(h, wd);
        let mut y = Array3::zeros((conv.out_channels, oh, ow));
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[[o]] as f64;
                    for ci in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += (w[[o, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]]) as f64;
                                }
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc as f32;
                }
            }
        }
        y
    }

    fn setup(stride: usize, kernel: usize) -> (Conv2d, ParamStore, Array3<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new("c", 2, 3, kernel, stride);
        let mut store = ParamStore::new();
        conv.init(&mut rng, &mut store);
        store.get_mut("c.bias").unwrap().mapv_inplace(|_| 0.25);
        let x = Array3::from_shape_fn((2, 6, 8), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 11) as f32 / 11.0 - 0.4);
        (conv, store, x)
    }

    #[test]
    fn matches_direct_convolution() {
        for (stride, kernel) in [(1, 3), (2, 3), (1, 1)] {
            let (conv, store, x) = setup(stride, kernel);
            let (y, _) = conv.forward(&store, &x).unwrap();
            let expected = naive_conv(&conv, &store, &x);
            assert_eq!(y.dim(), expected.dim());
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (conv, store, x) = setup(2, 3);
        let (y, cache) = conv.forward(&store, &x).unwrap();
        // loss = sum(y * r) for a fixed r
        let r = Array3::from_shape_fn(y.dim(), |(c, i, j)| ((c + 2 * i + 3 * j) % 5) as f32 - 2.0);
        let mut grads = Grads::new();
        let dx = conv.backward(&store, &cache, &r, &mut grads, true).unwrap().unwrap();
        let loss = |x: &Array3<f32>| -> f64 {
            let (y, _) = conv.forward(&store, x).unwrap();
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        for idx in [[0, 0, 0], [1, 3, 4], [0, 5, 7], [1, 2, 1]] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += 1e-2;
            xm[idx] -= 1e-2;
            let fd = (loss(&xp) - loss(&xm)) / 2e-2;
            assert!((fd - dx[idx] as f64).abs() < 1e-3, "{idx:?}: fd {fd} vs {}", dx[idx]);
        }
        // bias gradient is the sum of upstream gradients per channel
        let db = grads.get("c.bias").unwrap();
        for o in 0..3 {
            let expected: f32 = r.index_axis(Axis(0), o).sum();
            assert!((db[[o]] - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (conv, store, _) = setup(1, 3);
        let bad = Array3::zeros((5, 4, 4));
        assert!(matches!(conv.forward(&store, &bad), Err(Error::Dimension(_))));
    }
}
