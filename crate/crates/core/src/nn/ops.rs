use ndarray::{concatenate, s, Array3, Axis};

pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &out| {
        if out <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-axis interpolation table: each output index reads two source indices
/// with complementary weights (half-pixel centres, edge clamped).
#[derive(Clone, Debug)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f32>,
}

impl AxisTable {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push((pos - i0 as f64) as f32);
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize of a `(C, H, W)` map to `(C, out_h, out_w)`.
#[derive(Clone, Debug)]
pub struct Bilinear {
    rows: AxisTable,
    cols: AxisTable,
    in_h: usize,
    in_w: usize,
}

impl Bilinear {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: AxisTable::new(in_h, out_h),
            cols: AxisTable::new(in_w, out_w),
            in_h,
            in_w,
        }
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let c = x.dim().0;
        let (oh, ow) = (self.rows.lo.len(), self.cols.lo.len());
        let mut y = Array3::<f32>::zeros((c, oh, ow));
        for ch in 0..c {
            let src = x.index_axis(Axis(0), ch);
            let mut dst = y.index_axis_mut(Axis(0), ch);
            for oy in 0..oh {
                let (y0, y1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w_hi[oy]);
                for ox in 0..ow {
                    let (x0, x1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w_hi[ox]);
                    let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
                    let bottom = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
                    dst[[oy, ox]] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        y
    }

    pub fn backward(&self, dy: &Array3<f32>) -> Array3<f32> {
        let c = dy.dim().0;
        let (oh, ow) = (self.rows.lo.len(), self.cols.lo.len());
        let mut dx = Array3::<f32>::zeros((c, self.in_h, self.in_w));
        for ch in 0..c {
            let g = dy.index_axis(Axis(0), ch);
            let mut dst = dx.index_axis_mut(Axis(0), ch);
            for oy in 0..oh {
                let (y0, y1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w_hi[oy]);
                for ox in 0..ow {
                    let (x0, x1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w_hi[ox]);
                    let v = g[[oy, ox]];
                    dst[[y0, x0]] += v * (1.0 - wy) * (1.0 - wx);
                    dst[[y0, x1]] += v * (1.0 - wy) * wx;
                    dst[[y1, x0]] += v * wy * (1.0 - wx);
                    dst[[y1, x1]] += v * wy * wx;
                }
            }
        }
        dx
    }
}

pub fn concat_channels(parts: &[&Array3<f32>]) -> Array3<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("parts share spatial dims")
}

pub fn split_channels(x: &Array3<f32>, sizes: &[usize]) -> Vec<Array3<f32>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(x.slice(s![start..start + n, .., ..]).to_owned());
        start += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let x = Array3::from_shape_fn((2, 3, 5), |(c, i, j)| (c * 15 + i * 5 + j) as f32);
        let up = Bilinear::new(3, 5, 3, 5);
        assert_eq!(up.forward(&x), x);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Array3::from_elem((1, 4, 4), 2.5f32);
        let y = Bilinear::new(4, 4, 16, 16).forward(&x);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <up(x), r> == <x, up^T(r)>
        let up = Bilinear::new(3, 4, 12, 16);
        let x = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| ((c * 7 + i * 3 + j) % 5) as f32 - 1.5);
        let r = Array3::from_shape_fn((2, 12, 16), |(c, i, j)| ((c + i * 2 + j * 5) % 7) as f32 - 3.0);
        let lhs: f64 = up.forward(&x).iter().zip(r.iter()).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.iter().zip(up.backward(&r).iter()).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn relu_backward_masks_inactive_units() {
        let x = Array3::from_shape_vec((1, 1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        let dx = relu_backward(&y, &Array3::from_elem((1, 1, 4), 1.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
    }
}
