use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::store::{Grads, ParamId, ParamStore};

/// `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let w = store.normal(format!("{name}.w"), in_dim, out_dim, in_dim, gain, rng);
        let b = store.zeros(format!("{name}.b"), 1, out_dim);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(store.get(self.w));
        y += &store.get(self.b).row(0);
        y
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: ArrayView2<f32>,
        dy: ArrayView2<f32>,
    ) -> Array2<f32> {
        *grads.get_mut(self.w) += &x.t().dot(&dy);
        *grads.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&store.get(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f32>,
    pub inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.zeros(format!("{name}.beta"), 1, dim);
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f32>) -> (Array2<f32>, LayerNormCache) {
        let n = x.ncols() as f32;
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let mut y = &xhat * &store.get(self.gamma).row(0);
        y += &store.get(self.beta).row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &LayerNormCache,
        dy: ArrayView2<f32>,
    ) -> Array2<f32> {
        let gamma = store.get(self.gamma).row(0).to_owned();
        *grads.get_mut(self.gamma) += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *grads.get_mut(self.beta) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let n = dy.ncols() as f32;
        let mut dx = &dy * &gamma;
        for ((mut row, xhat), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(&cache.inv_std)
        {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
            for (d, &h) in row.iter_mut().zip(xhat.iter()) {
                *d = inv * (*d - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

pub fn silu(x: ArrayView2<f32>) -> Array2<f32> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward(x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

pub fn relu(x: ArrayView2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Batch and spatial extent of a channels-last activation matrix whose rows
/// are ordered `(batch, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl SpatialDims {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn halved(&self) -> Self {
        Self {
            batch: self.batch,
            height: self.height / 2,
            width: self.width / 2,
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1, computed through im2col.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = 9 * in_ch;
        let w = store.normal(format!("{name}.w"), fan_in, out_ch, fan_in, 2f32.sqrt(), rng);
        let b = store.zeros(format!("{name}.b"), 1, out_ch);
        Self {
            w,
            b,
            in_ch,
            out_ch,
        }
    }

    fn im2col(&self, x: ArrayView2<f32>, dims: SpatialDims) -> Array2<f32> {
        let (h, w, c) = (dims.height as isize, dims.width as isize, self.in_ch);
        let mut cols = Array2::<f32>::zeros((dims.rows(), 9 * c));
        for b in 0..dims.batch as isize {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((b * h + y) * w + xx) as usize;
                    let mut out = cols.row_mut(row);
                    for ky in 0..3isize {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let sx = xx + kx - 1;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            let src = x.row(((b * h + sy) * w + sx) as usize);
                            let base = ((ky * 3 + kx) as usize) * c;
                            for ci in 0..c {
                                out[base + ci] = src[ci];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Returns the output and the im2col buffer needed by [`Conv3x3::backward`].
    pub fn forward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f32>,
        dims: SpatialDims,
    ) -> (Array2<f32>, Array2<f32>) {
        let cols = self.im2col(x, dims);
        let mut y = cols.dot(store.get(self.w));
        y += &store.get(self.b).row(0);
        (y, cols)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cols: &Array2<f32>,
        dy: ArrayView2<f32>,
        dims: SpatialDims,
    ) -> Array2<f32> {
        *grads.get_mut(self.w) += &cols.t().dot(&dy);
        *grads.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&store.get(self.w).t());
        let (h, w, c) = (dims.height as isize, dims.width as isize, self.in_ch);
        let mut dx = Array2::<f32>::zeros((dims.rows(), c));
        for b in 0..dims.batch as isize {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((b * h + y) * w + xx) as usize;
                    let src = dcols.row(row);
                    for ky in 0..3isize {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let sx = xx + kx - 1;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            let mut dst = dx.row_mut(((b * h + sy) * w + sx) as usize);
                            let base = ((ky * 3 + kx) as usize) * c;
                            for ci in 0..c {
                                dst[ci] += src[base + ci];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn avg_pool2(x: ArrayView2<f32>, dims: SpatialDims) -> Array2<f32> {
    let out = dims.halved();
    let c = x.ncols();
    let mut y = Array2::<f32>::zeros((out.rows(), c));
    for b in 0..dims.batch {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut dst = y.row_mut((b * out.height + oy) * out.width + ox);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = x.row((b * dims.height + 2 * oy + dy) * dims.width + 2 * ox + dx);
                    dst.scaled_add(0.25, &src);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: ArrayView2<f32>, dims: SpatialDims) -> Array2<f32> {
    let out = dims.halved();
    let c = dy.ncols();
    let mut dx = Array2::<f32>::zeros((dims.rows(), c));
    for b in 0..dims.batch {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let src = dy.row((b * out.height + oy) * out.width + ox);
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let mut dst =
                        dx.row_mut((b * dims.height + 2 * oy + ddy) * dims.width + 2 * ox + ddx);
                    dst.scaled_add(0.25, &src);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(
        f: &dyn Fn(&Array2<f32>) -> f64,
        x: &Array2<f32>,
        idx: (usize, usize),
    ) -> f64 {
        let h = 1e-2f32;
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h as f64)
    }

    #[test]
    fn linear_forward_matches_hand_product() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, 1.0, &mut rng);
        store.get_mut(lin.w).assign(&array![[1.0, 2.0], [3.0, 4.0]]);
        store.get_mut(lin.b).assign(&array![[0.5, -0.5]]);
        let y = lin.forward(&store, array![[1.0, 1.0]].view());
        assert_eq!(y, array![[4.5, 5.5]]);
    }

    #[test]
    fn layer_norm_input_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        store.get_mut(ln.gamma).assign(&array![[1.0, 0.5, 2.0, -1.0, 1.5]]);
        let x = array![[0.3, -1.2, 0.8, 2.0, -0.4], [1.0, 0.0, -0.5, 0.25, 0.7]];
        let weights = array![[0.2, -0.7, 1.1, 0.4, -0.3], [0.9, 0.1, -0.6, 0.5, 0.8]];
        let loss = |x: &Array2<f32>| -> f64 {
            let (y, _) = ln.forward(&store, x.view());
            (&y * &weights).iter().map(|&v| v as f64).sum()
        };
        let (_, cache) = ln.forward(&store, x.view());
        let mut grads = store.grads();
        let dx = ln.backward(&store, &mut grads, &cache, weights.view());
        for idx in [(0, 0), (0, 3), (1, 2), (1, 4)] {
            let num = numeric_grad(&loss, &x, idx);
            assert!((num - dx[idx] as f64).abs() < 2e-2, "{idx:?}: {num} vs {}", dx[idx]);
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng);
        let dims = SpatialDims {
            batch: 1,
            height: 4,
            width: 4,
        };
        let x = Array2::from_shape_fn((16, 2), |(r, c)| ((r * 7 + c * 3) % 5) as f32 * 0.3 - 0.6);
        let weights = Array2::from_shape_fn((16, 3), |(r, c)| ((r + 2 * c) % 4) as f32 - 1.5);
        let loss = |x: &Array2<f32>| -> f64 {
            let (y, _) = conv.forward(&store, x.view(), dims);
            (&y * &weights).iter().map(|&v| v as f64).sum()
        };
        let (_, cols) = conv.forward(&store, x.view(), dims);
        let mut grads = store.grads();
        let dx = conv.backward(&store, &mut grads, &cols, weights.view(), dims);
        for idx in [(0, 0), (5, 1), (10, 0), (15, 1)] {
            let num = numeric_grad(&loss, &x, idx);
            assert!((num - dx[idx] as f64).abs() < 2e-2, "{idx:?}: {num} vs {}", dx[idx]);
        }
    }

    #[test]
    fn avg_pool_backward_is_adjoint() {
        let dims = SpatialDims {
            batch: 2,
            height: 4,
            width: 4,
        };
        let x = Array2::from_shape_fn((32, 3), |(r, c)| (r as f32 * 0.1 - c as f32).sin());
        let dy = Array2::from_shape_fn((8, 3), |(r, c)| (r as f32 + c as f32 * 0.5).cos());
        let lhs: f32 = (&avg_pool2(x.view(), dims) * &dy).sum();
        let rhs: f32 = (&x * &avg_pool2_backward(dy.view(), dims)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
