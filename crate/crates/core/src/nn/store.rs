use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, named list of 2-D parameter tensors. Biases are stored as `1 × n`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f32>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        gain: f32,
        rng: &mut R,
    ) -> ParamId {
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            std * rng.sample::<f32, _>(StandardNormal)
        });
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f32> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f32>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn grads(&self) -> Grads {
        Grads(self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.values
    }

    /// Replace every tensor with the one of the same name from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Format(format!(
                "parameter layout mismatch: expected {} tensors, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(Error::Format(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    dst.dim(),
                    src.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient buffers laid out like the owning [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads(pub(crate) Vec<Array2<f32>>);

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f32> {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f32> {
        &self.0[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.0 {
            g.mapv_inplace(|x| x * factor);
        }
    }
}
