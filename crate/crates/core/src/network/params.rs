use std::collections::BTreeMap;

use ndarray::{
    ArrayBase, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Data, Dimension, Ix1,
    Ix2, IxDyn,
};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Named parameter (or gradient) arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn expect_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.expect(name)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("{name} is not a matrix"))
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.expect(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("{name} is not a vector"))
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        self.expect_mut(name)
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("{name} is not a matrix"))
    }

    pub fn vector_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        self.expect_mut(name)
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("{name} is not a vector"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// True when both sets have the same names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Adds `value` into the named tensor (shapes must match).
    pub fn accumulate<S, D>(&mut self, name: &str, value: &ArrayBase<S, D>)
    where
        S: Data<Elem = f64>,
        D: Dimension,
    {
        let t = self.expect_mut(name);
        assert_eq!(
            t.shape(),
            value.shape(),
            "gradient shape mismatch for {name}"
        );
        t.zip_mut_with(&value.view().into_dyn(), |a, &b| *a += b);
    }

    /// `self += scale * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, t) in self.tensors.iter_mut() {
            t.scaled_add(scale, other.expect(name));
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Glorot-uniform matrix: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`,
/// i.e. variance `2 / (fan_in + fan_out)`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    ArrayD::from_shape_simple_fn(IxDyn(&[fan_in, fan_out]), || dist.sample(rng))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_variance_matches_fan_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = glorot_uniform(&mut rng, 128, 128);
        let mean = w.mean().unwrap();
        let var = w.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        let expected = 2.0 / 256.0;
        assert!((var - expected).abs() <= 0.2 * expected, "{var}");
    }

    #[test]
    fn add_scaled_and_non_finite_detection() {
        let mut a = ParamSet::new();
        a.insert("w", ones(&[2, 2]));
        let mut b = a.zeros_like();
        b.add_scaled(&a, 3.0);
        assert_eq!(b.mat("w")[[1, 1]], 3.0);
        assert!(a.same_layout(&b));
        assert_eq!(b.first_non_finite(), None);
        b.mat_mut("w")[[0, 1]] = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("w"));
    }
}
