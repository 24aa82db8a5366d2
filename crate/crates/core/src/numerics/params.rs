use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but a missing name is a shape error.
    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// L2 norm over every value of every tensor, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout<G: Scalar>(&self, other: &ParamSet<G>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

impl<F> IntoIterator for ParamSet<F> {
    type Item = (String, Tensor<F>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<F>>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

impl<F: Scalar> FromIterator<(String, Tensor<F>)> for ParamSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the clipped gradients and the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &ParamSet<F>, max_norm: f64) -> Result<(ParamSet<F>, f64)> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!("max_norm must be > 0, got {max_norm}")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite(format!("gradient {name}")));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("global gradient norm".into()));
    }
    if norm <= max_norm {
        return Ok((grads.clone(), norm));
    }
    let factor = F::lit(max_norm / norm);
    let clipped = grads.iter().map(|(k, t)| (k.clone(), t.map(|v| v * factor))).collect();
    Ok((clipped, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[(&str, Vec<f64>)]) -> ParamSet<f64> {
        values
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn clip_halves_when_norm_is_twice_the_bound() {
        // norm = sqrt(16 + 48) = 8
        let g = set(&[("a", vec![4.0]), ("b", vec![4.0, 4.0, 4.0])]);
        let (c, norm) = clip_global_norm(&g, 4.0).unwrap();
        assert_eq!(norm, 8.0);
        for (_, t) in c.iter() {
            for &v in t.data() {
                assert!((v - 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clip_is_identity_below_bound() {
        let g = set(&[("a", vec![2.0, 0.0])]);
        let (c, norm) = clip_global_norm(&g, 4.0).unwrap();
        assert_eq!(norm, 2.0);
        assert_eq!(c, g);
    }

    #[test]
    fn clip_rejects_bad_inputs() {
        let g = set(&[("a", vec![1.0])]);
        assert!(clip_global_norm(&g, 0.0).is_err());
        let mut bad = g.clone();
        bad.get_mut("a").unwrap().data_mut()[0] = f64::INFINITY;
        assert!(matches!(clip_global_norm(&bad, 1.0), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            a in proptest::collection::vec(-100.0f32..100.0, 1..40),
            b in proptest::collection::vec(-100.0f32..100.0, 1..40),
        ) {
            let g: ParamSet<f32> = [
                ("a".to_string(), Tensor::new(vec![a.len()], a).unwrap()),
                ("b".to_string(), Tensor::new(vec![b.len()], b).unwrap()),
            ].into_iter().collect();
            let (c, _) = clip_global_norm(&g, 4.0).unwrap();
            // one f32 ulp at 4.0
            prop_assert!(c.global_norm() <= 4.0 + 4.0 * f32::EPSILON as f64);
        }
    }
}
