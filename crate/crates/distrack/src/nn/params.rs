//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format. Names follow `<module>.<block>.<index>.<param>`.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::usage(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Register a `(rows, cols)` parameter with scaled-uniform init:
    /// `U(-1, 1) * gain / sqrt(rows)`.
    pub fn add_init(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let scale = gain / (rows as f64).sqrt();
        let value =
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        self.add(name, value)
    }

    /// Register an all-`fill` parameter (biases, layer-norm gains).
    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, fill: f64) -> Result<usize> {
        self.add(name, Array2::from_elem((rows, cols), fill))
    }

    pub fn get_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.values[idx]
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Indices whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Boolean update mask: true where the name matches the predicate.
    pub fn mask_where(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.names.iter().map(|n| pred(n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add_init("iem.backbone.0.weight", 3, 4, 1.0, &mut rng).unwrap();
        let b = store.add_const("iem.backbone.0.bias", 1, 4, 0.0).unwrap();
        assert_eq!(store.get_index("iem.backbone.0.weight"), Some(a));
        assert_eq!(store.value(b).dim(), (1, 4));
        assert!(store.add_const("iem.backbone.0.bias", 1, 4, 0.0).is_err());
    }

    #[test]
    fn masks_and_prefixes() {
        let mut store = ParamStore::new();
        store.add_const("spm.token", 1, 8, 0.0).unwrap();
        store.add_const("dis.attn.wq.weight", 8, 8, 0.0).unwrap();
        let spm = store.indices_with_prefix("spm.");
        assert_eq!(spm, vec![0]);
        let mask = store.mask_where(|n| !n.starts_with("spm."));
        assert_eq!(mask, vec![false, true]);
    }
}
