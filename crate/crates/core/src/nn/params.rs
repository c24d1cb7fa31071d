//! Named parameter tensors with seed-deterministic initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::TensorRecord;
use crate::error::{Error, Result};
use crate::nn::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    fn push(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(id)
    }

    /// Uniform in `[-bound, bound]`, drawn from the store's seeded stream.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.push(name, Mat::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.push(name, Mat::filled(rows, cols, value))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter()
            .map(|(_, name, m)| TensorRecord::from_f64(name, &[m.rows(), m.cols()], m.data()))
            .collect()
    }

    /// Overwrites values by name; every parameter of `self` must be present with
    /// a matching shape.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        let by_name: HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name:?}")))?;
            let shape = [self.values[i].rows(), self.values[i].cols()];
            if rec.shape != shape {
                return Err(Error::shape(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {shape:?}",
                    rec.shape
                )));
            }
            let data = rec.to_f64()?;
            self.values[i] = Mat::from_vec(shape[0], shape[1], data)?;
        }
        Ok(())
    }
}

/// Accumulated gradients, one matrix per parameter.
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            values: store
                .values
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Mat) {
        self.values[id.0].add_assign(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.values.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_identical_stores() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.add_uniform("a", 3, 4, 0.5);
            s.add_filled("b", 1, 4, 0.0);
            s.add_uniform("c", 2, 2, 1.0);
            s
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn uniform_respects_bound() {
        let mut s = ParamStore::new(1);
        let id = s.add_uniform("w", 20, 20, 0.25);
        assert!(s.get(id).data().iter().all(|v| v.abs() <= 0.25));
    }
}
