//! The speaker-embedding table: a look-up from speaker id to a trainable
//! row of an append-only weight matrix.

use std::collections::HashMap;

use crate::error::{KwsError, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EmbeddingTable<E = f32> {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// `[rows, dim]` weight matrix; rows grow append-only.
    pub weight: Parameter<E>,
}

impl<E: Scalar> EmbeddingTable<E> {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            weight: Parameter::new(Tensor::zeros(&[0, dim])),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| KwsError::UnknownSpeaker(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, row: usize) -> &[E] {
        &self.weight.value.data()[row * self.dim..(row + 1) * self.dim]
    }

    /// Mean of all rows; the fallback identity for concatenation fusion.
    pub fn mean_row(&self) -> Vec<E> {
        let mut mean = vec![E::zero(); self.dim];
        if self.ids.is_empty() {
            return mean;
        }
        for row in self.weight.value.data().chunks_exact(self.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m = *m + *v;
            }
        }
        let inv = E::one() / E::from_f64_lossy(self.ids.len() as f64);
        mean.iter_mut().for_each(|m| *m = *m * inv);
        mean
    }

    /// Appends one row. Existing rows, gradients and optimizer state are
    /// discarded-free: the buffers are extended in place.
    pub fn add_row(&mut self, id: &str, values: Vec<E>) -> Result<usize> {
        if self.index.contains_key(id) {
            return Err(KwsError::DuplicateSpeaker(id.to_string()));
        }
        if values.len() != self.dim {
            return Err(KwsError::Shape {
                op: "embedding_add_row",
                detail: format!("row length {} does not match dim {}", values.len(), self.dim),
            });
        }
        let row = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), row);

        let mut data = std::mem::take(&mut self.weight.value).into_data();
        data.extend_from_slice(&values);
        self.weight.value =
            Tensor::from_vec(&[row + 1, self.dim], data).expect("consistent row length");
        let trainable = self.weight.trainable;
        let mut fresh = Parameter::new(std::mem::take(&mut self.weight.value));
        fresh.trainable = trainable;
        self.weight = fresh;
        Ok(row)
    }

    /// Replaces the whole table (checkpoint loading).
    pub fn load(&mut self, ids: Vec<String>, weight: Tensor<E>) -> Result<()> {
        if weight.shape() != [ids.len(), self.dim] {
            return Err(KwsError::Checkpoint(format!(
                "embedding blob shape {:?} does not match {} speakers x dim {}",
                weight.shape(),
                ids.len(),
                self.dim
            )));
        }
        self.index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        if self.index.len() != ids.len() {
            return Err(KwsError::Checkpoint("duplicate speaker ids".into()));
        }
        self.ids = ids;
        let trainable = self.weight.trainable;
        let mut fresh = Parameter::new(weight);
        fresh.trainable = trainable;
        self.weight = fresh;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_append_only_and_consecutive() {
        let mut table = EmbeddingTable::<f32>::new(3);
        let a = table.add_row("alice", vec![1.0; 3]).unwrap();
        let b = table.add_row("bob", vec![0.0; 3]).unwrap();
        assert_eq!((a, b), (0, 1));
        assert_eq!(table.rows(), 2);
        assert_eq!(table.lookup("bob").unwrap(), 1);
        assert_eq!(table.row(0), &[1.0; 3]);
        assert!(matches!(
            table.lookup("carol").unwrap_err(),
            KwsError::UnknownSpeaker(_)
        ));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut table = EmbeddingTable::<f32>::new(2);
        table.add_row("x", vec![0.0; 2]).unwrap();
        assert!(matches!(
            table.add_row("x", vec![0.0; 2]).unwrap_err(),
            KwsError::DuplicateSpeaker(_)
        ));
        assert_eq!(table.rows(), 1);
    }

    #[test]
    fn mean_row_averages_entries() {
        let mut table = EmbeddingTable::<f32>::new(2);
        table.add_row("a", vec![1.0, 3.0]).unwrap();
        table.add_row("b", vec![3.0, 5.0]).unwrap();
        assert_eq!(table.mean_row(), vec![2.0, 4.0]);
        assert_eq!(EmbeddingTable::<f32>::new(2).mean_row(), vec![0.0, 0.0]);
    }
}
