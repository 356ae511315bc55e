//! Flat named-parameter storage shared by every trainable component.
//!
//! A [`ParamStore`] keeps all tensors of one component contiguous so that the
//! optimizer, snapshots, gradient checks and checkpoints can treat it as a
//! single `&[f64]`. Gradients use a store with the identical layout.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        mut init: impl FnMut() -> f64,
    ) -> ParamId {
        let offset = self.data.len();
        self.data.extend((0..rows * cols).map(|_| init()));
        self.entries.push(ParamEntry {
            name: name.into(),
            rows,
            cols,
            offset,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add_with(name, rows, cols, || v)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add_with(name, rows, cols, || {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.rows * e.cols]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        let (lo, hi) = (e.offset, e.offset + e.rows * e.cols);
        &mut self.data[lo..hi]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self.entries.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries == other.entries
    }

    /// Bit patterns of every parameter, for exact before/after comparisons.
    pub fn snapshot_bits(&self) -> Vec<u64> {
        self.data.iter().map(|x| x.to_bits()).collect()
    }

    /// Replace values from a store with the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            let want: Vec<_> = self.entries.iter().map(|e| (&e.name, e.rows, e.cols)).collect();
            let got: Vec<_> = other.entries.iter().map(|e| (&e.name, e.rows, e.cols)).collect();
            return Err(Error::Config(format!(
                "parameter layout mismatch: expected {want:?}, found {got:?}"
            )));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    pub(crate) fn from_parts(entries: Vec<ParamEntry>, data: Vec<f64>) -> Self {
        ParamStore { entries, data }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let a = s.add_normal("a", 2, 3, 0.1, &mut rng);
        let b = s.add_const("b", 1, 4, 1.0);
        assert_eq!(s.len(), 10);
        assert_eq!(s.get(a).len(), 6);
        assert_eq!(s.get(b), &[1.0; 4]);
        assert_eq!(s.id_of("b"), Some(b));
        let z = s.zeros_like();
        assert!(z.same_layout(&s));
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(2, 0.1);
        opt.step(&mut p, &[2.0, -3.0]);
        // first bias-corrected Adam step has magnitude ~lr
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }
}
