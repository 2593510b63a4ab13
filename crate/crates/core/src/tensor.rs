//! Dense (residence, source, option) tensors. Option 0 books profits at
//! the source; option `1 + j` books them in haven slot `j`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub n: usize,
    pub options: usize,
    #[serde(with = "crate::serde_inf::vec")]
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, havens: usize) -> Self {
        Self::filled(n, havens, 0.0)
    }

    pub fn filled(n: usize, havens: usize, value: f64) -> Self {
        Self { n, options: havens + 1, data: vec![value; n * n * (havens + 1)] }
    }

    #[inline]
    pub fn idx(&self, i: usize, l: usize, o: usize) -> usize {
        (i * self.n + l) * self.options + o
    }

    #[inline]
    pub fn get(&self, i: usize, l: usize, o: usize) -> f64 {
        self.data[self.idx(i, l, o)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, l: usize, o: usize, v: f64) {
        let k = self.idx(i, l, o);
        self.data[k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, l: usize, o: usize, v: f64) {
        let k = self.idx(i, l, o);
        self.data[k] += v;
    }

    pub fn havens(&self) -> usize {
        self.options - 1
    }

    /// Slice over options for one (i, l) pair.
    pub fn cell(&self, i: usize, l: usize) -> &[f64] {
        let k = self.idx(i, l, 0);
        &self.data[k..k + self.options]
    }

    pub fn residence_total(&self, i: usize) -> f64 {
        let k = self.idx(i, 0, 0);
        self.data[k..k + self.n * self.options].iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { n: self.n, options: self.options, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            n: self.n,
            options: self.options,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}
