use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Countries as dense indices. Havens keep their position among all
/// countries and also get a slot `0..H` in haven-indexed arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySet {
    pub labels: Vec<String>,
    pub haven: Vec<bool>,
    pub reference: usize,
    pub numeraire: usize,
}

impl CountrySet {
    pub fn new(labels: Vec<String>, haven: Vec<bool>, reference: usize, numeraire: usize) -> Result<Self> {
        if labels.len() != haven.len() {
            return Err(ModelError::Dimension(format!(
                "{} labels but {} haven flags",
                labels.len(),
                haven.len()
            )));
        }
        if reference >= labels.len() || numeraire >= labels.len() {
            return Err(ModelError::Dimension("reference or numeraire out of range".into()));
        }
        Ok(Self { labels, haven, reference, numeraire })
    }

    /// Labels `C0..` with the given haven flags, reference and numeraire 0.
    pub fn generic(haven: &[bool]) -> Self {
        let labels = (0..haven.len())
            .map(|k| if haven[k] { format!("H{k}") } else { format!("C{k}") })
            .collect();
        Self { labels, haven: haven.to_vec(), reference: 0, numeraire: 0 }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_haven(&self, k: usize) -> bool {
        self.haven[k]
    }

    pub fn havens(&self) -> Vec<usize> {
        (0..self.len()).filter(|k| self.haven[*k]).collect()
    }

    pub fn non_havens(&self) -> Vec<usize> {
        (0..self.len()).filter(|k| !self.haven[*k]).collect()
    }

    pub fn n_havens(&self) -> usize {
        self.haven.iter().filter(|h| **h).count()
    }

    /// Haven slot of country `k`, if it is a haven.
    pub fn haven_slot(&self, k: usize) -> Option<usize> {
        if !self.haven[k] {
            return None;
        }
        Some(self.haven[..k].iter().filter(|h| **h).count())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haven_slots_are_dense() {
        let c = CountrySet::generic(&[false, true, false, true]);
        assert_eq!(c.havens(), vec![1, 3]);
        assert_eq!(c.haven_slot(3), Some(1));
        assert_eq!(c.haven_slot(2), None);
        assert_eq!(c.index_of("H3"), Some(3));
    }
}
