use crate::error::{Error, Result};

/// Event counts `N[n][j]` per outcome and probe.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    n_outcomes: usize,
    probe_ids: Vec<u32>,
    /// One column of `n_outcomes` counts per probe.
    columns: Vec<Vec<u64>>,
}

impl CountTable {
    pub fn new(n_outcomes: usize, probe_ids: Vec<u32>, columns: Vec<Vec<u64>>) -> Result<Self> {
        if n_outcomes == 0 {
            return Err(Error::shape("count table needs at least one outcome"));
        }
        if probe_ids.len() != columns.len() {
            return Err(Error::shape(format!("{} probe ids for {} columns", probe_ids.len(), columns.len())));
        }
        let mut sorted = probe_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::shape("duplicate probe id in count table"));
        }
        for (id, c) in probe_ids.iter().zip(&columns) {
            if c.len() != n_outcomes {
                return Err(Error::shape(format!(
                    "probe {id}: column has {} outcomes, expected {n_outcomes}",
                    c.len()
                )));
            }
        }
        Ok(CountTable { n_outcomes, probe_ids, columns })
    }

    /// Assembles a table from per-probe `(id, counts)` columns.
    pub fn from_columns(n_outcomes: usize, columns: Vec<(u32, Vec<u64>)>) -> Result<Self> {
        let (ids, cols) = columns.into_iter().unzip();
        Self::new(n_outcomes, ids, cols)
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_probes(&self) -> usize {
        self.columns.len()
    }

    pub fn probe_ids(&self) -> &[u32] {
        &self.probe_ids
    }

    pub fn counts(&self, j: usize) -> &[u64] {
        &self.columns[j]
    }

    pub fn total(&self, j: usize) -> u64 {
        self.columns[j].iter().sum()
    }

    /// Normalized column `p[n][j] = N[n][j] / sum_n N[n][j]`; all zeros for an empty column.
    pub fn probs(&self, j: usize) -> Vec<f64> {
        let total = self.total(j);
        if total == 0 {
            return vec![0.0; self.n_outcomes];
        }
        self.columns[j].iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn index_of(&self, probe_id: u32) -> Option<usize> {
        self.probe_ids.iter().position(|&id| id == probe_id)
    }

    /// Row-major `N x K` counts.
    pub fn counts_row_major(&self) -> Vec<u64> {
        let k = self.n_probes();
        let mut out = vec![0; self.n_outcomes * k];
        for (j, col) in self.columns.iter().enumerate() {
            for (n, &c) in col.iter().enumerate() {
                out[n * k + j] = c;
            }
        }
        out
    }

    /// Row-major `N x K` probabilities.
    pub fn probs_row_major(&self) -> Vec<f64> {
        let k = self.n_probes();
        let mut out = vec![0.0; self.n_outcomes * k];
        for j in 0..k {
            for (n, p) in self.probs(j).into_iter().enumerate() {
                out[n * k + j] = p;
            }
        }
        out
    }

    /// Inverse of [`CountTable::counts_row_major`].
    pub fn from_row_major(n_outcomes: usize, probe_ids: Vec<u32>, counts: &[u64]) -> Result<Self> {
        let k = probe_ids.len();
        if counts.len() != n_outcomes * k {
            return Err(Error::shape(format!(
                "expected {} counts for {n_outcomes}x{k}, got {}",
                n_outcomes * k,
                counts.len()
            )));
        }
        let columns = (0..k).map(|j| (0..n_outcomes).map(|n| counts[n * k + j]).collect()).collect();
        Self::new(n_outcomes, probe_ids, columns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_normalize_per_column() {
        let t = CountTable::new(3, vec![4, 9], vec![vec![1, 2, 1], vec![0, 0, 5]]).unwrap();
        assert_eq!(t.probs(0), vec![0.25, 0.5, 0.25]);
        assert_eq!(t.probs(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(t.index_of(9), Some(1));
        let back = CountTable::from_row_major(3, vec![4, 9], &t.counts_row_major()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_ragged_columns() {
        assert!(CountTable::new(3, vec![1], vec![vec![1, 2]]).is_err());
        assert!(CountTable::new(2, vec![1, 1], vec![vec![1, 2], vec![1, 1]]).is_err());
        assert!(CountTable::new(2, vec![1], vec![]).is_err());
    }
}
