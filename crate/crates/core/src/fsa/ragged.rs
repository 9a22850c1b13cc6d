use super::FsaError;

/// Two-level index: rows (e.g. decoding streams) owning a variable number of
/// elements (e.g. active contexts).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaggedShape {
    row_splits: Vec<usize>,
    row_ids: Vec<usize>,
}

/// Shape whose row `r` holds `counts[r]` elements.
pub fn build_ragged(counts: &[usize]) -> RaggedShape {
    let mut row_splits = Vec::with_capacity(counts.len() + 1);
    row_splits.push(0);
    let mut total = 0;
    for &c in counts {
        total += c;
        row_splits.push(total);
    }
    let mut row_ids = Vec::with_capacity(total);
    for (row, &c) in counts.iter().enumerate() {
        row_ids.extend(std::iter::repeat_n(row, c));
    }
    RaggedShape { row_splits, row_ids }
}

impl RaggedShape {
    pub fn from_row_splits(row_splits: Vec<usize>) -> Result<Self, FsaError> {
        if row_splits.first() != Some(&0) {
            return Err(FsaError::InvalidArgument("row_splits must start with 0".into()));
        }
        if let Some(i) = row_splits.windows(2).position(|w| w[0] > w[1]) {
            return Err(FsaError::InvalidArgument(format!(
                "row_splits decreases at row {i}"
            )));
        }
        let counts: Vec<usize> = row_splits.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(build_ragged(&counts))
    }

    pub fn num_rows(&self) -> usize {
        self.row_splits.len() - 1
    }

    pub fn num_elements(&self) -> usize {
        self.row_ids.len()
    }

    pub fn row_splits(&self) -> &[usize] {
        &self.row_splits
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn row(&self, r: usize) -> std::ops::Range<usize> {
        self.row_splits[r]..self.row_splits[r + 1]
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_splits[r + 1] - self.row_splits[r]
    }

    /// Checks every structural invariant; used by tests and debug assertions.
    pub fn check(&self) -> bool {
        let splits_ok = self.row_splits.first() == Some(&0)
            && self.row_splits.windows(2).all(|w| w[0] <= w[1])
            && self.row_splits.last() == Some(&self.row_ids.len());
        splits_ok
            && self
                .row_ids
                .iter()
                .enumerate()
                .all(|(k, &r)| r < self.num_rows() && self.row_splits[r] <= k && k < self.row_splits[r + 1])
    }
}
