/// Row ranges of a packed batch: sequence `i` occupies rows
/// `start..start + len` of every `[rows, cols]` activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<(usize, usize)>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let bounds = lengths
            .iter()
            .map(|&len| {
                let b = (start, len);
                start += len;
                b
            })
            .collect();
        Segments { bounds }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.bounds.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bounds.iter().copied()
    }

    pub fn get(&self, i: usize) -> (usize, usize) {
        self.bounds[i]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.bounds.iter().map(|&(_, l)| l).collect()
    }

    /// Segment index of every row, for broadcasting per-sequence vectors.
    pub fn row_owner(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_rows());
        for (i, &(_, len)) in self.bounds.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, len));
        }
        out
    }

    /// Position of every row within its own segment.
    pub fn row_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_rows());
        for &(_, len) in &self.bounds {
            out.extend(0..len);
        }
        out
    }
}
