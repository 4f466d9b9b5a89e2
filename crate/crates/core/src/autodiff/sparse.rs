use super::Matrix;

/// Constant compressed-sparse-row matrix, used as the left operand of
/// [`Graph::sp_matmul`](super::Graph::sp_matmul).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed in order.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    /// Row-normalized adjacency: row `i` averages over `neighbors[i]`.
    /// Rows without neighbors are all zero.
    pub fn mean_aggregator(neighbors: &[Vec<usize>], ncols: usize) -> Self {
        let triplets: Vec<_> = neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| {
                let w = 1.0 / list.len() as f64;
                list.iter().map(move |&j| (i, j, w))
            })
            .collect();
        Self::from_triplets(neighbors.len(), ncols, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn matmul(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros((self.nrows, x.ncols()));
        for r in 0..self.nrows {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(r) {
                dst.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `self^T * g`.
    pub fn t_matmul(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros((self.ncols, g.ncols()));
        for r in 0..self.nrows {
            let src = g.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matches_dense_product() {
        let a = Csr::from_triplets(2, 3, &[(1, 2, 2.0), (0, 0, 1.0), (1, 2, 1.0), (1, 0, -1.0)]);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.matmul(&x), a.to_dense().dot(&x));
        let g = array![[1.0, 0.5], [-2.0, 1.0]];
        assert_eq!(a.t_matmul(&g), a.to_dense().t().dot(&g));
    }

    #[test]
    fn mean_aggregator_rows() {
        let a = Csr::mean_aggregator(&[vec![1, 2], vec![], vec![0]], 3);
        assert_eq!(a.to_dense(), array![[0.0, 0.5, 0.5], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }
}
