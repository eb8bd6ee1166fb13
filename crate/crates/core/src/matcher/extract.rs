use crate::autodiff::Tensor;

/// Mutual-max match extraction from an assignment matrix (probability
/// domain, bins in the last row/column). A pair (i, j) survives when
/// `P[i,j]` is the maximum of interior row i and of interior column j and
/// beats both bin entries. Output is ordered by ascending i.
pub fn extract_matches(p: &Tensor) -> Vec<(usize, usize, f64)> {
    let (rows, cols) = (p.rows(), p.cols());
    if rows < 2 || cols < 2 {
        return Vec::new();
    }
    let (ka, kb) = (rows - 1, cols - 1);
    // First maximal element wins ties, which keeps extraction deterministic.
    let mut row_max = vec![0usize; ka];
    for (i, rm) in row_max.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..kb {
            if p.get(i, j) > best {
                best = p.get(i, j);
                *rm = j;
            }
        }
    }
    let mut col_max = vec![0usize; kb];
    for (j, cm) in col_max.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..ka {
            if p.get(i, j) > best {
                best = p.get(i, j);
                *cm = i;
            }
        }
    }
    let mut out = Vec::new();
    for (i, &j) in row_max.iter().enumerate() {
        if col_max[j] == i {
            let v = p.get(i, j);
            if v > p.get(i, kb) && v > p.get(ka, j) {
                out.push((i, j, v));
            }
        }
    }
    out
}
