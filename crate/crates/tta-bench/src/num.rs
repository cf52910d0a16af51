//! Small numeric helpers shared across the crate.

use ndarray::{Array1, Array2};

/// Probability floor applied before any `log`, so entropies and
/// cross-entropies stay finite for fully confident predictions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax with the probability floor applied.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = (*v / sum).max(PROB_FLOOR);
        }
    }
    out
}

/// Shannon entropy of one probability row, natural log.
pub fn entropy_row(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * q.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// Mean entropy across rows of a probability matrix.
pub fn mean_entropy(probs: &Array2<f64>) -> f64 {
    let b = probs.nrows() as f64;
    probs
        .rows()
        .into_iter()
        .map(|r| entropy_row(r.as_slice().unwrap()))
        .sum::<f64>()
        / b
}

/// Argmax with ties broken by the lowest index.
pub fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), labels.len());
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax_tie_low(row.as_slice().unwrap()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Column means of a matrix.
pub fn col_mean(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(ndarray::Axis(0)).unwrap()
}

/// Biased (population) column variances.
pub fn col_var_biased(x: &Array2<f64>, mean: &Array1<f64>) -> Array1<f64> {
    let n = x.nrows() as f64;
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.mapv_inplace(|v| v / n);
    var
}

/// Slope of the least-squares line through (0, y0), (1, y1), ...
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma).powi(2);
        db += (b[i] - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&z);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_analytic_values() {
        // one-hot
        assert!(entropy_row(&[1.0, 0.0]).abs() < 1e-9);
        // uniform over 10
        let u = vec![0.1; 10];
        assert!((entropy_row(&u) - 10f64.ln()).abs() < 1e-12);
        // direct evaluation for (0.7, 0.3)
        let h = entropy_row(&[0.7, 0.3]);
        assert!((h - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tie_low(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax_tie_low(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn slope_of_linear_decline() {
        // 1.0 -> 0.0 over 100 batches
        let ys: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 / 99.0).collect();
        let s = least_squares_slope(&ys);
        assert!((s - (-1.0 / 99.0)).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_is_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 25.0, 100.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
    }
}
