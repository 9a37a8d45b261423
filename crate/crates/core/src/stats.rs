//! Sample statistics used by diagnostics and reports.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Column `c` of a row-major matrix with `cols` columns.
pub fn column(data: &[f64], cols: usize, c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(cols).copied().collect()
}

/// Per-column means and the covariance matrix (row-major, population).
pub fn mean_cov(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() / cols;
    let mut m = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (acc, v) in m.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut m {
        *v /= n as f64;
    }
    let mut cov = vec![0.0; cols * cols];
    for row in data.chunks_exact(cols) {
        for i in 0..cols {
            let di = row[i] - m[i];
            for j in 0..cols {
                cov[i * cols + j] += di * (row[j] - m[j]);
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    (m, cov)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
