/// Ordinary least squares `min ||X b - y||` via Householder QR on
/// column-scaled `X`. Returns `None` when `X` is rank deficient or there are
/// fewer rows than columns.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = rows.len();
    let k = rows.first()?.len();
    if k == 0 || n < k || y.len() != n || rows.iter().any(|r| r.len() != k) {
        return None;
    }

    // column-major copy, each column scaled to unit max-abs
    let mut scale = vec![0.0f64; k];
    for row in rows {
        for (j, v) in row.iter().enumerate() {
            scale[j] = scale[j].max(v.abs());
        }
    }
    if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return None;
    }
    let mut a: Vec<Vec<f64>> = (0..k).map(|j| rows.iter().map(|r| r[j] / scale[j]).collect()).collect();
    let mut b = y.to_vec();

    for j in 0..k {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in a.iter_mut().skip(j) {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col[j..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&b[j..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        for (c, vi) in b[j..].iter_mut().zip(&v) {
            *c -= f * vi;
        }
    }

    // R is upper triangular in a[j][..k]
    let max_diag = (0..k).map(|j| a[j][j].abs()).fold(0.0, f64::max);
    let mut coef = vec![0.0; k];
    for i in (0..k).rev() {
        let rii = a[i][i];
        if rii.abs() <= max_diag * 1e-12 {
            return None;
        }
        let mut s = b[i];
        for j in i + 1..k {
            s -= a[j][i] * coef[j];
        }
        coef[i] = s / rii;
    }
    Some(coef.iter().zip(&scale).map(|(c, s)| c / s).collect())
}
