//! Basis functions and their derivatives for clamped cubic splines.

pub const DEGREE: usize = 3;

/// Knot vector with `DEGREE + 1` copies of 0 and 1 and uniform interior knots.
pub fn clamped_uniform_knots(n_ctrl: usize) -> Vec<f64> {
    let spans = n_ctrl.saturating_sub(DEGREE).max(1);
    let mut k = vec![0.0; DEGREE + 1];
    for i in 1..spans {
        k.push(i as f64 / spans as f64);
    }
    k.extend(std::iter::repeat_n(1.0, DEGREE + 1));
    k
}

/// Index `i` with `knots[i] <= u < knots[i + 1]`; `u = 1` maps to the last span.
pub fn find_span(knots: &[f64], n_ctrl: usize, u: f64) -> usize {
    let n = n_ctrl - 1;
    if u >= knots[n + 1] {
        return n;
    }
    if u <= knots[DEGREE] {
        return DEGREE;
    }
    let (mut lo, mut hi) = (DEGREE, n + 1);
    let mut mid = (lo + hi) / 2;
    while u < knots[mid] || u >= knots[mid + 1] {
        if u < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
        mid = (lo + hi) / 2;
    }
    mid
}

/// Values and first two derivatives of the four basis functions that are
/// non-zero on `span`: `out[k][j]` is the k-th derivative of
/// `N_{span-3+j}` at `u`.
pub fn ders_basis(span: usize, u: f64, knots: &[f64]) -> [[f64; DEGREE + 1]; 3] {
    const P: usize = DEGREE;
    let mut ndu = [[0.0; P + 1]; P + 1];
    let mut left = [0.0; P + 1];
    let mut right = [0.0; P + 1];
    ndu[0][0] = 1.0;
    for j in 1..=P {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            // lower triangle holds knot differences, upper triangle basis values
            ndu[j][r] = right[r + 1] + left[j - r];
            let tmp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = [[0.0; P + 1]; 3];
    for j in 0..=P {
        ders[0][j] = ndu[j][P];
    }
    let mut a = [[0.0; P + 1]; 2];
    for r in 0..=P {
        let (mut s1, mut s2) = (0, 1);
        a[0][0] = 1.0;
        for k in 1..=2usize {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = P - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { P - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut f = P as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= f;
        }
        f *= (P - k) as f64;
    }
    ders
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots_are_clamped() {
        assert_eq!(clamped_uniform_knots(4), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            clamped_uniform_knots(6),
            vec![0.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn partition_of_unity_and_derivative_sums() {
        let k = clamped_uniform_knots(9);
        for i in 0..=200 {
            let u = i as f64 / 200.0;
            let s = find_span(&k, 9, u);
            let d = ders_basis(s, u, &k);
            assert!((d[0].iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(d[1].iter().sum::<f64>().abs() < 1e-10);
            assert!(d[2].iter().sum::<f64>().abs() < 1e-9);
            assert!(d[0].iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let k = clamped_uniform_knots(7);
        let h = 1e-6;
        for &u in &[0.13, 0.37, 0.52, 0.81] {
            let s = find_span(&k, 7, u);
            let d = ders_basis(s, u, &k);
            let p = ders_basis(s, u + h, &k);
            let m = ders_basis(s, u - h, &k);
            for j in 0..4 {
                assert!(((p[0][j] - m[0][j]) / (2.0 * h) - d[1][j]).abs() < 1e-6);
                assert!(((p[1][j] - m[1][j]) / (2.0 * h) - d[2][j]).abs() < 1e-5);
            }
        }
    }
}
