//! Finite-difference helpers shared by the consistency checks.
//!
//! Steps are scaled per coordinate as `base * (1 + |x_i|)`.

pub fn scaled_step(base: f64, x: f64) -> f64 {
    base * (1.0 + x.abs())
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(i, d) in moves {
        y[i] += d;
    }
    y
}

/// Second-order central-difference gradient.
pub fn gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], base: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = scaled_step(base, x[i]);
            (f(&shifted(x, &[(i, h)])) - f(&shifted(x, &[(i, -h)]))) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector field; row `i` holds d f / d x_i,
/// i.e. entry `(i, j)` is d f_j / d x_i.
pub fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], base: f64) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|i| {
            let h = scaled_step(base, x[i]);
            let fp = f(&shifted(x, &[(i, h)]));
            let fm = f(&shifted(x, &[(i, -h)]));
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

const O4: [(f64, f64); 4] = [(-2.0, 1.0 / 12.0), (-1.0, -8.0 / 12.0), (1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)];

/// Fourth-order central first derivative along coordinate `i`.
pub fn d1<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize, h: f64) -> f64 {
    O4.iter().map(|&(k, w)| w * f(&shifted(x, &[(i, k * h)]))).sum::<f64>() / h
}

/// Fourth-order central second derivative d^2 f / dx_i dx_j.
pub fn d2<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize, j: usize, hi: f64, hj: f64) -> f64 {
    if i == j {
        const W: [(f64, f64); 5] = [
            (-2.0, -1.0 / 12.0),
            (-1.0, 16.0 / 12.0),
            (0.0, -30.0 / 12.0),
            (1.0, 16.0 / 12.0),
            (2.0, -1.0 / 12.0),
        ];
        W.iter().map(|&(k, w)| w * f(&shifted(x, &[(i, k * hi)]))).sum::<f64>() / (hi * hi)
    } else {
        let mut acc = 0.0;
        for &(ki, wi) in &O4 {
            for &(kj, wj) in &O4 {
                acc += wi * wj * f(&shifted(x, &[(i, ki * hi), (j, kj * hj)]));
            }
        }
        acc / (hi * hj)
    }
}

/// Relative error `|a - b| / max(1, |b|)` taken over the worst component.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
