//! Small shared numerical kernels.

/// Composite Simpson quadrature of `f` over [a, b] with `panels` subintervals
/// (rounded up to an even count).
pub fn composite_simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Binomial coefficient as f64; exact for the small orders used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_cubic_exactly() {
        let val = composite_simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 2);
        assert!((val - 0.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_small_table() {
        assert_eq!(binomial(4, 2), 6.0);
        assert_eq!(binomial(3, 0), 1.0);
        assert_eq!(binomial(3, 3), 1.0);
        assert_eq!(binomial(2, 5), 0.0);
    }
}
