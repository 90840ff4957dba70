//! Scalar special functions used by the Student-t machinery.

/// Natural log of the gamma function, Lanczos approximation (g=7, n=9).
///
/// Accurate to ~1e-13 relative for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π/sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma ψ(x) via upward recurrence into the asymptotic regime.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain: x > 0");
    let mut x = x;
    let mut acc = 0.0;
    // ψ(x) = ψ(x+1) - 1/x; shift until the asymptotic series is accurate
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    // asymptotic expansion in 1/x^2
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}
