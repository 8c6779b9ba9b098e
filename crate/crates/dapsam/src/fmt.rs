//! Numeric formatting for CSV outputs.

/// Format with the given number of significant digits (scientific notation,
/// round-trips through `f64::parse`). Non-finite values serialize as text.
pub fn sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
}

/// Empty string for None, formatted value otherwise (CSV missing field).
pub fn sig_opt(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) => sig(v, digits),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::sig;

    #[test]
    fn formats_significant_digits() {
        assert_eq!(sig(0.880797, 6), "8.80797e-1");
        assert_eq!(sig(3.0, 3), "3.00e0");
        let parsed: f64 = sig(std::f64::consts::PI, 12).parse().unwrap();
        assert!((parsed - std::f64::consts::PI).abs() < 1e-11);
    }

    #[test]
    fn handles_negatives_and_zero() {
        assert_eq!(sig(0.0, 6), "0.00000e0");
        let parsed: f64 = sig(-1.5e-7, 9).parse().unwrap();
        assert!((parsed + 1.5e-7).abs() < 1e-15);
    }
}
