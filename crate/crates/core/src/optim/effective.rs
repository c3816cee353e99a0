use num_rational::Ratio;

/// Amount of effective updates per round, `u = eta * (E * N) / (B * K)`.
pub fn effective_update_amount(eta: f64, epochs: usize, n: usize, batch_size: usize, clients: usize) -> f64 {
    eta * (epochs * n) as f64 / (batch_size * clients) as f64
}

/// [`effective_update_amount`] in exact rational arithmetic.
pub fn effective_update_amount_exact(
    eta: Ratio<i128>,
    epochs: usize,
    n: usize,
    batch_size: usize,
    clients: usize,
) -> Ratio<i128> {
    eta * Ratio::new((epochs * n) as i128, (batch_size * clients) as i128)
}

/// The decimal number printed for `x` (shortest round-trip form), as an
/// exact fraction. `0.005` becomes `1/200`, not the nearest binary double.
pub fn decimal_ratio(x: f64) -> Option<Ratio<i128>> {
    if !x.is_finite() {
        return None;
    }
    let text = format!("{x:e}");
    let (mantissa, exp) = text.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let negative = mantissa.starts_with('-');
    let digits = mantissa.trim_start_matches('-');
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let numer: i128 = format!("{int_part}{frac_part}").parse().ok()?;
    let scale = exp - frac_part.len() as i32;
    let pow = 10i128.checked_pow(scale.unsigned_abs())?;
    let r = if scale >= 0 { Ratio::from_integer(numer * pow) } else { Ratio::new(numer, pow) };
    Some(if negative { -r } else { r })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centralized_and_base_settings_match() {
        assert_eq!(effective_update_amount(0.005, 1, 50_000, 500, 1), 0.5);
        assert_eq!(effective_update_amount(0.005, 1, 50_000, 50, 10), 0.5);
        let eta = decimal_ratio(0.005).unwrap();
        assert_eq!(eta, Ratio::new(1, 200));
        assert_eq!(effective_update_amount_exact(eta, 1, 50_000, 500, 1), Ratio::new(1, 2));
        assert_eq!(effective_update_amount_exact(eta, 1, 50_000, 50, 10), Ratio::new(1, 2));
    }

    #[test]
    fn decimal_ratio_parses_shortest_repr() {
        assert_eq!(decimal_ratio(0.25).unwrap(), Ratio::new(1, 4));
        assert_eq!(decimal_ratio(1500.0).unwrap(), Ratio::from_integer(1500));
        assert_eq!(decimal_ratio(-0.1).unwrap(), Ratio::new(-1, 10));
        assert_eq!(decimal_ratio(0.05).unwrap() * Ratio::from_integer(10), Ratio::new(1, 2));
        assert!(decimal_ratio(f64::NAN).is_none());
    }
}
