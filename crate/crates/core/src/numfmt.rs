//! Fixed numeric formatting for CSV outputs.

/// Formats `x` with nine significant digits, keeping trailing zeros so the
/// width is stable. Magnitudes outside `[1e-5, 1e9)` use scientific notation.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    // Round first so the exponent reflects the rounded mantissa.
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}
