//! Text formatting shared by every file format this crate emits.
//!
//! Numeric fields use a C `printf` `%g`-style rendering at a fixed number of
//! significant digits: 17 for formats that must round-trip `f64` exactly
//! (model files, QP dumps), 9 for bulk dataset rows. Every emitted file
//! starts with a schema-version comment line; readers reject files whose
//! first line does not match the expected schema exactly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("missing schema line, expected {expected:?}")]
    MissingSchema { expected: String },
    #[error("schema mismatch: expected {expected:?}, found {found:?}")]
    SchemaMismatch { expected: String, found: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse {field:?} as a number")]
    BadNumber { line: usize, field: String },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Renders `x` with `sig` significant digits, mirroring C's `%.{sig}g`.
///
/// Trailing zeros are stripped, the exponent form takes over outside the
/// `[1e-4, 10^sig)` magnitude window, and exponents are padded to two digits
/// with an explicit sign.
pub fn format_g(x: f64, sig: usize) -> String {
    let sig = sig.max(1);
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.to_string();
    }

    // Round to `sig` significant digits first; the rounded exponent decides
    // the presentation.
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp_str) = sci.split_once('e').expect("e-format always has an exponent");
    let exp: i32 = exp_str.parse().expect("exponent is an integer");

    if exp < -4 || exp >= sig as i32 {
        let mantissa = strip_trailing_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        strip_trailing_zeros(&fixed).to_string()
    }
}

fn strip_trailing_zeros(s: &str) -> &str {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.')
}

/// Significant digits that round-trip `f64` bit-exactly.
pub const SIG_EXACT: usize = 17;
/// Significant digits used for bulk dataset rows.
pub const SIG_DATA: usize = 9;

/// The schema comment line that opens an emitted file.
pub fn schema_line(name: &str) -> String {
    format!("# schema: {name} v1")
}

/// Verifies the first line of a file against the expected schema.
pub fn check_schema(first_line: Option<&str>, name: &str) -> Result<(), FormatError> {
    let expected = schema_line(name);
    match first_line {
        None => Err(FormatError::MissingSchema { expected }),
        Some(line) if line.trim_end() == expected => Ok(()),
        Some(line) => Err(FormatError::SchemaMismatch {
            expected,
            found: line.trim_end().to_string(),
        }),
    }
}

/// Parses one numeric CSV field with location context for error reports.
pub fn parse_field(field: &str, line: usize) -> Result<f64, FormatError> {
    field.trim().parse::<f64>().map_err(|_| FormatError::BadNumber {
        line,
        field: field.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frozen against C printf("%.*g", ...) output.
    #[test]
    fn matches_c_printf_g() {
        assert_eq!(format_g(0.0, 9), "0");
        assert_eq!(format_g(-0.0, 9), "-0");
        assert_eq!(format_g(1.0, 9), "1");
        assert_eq!(format_g(-2.5, 17), "-2.5");
        assert_eq!(format_g(0.1, 17), "0.10000000000000001");
        assert_eq!(format_g(1e-5, 9), "1e-05");
        assert_eq!(format_g(0.0001234567891234, 9), "0.000123456789");
        assert_eq!(format_g(1234567891.0, 9), "1.23456789e+09");
        assert_eq!(format_g(123.456, 4), "123.5");
        assert_eq!(format_g(99999.0, 3), "1e+05");
        assert_eq!(format_g(0.24, 9), "0.24");
        assert_eq!(format_g(f64::NAN, 9), "nan");
        assert_eq!(format_g(f64::INFINITY, 9), "inf");
        assert_eq!(format_g(f64::NEG_INFINITY, 9), "-inf");
    }

    /// 17 significant digits must reproduce the exact bit pattern.
    #[test]
    fn seventeen_digits_round_trip_exactly() {
        let mut rng_state = 0x1234_5678_u64;
        for _ in 0..2000 {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let bits = rng_state ^ (rng_state >> 17);
            let x = f64::from_bits(bits & 0x7fef_ffff_ffff_ffff); // finite positives
            let s = format_g(x, SIG_EXACT);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x:e} -> {s}");
        }
    }

    /// Nine-digit output is a fixed point of write -> parse -> write.
    #[test]
    fn nine_digit_output_is_stable() {
        for &x in &[0.3, -0.08, 1234.5678911, 9.81e-7, 22.0, 0.16] {
            let s1 = format_g(x, SIG_DATA);
            let y: f64 = s1.parse().unwrap();
            let s2 = format_g(y, SIG_DATA);
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn schema_check_rejects_unknown_versions() {
        assert!(check_schema(Some("# schema: gait-sequence v1"), "gait-sequence").is_ok());
        assert!(matches!(
            check_schema(Some("# schema: gait-sequence v2"), "gait-sequence"),
            Err(FormatError::SchemaMismatch { .. })
        ));
        assert!(matches!(
            check_schema(None, "gait-sequence"),
            Err(FormatError::MissingSchema { .. })
        ));
    }
}
