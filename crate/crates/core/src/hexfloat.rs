//! Hexadecimal floating-point text (`0x1.8p+1` = 3.0), which preserves every
//! bit of an `f64` without decimal rounding.

use crate::{Error, Result};

const MANT_BITS: u32 = 52;
const MANT_MASK: u64 = (1 << MANT_BITS) - 1;

pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let biased = ((bits >> MANT_BITS) & 0x7ff) as i32;
    let mant = bits & MANT_MASK;
    if biased == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 { (0, -1022) } else { (1, biased - 1023) };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() {
        String::new()
    } else {
        format!(".{digits}")
    };
    let esign = if exp >= 0 { "+" } else { "-" };
    format!("{sign}0x{lead}{frac}p{esign}{}", exp.abs())
}

/// Multiplies by `2^e` in steps that stay within the normal exponent range,
/// so the result is exact whenever it is representable.
fn scale_pow2(mut x: f64, mut e: i32) -> f64 {
    while e != 0 {
        let step = e.clamp(-1000, 1000);
        x *= f64::from_bits(((step + 1023) as u64) << MANT_BITS);
        e -= step;
    }
    x
}

pub fn parse(s: &str) -> Result<f64> {
    let err = || Error::Parse(format!("invalid hex float `{s}`"));
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let signed = |v: f64| if neg { -v } else { v };
    match body {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(signed(f64::INFINITY)),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(err)?;
    let (mantissa, exponent) = body.split_once(['p', 'P']).ok_or_else(err)?;
    let exponent: i32 = exponent.parse().map_err(|_| err())?;
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    let mut m: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        let d = c.to_digit(16).ok_or_else(err)? as u64;
        m = m.checked_mul(16).and_then(|v| v.checked_add(d)).ok_or_else(err)?;
    }
    if m >= 1 << 53 {
        // would need rounding; our own output never gets here
        return Err(err());
    }
    let e = exponent - 4 * frac_part.len() as i32;
    Ok(signed(scale_pow2(m as f64, e)))
}

/// Serde adapter for `Vec<Vec<Vec<f64>>>` stored as hex-float strings.
pub mod serde_nested {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<Vec<f64>>>>, s: S) -> Result<S::Ok, S::Error> {
        let text: Option<Vec<Vec<Vec<String>>>> = v.as_ref().map(|outer| {
            outer
                .iter()
                .map(|mid| {
                    mid.iter()
                        .map(|inner| inner.iter().map(|&x| super::format(x)).collect())
                        .collect()
                })
                .collect()
        });
        text.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<Vec<f64>>>>, D::Error> {
        let text: Option<Vec<Vec<Vec<String>>>> = Option::deserialize(d)?;
        text.map(|outer| {
            outer
                .iter()
                .map(|mid| {
                    mid.iter()
                        .map(|inner| {
                            inner
                                .iter()
                                .map(|s| super::parse(s).map_err(D::Error::custom))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(-0.5), "-0x1p-1");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 2.0), "0x0.8p-1022");
        assert_eq!(parse("0x1.8p+1").unwrap(), 3.0);
        assert_eq!(parse("0x10p-4").unwrap(), 1.0);
        assert!(parse("1.5").is_err());
        assert!(parse("0x1.zp+0").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let back = parse(&format(x)).unwrap();
            if x.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), bits);
            }
        }
    }
}
