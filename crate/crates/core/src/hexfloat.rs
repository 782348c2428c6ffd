//! Exact text encoding of `f64` as C99-style hexadecimal floats.
//!
//! Only the canonical form written by [`encode`] is accepted back:
//! `[-]0x1.<13 hex digits>p<exp>` for normal numbers, `[-]0x0.<13 hex digits>p-1022`
//! for subnormals and `[-]0x0p+0` for zero. Trailing zero digits may be dropped.

use crate::error::{Error, Result};

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn encode(x: f64) -> String {
    assert!(x.is_finite(), "hex float encoding of non-finite value");
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & FRAC_MASK;
    if biased == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 { (0, -1022) } else { (1, biased - 1023) };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp >= 0 { "+" } else { "" };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{exp}")
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{exp}")
    }
}

pub fn decode(s: &str) -> Result<f64> {
    let bad = || Error::Format(format!("not a canonical hex float: {s:?}"));
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mantissa, exp) = rest.split_once('p').ok_or_else(bad)?;
    let exp: i32 = exp.parse().map_err(|_| bad())?;
    let (lead, digits) = match mantissa.split_once('.') {
        Some((l, d)) => (l, d),
        None => (mantissa, ""),
    };
    if digits.len() > 13 || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let frac = if digits.is_empty() {
        0
    } else {
        u64::from_str_radix(digits, 16).map_err(|_| bad())? << (4 * (13 - digits.len()))
    };
    let sign_bit = u64::from(neg) << 63;
    let bits = match lead {
        "1" => {
            let biased = exp + 1023;
            if !(1..=2046).contains(&biased) {
                return Err(bad());
            }
            sign_bit | ((biased as u64) << FRAC_BITS) | frac
        }
        "0" if frac == 0 => sign_bit,
        "0" if exp == -1022 => sign_bit | frac,
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(bits))
}
