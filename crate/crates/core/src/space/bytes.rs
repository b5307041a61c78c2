//! Binary (1024-based) byte sizes as used by JVM and container memory flags.

use thiserror::Error;

const UNITS: [(char, u64); 3] = [('g', 1 << 30), ('m', 1 << 20), ('k', 1 << 10)];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ByteSizeError {
    #[error("malformed byte size {0:?} (expected digits with optional b/k/m/g suffix)")]
    Malformed(String),
    #[error("byte size must be positive")]
    NotPositive,
    #[error("byte size {0:?} overflows")]
    Overflow(String),
}

/// Parses `"512m"`, `"1G"`, `"4096"` or `"4096b"` into a byte count.
pub fn parse_byte_size(text: &str) -> Result<u64, ByteSizeError> {
    let trimmed = text.trim();
    let lower = trimmed.to_ascii_lowercase();
    let (digits, multiplier) = match lower.chars().last() {
        Some('b') => (&lower[..lower.len() - 1], 1),
        Some('k') => (&lower[..lower.len() - 1], 1 << 10),
        Some('m') => (&lower[..lower.len() - 1], 1 << 20),
        Some('g') => (&lower[..lower.len() - 1], 1 << 30),
        _ => (lower.as_str(), 1),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ByteSizeError::Malformed(text.to_string()));
    }
    let count: u64 = digits
        .parse()
        .map_err(|_| ByteSizeError::Overflow(text.to_string()))?;
    let bytes = count
        .checked_mul(multiplier)
        .ok_or_else(|| ByteSizeError::Overflow(text.to_string()))?;
    if bytes == 0 {
        return Err(ByteSizeError::NotPositive);
    }
    Ok(bytes)
}

/// Formats with the largest suffix that divides exactly, else plain bytes.
pub fn format_byte_size(bytes: u64) -> Result<String, ByteSizeError> {
    if bytes == 0 {
        return Err(ByteSizeError::NotPositive);
    }
    for (suffix, unit) in UNITS {
        if bytes.is_multiple_of(unit) {
            return Ok(format!("{}{}", bytes / unit, suffix));
        }
    }
    Ok(bytes.to_string())
}
