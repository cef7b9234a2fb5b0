//! Human-friendly byte quantities: `157.3GB`, `500KB/s`, `1MiB`, `4096`.

pub fn parse_bytes(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let t = t.strip_suffix("/s").unwrap_or(t);
    let split = t
        .find(|c: char| c.is_ascii_alphabetic())
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a byte quantity"))?;
    let mult = match unit.trim() {
        "" | "B" => 1.0,
        "KB" | "kB" | "K" | "k" => 1e3,
        "MB" | "M" => 1e6,
        "GB" | "G" => 1e9,
        "TB" | "T" => 1e12,
        "KiB" => 1024.0,
        "MiB" => 1024.0 * 1024.0,
        "GiB" => 1024f64.powi(3),
        "TiB" => 1024f64.powi(4),
        other => return Err(format!("unknown unit `{other}` in `{s}`")),
    };
    let bytes = value * mult;
    if !bytes.is_finite() || bytes < 0.0 {
        return Err(format!("`{s}` must be a non-negative quantity"));
    }
    Ok(bytes)
}

/// Whole bytes, for piece lengths and rate limits.
pub fn parse_byte_count(s: &str) -> Result<u64, String> {
    let b = parse_bytes(s)?;
    if b.fract() != 0.0 || b > u64::MAX as f64 {
        return Err(format!("`{s}` is not a whole number of bytes"));
    }
    Ok(b as u64)
}

/// Strictly positive, for speeds.
pub fn parse_rate(s: &str) -> Result<f64, String> {
    match parse_bytes(s)? {
        r if r > 0.0 => Ok(r),
        _ => Err(format!("`{s}` must be greater than zero")),
    }
}

pub fn format_bytes(b: f64) -> String {
    if b >= 1e12 {
        format!("{:.2} TB", b / 1e12)
    } else if b >= 1e9 {
        format!("{:.2} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.2} MB", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.2} KB", b / 1e3)
    } else {
        format!("{b:.0} B")
    }
}
