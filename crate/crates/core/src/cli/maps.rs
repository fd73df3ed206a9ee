//! 16-bit binary PGM (P5) output. Each map is min-max scaled to `0..=65535`
//! and its original range is recorded in a sidecar `scales.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::anomaly::{pixel_anomaly, PixelMap, UncertaintyDecomposition};
use crate::data::Image;
use crate::error::{Error, Result};

pub const MAP_NAMES: [&str; 6] = ["original", "reconstruction", "aleatoric", "epistemic", "total", "error"];

/// Encodes `values` (row-major) as a 16-bit P5 image; returns the bytes and
/// the `(min, max)` used for scaling. Constant maps encode as all zeros.
pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> Result<(Vec<u8>, f64, f64)> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::dim("pgm", &[height, width], &[values.len()]));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("map contains non-finite values".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for &v in values {
        let q = if max > min { ((v - min) / (max - min) * 65535.0).round() as u16 } else { 0 };
        // PGM stores 16-bit samples most significant byte first
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok((out, min, max))
}

/// Parses a P5 image written by [`encode_pgm16`].
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("pgm header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Format("not a 16-bit P5 image".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM extent {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).ok_or(Error::Truncated("pgm body"))?;
    if body.len() != 2 * w * h {
        return Err(Error::Truncated("pgm body"));
    }
    let px = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, px))
}

/// The six visualization maps of one slice, in [`MAP_NAMES`] order.
pub fn slice_maps(image: &Image, u: &UncertaintyDecomposition) -> Result<Vec<PixelMap>> {
    let original = PixelMap {
        height: image.height,
        width: image.width,
        values: image.pixels.iter().map(|&v| v as f64).collect(),
    };
    Ok(vec![
        original,
        u.mean_recon.clone(),
        u.aleatoric.clone(),
        u.epistemic.clone(),
        u.total.clone(),
        pixel_anomaly(image, u)?,
    ])
}

/// Writes `<name>.pgm` for each map plus `scales.csv` (`map,min,max`).
pub fn write_maps(dir: &Path, maps: &[PixelMap]) -> Result<()> {
    if maps.len() != MAP_NAMES.len() {
        return Err(Error::Config(format!("expected {} maps, got {}", MAP_NAMES.len(), maps.len())));
    }
    fs::create_dir_all(dir)?;
    let mut scales = String::from("map,min,max\n");
    for (name, map) in MAP_NAMES.iter().zip(maps) {
        let (bytes, min, max) = encode_pgm16(map.width, map.height, &map.values)?;
        fs::write(dir.join(format!("{name}.pgm")), bytes)?;
        let _ = writeln!(scales, "{name},{min},{max}");
    }
    fs::write(dir.join("scales.csv"), scales)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_scaling() {
        let (bytes, min, max) = encode_pgm16(3, 1, &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!((min, max), (2.0, 4.0));
        assert!(bytes.starts_with(b"P5\n3 1\n65535\n"));
        let (w, h, px) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h), (3, 1));
        assert_eq!(px, vec![0, 32768, 65535]);

        let (bytes, _, _) = encode_pgm16(2, 1, &[0.5, 0.5]).unwrap();
        assert_eq!(decode_pgm16(&bytes).unwrap().2, vec![0, 0]);

        assert!(encode_pgm16(2, 2, &[0.0]).is_err());
        assert!(encode_pgm16(1, 1, &[f64::NAN]).is_err());
    }
}
