//! Binary PGM (P5) depth images and label maps.
//!
//! Depth images are 8- or 16-bit (big-endian), row-major, and scaled to
//! `[0, 1]` on load. Label maps are 8-bit with pixel value = label id.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CrfError, Result};
use crate::model::{GridGeometry, LabelSpace, Labeling};
use crate::net::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, field: &str) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(CrfError::format(field, "missing"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = next_token(bytes, pos, field)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| CrfError::format(field, format!("not a number: {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode(bytes: &[u8]) -> Result<RawPgm> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos, "magic")?;
    if magic != b"P5" {
        return Err(CrfError::format("magic", format!("expected P5, found {:?}", String::from_utf8_lossy(magic))));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(CrfError::format("dimensions", "width and height must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(CrfError::format("maxval", format!("{maxval} outside 1..=65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CrfError::format("header", "no whitespace before raster"));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(CrfError::format("raster", format!("expected {need} bytes, found {}", raster.len())));
    }
    let pixels: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(&p) = pixels.iter().find(|&&p| p as usize > maxval) {
        return Err(CrfError::format("raster", format!("pixel value {p} exceeds maxval {maxval}")));
    }
    Ok(RawPgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode(pgm: &RawPgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval > 255 {
        for p in &pgm.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    } else {
        out.extend(pgm.pixels.iter().map(|&p| p as u8));
    }
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

/// Depth image as a one-channel map with values in `[0, 1]`.
pub fn image_from_pgm(pgm: &RawPgm) -> Result<FeatureMap> {
    let scale = pgm.maxval as f64;
    FeatureMap::from_data(1, pgm.height, pgm.width, pgm.pixels.iter().map(|&p| p as f64 / scale).collect())
}

/// Quantizes a one-channel map, clamped to `[0, 1]`, at the given maxval.
pub fn image_to_pgm(image: &FeatureMap, maxval: u16) -> Result<RawPgm> {
    if image.channels() != 1 {
        return Err(CrfError::contract("only one-channel images can be written as PGM"));
    }
    if maxval == 0 {
        return Err(CrfError::format("maxval", "must be positive"));
    }
    let m = maxval as f64;
    Ok(RawPgm {
        width: image.width(),
        height: image.height(),
        maxval,
        pixels: image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16).collect(),
    })
}

pub fn labels_from_pgm(pgm: &RawPgm, labels: LabelSpace) -> Result<(GridGeometry, Labeling)> {
    if pgm.maxval > 255 {
        return Err(CrfError::format("maxval", "label maps are 8-bit"));
    }
    if let Some(&p) = pgm.pixels.iter().find(|&&p| p as usize >= labels.count()) {
        return Err(CrfError::format(
            "label",
            format!("value {p} not below label count {}", labels.count()),
        ));
    }
    let geometry = GridGeometry::new(pgm.height, pgm.width)?;
    let labeling = Labeling::new(pgm.pixels.iter().map(|&p| p as usize).collect(), labels)?;
    Ok((geometry, labeling))
}

pub fn labels_to_pgm(geometry: GridGeometry, labels: &Labeling) -> Result<RawPgm> {
    if labels.len() != geometry.sites() {
        return Err(CrfError::contract("label map does not match geometry"));
    }
    if labels.states().iter().any(|&s| s > 255) {
        return Err(CrfError::contract("label ids above 255 do not fit an 8-bit map"));
    }
    Ok(RawPgm {
        width: geometry.width(),
        height: geometry.height(),
        maxval: 255,
        pixels: labels.states().iter().map(|&s| s as u16).collect(),
    })
}

pub fn read_image(path: &Path) -> Result<FeatureMap> {
    image_from_pgm(&decode(&read_file(path)?)?)
}

pub fn write_image(path: &Path, image: &FeatureMap, maxval: u16) -> Result<()> {
    write_file(path, &encode(&image_to_pgm(image, maxval)?))
}

pub fn read_labels(path: &Path, labels: LabelSpace) -> Result<(GridGeometry, Labeling)> {
    labels_from_pgm(&decode(&read_file(path)?)?, labels)
}

pub fn write_labels(path: &Path, geometry: GridGeometry, labels: &Labeling) -> Result<()> {
    write_file(path, &encode(&labels_to_pgm(geometry, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_51_is_point_two() {
        let bytes = b"P5\n1 1\n255\n\x33";
        let img = image_from_pgm(&decode(bytes).unwrap()).unwrap();
        assert!((img.data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn comments_and_sixteen_bit() {
        let mut bytes = b"P5 # depth\n2 1\n# max\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xFF, 0xFF, 0x00, 0x00]);
        let raw = decode(&bytes).unwrap();
        assert_eq!(raw.pixels, vec![65535, 0]);
        assert_eq!(encode(&raw).len(), "P5\n2 1\n65535\n".len() + 4);
        assert_eq!(decode(&encode(&raw)).unwrap(), raw);
    }

    #[test]
    fn malformed_headers_name_the_field() {
        let field = |b: &[u8]| match decode(b) {
            Err(CrfError::Format { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(b"P2\n1 1\n255\n\x00"), "magic");
        assert_eq!(field(b"P5\nx 1\n255\n\x00"), "width");
        assert_eq!(field(b"P5\n0 1\n255\n\x00"), "dimensions");
        assert_eq!(field(b"P5\n2 2\n255\n\x00"), "raster");
        assert_eq!(field(b"P5\n1 1\n70000\n\x00"), "maxval");
        assert_eq!(field(b"P5\n1 1\n9\n\x0a"), "raster");
    }

    #[test]
    fn label_maps() {
        let l = LabelSpace::new(3).unwrap();
        let g = GridGeometry::new(2, 3).unwrap();
        let y = Labeling::new(vec![0, 1, 2, 2, 1, 0], l).unwrap();
        let raw = labels_to_pgm(g, &y).unwrap();
        let (g2, y2) = labels_from_pgm(&decode(&encode(&raw)).unwrap(), l).unwrap();
        assert_eq!((g2, y2), (g, y));
        let bad = b"P5\n2 1\n255\n\x00\x03";
        assert!(matches!(
            labels_from_pgm(&decode(bad).unwrap(), l),
            Err(CrfError::Format { field, .. }) if field == "label"
        ));
    }

    #[test]
    fn image_quantization_round_trip() {
        let img = FeatureMap::from_data(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let back = image_from_pgm(&decode(&encode(&image_to_pgm(&img, 65535).unwrap())).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }
}
