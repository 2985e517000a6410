//! Three-row P6 panels: original, attribution heat, overlay.

use std::path::Path;

use super::dataset::quantize_pixel;
use super::{write_file, DataError};
use crate::tensor::Tensor;

fn planes(t: &Tensor, what: &str, h: usize, w: usize) -> Result<Vec<[f64; 3]>, DataError> {
    let s = t.shape();
    let channels = match s {
        [c, hh, ww] if *hh == h && *ww == w && (*c == 1 || *c == 3) => *c,
        _ => {
            return Err(DataError::Invalid(format!(
                "{what} has shape {s:?}, expected [1 or 3, {h}, {w}]"
            )))
        }
    };
    let plane = h * w;
    let d = t.data();
    Ok((0..plane)
        .map(|i| {
            if channels == 1 {
                [d[i]; 3]
            } else {
                [d[i], d[plane + i], d[2 * plane + i]]
            }
        })
        .collect())
}

/// Encodes the panel; `image` fixes the row size and must have 1 or 3 channels.
pub fn encode_panel(
    image: &Tensor,
    attr_map: &Tensor,
    overlaid: &Tensor,
) -> Result<Vec<u8>, DataError> {
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => {
            return Err(DataError::Invalid(format!(
                "image has shape {s:?}, expected [c, h, w]"
            )))
        }
    };
    let rows = [
        planes(image, "image", h, w)?,
        planes(attr_map, "attribution map", h, w)?,
        planes(overlaid, "overlay", h, w)?,
    ];
    let mut out = format!("P6\n{w} {}\n255\n", 3 * h).into_bytes();
    for row in &rows {
        for px in row {
            out.extend(px.iter().map(|&v| quantize_pixel(v)));
        }
    }
    Ok(out)
}

pub fn export_panel(
    image: &Tensor,
    attr_map: &Tensor,
    overlaid: &Tensor,
    path: &Path,
) -> Result<(), DataError> {
    write_file(path, &encode_panel(image, attr_map, overlaid)?)
}

/// Parses a P6 file with maxval 255, returning (width, height, RGB bytes).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DataError> {
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
            return Err(DataError::Truncated {
                what: "PPM header",
                offset: pos,
                needed: 1,
                available: 0,
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |m: &str| DataError::Malformed {
        what: "PPM header",
        offset: 0,
        message: m.into(),
    };
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 3 {
        return Err(DataError::Malformed {
            what: "PPM body",
            offset: pos,
            message: format!("{} bytes for a {w}x{h} image", body.len()),
        });
    }
    Ok((w, h, body.to_vec()))
}
