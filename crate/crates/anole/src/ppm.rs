//! Binary PPM (P6, 8-bit) images.

use std::fs;
use std::path::Path;

use anole_core::vq::Image;

use crate::error::{Error, Result};

/// Channel value as stored on disk.
pub fn quantize_channel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it will read back from disk.
pub fn quantize_image(image: &Image) -> Image {
    let pixels = image.pixels().iter().map(|&v| quantize_channel(v) as f32 / 255.0).collect();
    Image::new(image.height(), image.width(), pixels).expect("same dimensions")
}

pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| quantize_channel(v)));
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?.to_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?} (only binary P6 is read)", fields[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    if parse(&fields[3], "maxval")? != 255 {
        return Err("only 8-bit images (maxval 255) are supported".into());
    }
    let n = width * height * 3;
    let raster = bytes.get(pos..pos + n).ok_or("raster shorter than header dimensions")?;
    let pixels = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, pixels).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|message| Error::Image { path: path.to_owned(), message })
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode(image)).map_err(Error::io(path))
}
