//! PNG and raw-float image files.

use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::scenes::PALETTE;

fn img_err(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode<W: Write>(
    w: W,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<()> {
    if len != expected {
        return Err(Error::Image(format!("{what}: buffer has {len} values, expected {expected}")));
    }
    Ok(())
}

/// 8-bit RGB PNG bytes from `H·W·3` floats in `[0, 1]`.
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    check_len(rgb.len(), width * height * 3, "rgb image")?;
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let mut out = Vec::new();
    encode(&mut out, width, height, ColorType::Rgb, BitDepth::Eight, None, &bytes)?;
    Ok(out)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    let bytes = encode_rgb_png(width, height, rgb)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn palette_bytes() -> Vec<u8> {
    PALETTE.iter().flatten().copied().collect()
}

/// Indexed PNG bytes with the class palette.
pub fn encode_mask_png(width: usize, height: usize, mask: &[u8]) -> Result<Vec<u8>> {
    check_len(mask.len(), width * height, "mask")?;
    if let Some(&bad) = mask.iter().find(|&&c| c as usize >= PALETTE.len()) {
        return Err(Error::Image(format!("mask class {bad} has no palette entry")));
    }
    let mut out = Vec::new();
    encode(
        &mut out,
        width,
        height,
        ColorType::Indexed,
        BitDepth::Eight,
        Some(palette_bytes()),
        mask,
    )?;
    Ok(out)
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    let bytes = encode_mask_png(width, height, mask)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// 16-bit grayscale PNG bytes of `depth / far`.
pub fn encode_depth_png(width: usize, height: usize, depth: &[f32], far: f32) -> Result<Vec<u8>> {
    check_len(depth.len(), width * height, "depth")?;
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        let v = ((d / far).clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend(v.to_be_bytes());
    }
    let mut out = Vec::new();
    encode(&mut out, width, height, ColorType::Grayscale, BitDepth::Sixteen, None, &bytes)?;
    Ok(out)
}

pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[f32], far: f32) -> Result<()> {
    let bytes = encode_depth_png(width, height, depth, far)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Raw little-endian `f32`, row-major.
pub fn write_depth_bin(path: &Path, depth: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = depth.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_depth_bin(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// A decoded 8-bit image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    /// Present for indexed images decoded without expansion.
    pub palette: Option<Vec<u8>>,
}

fn decode<R: Read + Seek>(r: R, expand: bool) -> Result<Decoded> {
    let mut dec = png::Decoder::new(BufReader::new(r));
    dec.set_transformations(if expand {
        Transformations::EXPAND | Transformations::STRIP_16
    } else {
        Transformations::STRIP_16
    });
    let mut reader = dec.read_info().map_err(img_err)?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    buf.truncate(info.buffer_size());
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::Image(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        ColorType::Grayscale | ColorType::Indexed => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
        palette: (info.color_type == ColorType::Indexed).then_some(palette).flatten(),
    })
}

/// RGB floats in `[0, 1]` from any 8-bit PNG (gray is replicated, alpha
/// dropped).
pub fn decode_rgb_png(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let d = decode(Cursor::new(bytes), true)?;
    let mut out = Vec::with_capacity(d.width * d.height * 3);
    for px in d.data.chunks(d.channels) {
        let rgb = match d.channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        out.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    Ok((d.width, d.height, out))
}

pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_rgb_png(&std::fs::read(path)?)
}

fn nearest_class(rgb: [u8; 3]) -> u8 {
    let dist = |p: &[u8; 3]| -> i32 { (0..3).map(|i| (p[i] as i32 - rgb[i] as i32).pow(2)).sum() };
    (0..PALETTE.len()).min_by_key(|&i| dist(&PALETTE[i])).unwrap() as u8
}

/// Class ids from a mask PNG. Indexed images are read by index; RGB images
/// are mapped to the nearest palette color.
pub fn decode_mask_png(bytes: &[u8], classes: usize) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(Cursor::new(bytes), false)?;
    let mask: Vec<u8> = if d.palette.is_some() {
        d.data
    } else {
        let e = decode(Cursor::new(bytes), true)?;
        e.data
            .chunks(e.channels)
            .map(|px| match e.channels {
                1 | 2 => nearest_class([px[0]; 3]),
                _ => nearest_class([px[0], px[1], px[2]]),
            })
            .collect()
    };
    if let Some(&bad) = mask.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::Image(format!("mask class {bad} is not below {classes}")));
    }
    Ok((d.width, d.height, mask))
}

pub fn read_mask_png(path: &Path, classes: usize) -> Result<(usize, usize, Vec<u8>)> {
    decode_mask_png(&std::fs::read(path)?, classes)
}

/// Palette colors of a class mask as RGB floats.
pub fn colorize_mask(mask: &[u8]) -> Vec<f32> {
    mask.iter()
        .flat_map(|&c| PALETTE[c as usize % PALETTE.len()].map(|v| v as f32 / 255.0))
        .collect()
}

/// Loads the 16-bit depth PNG back as `depth / far` in `[0, 1]`.
pub fn read_depth_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(img_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    if info.bit_depth != BitDepth::Sixteen || info.color_type != ColorType::Grayscale {
        return Err(Error::Image("depth PNG must be 16-bit grayscale".into()));
    }
    let vals = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Ok((info.width as usize, info.height as usize, vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_is_indexed() {
        let mask = vec![0u8, 1, 2, 3, 4, 5];
        let bytes = encode_mask_png(3, 2, &mask).unwrap();
        let d = decode(Cursor::new(&bytes[..]), false).unwrap();
        assert_eq!(d.palette.unwrap()[3..6], [255, 204, 153]);
        assert_eq!(decode_mask_png(&bytes, 6).unwrap().2, mask);
        assert!(decode_mask_png(&bytes, 5).is_err());
    }

    #[test]
    fn rgb_mask_maps_to_nearest_palette_entry() {
        let rgb = colorize_mask(&[2, 5, 0, 1]);
        let bytes = encode_rgb_png(2, 2, &rgb).unwrap();
        assert_eq!(decode_mask_png(&bytes, 6).unwrap().2, vec![2, 5, 0, 1]);
    }

    #[test]
    fn rgb_roundtrip_quantizes() {
        let rgb = vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1];
        let bytes = encode_rgb_png(2, 1, &rgb).unwrap();
        let (w, h, back) = decode_rgb_png(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn depth_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = vec![2.0f32, 3.5, 4.7];
        let p = dir.path().join("d.bin");
        write_depth_bin(&p, &d).unwrap();
        assert_eq!(read_depth_bin(&p, 3).unwrap(), d);
        assert!(read_depth_bin(&p, 4).is_err());
        let q = dir.path().join("d.png");
        write_depth_png(&q, 3, 1, &d, 4.7).unwrap();
        let (_, _, n) = read_depth_png(&q).unwrap();
        assert!((n[2] - 1.0).abs() < 1e-6 && (n[0] - 2.0 / 4.7).abs() < 1e-4);
    }
}
