//! PNG reading and writing for images, masks and debug planes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{LabelMask, NUM_CLASSES, PALETTE};
use crate::preprocess::RgbImage;

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let size =
        reader.output_buffer_size().ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn unpad_rows(buf: &[u8], info: &png::OutputInfo, row_bytes: usize) -> Vec<u8> {
    buf.chunks(info.line_size).flat_map(|r| r[..row_bytes].iter().copied()).collect()
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let (info, buf) = decode(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit samples", path.display())));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => unpad_rows(&buf, &info, w * 3),
        png::ColorType::Rgba => {
            unpad_rows(&buf, &info, w * 4).chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
        }
        other => return Err(Error::Format(format!("{}: expected RGB, found {other:?}", path.display()))),
    };
    RgbImage::new(h, w, data)
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    encode(path.as_ref(), img.width(), img.height(), png::ColorType::Rgb, None, img.data())
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(path: impl AsRef<Path>, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::dim("write_gray_png", format!("{} bytes for {height}x{width}", data.len())));
    }
    encode(path.as_ref(), width, height, png::ColorType::Grayscale, None, data)
}

/// Writes a mask as an 8-bit indexed PNG whose palette index is the class id.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    mask.check_classes(NUM_CLASSES)?;
    let palette = PALETTE.iter().flatten().copied().collect();
    encode(path.as_ref(), mask.width(), mask.height(), png::ColorType::Indexed, Some(palette), mask.labels())
}

/// Reads an 8-bit indexed (or grayscale) PNG of class ids; ids above 6 are rejected.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (info, buf) = decode(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let labels = match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => unpad_rows(&buf, &info, w),
        (png::ColorType::Indexed, depth @ (png::BitDepth::One | png::BitDepth::Two | png::BitDepth::Four)) => {
            let bits = depth as usize;
            let per_byte = 8 / bits;
            buf.chunks(info.line_size)
                .flat_map(|row| {
                    (0..w)
                        .map(move |x| (row[x / per_byte] >> (8 - bits * (x % per_byte + 1))) & ((1 << bits) - 1) as u8)
                })
                .collect()
        }
        (ct, bd) => return Err(Error::Format(format!("{}: unsupported mask format {ct:?}/{bd:?}", path.display()))),
    };
    let mask = LabelMask::new(h, w, labels)?;
    if let Some(l) = mask.labels().iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Label(format!("{}: palette index {l} exceeds {}", path.display(), NUM_CLASSES - 1)));
    }
    Ok(mask)
}
