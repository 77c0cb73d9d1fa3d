//! PNG carriers: indexed-color for masks, grayscale/RGB for images.
//!
//! Masks are written with an explicit palette whose index IS the class id, so
//! decode(encode(m)) == m bit for bit. Foreign indexed PNGs with bit depth
//! 1/2/4 are unpacked; any pixel index outside the class range is rejected.

use super::{ImageU8, ImagingError, MaskU8, NUM_CLASSES, PALETTE};
use std::io::Cursor;

/// Encodes a mask as an indexed-color PNG (bit depth 8, 4-entry palette).
pub fn encode_mask_png(mask: &MaskU8) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
        enc.set_palette(palette);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
        writer
            .write_image_data(mask.data())
            .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an indexed-color PNG into a mask. The palette index is the class.
pub fn decode_mask_png(bytes: &[u8]) -> Result<MaskU8, ImagingError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        ImagingError::MalformedPng("output buffer size overflow".to_string())
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed {
        return Err(ImagingError::MalformedPng(format!(
            "expected indexed color, got {:?}",
            info.color_type
        )));
    }
    let palette_len = reader
        .info()
        .palette
        .as_ref()
        .map(|p| p.len() / 3)
        .unwrap_or(0);
    if palette_len == 0 {
        return Err(ImagingError::MalformedPng("missing palette".to_string()));
    }
    if palette_len > NUM_CLASSES {
        return Err(ImagingError::TooManyClasses);
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let indices = unpack_indexed(&buf, w, h, info.bit_depth)?;
    for &v in &indices {
        if usize::from(v) >= NUM_CLASSES {
            return Err(ImagingError::TooManyClasses);
        }
    }
    MaskU8::new(h, w, indices)
}

/// Unpacks sub-byte palette indices; rows are padded to byte boundaries.
fn unpack_indexed(
    buf: &[u8],
    w: usize,
    h: usize,
    depth: png::BitDepth,
) -> Result<Vec<u8>, ImagingError> {
    let bits = match depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => {
            return Err(ImagingError::MalformedPng(
                "16-bit palette indices are not valid png".to_string(),
            ))
        }
    };
    if bits == 8 {
        if buf.len() != w * h {
            return Err(ImagingError::MalformedPng(format!(
                "expected {} index bytes, got {}",
                w * h,
                buf.len()
            )));
        }
        return Ok(buf.to_vec());
    }
    let row_bytes = (w * bits).div_ceil(8);
    if buf.len() != row_bytes * h {
        return Err(ImagingError::MalformedPng(format!(
            "expected {} packed bytes, got {}",
            row_bytes * h,
            buf.len()
        )));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let row = &buf[r * row_bytes..(r + 1) * row_bytes];
        for c in 0..w {
            let bit_pos = c * bits;
            let byte = row[bit_pos / 8];
            let shift = 8 - bits - (bit_pos % 8);
            out.push(((u16::from(byte) >> shift) & mask) as u8);
        }
    }
    Ok(out)
}

/// Encodes a grayscale or RGB image as PNG.
pub fn encode_image_png(image: &ImageU8) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(if image.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
        writer
            .write_image_data(image.data())
            .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale or RGB PNG.
pub fn decode_image_png(bytes: &[u8]) -> Result<ImageU8, ImagingError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        ImagingError::MalformedPng("output buffer size overflow".to_string())
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::MalformedPng(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImagingError::MalformedPng(format!(
            "expected 8-bit image, got {:?}",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(ImagingError::MalformedPng(format!(
                "unsupported image color type {other:?}"
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    ImageU8::new(h, w, channels, buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mask_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
            let data: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
            let mask = MaskU8::new(h, w, data).unwrap();
            let png = encode_mask_png(&mask).unwrap();
            assert_eq!(decode_mask_png(&png).unwrap(), mask);
        }
    }

    #[test]
    fn mask_decode_rejects_wide_palette_index() {
        // Hand-built indexed PNG with a 5-entry palette and an index of 4.
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(vec![0u8; 15]);
            let mut writer = enc.write_header().unwrap();
            writer.write_image_data(&[0, 1, 2, 4]).unwrap();
        }
        assert_eq!(decode_mask_png(&out).unwrap_err(), ImagingError::TooManyClasses);
    }

    #[test]
    fn mask_decode_accepts_packed_two_bit_indices() {
        // Foreign tools may store 4-class masks at bit depth 2.
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 5, 2);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Two);
            let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
            enc.set_palette(palette);
            let mut writer = enc.write_header().unwrap();
            // rows: [0,1,2,3,0] and [3,2,1,0,1] packed 4 px/byte, row-padded
            writer.write_image_data(&[0b0001_1011, 0b0000_0000, 0b1110_0100, 0b0100_0000]).unwrap();
        }
        let mask = decode_mask_png(&out).unwrap();
        assert_eq!(mask.data(), &[0, 1, 2, 3, 0, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn mask_decode_rejects_garbage() {
        assert!(matches!(
            decode_mask_png(&[0x89, 0x50, 0x4e, 0x47, 0, 1, 2, 3]),
            Err(ImagingError::MalformedPng(_))
        ));
    }

    #[test]
    fn mask_decode_rejects_non_indexed() {
        let img = ImageU8::new(8, 8, 1, vec![7; 64]).unwrap();
        let png = encode_image_png(&img).unwrap();
        assert!(matches!(decode_mask_png(&png), Err(ImagingError::MalformedPng(_))));
    }

    #[test]
    fn image_round_trip_gray_and_rgb() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for channels in [1usize, 3] {
            let (h, w) = (13, 9);
            let data: Vec<u8> = (0..h * w * channels).map(|_| rng.random()).collect();
            let img = ImageU8::new(h, w, channels, data).unwrap();
            let png = encode_image_png(&img).unwrap();
            assert_eq!(decode_image_png(&png).unwrap(), img);
        }
    }
}
