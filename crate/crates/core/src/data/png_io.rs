//! 8-bit grayscale PNG reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_gray_png(path: &Path, pixels: &[u8], width: u32, height: u32) -> Result<()> {
    debug_assert_eq!(pixels.len(), (width * height) as usize);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_gray_png(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: expected 8-bit grayscale, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width, info.height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip() {
        let dir = std::env::temp_dir().join("marl_png_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.png");
        let pixels: Vec<u8> = (0..36).map(|i| (i * 7) as u8).collect();
        write_gray_png(&path, &pixels, 6, 6).unwrap();
        let (back, w, h) = read_gray_png(&path).unwrap();
        assert_eq!((w, h), (6, 6));
        assert_eq!(back, pixels);
    }
}
