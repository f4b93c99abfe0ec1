//! 8-bit PNG input and output. Images are handled internally as
//! single-channel tensors with values in `[0, 1]`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use uaom_core::Tensor;

use crate::error::{Error, Result};

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes an 8-bit grayscale, grey+alpha, RGB or RGBA PNG to grayscale.
/// Colour is reduced with Rec. 601 luma weights; alpha is ignored.
pub fn decode_png_gray(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("only 8-bit PNG is supported, found {:?}", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let px = |row: &[u8], x: usize| -> f32 {
        match info.color_type {
            png::ColorType::Grayscale => row[x] as f32,
            png::ColorType::GrayscaleAlpha => row[2 * x] as f32,
            png::ColorType::Rgb => {
                0.299 * row[3 * x] as f32 + 0.587 * row[3 * x + 1] as f32 + 0.114 * row[3 * x + 2] as f32
            }
            png::ColorType::Rgba => {
                0.299 * row[4 * x] as f32 + 0.587 * row[4 * x + 1] as f32 + 0.114 * row[4 * x + 2] as f32
            }
            png::ColorType::Indexed => unreachable!("rejected below"),
        }
    };
    if info.color_type == png::ColorType::Indexed {
        return Err(image_err(path, "palette PNGs are not supported"));
    }
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * stride..(y + 1) * stride];
        for x in 0..w {
            data.push(px(row, x) / 255.0);
        }
    }
    Ok(Tensor::new(h, w, 1, data)?)
}

pub fn load_png_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png_gray(&bytes, path)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("writing to memory");
        w.write_image_data(data).expect("writing to memory");
    }
    out
}

/// 8-bit grayscale PNG bytes. Multi-channel tensors are averaged first.
pub fn encode_png_gray(t: &Tensor) -> Vec<u8> {
    let g = if t.channels() == 1 {
        t.clone()
    } else {
        t.mean_channels()
    };
    let data: Vec<u8> = g.data().iter().map(|v| to_u8(*v)).collect();
    encode(g.width(), g.height(), png::ColorType::Grayscale, &data)
}

/// 8-bit RGB PNG bytes from a packed `width * height * 3` buffer.
pub fn encode_png_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode(width, height, png::ColorType::Rgb, rgb)
}

pub fn save_png_gray(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png_gray(t)).map_err(|e| Error::io(path, e))
}

/// Decodes an RGB PNG written by [`encode_png_rgb`], for read-back checks.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let path = Path::new("<memory>");
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, "expected an 8-bit RGB PNG"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
