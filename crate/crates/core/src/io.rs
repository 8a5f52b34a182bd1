//! Raster files: PFM for floats, 8-bit PNG for viewable color.
//!
//! Rasters are row-major with the top row first in memory; PFM stores rows
//! bottom to top and that flip happens here.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded float map. `data` is `height x width x channels`, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Little-endian PFM with scale -1.
pub fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::contract("encode_pfm", format!("{channels} channels")));
    }
    if data.len() != width * height * channels {
        return Err(Error::contract(
            "encode_pfm",
            format!("{} values for {width}x{height}x{channels}", data.len()),
        ));
    }
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for r in (0..height).rev() {
        for &x in &data[r * row..(r + 1) * row] {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Pfm> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    // three whitespace-terminated header tokens after the tag line
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the scale from the payload
    pos += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(bad(format!("unknown tag {t:?}"))),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad(format!("bad width {:?}", tokens[1])))?;
    let height: usize = tokens[2].parse().map_err(|_| bad(format!("bad height {:?}", tokens[2])))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad(format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad(format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != n * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", n * 4, payload.len())));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (k / row, k % row);
        data[(height - 1 - r) * row + c] = x;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let bytes = encode_pfm(width, height, channels, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB; values are clamped to [0, 1] and rounded.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::contract("write_png", format!("{} values for {width}x{height}x3", rgb.len())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fmt)?;
    let bytes: Vec<u8> = rgb.iter().map(|&x| quantize(x)).collect();
    w.write_image_data(&bytes).map_err(fmt)?;
    w.finish().map_err(fmt)
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
