//! 8-bit RGB image files: binary PPM (P6, maxval 255) and PNG.
//!
//! Tensors are `[3, H, W]` with values in `[0, 255]`. Writing rounds half
//! to even and clamps.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded images larger than this are rejected.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            _ => None,
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            other => Err(Error::Config(format!("unknown image format `{other}`"))),
        }
    }
}

fn check_image(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::InvalidShape {
            op: "image",
            shape: s.to_vec(),
            reason: "expected [3, H, W]".into(),
        }),
    }
}

/// Interleaved RGB bytes, rounding half to even.
pub fn quantize(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_image(t)?;
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(d[c * plane + p].round_ties_even().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Planar `[3, H, W]` tensor from interleaved bytes with `channels` per pixel;
/// one channel is replicated, a fourth is dropped.
fn from_interleaved(bytes: &[u8], h: usize, w: usize, channels: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels < 3 { 0 } else { c };
            data[c * plane + p] = f64::from(bytes[p * channels + src]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_image(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(quantize(t)?);
    Ok(out)
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse("ppm", start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse("ppm", start, format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::parse("ppm", 0, "missing P6 magic"));
    }
    let mut cur = PpmCursor { bytes, pos: 2 };
    if !cur
        .bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(Error::parse("ppm", 2, "expected whitespace after magic"));
    }
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let max_at = {
        cur.skip_space_and_comments();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(
            "ppm",
            max_at,
            format!("maxval {maxval} unsupported, need 255"),
        ));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(
            "ppm",
            cur.pos,
            "expected single whitespace before pixel data",
        ));
    }
    let start = cur.pos + 1;
    if w == 0 || h == 0 || w.saturating_mul(h) > MAX_PIXELS {
        return Err(Error::parse(
            "ppm",
            start,
            format!("unsupported extent {w}x{h}"),
        ));
    }
    let need = 3 * w * h;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::parse(
            "ppm",
            bytes.len(),
            format!("truncated pixel data: {} of {need} bytes", payload.len()),
        ));
    }
    from_interleaved(&payload[..need], h, w, 3)
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_image(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&quantize(t)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let fail = |e: png::DecodingError| Error::parse("png", 0, e.to_string());
    let mut dec = png::Decoder::new_with_limits(
        Cursor::new(bytes),
        png::Limits {
            bytes: 8 * MAX_PIXELS,
        },
    );
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse("png", 0, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::parse("png", 0, "unexpanded palette")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    if w * h > MAX_PIXELS || info.line_size != w * channels {
        return Err(Error::parse("png", 0, "unsupported layout"));
    }
    from_interleaved(&buf[..info.line_size * h], h, w, channels)
}

/// Decode by file extension.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let format = ImageFormat::from_path(path)
        .ok_or_else(|| Error::Format(format!("{}: unknown image extension", path.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Png => decode_png(&bytes),
        ImageFormat::Ppm => decode_ppm(&bytes),
    }
}

/// Encode by file extension, creating parent directories.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let format = ImageFormat::from_path(path)
        .ok_or_else(|| Error::Format(format!("{}: unknown image extension", path.display())))?;
    let bytes = match format {
        ImageFormat::Png => encode_png(t)?,
        ImageFormat::Ppm => encode_ppm(t)?,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resize of a `[3, H, W]` image.
pub fn resize_nearest(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = check_image(t)?;
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                out.push(d[(c * h + sy) * w + x * w / width]);
            }
        }
    }
    Tensor::new(vec![3, height, width], out)
}
