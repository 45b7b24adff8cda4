//! Grayscale/RGB image container with binary PGM/PPM I/O, bilinear
//! resampling, and rectangle cropping.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixels are f64 in [0,1], row-major and channel-minor:
/// `index = (y*width + x)*channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(pixels.len(), width * height * channels, "pixel count mismatch");
        Self {
            width,
            height,
            channels,
            pixels,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Bilinear resample to an exact target size. Sample positions map pixel
/// centers to pixel centers; coordinates clamp at the border.
pub fn resize_to(img: &Image, new_width: usize, new_height: usize) -> Image {
    assert!(new_width >= 1 && new_height >= 1);
    let mut out = Image::zeros(new_width, new_height, img.channels);
    let sx_scale = img.width as f64 / new_width as f64;
    let sy_scale = img.height as f64 / new_height as f64;
    for y in 0..new_height {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..new_width {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..img.channels {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bot = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Shrinks so the longer side equals `max_side`, preserving aspect ratio to
/// the nearest pixel. Images already within the cap pass through unchanged.
pub fn resize_max_side(img: &Image, max_side: usize) -> Image {
    assert!(max_side >= 1);
    let long = img.width.max(img.height);
    if long <= max_side {
        return img.clone();
    }
    let scale = max_side as f64 / long as f64;
    let new_w = ((img.width as f64 * scale).round() as usize).max(1);
    let new_h = ((img.height as f64 * scale).round() as usize).max(1);
    resize_to(img, new_w, new_h)
}

/// Scales both sides by a factor in (0,1], rounding to the nearest pixel
/// with a floor of 1.
pub fn resize_by_factor(img: &Image, factor: f64) -> Result<Image> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::BadScale(factor));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let new_w = ((img.width as f64 * factor).round() as usize).max(1);
    let new_h = ((img.height as f64 * factor).round() as usize).max(1);
    Ok(resize_to(img, new_w, new_h))
}

/// Extracts the rectangle with top-left corner (x,y) and size w×h.
pub fn crop(img: &Image, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 || x + w > img.width || y + h > img.height {
        return Err(Error::CropOutOfBounds {
            x,
            y,
            w,
            h,
            width: img.width,
            height: img.height,
        });
    }
    let mut out = Image::zeros(w, h, img.channels);
    for dy in 0..h {
        for dx in 0..w {
            for c in 0..img.channels {
                out.set(dx, dy, c, img.get(x + dx, y + dy, c));
            }
        }
    }
    Ok(out)
}

/// Loads a binary PGM (`P5`, one channel) or PPM (`P6`, three channels)
/// image with maxval 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |message: &str| Error::MalformedImage {
        path: path.to_path_buf(),
        message: message.to_string(),
    };

    let mut pos = 0usize;
    let magic = next_token(&data, &mut pos).ok_or_else(|| malformed("missing magic"))?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::UnsupportedImageFormat { path: path.to_path_buf() }),
    };
    let width: usize = parse_token(&data, &mut pos).ok_or_else(|| malformed("bad width"))?;
    let height: usize = parse_token(&data, &mut pos).ok_or_else(|| malformed("bad height"))?;
    let maxval: usize = parse_token(&data, &mut pos).ok_or_else(|| malformed("bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension"));
    }
    if maxval != 255 {
        return Err(malformed("maxval must be 255"));
    }
    // The header ends with exactly one whitespace byte before the payload;
    // next_token has already consumed it.
    let expected = width * height * channels;
    let payload = &data[pos..];
    if payload.len() < expected {
        return Err(malformed("payload shorter than header advertises"));
    }
    let pixels = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(width, height, channels, pixels))
}

/// Writes as binary PGM or PPM depending on channel count, maxval 255.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "{}\n{} {}\n255\n", magic, img.width, img.height).expect("vec write");
    for &v in &img.pixels {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes the single whitespace byte that terminates it.
fn next_token(data: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= data.len() {
        return None;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let token = data[start..*pos].to_vec();
    if *pos < data.len() {
        *pos += 1;
    }
    Some(token)
}

fn parse_token(data: &[u8], pos: &mut usize) -> Option<usize> {
    let token = next_token(data, pos)?;
    std::str::from_utf8(&token).ok()?.parse().ok()
}
