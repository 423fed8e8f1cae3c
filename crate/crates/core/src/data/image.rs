//! Planar images, label maps and binary PNM (P5/P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Result, SfcError};

/// Planar `[C,H,W]` image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(SfcError::shape(
                "image",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamping at the border.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f32 {
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
        let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Crop `(x0, y0, w, h)` and resize to `out_h × out_w` bilinearly with
    /// half-pixel centers, optionally mirrored horizontally.
    pub fn crop_resize(
        &self,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        out_h: usize,
        out_w: usize,
        flip: bool,
    ) -> Image {
        let mut out = Image::zeros(self.channels, out_h, out_w);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for c in 0..self.channels {
            for v in 0..out_h {
                let y = y0 as f64 + (v as f64 + 0.5) * sy;
                for u in 0..out_w {
                    let uu = if flip { out_w - 1 - u } else { u };
                    let x = x0 as f64 + (uu as f64 + 0.5) * sx;
                    out.set(c, v, u, self.sample(c, y, x));
                }
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| SfcError::io(path, e))?;
        decode_pnm(&bytes, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, encode_pnm(self)?).map_err(|e| SfcError::io(path, e))
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SfcError::shape(
                "label_map",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of one class.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| SfcError::io(path, e))?;
        let ctx = path.display().to_string();
        let (hdr, body) = parse_header(&bytes, &ctx)?;
        if hdr.magic != b'5' {
            return Err(SfcError::Parse {
                context: ctx,
                offset: 1,
                detail: "label maps must be binary graymaps (P5)".into(),
            });
        }
        if hdr.maxval != 255 {
            return Err(SfcError::Parse {
                context: ctx,
                offset: body,
                detail: format!("label maps need maxval 255, got {}", hdr.maxval),
            });
        }
        let n = hdr.width * hdr.height;
        if bytes.len() < body + n {
            return Err(truncated(&ctx, bytes.len(), body + n));
        }
        LabelMap::new(hdr.height, hdr.width, bytes[body..body + n].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| SfcError::io(path, e))
    }
}

struct Header {
    magic: u8,
    width: usize,
    height: usize,
    maxval: usize,
}

fn truncated(ctx: &str, have: usize, need: usize) -> SfcError {
    SfcError::Parse {
        context: ctx.to_string(),
        offset: have,
        detail: format!("truncated pixel data: need {need} bytes"),
    }
}

/// Returns the header and the offset of the first pixel byte.
fn parse_header(bytes: &[u8], ctx: &str) -> Result<(Header, usize)> {
    let err = |offset: usize, detail: &str| SfcError::Parse {
        context: ctx.to_string(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(err(0, "expected magic P5 or P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected one whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(pos - 1, "only 8-bit maxval (1..=255) is supported"));
    }
    Ok((
        Header {
            magic: bytes[1],
            width,
            height,
            maxval,
        },
        pos,
    ))
}

/// Decode P6 (RGB) or P5 (gray) bytes into an image in `[0,1]`.
pub fn decode_pnm(bytes: &[u8], context: &str) -> Result<Image> {
    let (hdr, body) = parse_header(bytes, context)?;
    let channels = if hdr.magic == b'6' { 3 } else { 1 };
    let n = hdr.width * hdr.height;
    if bytes.len() < body + n * channels {
        return Err(truncated(context, bytes.len(), body + n * channels));
    }
    let maxval = hdr.maxval as f32;
    let mut img = Image::zeros(channels, hdr.height, hdr.width);
    for p in 0..n {
        for c in 0..channels {
            img.data[c * n + p] = bytes[body + p * channels + c] as f32 / maxval;
        }
    }
    Ok(img)
}

/// Encode a 1- or 3-channel image as P5/P6 with 8-bit quantization.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(SfcError::shape(
                "encode_pnm",
                format!("{c} channels; need 1 or 3"),
            ))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.width * img.height;
    for p in 0..n {
        for c in 0..img.channels {
            let v = img.data[c * n + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_p6() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let img = decode_pnm(&bytes, "mem").unwrap();
        assert_eq!((img.channels, img.height, img.width), (3, 2, 2));
        let px = |y, x| (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
        assert_eq!(px(0, 0), (1.0, 0.0, 0.0));
        assert_eq!(px(0, 1), (0.0, 1.0, 0.0));
        assert_eq!(px(1, 0), (0.0, 0.0, 1.0));
        assert_eq!(px(1, 1), (0.2, 0.4, 0.6));
    }

    #[test]
    fn truncated_and_malformed() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        match decode_pnm(&bytes, "mem") {
            Err(SfcError::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
        match decode_pnm(b"P6 2 x 255\n", "mem") {
            Err(SfcError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(decode_pnm(b"P3 1 1 255\n0 0 0", "mem").is_err());
        assert!(decode_pnm(b"P5 1 1 65535\n\0\0", "mem").is_err());
        assert!(decode_pnm(b"", "mem").is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let img = Image::new(3, 3, 5, (0..45).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
        let back = decode_pnm(&encode_pnm(&img).unwrap(), "mem").unwrap();
        let err = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1.0 / 255.0 + 1e-7, "{err}");
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::new(1, 4, 4, (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        assert_eq!(img.crop_resize(0, 0, 4, 4, 4, 4, false), img);
        let flipped = img.crop_resize(0, 0, 4, 4, 4, 4, true);
        assert_eq!(flipped.get(0, 1, 0), img.get(0, 1, 3));
    }
}
