//! Images, rectangles, binary PPM/PGM I/O and the geometric operations
//! applied to patches.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::OutOfRange(format!("pixel value {} at {i}", data[i])));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn<F>(height: usize, width: usize, channels: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }
}

/// Axis-aligned pixel rectangle: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Smallest rectangle covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect::new(
            x,
            y,
            self.right().max(other.right()) - x,
            self.bottom().max(other.bottom()) - y,
        )
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            (x1 - x0) * (y1 - y0)
        } else {
            0
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x, self.y, self.w, self.h)
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary PPM (`P6`) or PGM (`P5`) with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(r.err("truncated magic"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(r.err("bad magic, expected P5 or P6")),
    };
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.err(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(r.err("zero image dimension"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err("expected single whitespace before payload")),
    }
    let need = width * height * channels;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Encodes as `P6` (3 channels) or `P5` (1 channel), maxval 255.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn crop(img: &Image, rect: Rect) -> Result<Image> {
    if !rect.fits_in(img.height, img.width) {
        return Err(Error::BoxOutsideImage(
            rect.to_string(),
            img.height,
            img.width,
        ));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(rect.area() * c);
    for y in rect.y..rect.bottom() {
        let start = (y * img.width + rect.x) * c;
        data.extend_from_slice(&img.data[start..start + rect.w * c]);
    }
    Ok(Image {
        height: rect.h,
        width: rect.w,
        channels: c,
        data,
    })
}

/// Source coordinate for destination index `d` under align-corners sampling.
fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    if dst > 1 {
        d as f64 * (src - 1) as f64 / (dst - 1) as f64
    } else {
        (src - 1) as f64 / 2.0
    }
}

/// Bilinear resize with align-corners sampling and edge clamping.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let sx = source_coord(x, img.width, out_w);
            let x0 = (sx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = source_coord(y, img.height, out_h);
        let y0 = (sy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// Crop followed by an anisotropic resize to `out_h x out_w`.
pub fn warp(img: &Image, rect: Rect, out_h: usize, out_w: usize) -> Result<Image> {
    resize_bilinear(&crop(img, rect)?, out_h, out_w)
}

pub fn hflip(img: &Image) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            data.extend_from_slice(img.pixel(y, x));
        }
    }
    debug_assert_eq!(data.len(), img.height * img.width * c);
    Image {
        height: img.height,
        width: img.width,
        channels: c,
        data,
    }
}

/// Center, top-left, top-right, bottom-left and bottom-right boxes of side `size`.
pub fn five_crop_rects(height: usize, width: usize, size: usize) -> Result<[Rect; 5]> {
    if size == 0 || size > height || size > width {
        return Err(Error::OutOfRange(format!(
            "crop {size} does not fit {height}x{width} image"
        )));
    }
    let cx = (width - size) / 2;
    let cy = (height - size) / 2;
    let r = width - size;
    let b = height - size;
    Ok([
        Rect::new(cx, cy, size, size),
        Rect::new(0, 0, size, size),
        Rect::new(r, 0, size, size),
        Rect::new(0, b, size, size),
        Rect::new(r, b, size, size),
    ])
}

/// The ten fixed test views: five crops, then their mirror images in the same order.
pub fn ten_views(img: &Image, size: usize) -> Result<Vec<Image>> {
    let rects = five_crop_rects(img.height, img.width, size)?;
    let mut views = Vec::with_capacity(10);
    for r in rects {
        views.push(crop(img, r)?);
    }
    for i in 0..5 {
        let flipped = hflip(&views[i]);
        views.push(flipped);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f64 / (h * w * c) as f64)
            .unwrap()
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn reads_white_pixel() {
        let img = read_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 1, 3));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reads_pgm_ramp() {
        let img = read_ppm(b"P5 2 2 255\n\x00\x55\xaa\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn canonical_file_round_trips_bytes() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0u8..18).map(|b| b.wrapping_mul(37)));
        let img = read_ppm(&bytes).unwrap();
        assert_eq!(write_ppm(&img), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = read_ppm(b"P5\n# made by hand\n1 1\n255\n\x80").unwrap();
        assert_eq!(img.data(), &[128.0 / 255.0]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let e = read_ppm(b"P3\n1 1\n255\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }));
        let e = read_ppm(b"P6\n1 x\n255\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 5, .. }), "{e}");
        let e = read_ppm(b"P6\n1 1\n65535\n\x00").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = read_ppm(b"P6\n2 1\n255\n\x00\x00\x00").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 14, .. }), "{e}");
    }

    #[test]
    fn crop_examples() {
        let img = ramp(4, 5, 3);
        assert_eq!(crop(&img, img.full_rect()).unwrap(), img);
        let px = crop(&img, Rect::new(0, 0, 1, 1)).unwrap();
        assert_eq!(px.data(), img.pixel(0, 0));
        let outer = crop(&img, Rect::new(1, 1, 4, 3)).unwrap();
        let nested = crop(&outer, Rect::new(1, 0, 2, 2)).unwrap();
        assert_eq!(nested, crop(&img, Rect::new(2, 1, 2, 2)).unwrap());
        assert!(crop(&img, Rect::new(3, 0, 3, 1)).is_err());
        assert!(crop(&img, Rect::new(0, 0, 0, 1)).is_err());
    }

    #[test]
    fn resize_examples() {
        let img = ramp(3, 4, 3);
        assert_eq!(resize_bilinear(&img, 3, 4).unwrap(), img);
        let flat = Image::filled(5, 5, 3, 0.3).unwrap();
        let r = resize_bilinear(&flat, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let pair = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&pair, 1, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn hflip_examples() {
        let pair = Image::new(1, 2, 1, vec![0.2, 0.7]).unwrap();
        assert_eq!(hflip(&pair).data(), &[0.7, 0.2]);
        let sym = Image::new(1, 3, 1, vec![0.1, 0.5, 0.1]).unwrap();
        assert_eq!(hflip(&sym), sym);
        let img = ramp(3, 5, 3);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn ten_views_layout() {
        let img = ramp(9, 12, 3);
        let views = ten_views(&img, 6).unwrap();
        assert_eq!(views.len(), 10);
        for v in &views {
            assert_eq!((v.height(), v.width()), (6, 6));
        }
        for i in 0..5 {
            assert_eq!(views[i + 5], hflip(&views[i]));
        }
        assert_eq!(views[1], crop(&img, Rect::new(0, 0, 6, 6)).unwrap());
        assert_eq!(views[4], crop(&img, Rect::new(6, 3, 6, 6)).unwrap());
        let square = ramp(5, 5, 1);
        let views = ten_views(&square, 5).unwrap();
        assert!(views[..5].iter().all(|v| *v == square));
        assert!(ten_views(&square, 6).is_err());
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(
            h in 1usize..8, w in 1usize..8, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()
        ) {
            let img = Image::from_fn(h, w, 1, |y, x, _| {
                ((seed.wrapping_mul(31).wrapping_add((y * 7 + x * 13) as u64) % 1000) as f64) / 999.0
            }).unwrap();
            let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let r = resize_bilinear(&img, oh, ow).unwrap();
            prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn write_read_quantizes_within_one_level(
            h in 1usize..6, w in 1usize..6, gray in any::<bool>(),
            vals in prop::collection::vec(0.0f64..=1.0, 108),
        ) {
            let c = if gray { 1 } else { 3 };
            let img = Image::new(h, w, c, vals[..h * w * c].to_vec()).unwrap();
            let back = read_ppm(&write_ppm(&img)).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
