//! Images, binary masks, and PNM (P5/P6) I/O.
//!
//! PNM is the only codec: binary P5 for grayscale and masks, binary P6 for
//! RGB, maxval 255. Pixels live in `[0, 1]` as f64, interleaved row-major
//! `(y, x, channel)` — the same order as the PNM payload, so round trips are
//! bit-exact for 8-bit data. Masks are strictly binary: a P5 file used as a
//! mask may contain only 0 (masked) and 255 (known).

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::Result;

// ── Types ───────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    /// 0 = masked, 1 = known.
    entries: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image {
                detail: format!("channels must be 1 or 3, got {channels}"),
            });
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Image {
                detail: format!(
                    "{}x{}x{} needs {} values, got {}",
                    height,
                    width,
                    channels,
                    height * width * channels,
                    pixels.len()
                ),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image {
                detail: format!("pixel value {bad} outside [0, 1]"),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Image> {
        Image::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Nearest-neighbor upsample by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::Image {
                detail: "upsample factor must be positive".into(),
            });
        }
        let (h, w, c) = (self.height * factor, self.width * factor, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = self.get(y / factor, x / factor, ch);
                }
            }
        }
        Image::new(h, w, c, out)
    }
}

impl Mask {
    /// Entries use 0 = masked, 1 = known; anything else is rejected.
    pub fn new(height: usize, width: usize, entries: Vec<u8>) -> Result<Mask> {
        if entries.len() != height * width {
            return Err(Error::Image {
                detail: format!(
                    "mask {}x{} needs {} entries, got {}",
                    height,
                    width,
                    height * width,
                    entries.len()
                ),
            });
        }
        if let Some(bad) = entries.iter().find(|e| **e > 1) {
            return Err(Error::Image {
                detail: format!("mask entry {bad} is not binary"),
            });
        }
        Ok(Mask {
            height,
            width,
            entries,
        })
    }

    pub fn all_known(height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            entries: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn known(&self, y: usize, x: usize) -> bool {
        self.entries[y * self.width + x] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.entries.iter().filter(|e| **e == 0).count()
    }
}

// ── PNM I/O ─────────────────────────────────────────────────────────────────

struct PnmHeader {
    rgb: bool,
    width: usize,
    height: usize,
    payload_at: usize,
}

/// Parses "P5"/"P6", width, height, maxval and returns the payload offset.
/// Tokens are separated by whitespace; `#` starts a comment running to end
/// of line. Exactly one whitespace byte separates the maxval from the
/// payload.
fn parse_header(bytes: &[u8]) -> Result<PnmHeader> {
    let fail = |offset: usize, detail: &str| Error::PnmFormat {
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 {
        return Err(fail(0, "missing magic number"));
    }
    let rgb = match &bytes[..2] {
        b"P5" => false,
        b"P6" => true,
        _ => return Err(fail(0, "magic number is not P5 or P6")),
    };

    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments before the token.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        let mut value = 0usize;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or_else(|| fail(pos, "dimension overflows"))?;
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(fail(pos, "expected a decimal header token"));
        }
        *field = value;
    }

    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fail(pos, "maxval must be 255"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected single whitespace before payload")),
    }
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero image extent"));
    }
    Ok(PnmHeader {
        rgb,
        width,
        height,
        payload_at: pos,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes)?;
    let channels = if header.rgb { 3 } else { 1 };
    let need = header.width * header.height * channels;
    let payload = &bytes[header.payload_at..];
    if payload.len() < need {
        return Err(Error::PnmFormat {
            offset: bytes.len(),
            detail: format!(
                "payload truncated: need {need} bytes, have {}",
                payload.len()
            ),
        });
    }
    let pixels = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(header.height, header.width, channels, pixels)
}

pub fn write_pnm(img: &Image, path: &Path) -> Result<()> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(
        img.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Masks are P5 files holding only 0 (masked) and 255 (known).
pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes)?;
    if header.rgb {
        return Err(Error::PnmFormat {
            offset: 0,
            detail: "mask must be P5 grayscale".into(),
        });
    }
    let need = header.width * header.height;
    let payload = &bytes[header.payload_at..];
    if payload.len() < need {
        return Err(Error::PnmFormat {
            offset: bytes.len(),
            detail: format!(
                "payload truncated: need {need} bytes, have {}",
                payload.len()
            ),
        });
    }
    let mut entries = Vec::with_capacity(need);
    for (i, &b) in payload[..need].iter().enumerate() {
        match b {
            0 => entries.push(0),
            255 => entries.push(1),
            other => {
                return Err(Error::PnmFormat {
                    offset: header.payload_at + i,
                    detail: format!("mask byte {other} is neither 0 nor 255"),
                })
            }
        }
    }
    Mask::new(header.height, header.width, entries)
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(
        mask.entries
            .iter()
            .map(|&e| if e == 1 { 255u8 } else { 0u8 }),
    );
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

// ── Mask application and downsampling ───────────────────────────────────────

/// Zero out masked pixels; known pixels pass through unchanged.
pub fn apply_mask(img: &Image, mask: &Mask) -> Result<Image> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::Image {
            detail: format!(
                "image {}x{} vs mask {}x{}",
                img.height, img.width, mask.height, mask.width
            ),
        });
    }
    let mut pixels = img.pixels.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if !mask.known(y, x) {
                let base = (y * img.width + x) * img.channels;
                for c in 0..img.channels {
                    pixels[base + c] = 0.0;
                }
            }
        }
    }
    Image::new(img.height, img.width, img.channels, pixels)
}

/// Block-mean pooling over `factor x factor` blocks, per channel.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::Image {
            detail: format!(
                "extents {}x{} not divisible by factor {factor}",
                img.height, img.width
            ),
        });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height / factor, img.width / factor, img.channels);
    let norm = (factor * factor) as f64;
    let mut pixels = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += img.get(y * factor + dy, x * factor + dx, ch);
                    }
                }
                pixels[(y * w + x) * c + ch] = sum / norm;
            }
        }
    }
    Image::new(h, w, c, pixels)
}

/// A downsampled entry is known iff every covered source entry is known:
/// a block containing any hole cannot serve as trusted ground truth.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::Image {
            detail: format!(
                "mask extents {}x{} not divisible by factor {factor}",
                mask.height, mask.width
            ),
        });
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut entries = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut all_known = true;
            'block: for dy in 0..factor {
                for dx in 0..factor {
                    if !mask.known(y * factor + dy, x * factor + dx) {
                        all_known = false;
                        break 'block;
                    }
                }
            }
            entries[y * w + x] = all_known as u8;
        }
    }
    Mask::new(h, w, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("inpaint-core-image-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn single_white_p5_pixel() {
        let path = tmp("p5-one");
        fs::write(&path, b"P5\n1 1\n255\n\xff").unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 1, 1));
        assert_eq!(img.pixels(), &[1.0]);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn all_zero_p6() {
        let path = tmp("p6-zero");
        fs::write(&path, b"P6\n2 2\n255\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = crate::rng::stream(11, "test/pnm-roundtrip");
        use rand::Rng;
        let pixels: Vec<f64> = (0..16 * 16 * 3)
            .map(|_| rng.random_range(0..=255u32) as f64 / 255.0)
            .collect();
        let img = Image::new(16, 16, 3, pixels).unwrap();
        let path = tmp("roundtrip");
        write_pnm(&img, &path).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(img, back);
        // And the written bytes themselves are stable.
        let bytes1 = fs::read(&path).unwrap();
        write_pnm(&back, &path).unwrap();
        let bytes2 = fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn header_errors_carry_byte_offsets() {
        let path = tmp("bad-magic");
        fs::write(&path, b"P4\n1 1\n255\n\0").unwrap();
        match read_pnm(&path) {
            Err(Error::PnmFormat { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::write(&path, b"P5\n2 2\n255\n\0\0").unwrap();
        match read_pnm(&path) {
            Err(Error::PnmFormat { offset, .. }) => assert!(offset > 0),
            other => panic!("expected truncation error, got {other:?}"),
        }
        fs::write(&path, b"P5\n2 2\n254\n\0\0\0\0").unwrap();
        assert!(
            matches!(read_pnm(&path), Err(Error::PnmFormat { .. })),
            "maxval must be 255"
        );
        fs::remove_file(&path).ok();
    }

    #[test]
    fn mask_rejects_gray_values() {
        let path = tmp("gray-mask");
        fs::write(&path, b"P5\n2 1\n255\n\xff\x80").unwrap();
        match read_mask(&path) {
            Err(Error::PnmFormat { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::remove_file(&path).ok();
    }

    #[test]
    fn apply_mask_cases() {
        let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = Image::new(4, 4, 1, ramp.clone()).unwrap();
        let ones = Mask::all_known(4, 4);
        assert_eq!(
            apply_mask(&img, &ones).unwrap(),
            img,
            "all-known mask is identity"
        );

        let zeros = Mask::new(4, 4, vec![0; 16]).unwrap();
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 0.0));

        let checker: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let mask = Mask::new(4, 4, checker.clone()).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        for i in 0..16 {
            if checker[i] == 0 {
                assert_eq!(out.pixels()[i], 0.0);
            } else {
                assert_eq!(out.pixels()[i], ramp[i]);
            }
        }
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let img = Image::new(2, 2, 3, vec![0.25; 12]).unwrap();
        let mask = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let once = apply_mask(&img, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn downsample_block_mean() {
        let img = Image::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let out = downsample(&img, 2).unwrap();
        assert_eq!(out.pixels(), &[0.5]);
        assert_eq!(downsample(&img, 1).unwrap(), img, "factor 1 is identity");
    }

    #[test]
    fn downsample_mask_requires_every_entry_known() {
        let mask = Mask::new(2, 2, vec![1, 1, 1, 0]).unwrap();
        let out = downsample_mask(&mask, 2).unwrap();
        assert_eq!(out.entries(), &[0], "one hole poisons the block");
        let clean = Mask::all_known(2, 2);
        assert_eq!(downsample_mask(&clean, 2).unwrap().entries(), &[1]);
    }

    #[test]
    fn upsample_nearest_repeats_blocks() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = img.upsample_nearest(2).unwrap();
        assert_eq!(up.pixels(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
