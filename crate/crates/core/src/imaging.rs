//! Image containers plus PGM and PNG input/output.
//!
//! SAR amplitude images are stored row-major as non-negative reals. On disk
//! the tool speaks PGM (binary `P5` or ASCII `P2`, 8 or 16 bit), which keeps
//! raw pixel data inspectable; PNG export exists for eyeballing results.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::num::Real;

/// Single-channel amplitude image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SarImage<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> SarImage<T> {
    /// Wraps raw pixel data. Values must be finite and non-negative.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("dimensions", "width and height must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::invalid(
                "data",
                format!("expected {} pixels, got {}", width * height, data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid(
                "data",
                format!(
                    "pixel at row {}, col {} is not a finite non-negative value",
                    bad / width,
                    bad % width
                ),
            ));
        }
        Ok(SarImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        SarImage::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, v: T) -> Result<Self> {
        SarImage::new(width, height, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.height, self.width), &self.data).expect("consistent shape")
    }

    pub fn same_shape<U: Real>(&self, other: &SarImage<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Error with the actual dimensions of `other` if shapes differ.
    pub fn expect_same_shape<U: Real>(&self, other: &SarImage<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected_width: self.width,
                expected_height: self.height,
                actual_width: other.width,
                actual_height: other.height,
            })
        }
    }
}

/// Per-pixel integer labels, row-major. Used both for superpixel ids and for
/// binary change maps (0 = unchanged, 1 = changed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        LabelMap { width, height, data: vec![0; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "labels",
                format!("expected {} labels, got {}", width * height, data.len()),
            ));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u32) {
        self.data[row * self.width + col] = v;
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn count_of(&self, v: u32) -> usize {
        self.data.iter().filter(|&&x| x == v).count()
    }

    /// First pixel holding a value outside {0, 1}, if any.
    pub fn ensure_binary(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryLabel {
                row: i / self.width,
                col: i % self.width,
                value: self.data[i],
            });
        }
        Ok(())
    }
}

/// Sample depth of a PGM file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    pub fn max_value(self) -> u32 {
        match self {
            PgmDepth::Eight => 255,
            PgmDepth::Sixteen => 65535,
        }
    }
}

/// Loads a binary or ASCII PGM. The depth is inferred from the header's
/// maxval (<= 255 is 8 bit). Raw integer samples are cast to `T` without
/// normalization.
pub fn load_pgm<T: Real>(path: impl AsRef<Path>) -> Result<(SarImage<T>, PgmDepth)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let ctx = path.display().to_string();
    parse_pgm(&bytes).map_err(|msg| Error::format(ctx, msg))
}

fn parse_pgm<T: Real>(bytes: &[u8]) -> std::result::Result<(SarImage<T>, PgmDepth), String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic number")?;
    let ascii = match magic.as_str() {
        "P5" => false,
        "P2" => true,
        other => return Err(format!("unsupported magic {other:?}, expected P5 or P2")),
    };
    let width: usize = parse_header_int(bytes, &mut pos, "width")?;
    let height: usize = parse_header_int(bytes, &mut pos, "height")?;
    let maxval: u32 = parse_header_int(bytes, &mut pos, "maxval")? as u32;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range 1..=65535"));
    }
    let depth = if maxval <= 255 { PgmDepth::Eight } else { PgmDepth::Sixteen };
    let count = width * height;
    let mut data = Vec::with_capacity(count);

    if ascii {
        for i in 0..count {
            let v: u32 = parse_header_int(bytes, &mut pos, "sample")? as u32;
            if v > maxval {
                return Err(format!("sample {i} is {v}, above maxval {maxval}"));
            }
            data.push(T::from_u32(v).expect("sample fits scalar"));
        }
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let per = if depth == PgmDepth::Eight { 1 } else { 2 };
        let need = count * per;
        let raster = bytes.get(pos..pos + need).ok_or_else(|| {
            format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos))
        })?;
        for i in 0..count {
            let v = if per == 1 {
                raster[i] as u32
            } else {
                // Big-endian sample order per the PGM convention.
                ((raster[2 * i] as u32) << 8) | raster[2 * i + 1] as u32
            };
            if v > maxval {
                return Err(format!("sample {i} is {v}, above maxval {maxval}"));
            }
            data.push(T::from_u32(v).expect("sample fits scalar"));
        }
    }
    let img = SarImage::new(width, height, data).map_err(|e| e.to_string())?;
    Ok((img, depth))
}

/// Reads one whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    tok.parse::<usize>().map_err(|_| format!("bad {what} {tok:?}"))
}

/// Writes a binary (`P5`) PGM. Samples are rounded to the nearest integer
/// and clamped to the depth's range, so non-integer amplitudes quantize.
pub fn save_pgm<T: Real>(img: &SarImage<T>, path: impl AsRef<Path>, depth: PgmDepth) -> Result<()> {
    let maxval = depth.max_value();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &v in img.data() {
        let q = v.round().as_f64().clamp(0.0, maxval as f64) as u32;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => {
                out.push((q >> 8) as u8);
                out.push((q & 0xff) as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a binary change map as an 8-bit PGM with 0 for unchanged and 255
/// for changed.
pub fn save_binary_pgm(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    map.ensure_binary()?;
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| if v == 0 { 0u8 } else { 255 }));
    fs::write(path, out)?;
    Ok(())
}

/// Loads a binary change map written by [`save_binary_pgm`]. Pixels must be
/// 0 or the file's maxval; anything else is reported with its coordinate.
pub fn load_binary_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (img, depth) = load_pgm::<f64>(path)?;
    let hi = depth.max_value() as f64;
    let mut map = LabelMap::zeros(img.width(), img.height());
    for r in 0..img.height() {
        for c in 0..img.width() {
            let v = img.pixel(r, c);
            if v == 0.0 {
                continue;
            }
            if v == hi {
                map.set(r, c, 1);
            } else {
                return Err(Error::NonBinaryLabel { row: r, col: c, value: v as u32 });
            }
        }
    }
    Ok(map)
}

/// Zeroes every pixel the map marks unchanged (label 0).
pub fn mask_unchanged<T: Real>(img: &SarImage<T>, map: &LabelMap) -> Result<SarImage<T>> {
    if img.width() != map.width() || img.height() != map.height() {
        return Err(Error::DimensionMismatch {
            expected_width: img.width(),
            expected_height: img.height(),
            actual_width: map.width(),
            actual_height: map.height(),
        });
    }
    let data = img
        .data()
        .iter()
        .zip(map.data())
        .map(|(&v, &l)| if l == 0 { T::zero() } else { v })
        .collect();
    SarImage::new(img.width(), img.height(), data)
}

/// Elementwise ln(x + eps). `eps` must be at least 1 so results stay
/// non-negative for non-negative input.
pub fn log_transform<T: Real>(img: &SarImage<T>, eps: T) -> Result<SarImage<T>> {
    if eps < T::one() {
        return Err(Error::invalid("eps", "log offset must be >= 1"));
    }
    let data = img.data().iter().map(|&v| (v + eps).ln()).collect();
    SarImage::new(img.width(), img.height(), data)
}

/// PNG export of an amplitude image, min-max normalized to 8 bit. Display
/// only; quantization loses information.
pub fn save_png<T: Real>(img: &SarImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in img.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).as_f64();
    let buf: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo).as_f64() / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    write_gray_png(img.width(), img.height(), buf, path)
}

/// PNG export of a binary map, 0 or 255.
pub fn save_binary_png(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    map.ensure_binary()?;
    let buf: Vec<u8> = map.data().iter().map(|&v| if v == 0 { 0 } else { 255 }).collect();
    write_gray_png(map.width(), map.height(), buf, path)
}

/// PNG export of a label map with ids scrambled over the gray range so
/// neighboring segments contrast.
pub fn save_labels_png(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let buf: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.wrapping_mul(0x9e37_79b9) >> 24) as u8)
        .collect();
    write_gray_png(map.width(), map.height(), buf, path)
}

fn write_gray_png(width: usize, height: usize, buf: Vec<u8>, path: impl AsRef<Path>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer matches dimensions");
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::format(path.as_ref().display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rejects_bad_data() {
        assert!(SarImage::<f64>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(SarImage::<f64>::new(2, 2, vec![0.0, 1.0, -1.0, 2.0]).is_err());
        assert!(SarImage::<f64>::new(2, 2, vec![0.0, 1.0, f64::NAN, 2.0]).is_err());
        assert!(SarImage::<f64>::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn parses_ascii_pgm_with_comments() {
        let text = b"P2\n# a comment\n3 2\n# another\n255\n0 1 2\n3 4 5\n";
        let (img, depth) = parse_pgm::<f64>(text).unwrap();
        assert_eq!(depth, PgmDepth::Eight);
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 2);
        assert_eq!(img.pixel(1, 2), 5.0);
    }

    #[test]
    fn parses_binary_16bit() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend([0x01, 0x00, 0xff, 0xff]);
        let (img, depth) = parse_pgm::<f64>(&bytes).unwrap();
        assert_eq!(depth, PgmDepth::Sixteen);
        assert_eq!(img.pixel(0, 0), 256.0);
        assert_eq!(img.pixel(0, 1), 65535.0);
    }

    #[test]
    fn rejects_sample_above_maxval() {
        let text = b"P2\n1 1\n10\n11\n";
        assert!(parse_pgm::<f64>(text).is_err());
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert!(parse_pgm::<f64>(&bytes).is_err());
    }

    #[test]
    fn roundtrip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::stream(3, "imaging-roundtrip", 0);
        for (depth, cap) in [(PgmDepth::Eight, 255u32), (PgmDepth::Sixteen, 65535u32)] {
            let img = SarImage::<f64>::from_fn(64, 64, |_, _| {
                rng.random_range(0..=cap) as f64
            })
            .unwrap();
            let path = dir.path().join(format!("rt-{cap}.pgm"));
            save_pgm(&img, &path, depth).unwrap();
            let (back, d2) = load_pgm::<f64>(&path).unwrap();
            assert_eq!(d2, depth);
            assert_eq!(back, img);
        }
    }

    #[test]
    fn binary_map_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = LabelMap::zeros(4, 3);
        map.set(1, 2, 1);
        map.set(2, 0, 1);
        let path = dir.path().join("map.pgm");
        save_binary_pgm(&map, &path).unwrap();
        let back = load_binary_pgm(&path).unwrap();
        assert_eq!(back, map);

        // A gray pixel is rejected with its coordinate.
        let img = SarImage::<f64>::from_fn(3, 2, |r, c| if (r, c) == (1, 1) { 7.0 } else { 0.0 }).unwrap();
        let gray = dir.path().join("gray.pgm");
        save_pgm(&img, &gray, PgmDepth::Eight).unwrap();
        match load_binary_pgm(&gray) {
            Err(Error::NonBinaryLabel { row: 1, col: 1, value: 7 }) => {}
            other => panic!("expected NonBinaryLabel, got {other:?}"),
        }
    }

    #[test]
    fn mask_zeroes_unchanged_only() {
        let img = SarImage::<f64>::from_fn(4, 4, |r, c| (r * 4 + c) as f64 + 1.0).unwrap();
        let mut map = LabelMap::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                if (r + c) % 2 == 0 {
                    map.set(r, c, 1);
                }
            }
        }
        let masked = mask_unchanged(&img, &map).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if (r + c) % 2 == 0 {
                    assert_eq!(masked.pixel(r, c), img.pixel(r, c));
                } else {
                    assert_eq!(masked.pixel(r, c), 0.0);
                }
            }
        }
        // Masking twice changes nothing.
        let again = mask_unchanged(&masked, &map).unwrap();
        assert_eq!(again, masked);

        let small = LabelMap::zeros(3, 4);
        assert!(matches!(mask_unchanged(&img, &small), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn log_transform_is_monotone_and_invertible() {
        let img = SarImage::<f64>::from_fn(8, 8, |r, c| (r * 8 + c) as f64 * 3.5).unwrap();
        let logged = log_transform(&img, 1.0).unwrap();
        // exp undoes it.
        for (a, b) in img.data().iter().zip(logged.data()) {
            let back = b.exp() - 1.0;
            assert!((back - a).abs() <= 1e-12 * a.max(1.0));
        }
        // Order preserved.
        let mut prev = -1.0;
        for &v in logged.data() {
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(logged.pixel(0, 0), 0.0);
        assert!(log_transform(&img, 0.5).is_err());
    }
}
