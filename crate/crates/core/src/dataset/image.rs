//! Binary PGM/PPM and raw `.f64` tensor files, cropping and bilinear
//! resizing.

use std::fs;
use std::path::Path;

use super::{BBox, ImageRecord};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Reads a P5/P6 file (scaled by maxval into `[0, 1]`) or a `.f64` file
/// (three little-endian `u32` extents `C, H, W` followed by `f64` data).
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "f64") {
        decode_f64(&bytes)
    } else {
        decode_pnm(&bytes)
    }
}

fn decode_f64(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        bail!(Format, ".f64 file shorter than its header");
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() != 12 + 8 * n {
        bail!(
            Format,
            ".f64 file with shape {shape:?} has {} data bytes",
            bytes.len() - 12
        );
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => bail!(Format, "not a binary PGM/PPM file"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        bail!(Format, "malformed PNM header");
    }
    pos += 1;
    if maxval == 0 || maxval > 255 {
        bail!(Format, "unsupported PNM maxval {maxval}");
    }
    if w == 0 || h == 0 {
        bail!(Format, "empty PNM image");
    }
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("PNM raster truncated".into()))?;
    // Interleaved HWC -> planar CHW.
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for (i, &v) in raster.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * w * h + pixel] = (f64::from(v) / scale).min(1.0);
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Writes a `[1,H,W]` tensor as P5 or a `[3,H,W]` tensor as P6, quantizing
/// `[0, 1]` to `0..=255`.
pub fn write_pnm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = match img.shape() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        s => bail!(Shape, "PNM needs [1|3,H,W], got {s:?}"),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = img.data();
    for pixel in 0..h * w {
        for ch in 0..c {
            out.push((d[ch * h * w + pixel].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_f64(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        s => bail!(Shape, ".f64 images must be [C,H,W], got {s:?}"),
    };
    let mut out = Vec::with_capacity(12 + 8 * img.len());
    for e in [c, h, w] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn crop(img: &Tensor, bbox: BBox) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!(Shape, "crop needs [C,H,W], got {s:?}"),
    };
    if bbox.w == 0 || bbox.h == 0 || bbox.x + bbox.w > w || bbox.y + bbox.h > h {
        bail!(Domain, "bbox {:?} outside {w}x{h} image", <[usize; 4]>::from(bbox));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * bbox.w * bbox.h);
    for ch in 0..c {
        for y in bbox.y..bbox.y + bbox.h {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + bbox.x..row + bbox.x + bbox.w]);
        }
    }
    Tensor::new(vec![c, bbox.h, bbox.w], out)
}

/// Bilinear resampling with half-pixel centers and edge clamping. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!(Shape, "resize needs [C,H,W], got {s:?}"),
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    if out_h == 0 || out_w == 0 {
        bail!(Shape, "resize target {out_h}x{out_w} is empty");
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, w, out_w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn convert_channels(img: Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!(Shape, "image must be [C,H,W], got {s:?}"),
    };
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (1, n) => Tensor::new(vec![n, h, w], img.data().repeat(n)),
        (_, 1) => {
            let d = img.data();
            let plane = h * w;
            let mean = (0..plane)
                .map(|i| (0..c).map(|ch| d[ch * plane + i]).sum::<f64>() / c as f64)
                .collect();
            Tensor::new(vec![1, h, w], mean)
        }
        (a, b) => bail!(Shape, "cannot convert {a} channels to {b}"),
    }
}

/// Reads `record.path` (relative to `base_dir`), converts channels, crops
/// to the bbox when present and resizes to `target = [C, H, W]`.
pub fn load_image(record: &ImageRecord, base_dir: &Path, target: [usize; 3]) -> Result<Tensor> {
    let img = read_image(base_dir.join(&record.path))?;
    let img = match record.bbox {
        Some(b) => crop(&img, b)?,
        None => img,
    };
    let img = convert_channels(img, target[0])?;
    resize_bilinear(&img, target[1], target[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageKind;

    fn pgm(path: &Path, w: usize, h: usize, px: &[u8]) {
        let mut b = format!("P5\n# comment\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(px);
        fs::write(path, b).unwrap();
    }

    #[test]
    fn crop_top_left_quadrant() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..16).map(|i| i * 17).collect();
        pgm(&dir.path().join("a.pgm"), 4, 4, &px);
        let mut rec = ImageRecord::new("id", "a.pgm", ImageKind::Genuine);
        rec.bbox = Some(BBox { x: 0, y: 0, w: 2, h: 2 });
        let img = load_image(&rec, dir.path(), [1, 2, 2]).unwrap();
        assert_eq!(img.data(), &[0.0, 17.0 / 255.0, 68.0 / 255.0, 85.0 / 255.0]);
    }

    #[test]
    fn native_size_is_unmodified_and_maxval_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        pgm(&dir.path().join("a.pgm"), 2, 1, &[255, 0]);
        let rec = ImageRecord::new("id", "a.pgm", ImageKind::Genuine);
        let img = load_image(&rec, dir.path(), [1, 1, 2]).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn bbox_out_of_bounds_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        pgm(&dir.path().join("a.pgm"), 4, 4, &[0; 16]);
        let mut rec = ImageRecord::new("id", "a.pgm", ImageKind::Genuine);
        rec.bbox = Some(BBox { x: 3, y: 0, w: 2, h: 2 });
        assert!(matches!(load_image(&rec, dir.path(), [1, 2, 2]), Err(Error::Domain(_))));
        let missing = ImageRecord::new("id", "nope.pgm", ImageKind::Genuine);
        assert!(matches!(
            load_image(&missing, dir.path(), [1, 2, 2]),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ppm_is_planar_and_converts_to_gray() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = b"P6 1 1 255\n".to_vec();
        b.extend_from_slice(&[255, 0, 51]);
        fs::write(dir.path().join("c.ppm"), b).unwrap();
        let img = read_image(dir.path().join("c.ppm")).unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
        let rec = ImageRecord::new("id", "c.ppm", ImageKind::Genuine);
        let gray = load_image(&rec, dir.path(), [1, 1, 1]).unwrap();
        assert!((gray.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pnm_and_f64_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        write_f64(&img, dir.path().join("x.f64")).unwrap();
        assert!(read_image(dir.path().join("x.f64")).unwrap().bitwise_eq(&img));
        write_pnm(&img, dir.path().join("x.pgm")).unwrap();
        let back = read_image(dir.path().join("x.pgm")).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }

    #[test]
    fn malformed_files() {
        assert!(decode_pnm(b"P2 1 1 255\n\x00").is_err());
        assert!(decode_pnm(b"P5 2 2 255\n\x00").is_err());
        assert!(decode_pnm(b"P5 1 1 65535\n\x00\x00").is_err());
        assert!(decode_f64(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::filled(&[2, 3, 5], 0.25).unwrap();
        let r = resize_bilinear(&img, 7, 4).unwrap();
        assert_eq!(r.shape(), &[2, 7, 4]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
