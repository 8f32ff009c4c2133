//! Float-image IO (PFM, binary PPM) and image-quality metrics.
//!
//! PFM files are written little-endian only (scale line `-1.0`); big-endian
//! input is rejected rather than converted. Round-trips are bit-exact for
//! every finite `f32` including signed zeros.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} header in {path}: {detail}")]
    MalformedHeader {
        format: &'static str,
        path: String,
        detail: String,
    },
    #[error("big-endian PFM unsupported (scale {scale}) in {path}")]
    BigEndian { path: String, scale: f32 },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Row-major float image, top-left origin, 1 or 3 channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        assert!(channels == 1 || channels == 3);
        ImageF {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a PFM file: `PF`/`Pf` magic, ASCII dimensions, scale `-1.0`
/// (little-endian), then rows bottom-to-top of `f32` samples.
pub fn write_pfm(path: &Path, image: &ImageF) -> Result<(), ImageError> {
    let magic = if image.channels == 3 { "PF" } else { "Pf" };
    let mut bytes =
        Vec::with_capacity(32 + image.width * image.height * image.channels * 4);
    write!(bytes, "{}\n{} {}\n-1.0\n", magic, image.width, image.height).unwrap();
    for y in (0..image.height).rev() {
        let row = &image.data[y * image.width * image.channels..][..image.width * image.channels];
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a PFM file written by [`write_pfm`] (or any little-endian PFM).
pub fn read_pfm(path: &Path) -> Result<ImageF, ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();
    let header_err = |detail: String| ImageError::MalformedHeader {
        format: "PFM",
        path: pstr.clone(),
        detail,
    };

    // Header: three whitespace-terminated tokens for magic, width+height, scale.
    let mut pos = 0usize;
    let mut token = || -> Result<String, ImageError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader {
                format: "PFM",
                path: pstr.clone(),
                detail: "unexpected end of header".into(),
            });
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        // Consume exactly one whitespace byte after the token.
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(tok)
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(header_err(format!("bad magic {:?}", other))),
    };
    let width: usize = token()?
        .parse()
        .map_err(|e| header_err(format!("bad width: {e}")))?;
    let height: usize = token()?
        .parse()
        .map_err(|e| header_err(format!("bad height: {e}")))?;
    let scale: f32 = token()?
        .parse()
        .map_err(|e| header_err(format!("bad scale: {e}")))?;
    if width == 0 || height == 0 {
        return Err(header_err(format!("zero dimension {width}x{height}")));
    }
    if scale >= 0.0 {
        return Err(ImageError::BigEndian { path: pstr, scale });
    }

    let count = width * height * channels;
    let expected = count * 4;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            path: pstr,
            expected,
            found: payload.len(),
        });
    }

    let mut data = vec![0.0f32; count];
    let row_len = width * channels;
    for (file_row, y) in (0..height).rev().enumerate() {
        let src = &payload[file_row * row_len * 4..][..row_len * 4];
        let dst = &mut data[y * row_len..][..row_len];
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok(ImageF::from_data(width, height, channels, data))
}

/// Writes an 8-bit binary PPM preview: clamp to [0,1], gamma-encode with
/// exponent 1/gamma, quantize to 0..=255.
pub fn write_ppm_preview(path: &Path, image: &ImageF, gamma: f64) -> Result<(), ImageError> {
    let mut bytes = Vec::with_capacity(32 + image.width * image.height * 3);
    write!(bytes, "P6\n{} {}\n255\n", image.width, image.height).unwrap();
    let inv_gamma = 1.0 / gamma;
    for y in 0..image.height {
        for x in 0..image.width {
            let px = image.pixel(x, y);
            for c in 0..3 {
                let v = px[if image.channels == 3 { c } else { 0 }] as f64;
                let v = v.clamp(0.0, 1.0).powf(inv_gamma);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes a binary mask as 0/255 PPM.
pub fn write_ppm_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), ImageError> {
    assert_eq!(mask.len(), width * height);
    let mut bytes = Vec::with_capacity(32 + width * height * 3);
    write!(bytes, "P6\n{} {}\n255\n", width, height).unwrap();
    for &m in mask {
        let v = if m { 255u8 } else { 0u8 };
        bytes.extend_from_slice(&[v, v, v]);
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a binary PPM mask written by [`write_ppm_mask`]; a pixel is set when
/// its red channel exceeds 127.
pub fn read_ppm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();
    let header_err = |detail: String| ImageError::MalformedHeader {
        format: "PPM",
        path: pstr.clone(),
        detail,
    };
    let mut pos = 0usize;
    let mut token = || -> Result<String, ImageError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader {
                format: "PPM",
                path: pstr.clone(),
                detail: "unexpected end of header".into(),
            });
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(tok)
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(header_err(format!("bad magic {:?}", magic)));
    }
    let width: usize = token()?.parse().map_err(|e| header_err(format!("bad width: {e}")))?;
    let height: usize = token()?.parse().map_err(|e| header_err(format!("bad height: {e}")))?;
    let maxval: usize = token()?.parse().map_err(|e| header_err(format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(header_err(format!("unsupported maxval {maxval}")));
    }
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            path: pstr,
            expected,
            found: payload.len(),
        });
    }
    let mask = payload.chunks_exact(3).take(width * height).map(|px| px[0] > 127).collect();
    Ok((width, height, mask))
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are equal.
pub fn psnr(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64, ImageError> {
    if !a.same_shape(b) {
        return Err(ImageError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, w) in k.iter_mut().enumerate() {
        *w = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *w;
    }
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), computed
/// per channel and averaged. Windows are clipped at image borders with the
/// weights renormalized, so `ssim(a, a) == 1` exactly for any image size.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64, ImageError> {
    if !a.same_shape(b) {
        return Err(ImageError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let kernel = ssim_kernel();
    let half = (SSIM_WINDOW / 2) as isize;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for y in 0..a.height as isize {
            for x in 0..a.width as isize {
                let mut wsum = 0.0;
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in -half..=half {
                    let yy = y + dy;
                    if yy < 0 || yy >= a.height as isize {
                        continue;
                    }
                    let wy = kernel[(dy + half) as usize];
                    for dx in -half..=half {
                        let xx = x + dx;
                        if xx < 0 || xx >= a.width as isize {
                            continue;
                        }
                        let w = wy * kernel[(dx + half) as usize];
                        let va = a.pixel(xx as usize, yy as usize)[ch] as f64;
                        let vb = b.pixel(xx as usize, yy as usize)[ch] as f64;
                        wsum += w;
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                mu_a /= wsum;
                mu_b /= wsum;
                let var_a = aa / wsum - mu_a * mu_a;
                let var_b = bb / wsum - mu_b * mu_b;
                let cov = ab / wsum - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pfm_round_trip_random() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let mut img = ImageF::new(7, 5, 3);
        let mut state = 0x9e3779b97f4a7c15u64;
        for v in &mut img.data {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = f32::from_bits((state >> 40) as u32 | 0x3f000000) - 1.5;
        }
        img.data[0] = -0.0;
        img.data[1] = 0.0;
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(img.width, back.width);
        assert_eq!(img.height, back.height);
        for (x, y) in img.data.iter().zip(&back.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pfm_golden_1x1() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.pfm");
        let img = ImageF::from_data(1, 1, 1, vec![0.25]);
        write_pfm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = b"Pf\n1 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&0.25f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pfm_rejects_wrong_payload_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        // Header claims 3-channel 2x2 but payload only holds one channel.
        let mut bytes = b"PF\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 2 * 2 * 4]);
        fs::write(&path, bytes).unwrap();
        match read_pfm(&path) {
            Err(ImageError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn pfm_rejects_big_endian() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_pfm(&path), Err(ImageError::BigEndian { .. })));
    }

    #[test]
    fn ppm_preview_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        let img = ImageF::from_data(3, 1, 1, vec![0.0, 1.0, 0.5]);
        write_ppm_preview(&path, &img, 2.2).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 9..];
        assert_eq!(&payload[0..3], &[0, 0, 0]);
        assert_eq!(&payload[3..6], &[255, 255, 255]);
        let expected = ((0.5f64).powf(1.0 / 2.2) * 255.0).round() as u8;
        assert_eq!(expected, 186);
        assert_eq!(&payload[6..9], &[186, 186, 186]);
    }

    #[test]
    fn ppm_mask_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        let mask = vec![true, false, false, true, true, false];
        write_ppm_mask(&path, 3, 2, &mask).unwrap();
        let (w, h, back) = read_ppm_mask(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(mask, back);
    }

    #[test]
    fn psnr_basics() {
        let a = ImageF::from_data(2, 2, 1, vec![0.2; 4]);
        let b = ImageF::from_data(2, 2, 1, vec![0.3; 4]);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "psnr {v}");
        assert_eq!(v, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_formula_oracle() {
        let mut a = ImageF::new(16, 12, 1);
        let mut b = ImageF::new(16, 12, 1);
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64) / (u32::MAX as f64 / 2.0)
        };
        for v in &mut a.data {
            *v = next() as f32 * 0.5;
        }
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = a.data[i] + 0.05 * next() as f32;
        }
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        // Independent direct evaluation of the SSIM definition.
        let kernel = ssim_kernel();
        let mut acc = 0.0;
        let mut n = 0;
        for y in 0..12i64 {
            for x in 0..16i64 {
                let mut stats = [0.0f64; 6]; // wsum, ma, mb, aa, bb, ab
                for ky in 0..11i64 {
                    for kx in 0..11i64 {
                        let yy = y + ky - 5;
                        let xx = x + kx - 5;
                        if yy < 0 || yy >= 12 || xx < 0 || xx >= 16 {
                            continue;
                        }
                        let w = kernel[ky as usize] * kernel[kx as usize];
                        let va = a.pixel(xx as usize, yy as usize)[0] as f64;
                        let vb = b.pixel(xx as usize, yy as usize)[0] as f64;
                        stats[0] += w;
                        stats[1] += w * va;
                        stats[2] += w * vb;
                        stats[3] += w * va * va;
                        stats[4] += w * vb * vb;
                        stats[5] += w * va * vb;
                    }
                }
                let [wsum, ma, mb, aa, bb, ab] = stats;
                let (ma, mb) = (ma / wsum, mb / wsum);
                let (va, vb, cov) = (aa / wsum - ma * ma, bb / wsum - mb * mb, ab / wsum - ma * mb);
                let c1 = 0.01f64.powi(2);
                let c2 = 0.03f64.powi(2);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        let expected = acc / n as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn metric_shape_mismatch() {
        let a = ImageF::new(2, 2, 1);
        let b = ImageF::new(2, 3, 1);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
