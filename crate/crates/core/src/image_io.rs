//! Linear-light image buffers and their file formats: 8-bit sRGB PNG, float
//! PFM, unit normals packed into PNG and single-channel masks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Rgb, V3};

/// Row-major linear RGB image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Image { width, height, data: vec![fill; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<Rgb>) -> Self {
        assert_eq!(data.len(), width * height);
        Image { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height
    }

    pub fn clamped(&self) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect() }
    }
}

/// sRGB electro-optical transfer function (encoded to linear).
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn open_dynamic(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::format(path, e.to_string()))
}

/// Loads an 8-bit PNG and converts it to linear light.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = open_dynamic(path)?.to_rgb8();
    let lut: Vec<f64> = (0..256).map(|v| srgb_to_linear(v as f64 / 255.0)).collect();
    let data = img.pixels().map(|p| Rgb::new(lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize])).collect();
    Ok(Image { width: img.width() as usize, height: img.height() as usize, data })
}

/// Quantizes to 8-bit sRGB.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (p, c) in buf.pixels_mut().zip(&img.data) {
        *p = image::Rgb([quantize(linear_to_srgb(c.x)), quantize(linear_to_srgb(c.y)), quantize(linear_to_srgb(c.z))]);
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel mask; a pixel is set when its value is at least one half.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open_dynamic(path)?.to_luma8();
    let mask = img.pixels().map(|p| p[0] >= 128).collect();
    Ok((img.width() as usize, img.height() as usize, mask))
}

pub fn save_mask_png(width: usize, height: usize, mask: &[bool], path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

/// Unit normals stored as `RGB = (n + 1) / 2` without any transfer curve.
/// Black pixels mark missing normals.
pub fn load_normal_png(path: &Path) -> Result<(usize, usize, Vec<Option<V3>>)> {
    let img = open_dynamic(path)?.to_rgb8();
    let normals = img
        .pixels()
        .map(|p| {
            if p.0 == [0, 0, 0] {
                return None;
            }
            let v = V3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 127.5 - V3::repeat(1.0);
            (v.norm() > 0.5).then(|| v.normalize())
        })
        .collect();
    Ok((img.width() as usize, img.height() as usize, normals))
}

pub fn save_normal_png(width: usize, height: usize, normals: &[Option<V3>], path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_fn(width as u32, height as u32, |x, y| match normals[y as usize * width + x as usize] {
        Some(n) => image::Rgb([
            quantize((n.x + 1.0) * 0.5),
            quantize((n.y + 1.0) * 0.5),
            quantize((n.z + 1.0) * 0.5),
        ]),
        None => image::Rgb([0, 0, 0]),
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

/// Raw PFM contents: `channels` is 1 or 3, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn write_pfm<W: Write>(pfm: &Pfm, mut w: W) -> std::io::Result<()> {
    let tag = if pfm.channels == 3 { "PF" } else { "Pf" };
    write!(w, "{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height)?;
    let row = pfm.width * pfm.channels;
    let mut buf = Vec::with_capacity(pfm.data.len() * 4);
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

fn header_token<R: BufRead>(r: &mut R) -> std::io::Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let c = b[0] as char;
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
        if tok.len() > 32 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "overlong PFM header token"));
        }
    }
}

pub fn read_pfm<R: BufRead>(mut r: R) -> std::io::Result<Pfm> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let channels = match header_token(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let width: usize = header_token(&mut r)?.parse().map_err(|_| bad("bad PFM width"))?;
    let height: usize = header_token(&mut r)?.parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = header_token(&mut r)?.parse().map_err(|_| bad("bad PFM scale"))?;
    if width == 0 || height == 0 || width * height > 1 << 28 {
        return Err(bad("bad PFM dimensions"));
    }
    let little = scale < 0.0;
    let row = width * channels;
    let mut raw = vec![0u8; row * height * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0f32; row * height];
    for (k, c) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (y, i) = (k / row, k % row);
        data[(height - 1 - y) * row + i] = v;
    }
    Ok(Pfm { width, height, channels, data })
}

pub fn save_pfm(img: &Image, path: &Path) -> Result<()> {
    let data = img.data.iter().flat_map(|c| [c.x as f32, c.y as f32, c.z as f32]).collect();
    let pfm = Pfm { width: img.width, height: img.height, channels: 3, data };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_pfm(&pfm, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_pfm_raw(path: &Path) -> Result<Pfm> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pfm(BufReader::new(f)).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a PFM as linear RGB; single-channel files are replicated.
pub fn load_pfm(path: &Path) -> Result<Image> {
    let p = load_pfm_raw(path)?;
    let data = if p.channels == 3 {
        p.data.chunks_exact(3).map(|c| Rgb::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect()
    } else {
        p.data.iter().map(|&v| Rgb::repeat(v as f64)).collect()
    };
    Ok(Image { width: p.width, height: p.height, data })
}

/// Single-channel float map (depth priors).
pub fn load_scalar_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let p = load_pfm_raw(path)?;
    let data = if p.channels == 1 {
        p.data.iter().map(|&v| v as f64).collect()
    } else {
        p.data.chunks_exact(3).map(|c| c[0] as f64).collect()
    };
    Ok((p.width, p.height, data))
}

pub fn save_scalar_pfm(width: usize, height: usize, values: &[f64], path: &Path) -> Result<()> {
    let pfm = Pfm { width, height, channels: 1, data: values.iter().map(|&v| v as f32).collect() };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_pfm(&pfm, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Loads a PNG or PFM by extension.
pub fn load_image(path: &Path) -> Result<Image> {
    match extension(path).as_str() {
        "pfm" => load_pfm(path),
        "png" => load_png(path),
        other => Err(Error::format(path, format!("unsupported image extension '{other}'"))),
    }
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "pfm" => save_pfm(img, path),
        "png" => save_png(img, path),
        other => Err(Error::format(path, format!("unsupported image extension '{other}'"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a whole file, mapping errors to [`Error::Io`].
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut v)).map_err(|e| Error::io(path, e))?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn srgb_mid_gray() {
        let v = srgb_to_linear(128.0 / 255.0);
        assert!((v - 0.2158605).abs() < 1e-6, "{v}");
        for k in 0..=255 {
            let e = k as f64 / 255.0;
            assert!((linear_to_srgb(srgb_to_linear(e)) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn black_png_decodes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        save_png(&Image::new(5, 3, Rgb::zeros()), &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        assert!(back.data.iter().all(|c| *c == Rgb::zeros()));
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        let img = Image::from_fn(16, 16, |x, y| {
            let code = |k: usize| srgb_to_linear(((x * 16 + y) * 3 + k) as f64 % 256.0 / 255.0);
            Rgb::new(code(0), code(1), code(2))
        });
        save_png(&img, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..28)
            .map(|_| Rgb::new(rng.random::<f32>() as f64 * 9.0, rng.random::<f32>() as f64, -(rng.random::<f32>() as f64)))
            .collect();
        let img = Image::from_data(7, 4, data);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfm");
        save_pfm(&img, &p).unwrap();
        let back = load_pfm(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert_eq!((a[c] as f32).to_bits(), (b[c] as f32).to_bits());
            }
        }
        assert_eq!(back.data, img.data.iter().map(|c| c.map(|v| v as f32 as f64)).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_files_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        save_pfm(&Image::new(4, 4, Rgb::repeat(0.5)), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_pfm(&p), Err(Error::Format { .. })));
        let q = dir.path().join("t.png");
        save_png(&Image::new(4, 4, Rgb::repeat(0.5)), &q).unwrap();
        let bytes = std::fs::read(&q).unwrap();
        std::fs::write(&q, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_png(&q), Err(Error::Format { .. })));
    }

    #[test]
    fn normal_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.png");
        let normals = vec![Some(V3::new(0.0, 0.0, 1.0)), None, Some(V3::new(1.0, -1.0, 0.5).normalize()), Some(V3::new(-1.0, 0.0, 0.0))];
        save_normal_png(2, 2, &normals, &p).unwrap();
        let (_, _, back) = load_normal_png(&p).unwrap();
        for (a, b) in normals.iter().zip(&back) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(a.dot(b) > 0.9999),
                (None, None) => {}
                _ => panic!("validity mismatch"),
            }
        }
    }
}
