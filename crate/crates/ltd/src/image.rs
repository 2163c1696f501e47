//! RGB raster with `f64` channels in [0, 1], plus binary PPM (P6) I/O.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad ppm: {0}")]
    BadPpm(String),
}

/// Row-major H x W x 3 pixel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    /// Quantize to 8-bit and write a P6 PPM.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<(), ImageError> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let file = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(file))
    }

    pub fn read_ppm<R: BufRead>(mut input: R) -> Result<Image, ImageError> {
        let mut header = [0u8; 2];
        input.read_exact(&mut header)?;
        if &header != b"P6" {
            return Err(ImageError::BadPpm("missing P6 magic".into()));
        }
        let width = read_ppm_number(&mut input)?;
        let height = read_ppm_number(&mut input)?;
        let maxval = read_ppm_number(&mut input)?;
        if maxval != 255 {
            return Err(ImageError::BadPpm(format!("unsupported maxval {maxval}")));
        }
        let mut bytes = vec![0u8; width * height * 3];
        input.read_exact(&mut bytes)?;
        Ok(Image {
            width,
            height,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn load_ppm(path: &Path) -> Result<Image, ImageError> {
        let file = std::fs::File::open(path)?;
        Image::read_ppm(std::io::BufReader::new(file))
    }
}

/// Write an 8-bit binary PGM (P5) grayscale raster.
pub fn write_pgm<W: Write>(
    mut out: W,
    width: usize,
    height: usize,
    gray: &[u8],
) -> Result<(), ImageError> {
    if gray.len() != width * height {
        return Err(ImageError::BadPpm("pgm buffer size mismatch".into()));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(gray)?;
    Ok(())
}

fn read_ppm_number<R: BufRead>(input: &mut R) -> Result<usize, ImageError> {
    // skip whitespace and `#` comment lines between header fields
    let mut value: Option<usize> = None;
    loop {
        let mut byte = [0u8; 1];
        input.read_exact(&mut byte)?;
        match byte[0] {
            b'#' => {
                let mut comment = String::new();
                input.read_line(&mut comment)?;
            }
            b'0'..=b'9' => {
                let digit = (byte[0] - b'0') as usize;
                value = Some(value.unwrap_or(0) * 10 + digit);
            }
            b' ' | b'\t' | b'\r' | b'\n' => {
                if let Some(v) = value {
                    return Ok(v);
                }
            }
            other => {
                return Err(ImageError::BadPpm(format!(
                    "unexpected byte {other:#x} in header"
                )))
            }
        }
    }
}
