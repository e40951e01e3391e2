//! RGB byte rasters and their on-disk form (binary PPM, `P6`).

use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major, three bytes per pixel.
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Raster { width, height, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luma in [0, 1] using ITU-R BT.601 weights.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_ppm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Raster> {
        let mut fields = Vec::new();
        let mut token = String::new();
        // header: magic, width, height, maxval; '#' comments allowed between fields
        while fields.len() < 4 {
            let mut byte = [0u8; 1];
            if r.read(&mut byte)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let ch = byte[0] as char;
            if ch == '#' && token.is_empty() {
                let mut sink = String::new();
                r.read_line(&mut sink)?;
            } else if ch.is_ascii_whitespace() {
                if !token.is_empty() {
                    fields.push(std::mem::take(&mut token));
                }
            } else {
                token.push(ch);
            }
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data).map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        Ok(Raster { width, height, data })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Raster> {
        let f = std::fs::File::open(path)?;
        Raster::read_ppm(io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut r = Raster::filled(5, 3, [1, 2, 3]);
        r.set_pixel(2, 4, [250, 0, 9]);
        let mut buf = Vec::new();
        r.write_ppm(&mut buf).unwrap();
        let back = Raster::read_ppm(&buf[..]).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let r = Raster::filled(4, 4, [7, 7, 7]);
        let mut buf = Vec::new();
        r.write_ppm(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(Raster::read_ppm(&buf[..]).is_err());
    }
}
