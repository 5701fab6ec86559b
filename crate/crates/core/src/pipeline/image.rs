use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// An 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Argument(format!("image is {width}x{height}, both sides must be >= {MIN_SIDE}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} samples for a {width}x{height} RGB image", data.len())));
        }
        Ok(RawImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RawImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean of the three channels, in `[0, 1]`.
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (r as f64 + g as f64 + b as f64) / (3.0 * 255.0)
    }

    /// Channels scaled to `[0, 1]` as a `1×w×h×3` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_fn(Dims::new(1, self.width, self.height, 3), |_, x, y, c| {
            T::of(self.data[(y * self.width + x) * 3 + c] as f64 / 255.0)
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (w, h, channels, data) = read_pnm(&std::fs::read(path)?)?;
        let data = if channels == 1 { data.iter().flat_map(|&v| [v, v, v]).collect() } else { data };
        RawImage::new(w, h, data)
    }

    /// Binary PPM (P6).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_pnm(path, b"P6", self.width, self.height, &self.data)
    }
}

/// Write a binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape(format!("{} samples for a {width}x{height} gray image", data.len())));
    }
    write_pnm(path, b"P5", width, height, data)
}

/// Read a binary PGM (P5) as `(width, height, samples)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    match read_pnm(&std::fs::read(path)?)? {
        (w, h, 1, data) => Ok((w, h, data)),
        _ => Err(Error::Format("expected a P5 graymap".into())),
    }
}

fn write_pnm(path: &Path, magic: &[u8], width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(magic)?;
    write!(f, "\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    f.flush()?;
    Ok(())
}

/// Parse P5/P6 with maxval 255; returns `(width, height, channels, samples)`.
fn read_pnm(buf: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("netpbm: {m}"));
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("only binary P5/P6 files are supported")),
    };
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in &mut header {
        // whitespace and comments between header fields
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if !buf.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let len = w.checked_mul(h).and_then(|v| v.checked_mul(channels)).ok_or_else(|| bad("size overflow"))?;
    if buf.len() - pos != len {
        return Err(bad(&format!("expected {len} samples, found {}", buf.len() - pos)));
    }
    Ok((w, h, channels, buf[pos..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RawImage::from_fn(40, 33, |x, y| [x as u8, y as u8, (x * y % 251) as u8]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        img.write(&p).unwrap();
        assert_eq!(RawImage::read(&p).unwrap(), img);
    }

    #[test]
    fn pgm_reads_as_gray_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let data: Vec<u8> = (0..32 * 32).map(|i| (i % 256) as u8).collect();
        write_pgm(&p, 32, 32, &data).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (32, 32, data.clone()));
        let img = RawImage::read(&p).unwrap();
        assert_eq!(img.pixel(5, 1), [37, 37, 37]);
    }

    #[test]
    fn comments_in_header() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend([7, 9]);
        assert_eq!(read_pnm(&buf).unwrap(), (2, 1, 1, vec![7, 9]));
        assert!(read_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(read_pnm(b"P5\n2 1\n255\n\x01").is_err());
    }

    #[test]
    fn too_small_rejected() {
        assert!(RawImage::new(31, 40, vec![0; 31 * 40 * 3]).is_err());
    }
}
