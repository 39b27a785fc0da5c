//! Minimal raster images with channel-interleaved values in `[0, 1]` and
//! portable pixmap (P5 grey / P6 RGB, 8-bit) I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<Scalar>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<Scalar>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: &[Scalar]) -> Result<Self> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Image::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[Scalar] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn check_patch(&self, p: usize) -> Result<()> {
        if p == 0 || self.width % p != 0 || self.height % p != 0 {
            return Err(Error::shape(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Flattened `p×p` patches in row-major patch order.
    pub fn patches(&self, p: usize) -> Result<Vec<Vec<Scalar>>> {
        self.check_patch(p)?;
        let c = self.channels;
        let mut out = Vec::with_capacity((self.width / p) * (self.height / p));
        for py in (0..self.height).step_by(p) {
            for px in (0..self.width).step_by(p) {
                let mut patch = Vec::with_capacity(p * p * c);
                for y in py..py + p {
                    let start = (y * self.width + px) * c;
                    patch.extend_from_slice(&self.data[start..start + p * c]);
                }
                out.push(patch);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Image::patches`].
    pub fn from_patches(
        patches: &[Vec<Scalar>],
        width: usize,
        height: usize,
        channels: usize,
        p: usize,
    ) -> Result<Self> {
        let mut img = Image::new(width, height, channels, vec![0.0; width * height * channels])?;
        img.check_patch(p)?;
        let cols = width / p;
        if patches.len() != cols * (height / p) {
            return Err(Error::shape(format!(
                "expected {} patches, got {}",
                cols * (height / p),
                patches.len()
            )));
        }
        for (i, patch) in patches.iter().enumerate() {
            if patch.len() != p * p * channels {
                return Err(Error::shape(format!("patch {i} has {} values", patch.len())));
            }
            let (py, px) = ((i / cols) * p, (i % cols) * p);
            for (dy, row) in patch.chunks(p * channels).enumerate() {
                let start = ((py + dy) * width + px) * channels;
                img.data[start..start + p * channels].copy_from_slice(row);
            }
        }
        Ok(img)
    }

    pub fn clamp(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape("crop window exceeds the image"));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(w, h, c, data)
    }

    /// Nearest-neighbour resampling.
    pub fn resize(&self, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::shape("cannot resize to or from an empty image"));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            let sy = y * self.height / h;
            for x in 0..w {
                let sx = x * self.width / w;
                data.extend_from_slice(self.pixel(sx, sy));
            }
        }
        Image::new(w, h, c, data)
    }

    /// Crops the central square and resizes it to `side×side`.
    pub fn center_crop(&self, side: usize) -> Result<Self> {
        let s = self.width.min(self.height);
        self.crop((self.width - s) / 2, (self.height - s) / 2, s, s)?
            .resize(side, side)
    }

    /// Fits the whole image inside a `side×side` square, padding the
    /// remainder with `fill`.
    pub fn letterbox(&self, side: usize, fill: Scalar) -> Result<Self> {
        let s = self.width.max(self.height);
        let (w, h) = (
            (self.width * side / s).max(1),
            (self.height * side / s).max(1),
        );
        let inner = self.resize(w, h)?;
        let c = self.channels;
        let mut data = vec![fill; side * side * c];
        let (x0, y0) = ((side - w) / 2, (side - h) / 2);
        for y in 0..h {
            let dst = ((y0 + y) * side + x0) * c;
            let src = y * w * c;
            data[dst..dst + w * c].copy_from_slice(&inner.data[src..src + w * c]);
        }
        Image::new(side, side, c, data)
    }

    pub fn mse(&self, other: &Image) -> Result<Scalar> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::shape("images differ in geometry"));
        }
        let n = self.data.len().max(1) as Scalar;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Scalar>()
            / n)
    }

    /// Writes 8-bit PPM: P5 for one channel, P6 for three.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::io("reading pixmap", e))?;
        parse_ppm(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_ppm(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        parse_ppm(&buf).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn parse_ppm(buf: &[u8]) -> Result<Image> {
    let bad = |r: &str| Error::Domain(format!("pixmap: {r}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    let need = w * h * channels;
    let raster = buf.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
    let data = raster.iter().map(|&b| b as Scalar / maxval as Scalar).collect();
    Image::new(w, h, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> Image {
        let n = w * h * c;
        Image::new(w, h, c, (0..n).map(|i| (i % 256) as Scalar / 255.0).collect()).unwrap()
    }

    #[test]
    fn patches_round_trip() {
        let img = ramp(8, 4, 3);
        let ps = img.patches(2).unwrap();
        assert_eq!(ps.len(), 8);
        assert_eq!(Image::from_patches(&ps, 8, 4, 3, 2).unwrap(), img);
        assert!(img.patches(3).is_err());
    }

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_values() {
        for c in [1, 3] {
            let img = ramp(5, 3, c);
            let mut bytes = Vec::new();
            img.write_ppm(&mut bytes).unwrap();
            let back = Image::read_ppm(&bytes[..]).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = Image::read_ppm(&bytes[..]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(Image::read_ppm(&b"P5\n2 2\n255\n\x00"[..]).is_err());
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n0"[..]).is_err());
    }

    #[test]
    fn center_crop_and_letterbox_produce_squares() {
        let img = ramp(12, 6, 1);
        let c = img.center_crop(4).unwrap();
        assert_eq!((c.width(), c.height()), (4, 4));
        let l = img.letterbox(4, 0.5).unwrap();
        assert_eq!((l.width(), l.height()), (4, 4));
        // Top and bottom rows are padding.
        assert!(l.data()[..4].iter().all(|&v| v == 0.5));
        assert!(l.data()[12..].iter().all(|&v| v == 0.5));
    }
}
