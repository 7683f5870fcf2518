//! PPM/PNG image files, box overlays and simple line/bar plots.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{GtObject, SyntheticImage};
use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::tensor::Tensor;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Canvas {
            width,
            height,
            rgb: fill.repeat(width * height),
        }
    }

    /// From a `[3, H, W]` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let d = t.data();
        let rgb = (0..plane)
            .flat_map(|i| [to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
            .collect();
        Ok(Canvas {
            width: w,
            height: h,
            rgb,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut d = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                d[c * plane + i] = self.rgb[3 * i + c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], d).expect("sized buffer")
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// One-pixel outline along the pixels touched by the box edges.
    pub fn draw_box(&mut self, b: &Box, c: [u8; 3]) {
        let x0 = b.x.floor() as i64;
        let y0 = b.y.floor() as i64;
        let x1 = (b.right().ceil() as i64 - 1).max(x0);
        let y1 = (b.bottom().ceil() as i64 - 1).max(y0);
        for x in x0..=x1 {
            self.set(x, y0, c);
            self.set(x, y1, c);
        }
        for y in y0..=y1 {
            self.set(x0, y, c);
            self.set(x1, y, c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, c);
            }
        }
    }

    pub fn draw_line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.set(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                c,
            );
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, f: usize) -> Canvas {
        let mut out = Canvas::new(self.width * f, self.height * f, [0; 3]);
        for y in 0..out.height {
            for x in 0..out.width {
                let s = 3 * ((y / f) * self.width + x / f);
                let d = 3 * (y * out.width + x);
                out.rgb[d..d + 3].copy_from_slice(&self.rgb[s..s + 3]);
            }
        }
        out
    }

    pub fn ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes).map_err(|m| Error::Dataset(format!("{}: {m}", path.display())))
    }

    /// Binary P6 with maxval 255; `#` comments allowed in the header.
    pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let w: usize = fields[1].parse().map_err(|_| "bad width")?;
        let h: usize = fields[2].parse().map_err(|_| "bad height")?;
        if fields[3] != "255" {
            return Err("only maxval 255 is supported".into());
        }
        let data = &bytes[i + 1..];
        if data.len() != 3 * w * h {
            return Err(format!("expected {} pixel bytes, found {}", 3 * w * h, data.len()));
        }
        Ok(Canvas {
            width: w,
            height: h,
            rgb: data.to_vec(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.rgb).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

/// Distinct colors for overlays, cycling.
pub fn palette(i: usize) -> [u8; 3] {
    const P: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
    ];
    P[i % P.len()]
}

/// One line of the dataset's ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub path: String,
    /// `[x, y, w, h]` in pixels.
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

/// Writes `images/NNNNN.ppm` and `gt.jsonl` under `dir`.
pub fn dump_dataset(images: &[SyntheticImage], dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut lines = String::new();
    for (i, im) in images.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        Canvas::from_tensor(&im.pixels)?.write_ppm(&dir.join(&rel))?;
        let rec = GtRecord {
            path: rel,
            boxes: im.gt.iter().map(|g| [g.rect.x, g.rect.y, g.rect.w, g.rect.h]).collect(),
            classes: im.gt.iter().map(|g| g.class_id).collect(),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let gt = dir.join("gt.jsonl");
    fs::write(&gt, lines).map_err(|e| Error::io(&gt, e))
}

/// Reads a directory written by [`dump_dataset`]. Pixels are quantized to
/// 8 bits by the round trip.
pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticImage>> {
    let gt = dir.join("gt.jsonl");
    let text = fs::read_to_string(&gt).map_err(|e| Error::io(&gt, e))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GtRecord = serde_json::from_str(line)?;
        if rec.boxes.len() != rec.classes.len() {
            return Err(Error::Dataset(format!("gt line {}: boxes and classes differ in length", no + 1)));
        }
        let pixels = Canvas::read_ppm(&dir.join(&rec.path))?.to_tensor();
        let gt = rec
            .boxes
            .iter()
            .zip(&rec.classes)
            .map(|(b, &c)| {
                Ok(GtObject {
                    rect: Box::new(b[0], b[1], b[2], b[3])?,
                    class_id: c,
                })
            })
            .collect::<Result<_>>()?;
        out.push(SyntheticImage { pixels, gt });
    }
    Ok(out)
}

/// Line plot of several series over a shared x axis (series index on x).
pub fn line_plot(series: &[Vec<f64>], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, [255; 3]);
    let margin = 10.0;
    let finite = series.iter().flatten().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    if len < 2 || lo > hi {
        return c;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    c.draw_line((margin, margin), (margin, margin + ph), [0; 3]);
    c.draw_line((margin, margin + ph), (margin + pw, margin + ph), [0; 3]);
    for (k, s) in series.iter().enumerate() {
        let pt = |i: usize| {
            (
                margin + pw * i as f64 / (len - 1) as f64,
                margin + ph * (1.0 - (s[i] - lo) / span),
            )
        };
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                c.draw_line(pt(i - 1), pt(i), palette(k));
            }
        }
    }
    c
}

/// Vertical bars, one per value, scaled to the largest value.
pub fn bar_plot(values: &[f64], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, [255; 3]);
    let hi = values.iter().copied().fold(0.0, f64::max);
    if values.is_empty() || hi <= 0.0 {
        return c;
    }
    let slot = width as f64 / values.len() as f64;
    for (i, v) in values.iter().enumerate() {
        let h = (height as f64 - 10.0) * v.max(0.0) / hi;
        c.fill_rect(
            (i as f64 * slot + slot * 0.15) as i64,
            (height as f64 - h) as i64,
            ((i + 1) as f64 * slot - slot * 0.15) as i64,
            height as i64,
            palette(i),
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{generate_dataset, SceneConfig};

    #[test]
    fn ppm_round_trip() {
        let mut c = Canvas::new(3, 2, [1, 2, 3]);
        c.set(2, 1, [200, 100, 50]);
        let back = Canvas::parse_ppm(&c.ppm_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(Canvas::parse_ppm(b"P6\n3 2\n255\n\x00").is_err());
        assert!(Canvas::parse_ppm(b"P3\n1 1\n255\n000").is_err());
        let commented = b"P6\n# hi\n1 1\n255\n\x01\x02\x03";
        assert_eq!(Canvas::parse_ppm(commented).unwrap().rgb, vec![1, 2, 3]);
    }

    #[test]
    fn dataset_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_dataset(3, &SceneConfig::default(), 4);
        dump_dataset(&imgs, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in imgs.iter().zip(&back) {
            assert_eq!(a.gt, b.gt);
            let err = a.pixels.data().iter().zip(b.pixels.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn box_outline_hits_edges() {
        let mut c = Canvas::new(8, 8, [0; 3]);
        c.draw_box(&Box { x: 1.0, y: 2.0, w: 4.0, h: 3.0 }, [9, 9, 9]);
        let at = |x: usize, y: usize| c.rgb[3 * (y * 8 + x)];
        assert_eq!(at(1, 2), 9);
        assert_eq!(at(4, 4), 9);
        assert_eq!(at(2, 3), 0);
        assert_eq!(at(5, 2), 0);
    }
}
