use std::path::Path;

use crate::error::{Error, Result};

/// Tile geometry of an image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub tile_w: usize,
    pub tile_h: usize,
    pub rows: usize,
    pub cols: usize,
    /// Blank pixels to the right of and below every tile.
    pub pad: usize,
}

impl GridLayout {
    pub fn width(&self) -> usize {
        self.cols * (self.tile_w + self.pad)
    }

    pub fn height(&self) -> usize {
        self.rows * (self.tile_h + self.pad)
    }
}

/// Maps `[-1, 1]` affinely onto `[0, 255]`, rounding half to even.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).clamp(0.0, 255.0).round_ties_even() as u8
}

/// Binary graymap with header `P5 <w> <h> 255`. Tiles fill the grid row by
/// row; unused cells and padding are 0.
pub fn write_image_grid(path: &Path, samples: &[Vec<f64>], layout: GridLayout) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("image grid needs at least one sample"));
    }
    if samples.len() > layout.rows * layout.cols {
        return Err(Error::invalid(format!(
            "{} samples do not fit a {}x{} grid",
            samples.len(),
            layout.rows,
            layout.cols
        )));
    }
    let tile = layout.tile_w * layout.tile_h;
    for s in samples {
        if s.len() != tile {
            return Err(Error::Shape {
                op: "write_image_grid",
                lhs: vec![s.len()],
                rhs: vec![layout.tile_h, layout.tile_w],
            });
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "image sample".into() });
        }
    }
    let (w, h) = (layout.width(), layout.height());
    let mut pixels = vec![0u8; w * h];
    for (k, s) in samples.iter().enumerate() {
        let (gr, gc) = (k / layout.cols, k % layout.cols);
        let (y0, x0) = (gr * (layout.tile_h + layout.pad), gc * (layout.tile_w + layout.pad));
        for r in 0..layout.tile_h {
            for c in 0..layout.tile_w {
                pixels[(y0 + r) * w + x0 + c] = quantize(s[r * layout.tile_w + c]);
            }
        }
    }
    let mut bytes = format!("P5 {w} {h} 255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Reads a binary graymap with maxval 255.
pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    // Header: four whitespace-separated tokens, then one whitespace byte.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" || tokens[3] != "255" {
        return Err(bad("not an 8-bit binary graymap"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Ok(Pgm {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout(rows: usize, cols: usize) -> GridLayout {
        GridLayout { tile_w: 8, tile_h: 8, rows, cols, pad: 2 }
    }

    #[test]
    fn zeros_map_to_mid_grey() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        write_image_grid(&path, &[vec![0.0; 64]], GridLayout { pad: 0, ..layout(1, 1) }).unwrap();
        let img = read_pgm(&path).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 127 || p == 128));
        // 127.5 rounds to the even neighbour.
        assert!(img.pixels.iter().all(|&p| p == 128));
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5 8 8 255\n"));
    }

    #[test]
    fn grid_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        write_image_grid(&path, &vec![vec![1.0; 64]; 5], layout(2, 3)).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.width, 3 * (8 + 2));
        assert_eq!(img.height, 2 * (8 + 2));
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pgm");
        assert!(write_image_grid(&path, &[], layout(1, 1)).is_err());
        assert!(write_image_grid(&path, &[vec![f64::NAN; 64]], layout(1, 1)).is_err());
    }

    #[test]
    fn endpoints() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    proptest! {
        #[test]
        fn roundtrip_reproduces_quantized_values(vals in proptest::collection::vec(-1.5f64..1.5, 64 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.pgm");
            let samples: Vec<Vec<f64>> = vals.chunks(64).map(<[f64]>::to_vec).collect();
            let l = layout(2, 2);
            write_image_grid(&path, &samples, l).unwrap();
            let img = read_pgm(&path).unwrap();
            for (k, s) in samples.iter().enumerate() {
                let (y0, x0) = ((k / 2) * 10, (k % 2) * 10);
                for r in 0..8 {
                    for c in 0..8 {
                        prop_assert_eq!(img.pixels[(y0 + r) * img.width + x0 + c], quantize(s[r * 8 + c]));
                    }
                }
            }
        }
    }
}
