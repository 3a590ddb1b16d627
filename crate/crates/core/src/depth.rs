//! Sparse-to-dense depth completion and depth-map file formats.

use std::io::{Read, Write};

use crate::calib::SparseDepthMap;
use crate::{Error, Result};

/// RGB image with channel values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} channel values for a {width}×{height} RGB image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("RGB values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Binary PPM (`P6`, 8-bit).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6, got `{}`", fields[0])));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field `{s}`")));
        let (w, h, max) = (dim(&fields[1])?, dim(&fields[2])?, dim(&fields[3])?);
        if max != 255 {
            return Err(Error::Format("only 8-bit PPM is supported".into()));
        }
        let body = raw
            .get(pos..pos + w * h * 3)
            .ok_or_else(|| Error::Format("truncated PPM data".into()))?;
        Self::new(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Per-pixel depth in meters with no empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DenseDepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {width}×{height} depth map",
                depth.len()
            )));
        }
        if depth.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Domain("dense depth must be finite and > 0 everywhere".into()));
        }
        Ok(Self { width, height, depth })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn cells(&self) -> &[f64] {
        &self.depth
    }

    /// Sparse view keeping the cells where `keep(u, v)` holds.
    pub fn to_sparse(&self, mut keep: impl FnMut(usize, usize) -> bool) -> SparseDepthMap {
        let mut cells = self.depth.clone();
        for v in 0..self.height {
            for u in 0..self.width {
                if !keep(u, v) {
                    cells[v * self.width + u] = SparseDepthMap::EMPTY;
                }
            }
        }
        SparseDepthMap::from_grid(self.width, self.height, cells).expect("dense cells are positive")
    }
}

/// Fills the empty cells of a sparse depth map.
pub trait DepthCompleter {
    fn complete(&self, image: &RgbImage, sparse: &SparseDepthMap) -> Result<DenseDepthMap>;

    /// Whether the completer has trainable state; only learned completers
    /// contribute a depth term to the training loss.
    fn is_learned(&self) -> bool {
        false
    }
}

/// Classical completion: repeated min-dilation, then nearest-valid fill.
///
/// Each dilation pass writes, into every empty cell, the smallest valid
/// depth inside the square kernel centred on it (computed from the
/// previous pass, so the result is independent of scan order). Passes
/// repeat until the map is full, a pass fills nothing, or `max_passes`
/// is reached. Anything left is copied from the Euclidean-nearest valid
/// cell, ties going to the first such cell in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct MorphologicalCompleter {
    pub kernel: usize,
    pub max_passes: Option<usize>,
}

impl Default for MorphologicalCompleter {
    fn default() -> Self {
        Self {
            kernel: 5,
            max_passes: None,
        }
    }
}

impl DepthCompleter for MorphologicalCompleter {
    fn complete(&self, image: &RgbImage, sparse: &SparseDepthMap) -> Result<DenseDepthMap> {
        if image.width() != sparse.width() || image.height() != sparse.height() {
            return Err(Error::ShapeMismatch(format!(
                "image {}×{} vs depth {}×{}",
                image.width(),
                image.height(),
                sparse.width(),
                sparse.height()
            )));
        }
        if sparse.valid_count() == 0 {
            return Err(Error::Domain("cannot complete a depth map with no valid cells".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        let (w, h) = (sparse.width(), sparse.height());
        let half = (self.kernel / 2) as isize;
        let empty = SparseDepthMap::EMPTY;
        let mut cur = sparse.cells().to_vec();
        let mut remaining = w * h - sparse.valid_count();
        let mut passes = 0;
        while remaining > 0 && self.max_passes.is_none_or(|m| passes < m) {
            let prev = cur.clone();
            let mut filled = 0;
            for v in 0..h as isize {
                for u in 0..w as isize {
                    let i = v as usize * w + u as usize;
                    if prev[i] != empty {
                        continue;
                    }
                    let mut best = f64::INFINITY;
                    for dv in -half..=half {
                        for du in -half..=half {
                            let (nu, nv) = (u + du, v + dv);
                            if nu < 0 || nv < 0 || nu >= w as isize || nv >= h as isize {
                                continue;
                            }
                            let d = prev[nv as usize * w + nu as usize];
                            if d != empty && d < best {
                                best = d;
                            }
                        }
                    }
                    if best.is_finite() {
                        cur[i] = best;
                        filled += 1;
                    }
                }
            }
            passes += 1;
            remaining -= filled;
            if filled == 0 {
                break;
            }
        }
        if remaining > 0 {
            nearest_fill(&mut cur, w, h);
        }
        DenseDepthMap::new(w, h, cur)
    }
}

fn nearest_fill(cells: &mut [f64], w: usize, h: usize) {
    let empty = SparseDepthMap::EMPTY;
    let valid: Vec<(usize, f64)> = cells
        .iter()
        .enumerate()
        .filter(|(_, d)| **d != empty)
        .map(|(i, d)| (i, *d))
        .collect();
    for i in 0..w * h {
        if cells[i] != empty {
            continue;
        }
        let (u, v) = ((i % w) as i64, (i / w) as i64);
        let mut best: Option<(i64, f64)> = None;
        for &(j, d) in &valid {
            let (du, dv) = ((j % w) as i64 - u, (j / w) as i64 - v);
            let dist2 = du * du + dv * dv;
            if best.is_none_or(|(b, _)| dist2 < b) {
                best = Some((dist2, d));
            }
        }
        cells[i] = best.expect("at least one valid cell").1;
    }
}

/// Completes `sparse` with the default [`MorphologicalCompleter`]. The
/// image is part of the interface but unused by this completer.
pub fn complete_depth(image: &RgbImage, sparse: &SparseDepthMap) -> Result<DenseDepthMap> {
    MorphologicalCompleter::default().complete(image, sparse)
}

/// Mean absolute depth error over the cells where `mask` is true.
///
/// Stand-in for a learned completer's depth supervision.
pub fn depth_loss(predicted: &DenseDepthMap, reference: &DenseDepthMap, mask: &[bool]) -> Result<f64> {
    if predicted.width != reference.width || predicted.height != reference.height || mask.len() != predicted.depth.len() {
        return Err(Error::ShapeMismatch("depth_loss inputs differ in shape".into()));
    }
    let (sum, n) = predicted
        .depth
        .iter()
        .zip(&reference.depth)
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), ((p, r), _)| (s + (p - r).abs(), n + 1));
    if n == 0 {
        return Err(Error::Domain("depth_loss mask selects no cells".into()));
    }
    Ok(sum / n as f64)
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Raw depth grid: 16-byte header (`DPTH`, `u32` width, `u32` height,
/// `f32` empty sentinel) followed by row-major little-endian `f32` cells.
pub fn write_depth_raw<W: Write>(mut w: W, width: usize, height: usize, cells: &[f64], sentinel: f32) -> Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&sentinel.to_le_bytes())?;
    for &d in cells {
        w.write_all(&(d as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a raw depth grid, returning `(width, height, sentinel, cells)`.
pub fn read_depth_raw<R: Read>(mut r: R) -> Result<(usize, usize, f32, Vec<f64>)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != DEPTH_MAGIC {
        return Err(Error::Format("not a raw depth file".into()));
    }
    let word = |i: usize| [header[i], header[i + 1], header[i + 2], header[i + 3]];
    let width = u32::from_le_bytes(word(4)) as usize;
    let height = u32::from_le_bytes(word(8)) as usize;
    let sentinel = f32::from_le_bytes(word(12));
    let mut body = vec![0u8; width * height * 4];
    r.read_exact(&mut body)?;
    let cells = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((width, height, sentinel, cells))
}

impl SparseDepthMap {
    pub fn write_raw<W: Write>(&self, w: W) -> Result<()> {
        write_depth_raw(w, self.width(), self.height(), self.cells(), Self::EMPTY as f32)
    }

    pub fn read_raw<R: Read>(r: R) -> Result<Self> {
        let (w, h, sentinel, mut cells) = read_depth_raw(r)?;
        for c in &mut cells {
            if *c == sentinel as f64 {
                *c = Self::EMPTY;
            }
        }
        Self::from_grid(w, h, cells)
    }
}

impl DenseDepthMap {
    pub fn write_raw<W: Write>(&self, w: W) -> Result<()> {
        write_depth_raw(w, self.width, self.height, &self.depth, 0.0)
    }

    pub fn read_raw<R: Read>(r: R) -> Result<Self> {
        let (w, h, _, cells) = read_depth_raw(r)?;
        Self::new(w, h, cells)
    }
}

/// ASCII PGM (`P2`) debug dump; depths are scaled so the largest maps to
/// 65535 and empty cells to 0.
pub fn write_depth_pgm<W: Write>(mut w: W, width: usize, height: usize, cells: &[f64]) -> Result<()> {
    let max = cells.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    writeln!(w, "P2")?;
    writeln!(w, "# depth in meters, 65535 = {max}")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "65535")?;
    for row in cells.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|d| ((d * scale).round() as u32).to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize) -> RgbImage {
        RgbImage::filled(w, h, [0.5, 0.5, 0.5]).unwrap()
    }

    #[test]
    fn single_source_fills_everything() {
        let mut cells = vec![0.0; 16];
        cells[5] = 7.0;
        let sparse = SparseDepthMap::from_grid(4, 4, cells).unwrap();
        let dense = complete_depth(&gray(4, 4), &sparse).unwrap();
        assert!(dense.cells().iter().all(|&d| d == 7.0));
    }

    #[test]
    fn dense_input_is_unchanged() {
        let cells: Vec<f64> = (1..=12).map(|i| i as f64 * 0.5).collect();
        let sparse = SparseDepthMap::from_grid(4, 3, cells.clone()).unwrap();
        let dense = complete_depth(&gray(4, 3), &sparse).unwrap();
        assert_eq!(dense.cells(), cells.as_slice());
    }

    #[test]
    fn two_sources_on_eight_by_eight() {
        let mut cells = vec![0.0; 64];
        cells[0] = 2.0;
        cells[63] = 10.0;
        let sparse = SparseDepthMap::from_grid(8, 8, cells).unwrap();
        let dense = complete_depth(&gray(8, 8), &sparse).unwrap();
        assert_eq!(dense.get(1, 1), 2.0);
        assert_eq!(dense.get(0, 0), 2.0);
        assert_eq!(dense.get(7, 7), 10.0);
        assert_eq!(dense.get(6, 6), 10.0);
    }

    #[test]
    fn nearest_fill_finishes_capped_dilation() {
        let mut cells = vec![0.0; 20 * 3];
        cells[0] = 1.0;
        cells[19] = 4.0;
        let sparse = SparseDepthMap::from_grid(20, 3, cells).unwrap();
        let c = MorphologicalCompleter {
            kernel: 5,
            max_passes: Some(0),
        };
        let dense = c.complete(&gray(20, 3), &sparse).unwrap();
        assert_eq!(dense.get(9, 0), 1.0);
        assert_eq!(dense.get(10, 2), 4.0);
        let mut cells = vec![0.0; 5];
        cells[0] = 1.0;
        cells[4] = 3.0;
        let sparse = SparseDepthMap::from_grid(5, 1, cells).unwrap();
        let dense = c.complete(&gray(5, 1), &sparse).unwrap();
        assert_eq!(dense.get(2, 0), 1.0, "tie goes to the first cell in row-major order");
    }

    #[test]
    fn empty_input_is_a_domain_error() {
        let sparse = SparseDepthMap::empty(4, 4);
        assert!(matches!(complete_depth(&gray(4, 4), &sparse), Err(Error::Domain(_))));
        let sparse = SparseDepthMap::from_grid(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(complete_depth(&gray(3, 2), &sparse), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn depth_loss_examples() {
        let r = DenseDepthMap::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(depth_loss(&r, &r, &[true, true]).unwrap(), 0.0);
        let p = DenseDepthMap::new(2, 1, vec![2.0, 3.0]).unwrap();
        assert_eq!(depth_loss(&p, &r, &[true, true]).unwrap(), 1.0);
        let p = DenseDepthMap::new(2, 1, vec![2.0, 5.0]).unwrap();
        assert_eq!(depth_loss(&p, &r, &[true, true]).unwrap(), 2.0);
        assert!(matches!(depth_loss(&p, &r, &[false, false]), Err(Error::Domain(_))));
    }

    #[test]
    fn raw_depth_round_trip() {
        let sparse = SparseDepthMap::from_grid(3, 2, vec![0.0, 1.5, 0.0, 2.25, 0.0, 8.0]).unwrap();
        let mut bytes = Vec::new();
        sparse.write_raw(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(SparseDepthMap::read_raw(bytes.as_slice()).unwrap(), sparse);
        assert!(DenseDepthMap::read_raw(&b"XXXX0000000000000000"[..]).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let px: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 15) as f64 / 255.0).collect();
        let img = RgbImage::new(2, 3, px).unwrap();
        let mut bytes = Vec::new();
        img.write_ppm(&mut bytes).unwrap();
        let back = RgbImage::read_ppm(bytes.as_slice()).unwrap();
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn pgm_dump_has_header_and_rows() {
        let mut out = Vec::new();
        write_depth_pgm(&mut out, 2, 2, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[2], "2 2");
        assert_eq!(lines[4], "0 16384");
        assert_eq!(lines[5], "32768 65535");
    }
}
