//! Synthetic dot-crowd images, labeled/unlabeled splits and the on-disk
//! dataset format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <dir>/manifest.txt   one id per line, in dataset order
//! <dir>/<id>.img       "H W" header line, then H lines of W pixel values
//! <dir>/<id>.pts       one "x y" line per head annotation
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::density::PointAnnotation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major grayscale in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub points: Vec<PointAnnotation>,
}

impl AnnotatedImage {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        points: Vec<PointAnnotation>,
    ) -> Result<Self> {
        let id = id.into();
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image {id}: {height}×{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("image {id}: pixel {p} outside [0, 1]")));
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64) {
                return Err(Error::Annotation {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
            points,
        })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Left-right mirror of pixels and annotations.
    pub fn flipped(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        let w = self.width as f64;
        let points = self
            .points
            .iter()
            .map(|p| {
                // keep the mirrored point strictly inside [0, w)
                let x = (w - p.x).min(w - 1e-9).max(0.0);
                PointAnnotation::new(x, p.y)
            })
            .collect();
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            pixels,
            points,
        }
    }

    /// Sub-image with annotations shifted into the crop's frame.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}×{width} at ({top}, {left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for r in top..top + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + left..r * self.width + left + width]);
        }
        let points = self
            .points
            .iter()
            .filter(|p| {
                p.y >= top as f64
                    && p.y < (top + height) as f64
                    && p.x >= left as f64
                    && p.x < (left + width) as f64
            })
            .map(|p| PointAnnotation::new(p.x - left as f64, p.y - top as f64))
            .collect();
        Ok(Self {
            id: self.id.clone(),
            height,
            width,
            pixels,
            points,
        })
    }
}

/// Rendering parameters that define a visual domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub dot_radius: f64,
    pub dot_intensity: f64,
    pub background_noise_std: f64,
    /// Amplitude of the smooth low-frequency background texture.
    pub background_texture_scale: f64,
    pub seed_offset: u64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self {
            dot_radius: 1.5,
            dot_intensity: 0.6,
            background_noise_std: 0.05,
            background_texture_scale: 0.3,
            seed_offset: 0,
        }
    }
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.dot_radius > 0.0) {
            return Err(Error::Config(format!("dot_radius must be > 0, got {}", self.dot_radius)));
        }
        if !(0.0..=1.0).contains(&self.dot_intensity) {
            return Err(Error::Config(format!(
                "dot_intensity must lie in [0, 1], got {}",
                self.dot_intensity
            )));
        }
        if !(self.background_noise_std >= 0.0) || !(self.background_texture_scale >= 0.0) {
            return Err(Error::Config("background parameters must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Minimum distance between two dot centers; keeps rendered dots apart.
    pub fn min_separation(&self) -> f64 {
        2.0 * self.dot_radius + 1.0
    }
}

/// Base background level before texture and noise.
const BACKGROUND_LEVEL: f64 = 0.15;
/// Side of the coarse grid the background texture is interpolated from.
const TEXTURE_GRID: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 2000;

/// Generate `n_images` images of `size = (height, width)` with counts drawn
/// uniformly from the inclusive `count_range`.
pub fn generate_dataset(
    n_images: usize,
    size: (usize, usize),
    count_range: (usize, usize),
    style: &DomainStyle,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    let (height, width) = size;
    let (lo, hi) = count_range;
    if n_images == 0 {
        return Err(Error::Config("n_images must be ≥ 1".into()));
    }
    if hi < lo {
        return Err(Error::Config(format!("count range {lo}:{hi} has max < min")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    style.validate()?;
    // Random sequential packing of disks jams well below full coverage; refuse
    // ranges that need more than half the image covered by exclusion disks.
    let sep = style.min_separation();
    let disk = std::f64::consts::PI * (sep / 2.0).powi(2);
    if hi as f64 * disk > 0.5 * (height * width) as f64 {
        return Err(Error::Generation(format!(
            "{hi} dots of radius {} cannot be placed apart in a {height}×{width} image",
            style.dot_radius
        )));
    }

    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(style.seed_offset));
            rng.set_stream(i as u64);
            let n = rng.random_range(lo..=hi);
            render_image(format!("img{i:05}"), height, width, n, style, &mut rng)
        })
        .collect()
}

fn render_image(
    id: String,
    height: usize,
    width: usize,
    n_dots: usize,
    style: &DomainStyle,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedImage> {
    let sep2 = style.min_separation().powi(2);
    let mut points: Vec<PointAnnotation> = Vec::with_capacity(n_dots);
    for k in 0..n_dots {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = PointAnnotation::new(
                rng.random::<f64>() * width as f64,
                rng.random::<f64>() * height as f64,
            );
            if points
                .iter()
                .all(|q| (q.x - p.x).powi(2) + (q.y - p.y).powi(2) >= sep2)
            {
                points.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "{id}: could not place dot {k} of {n_dots} without overlap"
            )));
        }
    }

    // coarse random grid, bilinearly interpolated to a smooth texture
    let coarse: Vec<f64> = (0..TEXTURE_GRID * TEXTURE_GRID).map(|_| rng.random::<f64>()).collect();
    let noise = Normal::new(0.0, style.background_noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut pixels = vec![0.0; height * width];
    for r in 0..height {
        let ty = (r as f64 + 0.5) / height as f64 * (TEXTURE_GRID - 1) as f64;
        let (y0, fy) = (ty.floor() as usize, ty.fract());
        let y1 = (y0 + 1).min(TEXTURE_GRID - 1);
        for c in 0..width {
            let tx = (c as f64 + 0.5) / width as f64 * (TEXTURE_GRID - 1) as f64;
            let (x0, fx) = (tx.floor() as usize, tx.fract());
            let x1 = (x0 + 1).min(TEXTURE_GRID - 1);
            let top = coarse[y0 * TEXTURE_GRID + x0] * (1.0 - fx) + coarse[y0 * TEXTURE_GRID + x1] * fx;
            let bot = coarse[y1 * TEXTURE_GRID + x0] * (1.0 - fx) + coarse[y1 * TEXTURE_GRID + x1] * fx;
            let texture = top * (1.0 - fy) + bot * fy;
            let n = if style.background_noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            pixels[r * width + c] = BACKGROUND_LEVEL + style.background_texture_scale * texture + n;
        }
    }

    // soft discs: full intensity inside the radius, linear falloff over one pixel
    let reach = style.dot_radius + 1.0;
    for p in &points {
        let r_lo = ((p.y - reach).floor().max(0.0)) as usize;
        let r_hi = ((p.y + reach).ceil() as usize).min(height);
        let c_lo = ((p.x - reach).floor().max(0.0)) as usize;
        let c_hi = ((p.x + reach).ceil() as usize).min(width);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                let d = ((c as f64 + 0.5 - p.x).powi(2) + (r as f64 + 0.5 - p.y).powi(2)).sqrt();
                let cover = (style.dot_radius + 0.5 - d).clamp(0.0, 1.0);
                pixels[r * width + c] += style.dot_intensity * cover;
            }
        }
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    AnnotatedImage::new(id, height, width, pixels, points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Number of labeled samples for a fraction of `n`, i.e. ⌈fraction·n⌉.
pub fn labeled_count(fraction: f64, n: usize) -> usize {
    // the small slack absorbs products like 0.07·100 = 7.000000000000001
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Seeded shuffle, then the first ⌈fraction·n⌉ samples form the labeled set.
///
/// Unlabeled samples keep their annotations for later analysis; the trainer
/// never reads them.
pub fn split(
    dataset: &[AnnotatedImage],
    cfg: &SplitConfig,
) -> Result<(Vec<AnnotatedImage>, Vec<AnnotatedImage>)> {
    if !(cfg.labeled_fraction > 0.0 && cfg.labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction must lie in (0, 1], got {}",
            cfg.labeled_fraction
        )));
    }
    let n_lab = labeled_count(cfg.labeled_fraction, dataset.len());
    if n_lab == 0 {
        return Err(Error::Config("split leaves the labeled set empty".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let labeled = order[..n_lab].iter().map(|&i| dataset[i].clone()).collect();
    let unlabeled = order[n_lab..].iter().map(|&i| dataset[i].clone()).collect();
    Ok((labeled, unlabeled))
}

pub fn save_dataset(dataset: &[AnnotatedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for img in dataset {
        if img.id.is_empty() || img.id.contains(['/', '\\', '\n', ' ']) {
            return Err(Error::Config(format!("image id {:?} is not a valid file stem", img.id)));
        }
        let mut grid = format!("{} {}\n", img.height, img.width);
        for row in img.pixels.chunks(img.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            grid.push_str(&line.join(" "));
            grid.push('\n');
        }
        fs::write(dir.join(format!("{}.img", img.id)), grid)?;

        let mut pts = String::new();
        for p in &img.points {
            pts.push_str(&format!("{:?} {:?}\n", p.x, p.y));
        }
        fs::write(dir.join(format!("{}.pts", img.id)), pts)?;
        manifest.push_str(&img.id);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(file: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(file, line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn read_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let [h, w] = dims[..] else {
        return Err(parse_err(path, 1, "header must be \"H W\""));
    };
    let h: usize = h.parse().map_err(|_| parse_err(path, 1, "bad height"))?;
    let w: usize = w.parse().map_err(|_| parse_err(path, 1, "bad width"))?;
    if h == 0 || w == 0 {
        return Err(parse_err(path, 1, "extents must be positive"));
    }
    let mut values = Vec::with_capacity(h * w);
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > h {
            return Err(parse_err(path, lineno, format!("more than {h} rows")));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v = parse_f64(path, lineno, tok)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(path, lineno, format!("pixel {v} outside [0, 1]")));
            }
            values.push(v);
        }
        if values.len() - before != w {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {w} values, found {}", values.len() - before),
            ));
        }
    }
    if rows != h {
        return Err(parse_err(path, rows + 1, format!("expected {h} rows, found {rows}")));
    }
    Ok((h, w, values))
}

fn read_points(path: &Path) -> Result<Vec<PointAnnotation>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[..] {
            [] => continue,
            [x, y] => points.push(PointAnnotation::new(
                parse_f64(path, lineno, x)?,
                parse_f64(path, lineno, y)?,
            )),
            _ => return Err(parse_err(path, lineno, "expected \"x y\"")),
        }
    }
    Ok(points)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if id.contains(['/', '\\']) {
            return Err(parse_err(&manifest, i + 1, format!("invalid id {id:?}")));
        }
        let img_path = dir.join(format!("{id}.img"));
        let (h, w, pixels) = read_grid(&img_path)?;
        let pts_path = dir.join(format!("{id}.pts"));
        let points = read_points(&pts_path)?;
        for (k, p) in points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
                return Err(parse_err(&pts_path, k + 1, format!("point ({}, {}) outside image", p.x, p.y)));
            }
        }
        out.push(AnnotatedImage::new(id, h, w, pixels, points)?);
    }
    Ok(out)
}
