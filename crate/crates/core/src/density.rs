//! Ground-truth density maps from point annotations.

use crate::error::{Error, Result};

/// Head location in pixel coordinates; `(0, 0)` is the top-left corner of
/// the top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Nonnegative per-pixel count grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "density map {height}×{width} cannot hold {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("density values must be finite and ≥ 0, got {v}")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Integral of the map, i.e. the count it represents.
pub fn count(map: &DensityMap) -> f64 {
    map.values.iter().sum()
}

/// Gaussian weights at pixel centers along one axis, normalized to sum 1.
fn axis_profile(center: f64, len: usize, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut w: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 + 0.5 - center;
            (-d * d * inv).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for v in &mut w {
            *v /= s;
        }
    } else {
        // sigma so small that every center underflows: put the mass on the nearest pixel
        let idx = (center.floor() as usize).min(len - 1);
        w[idx] = 1.0;
    }
    w
}

/// Sum of isotropic Gaussians, one per point, each truncated to the image and
/// renormalized to unit mass.
///
/// The 2-D kernel is separable, so truncating and renormalizing each axis
/// profile gives exactly the renormalized truncated 2-D Gaussian.
pub fn synthesize_density(
    points: &[PointAnnotation],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Shape("density map needs positive extents".into()));
    }
    for (index, p) in points.iter().enumerate() {
        let inside = p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64;
        if !inside {
            return Err(Error::Annotation {
                index,
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
    }
    let mut values = vec![0.0; height * width];
    for p in points {
        let gy = axis_profile(p.y, height, sigma);
        let gx = axis_profile(p.x, width, sigma);
        for (r, &wy) in gy.iter().enumerate() {
            if wy == 0.0 {
                continue;
            }
            let row = &mut values[r * width..(r + 1) * width];
            for (v, &wx) in row.iter_mut().zip(&gx) {
                *v += wy * wx;
            }
        }
    }
    Ok(DensityMap {
        height,
        width,
        values,
    })
}
