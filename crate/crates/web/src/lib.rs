//! Browser bindings for three interactive views: a density map built from
//! clicked points, a synthetic crowd image, and a GP posterior over a toy
//! two-dimensional latent space.

use gpcount::density::{count, synthesize_density, PointAnnotation};
use gpcount::experiment::shifted_style;
use gpcount::gp::{self, GpConfig, LatentBank, NeighborMetric};
use gpcount::synth::{generate_dataset, DomainStyle};
use wasm_bindgen::prelude::*;

fn js(e: gpcount::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Density values (row-major) for points given as flat `[x0, y0, x1, y1, ...]`.
pub fn density_values(points: &[f64], height: usize, width: usize, sigma: f64) -> gpcount::Result<Vec<f64>> {
    if points.len() % 2 != 0 {
        return Err(gpcount::Error::Contract("point list must hold x,y pairs".into()));
    }
    let pts: Vec<PointAnnotation> = points.chunks(2).map(|p| PointAnnotation::new(p[0], p[1])).collect();
    Ok(synthesize_density(&pts, height, width, sigma)?.into_values())
}

#[wasm_bindgen]
pub fn density_map(points: &[f64], height: usize, width: usize, sigma: f64) -> Result<Vec<f64>, JsError> {
    density_values(points, height, width, sigma).map_err(js)
}

#[wasm_bindgen]
pub fn density_count(values: &[f64]) -> f64 {
    values.iter().sum()
}

#[wasm_bindgen]
pub struct SyntheticImage {
    size: usize,
    pixels: Vec<f64>,
    points: Vec<f64>,
    density_sum: f64,
}

#[wasm_bindgen]
impl SyntheticImage {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    /// Flat `[x0, y0, x1, y1, ...]` dot centers.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.points.len() / 2
    }

    /// Integral of the σ=2 density map built from the dot centers.
    #[wasm_bindgen(getter)]
    pub fn density_sum(&self) -> f64 {
        self.density_sum
    }
}

fn style_named(name: &str) -> gpcount::Result<DomainStyle> {
    match name {
        "default" => Ok(DomainStyle::default()),
        "shifted" => Ok(shifted_style()),
        _ => Err(gpcount::Error::Config(format!("unknown style {name:?}"))),
    }
}

pub fn make_image(style: &str, size: usize, n_dots: usize, seed: u32) -> gpcount::Result<SyntheticImage> {
    let style = style_named(style)?;
    let img = generate_dataset(1, (size, size), (n_dots, n_dots), &style, seed as u64)?.remove(0);
    let density = synthesize_density(&img.points, size, size, 2.0)?;
    Ok(SyntheticImage {
        size,
        density_sum: count(&density),
        points: img.points.iter().flat_map(|p| [p.x, p.y]).collect(),
        pixels: img.pixels,
    })
}

#[wasm_bindgen]
pub fn synthetic_image(style: &str, size: usize, n_dots: usize, seed: u32) -> Result<SyntheticImage, JsError> {
    make_image(style, size, n_dots, seed).map_err(js)
}

/// Posterior over a ring of query directions. Bank latents are unit vectors
/// at `angles` carrying scalar `targets`; queries are `samples` evenly spaced
/// directions. Returns `[mean_0 .. mean_{s-1}, var_0 .. var_{s-1}]`.
pub fn ring_posterior(
    angles: &[f64],
    targets: &[f64],
    n_neighbors: usize,
    noise: f64,
    samples: usize,
) -> gpcount::Result<Vec<f64>> {
    if angles.len() != targets.len() {
        return Err(gpcount::Error::Contract("angles and targets differ in length".into()));
    }
    let mut bank = LatentBank::new();
    for (i, (a, t)) in angles.iter().zip(targets).enumerate() {
        bank.push(format!("p{i:04}"), vec![a.cos(), a.sin()], vec![*t])?;
    }
    let cfg = GpConfig {
        n_neighbors,
        noise_variance: noise,
        metric: NeighborMetric::Cosine,
    };
    let mut mean = Vec::with_capacity(samples);
    let mut var = Vec::with_capacity(samples);
    for s in 0..samples {
        let a = std::f64::consts::TAU * s as f64 / samples as f64;
        let post = gp::posterior(&[a.cos(), a.sin()], &bank, &cfg)?;
        mean.push(post.mean[0]);
        var.push(post.variance);
    }
    mean.extend(var);
    Ok(mean)
}

#[wasm_bindgen]
pub fn gp_ring(angles: &[f64], targets: &[f64], n_neighbors: usize, noise: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    ring_posterior(angles, targets, n_neighbors, noise, samples).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_mass_matches_points() {
        let v = density_values(&[10.0, 12.0, 30.5, 20.0, 2.0, 60.0], 64, 64, 2.0).unwrap();
        assert_eq!(v.len(), 64 * 64);
        assert!((density_count(&v) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn odd_point_list_is_rejected() {
        assert!(density_values(&[1.0, 2.0, 3.0], 8, 8, 1.0).is_err());
    }

    #[test]
    fn synthetic_image_has_requested_dots() {
        let img = make_image("shifted", 48, 12, 3).unwrap();
        assert_eq!(img.count(), 12);
        assert_eq!(img.pixels().len(), 48 * 48);
        assert!((img.density_sum() - 12.0).abs() < 1e-6);
        assert!(make_image("sepia", 48, 12, 3).is_err());
    }

    #[test]
    fn ring_posterior_halves_a_lone_target() {
        let out = ring_posterior(&[0.0], &[4.0], 8, 1.0, 4).unwrap();
        // query at angle 0 coincides with the single bank point
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[4] - 1.5).abs() < 1e-12);
        // orthogonal query: zero similarity, prior variance plus noise
        assert!(out[1].abs() < 1e-12);
        assert!((out[5] - 2.0).abs() < 1e-12);
    }
}
