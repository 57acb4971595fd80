//! Synthetic corpora for demos and end-to-end checks.
//!
//! Each class is a point in a 2-D latent space `(radius, brightness)`. An
//! item jitters its class point with isotropic Gaussian noise and renders it
//! as a centred ring: pixel intensity `brightness * exp(-(rho - radius)^2 /
//! (2 * width^2))` where `rho` is the pixel's distance from the image centre.
//! Rings are symmetric under quarter turns, so rotation never changes a
//! class's appearance.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{LabeledDataset, Payload, Raster};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Image side in pixels.
    pub size: usize,
    /// Standard deviation of the latent jitter.
    pub sigma: f64,
    /// Ring thickness in pixels.
    pub ring_width: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 8,
            per_class: 30,
            size: 12,
            sigma: 0.05,
            ring_width: 1.0,
            seed: 0,
        }
    }
}

/// Latent class centres: radii spaced 1.5 px apart crossed with two
/// brightness levels 0.5 apart, so centres are at least `0.5 = 10 * 0.05`
/// apart.
pub fn blob_centers(classes: usize, size: usize) -> Result<Vec<(f64, f64)>> {
    let radii: Vec<f64> = (0..)
        .map(|i| 1.0 + 1.5 * f64::from(i))
        .take_while(|&r| r <= size as f64 / 2.0)
        .collect();
    let levels = [0.4, 0.9];
    if classes > radii.len() * levels.len() {
        return Err(Error::Argument(format!(
            "a {size}px image fits at most {} ring classes",
            radii.len() * levels.len()
        )));
    }
    Ok(radii
        .iter()
        .flat_map(|&r| levels.iter().map(move |&b| (r, b)))
        .take(classes)
        .collect())
}

pub fn render_ring(size: usize, radius: f64, brightness: f64, width: f64) -> Raster {
    let c = (size as f64 - 1.0) / 2.0;
    let pixels = (0..size * size)
        .map(|i| {
            let (r, col) = ((i / size) as f64, (i % size) as f64);
            let rho = ((r - c).powi(2) + (col - c).powi(2)).sqrt();
            let v = brightness * (-(rho - radius).powi(2) / (2.0 * width * width)).exp();
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Raster::new(size, size, pixels).expect("clamped square raster")
}

/// Ring-image dataset; also returns the latent point of every item.
pub fn blob_rasters(spec: &BlobSpec) -> Result<(LabeledDataset, Vec<(f64, f64)>)> {
    let centers = blob_centers(spec.classes, spec.size)?;
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = rng::stream(spec.seed, "synthetic/blobs");
    let mut payloads = Vec::with_capacity(spec.classes * spec.per_class);
    let mut latents = Vec::with_capacity(payloads.capacity());
    for (class, &(r, b)) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let (rr, bb) = (r + noise.sample(&mut rng), b + noise.sample(&mut rng));
            latents.push((rr, bb));
            payloads.push((
                Payload::Raster(render_ring(spec.size, rr, bb, spec.ring_width)),
                class,
            ));
        }
    }
    let names = (0..spec.classes).map(|c| format!("ring{c}")).collect();
    Ok((LabeledDataset::new(payloads, names)?, latents))
}

/// Gaussian clusters in `dim` dimensions with centres drawn from
/// `N(0, spread^2)` and unit-variance items.
pub fn gaussian_embeddings<R: Rng>(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    let centre = Normal::new(0.0, spread).map_err(|e| Error::Argument(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut payloads = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mu: Vec<f64> = (0..dim).map(|_| centre.sample(rng)).collect();
        for _ in 0..per_class {
            let v = mu.iter().map(|m| (m + unit.sample(rng)) as f32).collect();
            payloads.push((Payload::Embedding(v), class));
        }
    }
    LabeledDataset::new(payloads, (0..classes).map(|c| c.to_string()).collect())
}
