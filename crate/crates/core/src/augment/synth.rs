//! Synthetic multi-domain dataset generator.
//!
//! Class identity is carried by shape geometry alone (circle, triangle,
//! square, ...) and domain identity by color and background texture alone,
//! so the class signal is domain-invariant by construction. The same
//! geometry stream is replayed for every domain: sample `k` of class `c`
//! has identical geometry everywhere and only its style differs.
//!
//! The generator writes PNGs plus the same manifest CSV layout the data
//! module reads, so synthetic domains are loadable like any other domain.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hsv_to_rgb;
use crate::data::{write_manifest, DomainDataset, Sample, NUM_GRADES};
use crate::error::{Error, Result};
use crate::rng;

const GEOM_STREAM: u64 = 0x6765_6f6d; // "geom"
const TEX_STREAM: u64 = 0x7465_7874; // "text"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Hue offset between consecutive domain styles, in degrees.
    pub domain_color_shift: f64,
    /// Master seed for geometry and texture streams.
    pub background_texture_seed: u64,
    pub image_size: usize,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            num_classes: 3,
            samples_per_class: 50,
            domain_color_shift: 50.0,
            background_texture_seed: 0,
            image_size: 32,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.num_classes < 2 || self.num_classes > NUM_GRADES {
            return Err(Error::config(format!(
                "num_classes must lie in 2..=5 (classes double as grades), got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        if self.domain_color_shift <= 0.0 {
            return Err(Error::config("domain_color_shift must be positive"));
        }
        Ok(())
    }

    fn style_hue(&self, style: usize) -> f64 {
        (style as f64 * self.domain_color_shift).rem_euclid(360.0)
    }
}

/// Generates `num_domains` styled domains named `synth_<i>` under
/// `out_dir`, each with `num_classes * samples_per_class` samples.
/// Deterministic for fixed seeds, byte-identical images included.
pub fn generate_synthetic_domains(
    spec: &SyntheticDomainSpec,
    num_domains: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    if num_domains < 2 {
        return Err(Error::config(format!(
            "need at least 2 domains for domain generalization, got {num_domains}"
        )));
    }
    let out_dir = out_dir.as_ref();
    (0..num_domains)
        .map(|style| {
            let name = format!("synth_{style}");
            generate_styled_dataset(spec, &[style], &name, out_dir)
        })
        .collect()
}

/// Generates one pooled dataset mixing `num_styles` styles starting at
/// `first_style`. Used as the oracle's synthetic pretraining split; styles
/// beyond the benchmark domains keep the oracle's data disjoint from every
/// fold.
pub fn generate_pretrain_pool(
    spec: &SyntheticDomainSpec,
    num_styles: usize,
    first_style: usize,
    out_dir: impl AsRef<Path>,
    name: &str,
) -> Result<DomainDataset> {
    spec.validate()?;
    if num_styles == 0 {
        return Err(Error::config("pretraining pool needs at least one style"));
    }
    let styles: Vec<usize> = (first_style..first_style + num_styles).collect();
    generate_styled_dataset(spec, &styles, name, out_dir.as_ref())
}

fn generate_styled_dataset(
    spec: &SyntheticDomainSpec,
    styles: &[usize],
    name: &str,
    out_dir: &Path,
) -> Result<DomainDataset> {
    let img_dir = out_dir.join(name);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            // round-robin over styles so pooled sets mix them evenly
            let style = styles[k % styles.len()];
            let img = render_sample(spec, style, class, k);
            let rel = PathBuf::from(format!("{name}/img_c{class}_{k:04}.png"));
            let path = out_dir.join(&rel);
            img.save(&path)
                .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
            samples.push(Sample {
                image_ref: rel,
                grade: class as u8,
                domain_name: name.to_string(),
            });
        }
    }
    let dataset = DomainDataset::new(name, samples)?;
    write_manifest(&dataset, out_dir.join(format!("{name}.csv")))?;
    Ok(dataset)
}

/// Smoothed value-noise lattice added to the background V channel.
struct TextureNoise {
    lattice: Vec<f64>,
    cells: usize,
    size: usize,
}

impl TextureNoise {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let cells = 5;
        let lattice = (0..cells * cells).map(|_| rng.random_range(-0.08..0.08)).collect();
        TextureNoise { lattice, cells, size }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let scale = (self.cells - 1) as f64 / self.size as f64;
        let fx = x as f64 * scale;
        let fy = y as f64 * scale;
        let (x0, y0) = (fx as usize, fy as usize);
        let x1 = (x0 + 1).min(self.cells - 1);
        let y1 = (y0 + 1).min(self.cells - 1);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let v00 = self.lattice[y0 * self.cells + x0];
        let v10 = self.lattice[y0 * self.cells + x1];
        let v01 = self.lattice[y1 * self.cells + x0];
        let v11 = self.lattice[y1 * self.cells + x1];
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }
}

/// Convex shape per class: class 0 is a disk, class c >= 1 a regular
/// (c+2)-gon. Geometry depends only on (seed, class, sample index).
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Polygon { vertices } => {
                // convex, counter-clockwise: inside iff left of every edge
                let n = vertices.len();
                for i in 0..n {
                    let (x0, y0) = vertices[i];
                    let (x1, y1) = vertices[(i + 1) % n];
                    let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

fn sample_geometry(spec: &SyntheticDomainSpec, class: usize, k: usize) -> Shape {
    let size = spec.image_size as f64;
    let mut g = rng::stream(
        spec.background_texture_seed,
        &[GEOM_STREAM, class as u64, k as u64],
    );
    let cx = size * (0.5 + g.random_range(-0.12..0.12));
    let cy = size * (0.5 + g.random_range(-0.12..0.12));
    let r = size * g.random_range(0.26..0.36);
    let rot: f64 = g.random_range(0.0..25.0f64).to_radians();
    if class == 0 {
        Shape::Disk { cx, cy, r }
    } else {
        let n = class + 2;
        let vertices = (0..n)
            .map(|i| {
                let a = rot + std::f64::consts::TAU * i as f64 / n as f64;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        Shape::Polygon { vertices }
    }
}

fn render_sample(spec: &SyntheticDomainSpec, style: usize, class: usize, k: usize) -> RgbImage {
    let size = spec.image_size;
    let hue = spec.style_hue(style);
    let shape = sample_geometry(spec, class, k);
    let mut tex_rng = rng::stream(
        spec.background_texture_seed,
        &[TEX_STREAM, style as u64, class as u64, k as u64],
    );
    let noise = TextureNoise::new(size, &mut tex_rng);

    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let rgb = if shape.contains(px, py) {
            hsv_to_rgb(hue, 0.45, 0.85)
        } else {
            let v = (0.38 + noise.at(x as usize, y as usize)).clamp(0.0, 1.0);
            hsv_to_rgb(hue, 0.55, v)
        };
        Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])])
    })
}
