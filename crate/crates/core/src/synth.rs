//! Procedural instance-retrieval dataset.
//!
//! Every instance has a signature object: a square split into 2×2 coloured
//! parts, each striped at its own frequency and orientation. A view pastes the
//! object at a random position and size over a cluttered background with
//! distractor shapes. Views are a pure function of (seed, instance, view).

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{AsdaError, Result};
use crate::feature::{ImageTensor, MIN_IMAGE_SIDE};

pub const MIN_AREA_FRACTION: f64 = 0.10;
pub const MAX_AREA_FRACTION: f64 = 0.60;
const MIN_OBJECT_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartSignature {
    pub color: [f64; 3],
    /// Stripe cycles across the part.
    pub frequency: f64,
    /// Stripe direction in radians.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSignature {
    pub parts: [PartSignature; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthView {
    pub instance: usize,
    pub view: usize,
    pub image: ImageTensor,
    /// Fraction of pixels covered by the signature object.
    pub area_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub instances: usize,
    pub views_per_instance: usize,
    pub image_size: usize,
    pub signatures: Vec<InstanceSignature>,
    /// Instance-major: view `v` of instance `i` is at `i * views_per_instance + v`.
    pub views: Vec<SynthView>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub queries: Vec<usize>,
    pub database: Vec<usize>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

pub fn instance_signature(seed: u64, instance: usize) -> InstanceSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, instance as u64, u64::MAX));
    let parts = std::array::from_fn(|_| PartSignature {
        color: random_color(&mut rng),
        frequency: rng.random_range(1.0..4.0),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    });
    InstanceSignature { parts }
}

fn stripe(part: &PartSignature, u: f64, v: f64, phase: f64) -> f64 {
    let t = u * part.angle.cos() + v * part.angle.sin();
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * (part.frequency * t + phase)).sin()
}

fn object_side_bounds(size: usize) -> (usize, usize) {
    let area = (size * size) as f64;
    let lo = (MIN_AREA_FRACTION * area).sqrt().ceil() as usize;
    let hi = (MAX_AREA_FRACTION * area).sqrt().floor() as usize;
    (lo, hi)
}

fn render_view(seed: u64, instance: usize, view: usize, size: usize, signature: &InstanceSignature) -> Result<SynthView> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, instance as u64, view as u64));
    let mut px = vec![0.0f64; size * size * 3];
    let mut covered = vec![false; size * size];

    // Background: a smooth two-colour gradient.
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64).clamp(-1.0, 1.0);
            for c in 0..3 {
                px[(y * size + x) * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Distractors: textured discs and squares below the object.
    let n_distractors = rng.random_range(2..=5);
    for _ in 0..n_distractors {
        let r = rng.random_range(size as f64 * 0.06..size as f64 * 0.18);
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let disc = rng.random_bool(0.5);
        let part = PartSignature {
            color: random_color(&mut rng),
            frequency: rng.random_range(0.5..4.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r
                };
                if inside {
                    let s = stripe(&part, dx / (2.0 * r), dy / (2.0 * r), 0.0);
                    for c in 0..3 {
                        px[(y * size + x) * 3 + c] = part.color[c] * (0.6 + 0.4 * s);
                    }
                }
            }
        }
    }

    // Object side drawn so that small objects are common.
    let (lo, hi) = object_side_bounds(size);
    let u: f64 = rng.random();
    let target = MIN_AREA_FRACTION + (MAX_AREA_FRACTION - MIN_AREA_FRACTION) * u * u;
    let side = (((target * (size * size) as f64).sqrt()).round() as usize).clamp(lo, hi);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    let brightness = rng.random_range(0.85..1.15);
    let phase: f64 = rng.random_range(0.0..1.0);
    let half = side as f64 / 2.0;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let (ly, lx) = ((y - y0) as f64 + 0.5, (x - x0) as f64 + 0.5);
            let qi = (ly >= half) as usize * 2 + (lx >= half) as usize;
            let part = &signature.parts[qi];
            let s = stripe(part, (lx % half) / half, (ly % half) / half, phase);
            for c in 0..3 {
                px[(y * size + x) * 3 + c] = (part.color[c] * (0.55 + 0.45 * s) * brightness).clamp(0.0, 1.0);
            }
            covered[y * size + x] = true;
        }
    }

    // Sensor noise.
    for v in &mut px {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    let area_fraction = covered.iter().filter(|c| **c).count() as f64 / (size * size) as f64;
    Ok(SynthView {
        instance,
        view,
        image: ImageTensor::new(size, size, px)?,
        area_fraction,
    })
}

pub fn generate_dataset(seed: u64, instances: usize, views_per_instance: usize, image_size: usize) -> Result<SynthDataset> {
    if instances < 2 || views_per_instance < 2 {
        return Err(AsdaError::InvalidConfig(format!(
            "need >= 2 instances with >= 2 views, got {instances} x {views_per_instance}"
        )));
    }
    let (lo, _) = object_side_bounds(image_size);
    if image_size < MIN_IMAGE_SIDE || lo < MIN_OBJECT_SIDE {
        return Err(AsdaError::InvalidConfig(format!(
            "image size {image_size} is too small for the minimum object (need >= {MIN_IMAGE_SIDE})"
        )));
    }
    let signatures: Vec<InstanceSignature> = (0..instances).map(|i| instance_signature(seed, i)).collect();
    let views = (0..instances * views_per_instance)
        .into_par_iter()
        .map(|k| {
            let (i, v) = (k / views_per_instance, k % views_per_instance);
            render_view(seed, i, v, image_size, &signatures[i])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        seed,
        instances,
        views_per_instance,
        image_size,
        signatures,
        views,
    })
}

impl SynthDataset {
    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|i| self.views[*i].instance).collect()
    }

    pub fn images(&self, indices: &[usize]) -> Vec<&ImageTensor> {
        indices.iter().map(|i| &self.views[*i].image).collect()
    }

    /// Splits by instance. `holdout_fraction` of the instances become the
    /// evaluation split (the first half of each one's views as queries, the
    /// rest as database);
    /// the same fraction of the remaining instances is held out for validation.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> Result<DatasetSplit> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(AsdaError::InvalidConfig(format!(
                "holdout fraction {holdout_fraction} outside (0, 1)"
            )));
        }
        let n = self.instances;
        let n_eval = ((n as f64) * holdout_fraction).round() as usize;
        let n_val = (((n - n_eval.min(n)) as f64) * holdout_fraction).round() as usize;
        if n_eval < 2 || n_val < 2 || n < n_eval + n_val + 2 {
            return Err(AsdaError::InvalidConfig(format!(
                "holdout fraction {holdout_fraction} of {n} instances leaves fewer than 2 instances in a split \
                 (eval {n_eval}, validation {n_val}, train {})",
                n.saturating_sub(n_eval + n_val)
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed, 0x5b17));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut eval_inst = order[..n_eval].to_vec();
        let mut val_inst = order[n_eval..n_eval + n_val].to_vec();
        let mut train_inst = order[n_eval + n_val..].to_vec();
        eval_inst.sort_unstable();
        val_inst.sort_unstable();
        train_inst.sort_unstable();
        let views_of = |inst: &[usize]| -> Vec<usize> {
            inst.iter()
                .flat_map(|i| (0..self.views_per_instance).map(move |v| i * self.views_per_instance + v))
                .collect()
        };
        let mut queries = Vec::new();
        let mut database = Vec::new();
        let n_queries = (self.views_per_instance / 2).max(1);
        for &i in &eval_inst {
            let base = i * self.views_per_instance;
            queries.extend(base..base + n_queries);
            database.extend(base + n_queries..base + self.views_per_instance);
        }
        Ok(DatasetSplit {
            train: views_of(&train_inst),
            validation: views_of(&val_inst),
            queries,
            database,
        })
    }

    /// Manifest rows `id,instance,split,area_fraction`; `paths` overrides ids.
    pub fn write_manifest<W: Write>(&self, split: Option<&DatasetSplit>, paths: Option<&[String]>, mut out: W) -> Result<()> {
        writeln!(out, "image,instance,split,area_fraction")?;
        for (k, v) in self.views.iter().enumerate() {
            let name = match paths {
                Some(p) => p[k].clone(),
                None => format!("i{:03}_v{:03}", v.instance, v.view),
            };
            let part = split.map_or("all", |s| {
                if s.train.contains(&k) {
                    "train"
                } else if s.validation.contains(&k) {
                    "val"
                } else if s.queries.contains(&k) {
                    "query"
                } else {
                    "db"
                }
            });
            writeln!(out, "{name},{},{part},{:?}", v.instance, v.area_fraction)?;
        }
        Ok(())
    }

    /// Writes every view as a PPM image plus `manifest.csv` into `dir`.
    pub fn export(&self, dir: &Path, split: Option<&DatasetSplit>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let name = format!("i{:03}_v{:03}.ppm", v.instance, v.view);
            v.image.save(&dir.join(&name))?;
            paths.push(name);
        }
        let f = std::fs::File::create(dir.join("manifest.csv"))?;
        self.write_manifest(split, Some(&paths), std::io::BufWriter::new(f))
    }
}
