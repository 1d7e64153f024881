//! Seeded synthetic place-recognition data with controllable per-sample noise.
//!
//! Every place owns a smooth random field (a sum of low-frequency sinusoids per
//! channel). A sample is that field plus i.i.d. Gaussian pixel noise, rescaled
//! back to the field's contrast (auto-gain) unless disabled. Places sit
//! on a square grid; samples of a place are jittered within a small disk so that
//! same-place pairs are positives and cross-place pairs negatives.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Radii;
use crate::dataset::{Dataset, Item, NoiseInfo, NoiseLabel, Split};
use crate::error::{Error, Result};
use crate::types::{GeoTag, PlaceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_places: usize,
    pub samples_per_place: usize,
    /// Trailing samples of each place held out as queries.
    pub queries_per_place: usize,
    /// Grid spacing between places, meters.
    pub place_spacing: f64,
    /// Max distance of a sample from its place center, meters.
    pub jitter: f64,
    pub image_shape: [usize; 3],
    /// Sinusoids per channel in each base field.
    pub components: usize,
    /// Highest spatial frequency (cycles per image side).
    pub max_frequency: usize,
    /// Per-pixel standard deviation of the base fields.
    pub base_std: f64,
    pub noisy_fraction: f64,
    /// Clean samples draw their noise std uniformly from `[0, clean_std_max]`.
    pub clean_std_max: f64,
    /// Noisy samples draw their noise std uniformly from this range.
    pub noisy_std_range: [f64; 2],
    /// Rescales every sample to `base_std` after adding noise, like a camera
    /// auto-gain, so noise displaces signal instead of adding energy.
    pub auto_gain: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_places: 50,
            samples_per_place: 10,
            queries_per_place: 3,
            place_spacing: 100.0,
            jitter: 4.0,
            image_shape: [3, 32, 32],
            components: 6,
            max_frequency: 3,
            base_std: 0.5,
            noisy_fraction: 0.3,
            clean_std_max: 0.1,
            noisy_std_range: [0.6, 1.5],
            auto_gain: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, radii: &Radii) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_places == 0 || self.samples_per_place == 0 {
            return fail("num_places and samples_per_place must be positive".into());
        }
        if self.queries_per_place >= self.samples_per_place {
            return fail("queries_per_place must leave at least one database sample per place".into());
        }
        if !(self.jitter >= 0.0 && 2.0 * self.jitter <= radii.positive) {
            return fail(format!(
                "jitter {} must keep same-place pairs within the positive radius {}",
                self.jitter, radii.positive
            ));
        }
        if !(self.place_spacing - 2.0 * self.jitter > radii.negative) {
            return fail(format!(
                "place spacing {} (minus jitter) must exceed the negative radius {}",
                self.place_spacing, radii.negative
            ));
        }
        if self.image_shape.contains(&0) || self.components == 0 || self.max_frequency == 0 {
            return fail("image shape, components and max_frequency must be positive".into());
        }
        let [lo, hi] = self.noisy_std_range;
        if !(self.clean_std_max >= 0.0 && lo >= 0.0 && lo <= hi && self.base_std >= 0.0) {
            return fail("noise standard deviations must be nonnegative with a valid range".into());
        }
        if !(0.0..=1.0).contains(&self.noisy_fraction) {
            return fail(format!(
                "noisy_fraction must lie in [0, 1], got {}",
                self.noisy_fraction
            ));
        }
        Ok(())
    }

    /// Parses a TOML specification; omitted fields take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("spec is always serializable")
    }

    pub fn grid_side(&self) -> usize {
        (self.num_places as f64).sqrt().ceil() as usize
    }

    pub fn place_center(&self, place: usize) -> GeoTag {
        let side = self.grid_side();
        GeoTag::new(
            (place % side) as f64 * self.place_spacing,
            (place / side) as f64 * self.place_spacing,
        )
    }
}

/// Smooth random field normalized to `base_std` per channel.
fn base_field(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let [c, h, w] = spec.image_shape;
    let mut field = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let waves: Vec<(f64, f64, f64, f64)> = (0..spec.components)
            .map(|_| {
                let fx = rng.gen_range(0..=spec.max_frequency) as f64;
                let fy = rng.gen_range(if fx == 0.0 { 1 } else { 0 }..=spec.max_frequency) as f64;
                (
                    rng.gen_range(0.5..1.0),
                    fx,
                    fy,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                field[[ch, y, x]] = waves
                    .iter()
                    .map(|&(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum();
            }
        }
        let mut plane = field.index_axis_mut(ndarray::Axis(0), ch);
        let mean = plane.mean().unwrap_or(0.0);
        let std = plane.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
        let scale = if std > 0.0 { spec.base_std / std } else { 0.0 };
        plane.mapv_inplace(|v| (v - mean) * scale);
    }
    field.mapv(|v| v as f32)
}

/// Rescales every channel to zero mean and standard deviation `target`.
fn auto_gain(image: &mut Array3<f32>, target: f64) {
    for mut plane in image.outer_iter_mut() {
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if std > 0.0 { target / std } else { 0.0 };
        plane.mapv_inplace(|v| ((v as f64 - mean) * scale) as f32);
    }
}

/// Base fields of every place, in place order.
pub fn base_fields(spec: &SynthSpec) -> Vec<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_places).map(|_| base_field(spec, &mut rng)).collect()
}

/// Generates the dataset. Sample ids are `place * samples_per_place + k`; the
/// last `queries_per_place` samples of each place form the query split.
pub fn generate(spec: &SynthSpec, radii: &Radii) -> Result<Dataset> {
    spec.validate(radii)?;
    let bases = base_fields(spec);
    // separate stream so that base fields do not depend on sample settings
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut items = Vec::with_capacity(spec.num_places * spec.samples_per_place);
    for (place, base) in bases.iter().enumerate() {
        let center = spec.place_center(place);
        for k in 0..spec.samples_per_place {
            let r = spec.jitter * rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let geo = GeoTag::new(center.easting + r * theta.cos(), center.northing + r * theta.sin());
            let noisy = rng.gen::<f64>() < spec.noisy_fraction;
            let std = if noisy {
                let [lo, hi] = spec.noisy_std_range;
                lo + (hi - lo) * rng.gen::<f64>()
            } else {
                spec.clean_std_max * rng.gen::<f64>()
            };
            let mut image = base.mapv(|b| b + (std * unit.sample(&mut rng)) as f32);
            if spec.auto_gain {
                auto_gain(&mut image, spec.base_std);
            }
            items.push(Item {
                sample: PlaceSample {
                    id: (place * spec.samples_per_place + k) as u64,
                    image,
                    geo,
                },
                split: if k >= spec.samples_per_place - spec.queries_per_place {
                    Split::Query
                } else {
                    Split::Database
                },
                noise: Some(NoiseInfo {
                    label: if noisy { NoiseLabel::Noisy } else { NoiseLabel::Clean },
                    std,
                }),
            });
        }
    }
    Ok(Dataset { items })
}
