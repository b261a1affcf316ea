//! Synthetic multi-temporal SAR pair generator with known change masks.
//!
//! A scene is a piecewise-constant reflectivity map given in amplitude
//! units. Each timestamp draws independent multiplicative L-look speckle:
//! intensity is reflectivity times a gamma variate of shape L and mean 1,
//! and the output pixel is its square root. Change rectangles shift the
//! amplitude of the second timestamp and define the ground truth; spike
//! pixels multiply single amplitudes by a large factor at either timestamp
//! and are deliberately absent from the truth, standing in for the strong
//! speckle outliers the second pipeline phase must reject.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Uniform};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::imaging::SarImage;
use crate::imaging::LabelMap;
use crate::num::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.height && col >= self.x && col < self.x + self.width
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0
            && self.height > 0
            && self.x + self.width <= width
            && self.y + self.height <= height
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    #[serde(flatten)]
    pub rect: Rect,
    /// Mean amplitude; the underlying reflectivity is its square.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Change {
    #[serde(flatten)]
    pub rect: Rect,
    /// Added to the local amplitude at the second timestamp.
    pub amplitude_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Number of looks L of the speckle model; higher is smoother.
    pub looks: f64,
    pub background_amplitude: f64,
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub changes: Vec<Change>,
    /// Fraction of pixels hit by a multiplicative outlier, per timestamp.
    #[serde(default)]
    pub spike_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let spec: SceneSpec =
            toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        SceneSpec::from_toml_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene", "width and height must be positive"));
        }
        if !(self.looks >= 1.0) || !self.looks.is_finite() {
            return Err(Error::invalid("looks", "must be at least 1"));
        }
        if !(self.background_amplitude >= 0.0) || !self.background_amplitude.is_finite() {
            return Err(Error::invalid("background_amplitude", "must be finite and non-negative"));
        }
        if !(0.0..=0.2).contains(&self.spike_fraction) {
            return Err(Error::invalid("spike_fraction", "must lie in [0, 0.2]"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !r.rect.fits(self.width, self.height) {
                return Err(Error::invalid(
                    "regions",
                    format!("regions[{i}] does not fit the {}x{} scene", self.width, self.height),
                ));
            }
            if !(r.amplitude >= 0.0) || !r.amplitude.is_finite() {
                return Err(Error::invalid("regions", format!("regions[{i}] amplitude must be finite and non-negative")));
            }
        }
        for (i, c) in self.changes.iter().enumerate() {
            if !c.rect.fits(self.width, self.height) {
                return Err(Error::invalid(
                    "changes",
                    format!("changes[{i}] does not fit the {}x{} scene", self.width, self.height),
                ));
            }
            if !c.amplitude_delta.is_finite() {
                return Err(Error::invalid("changes", format!("changes[{i}] delta must be finite")));
            }
            let floor = self.floor_amplitude_under(&c.rect) + c.amplitude_delta;
            if floor < 0.0 {
                return Err(Error::invalid(
                    "changes",
                    format!("changes[{i}] drives the amplitude negative"),
                ));
            }
        }
        Ok(())
    }

    /// Smallest base amplitude inside a rect, after region overrides.
    fn floor_amplitude_under(&self, rect: &Rect) -> f64 {
        let mut min = f64::INFINITY;
        for row in rect.y..rect.y + rect.height {
            for col in rect.x..rect.x + rect.width {
                min = min.min(self.base_amplitude(row, col));
            }
        }
        min
    }

    /// First-timestamp amplitude at a pixel; later regions win overlaps.
    fn base_amplitude(&self, row: usize, col: usize) -> f64 {
        let mut a = self.background_amplitude;
        for r in &self.regions {
            if r.rect.contains(row, col) {
                a = r.amplitude;
            }
        }
        a
    }

    fn second_amplitude(&self, row: usize, col: usize) -> f64 {
        let mut a = self.base_amplitude(row, col);
        for c in &self.changes {
            if c.rect.contains(row, col) {
                a += c.amplitude_delta;
            }
        }
        a.max(0.0)
    }

    pub fn truth(&self) -> LabelMap {
        let mut t = LabelMap::zeros(self.width, self.height);
        for c in &self.changes {
            for row in c.rect.y..c.rect.y + c.rect.height {
                for col in c.rect.x..c.rect.x + c.rect.width {
                    t.set(row, col, 1);
                }
            }
        }
        t
    }
}

/// One speckled amplitude image. `tag` separates the two timestamps'
/// random streams; each row draws from its own derived stream so the
/// realization does not depend on evaluation order.
fn speckled_image<T: Real>(
    spec: &SceneSpec,
    tag: &str,
    amplitude_of: impl Fn(usize, usize) -> f64,
) -> Result<SarImage<T>> {
    let gamma = Gamma::new(spec.looks, 1.0 / spec.looks)
        .map_err(|e| Error::invalid("looks", e.to_string()))?;
    let factor = Uniform::new(4.0_f64, 8.0).expect("static bounds");
    let mut data = Vec::with_capacity(spec.width * spec.height);
    for row in 0..spec.height {
        let mut rng = rng::stream(spec.seed, tag, row as u64);
        for col in 0..spec.width {
            let s: f64 = gamma.sample(&mut rng);
            let mut a = (amplitude_of(row, col).powi(2) * s).sqrt();
            if rng.random::<f64>() < spec.spike_fraction {
                a *= factor.sample(&mut rng);
            }
            data.push(T::of(a));
        }
    }
    SarImage::new(spec.width, spec.height, data)
}

/// Generates the pair and its ground truth. The truth depends only on the
/// change rectangles, never on the speckle or spike draws.
pub fn generate<T: Real>(spec: &SceneSpec) -> Result<(SarImage<T>, SarImage<T>, LabelMap)> {
    spec.validate()?;
    let i1 = speckled_image(spec, "synth-img1-row", |r, c| spec.base_amplitude(r, c))?;
    let i2 = speckled_image(spec, "synth-img2-row", |r, c| spec.second_amplitude(r, c))?;
    Ok((i1, i2, spec.truth()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_spec() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            looks: 4.0,
            background_amplitude: 50.0,
            regions: vec![],
            changes: vec![],
            spike_fraction: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn near_infinite_looks_pin_amplitude_to_the_mean() {
        let mut spec = plain_spec();
        spec.looks = 1e6;
        spec.regions = vec![Region {
            rect: Rect { x: 10, y: 10, width: 20, height: 20 },
            amplitude: 80.0,
        }];
        let (i1, i2, _) = generate::<f64>(&spec).unwrap();
        for img in [&i1, &i2] {
            for row in 0..spec.height {
                for col in 0..spec.width {
                    let want = spec.base_amplitude(row, col);
                    let got = img.pixel(row, col);
                    assert!(
                        (got - want).abs() / want < 0.01,
                        "({row},{col}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn region_intensity_mean_matches_reflectivity() {
        // Intensity has mean R and variance R^2 / L; the sample mean over
        // the region must land within 3 sigma / sqrt(n) of R.
        let mut spec = plain_spec();
        spec.width = 80;
        spec.height = 80;
        spec.regions = vec![Region {
            rect: Rect { x: 10, y: 10, width: 60, height: 60 },
            amplitude: 50.0,
        }];
        let (i1, _, _) = generate::<f64>(&spec).unwrap();
        let r = 2500.0;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let n = 60.0 * 60.0;
        for row in 10..70 {
            for col in 10..70 {
                let i = i1.pixel(row, col).powi(2);
                sum += i;
                sum_sq += i * i;
            }
        }
        let mean = sum / n;
        let sigma = r / spec.looks.sqrt();
        assert!((mean - r).abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        // Normalized intensity variance sits near 1/L.
        let var = (sum_sq / n - mean * mean) / (r * r);
        assert!((var - 0.25).abs() < 0.03, "normalized variance {var}");
    }

    #[test]
    fn truth_is_exactly_the_change_rectangles_and_ignores_noise() {
        let mut spec = plain_spec();
        spec.changes = vec![Change {
            rect: Rect { x: 5, y: 7, width: 11, height: 3 },
            amplitude_delta: 30.0,
        }];
        spec.spike_fraction = 0.1;
        let (_, _, truth) = generate::<f64>(&spec).unwrap();
        for row in 0..spec.height {
            for col in 0..spec.width {
                let want = spec.changes[0].rect.contains(row, col) as u32;
                assert_eq!(truth.get(row, col), want, "({row},{col})");
            }
        }
        spec.seed = 999;
        spec.spike_fraction = 0.0;
        let (_, _, truth2) = generate::<f64>(&spec).unwrap();
        assert_eq!(truth.data(), truth2.data());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = plain_spec();
        spec.spike_fraction = 0.05;
        spec.changes = vec![Change {
            rect: Rect { x: 0, y: 0, width: 8, height: 8 },
            amplitude_delta: 25.0,
        }];
        let (a1, a2, _) = generate::<f64>(&spec).unwrap();
        let (b1, b2, _) = generate::<f64>(&spec).unwrap();
        assert_eq!(a1.data(), b1.data());
        assert_eq!(a2.data(), b2.data());
        spec.seed += 1;
        let (c1, _, _) = generate::<f64>(&spec).unwrap();
        assert_ne!(a1.data(), c1.data());
    }

    #[test]
    fn spikes_hit_the_expected_fraction_independently_per_timestamp() {
        let mut spec = plain_spec();
        spec.width = 128;
        spec.height = 128;
        spec.looks = 1e6;
        spec.spike_fraction = 0.1;
        let (i1, i2, _) = generate::<f64>(&spec).unwrap();
        let count_spiked = |img: &SarImage<f64>| {
            img.data()
                .iter()
                .filter(|&&a| {
                    // With negligible speckle an unspiked pixel sits within
                    // 1% of 50; a spiked one lands in [4, 8] times that.
                    assert!(a < 50.0 * 1.01 || (a > 50.0 * 3.9 && a < 50.0 * 8.1), "amplitude {a}");
                    a > 50.0 * 2.0
                })
                .count()
        };
        let n = (spec.width * spec.height) as f64;
        let (s1, s2) = (count_spiked(&i1), count_spiked(&i2));
        for s in [s1, s2] {
            assert!((s as f64 / n - 0.1).abs() < 0.01, "spiked fraction {}", s as f64 / n);
        }
        let both = (0..spec.width * spec.height)
            .filter(|&i| i1.data()[i] > 100.0 && i2.data()[i] > 100.0)
            .count();
        // Independent draws overlap on about sf^2 of the pixels, far from
        // the sf overlap that shared draws would give.
        assert!((both as f64 / n - 0.01).abs() < 0.005, "joint fraction {}", both as f64 / n);
    }

    #[test]
    fn parses_toml_and_rejects_bad_specs() {
        let text = r#"
            width = 32
            height = 16
            looks = 4
            background_amplitude = 50.0
            spike_fraction = 0.02
            seed = 9

            [[regions]]
            x = 0
            y = 0
            width = 10
            height = 10
            amplitude = 80.0

            [[changes]]
            x = 20
            y = 4
            width = 8
            height = 8
            amplitude_delta = -20.0
        "#;
        let spec = SceneSpec::from_toml_str(text, "inline").unwrap();
        assert_eq!(spec.width, 32);
        assert_eq!(spec.looks, 4.0);
        assert_eq!(spec.regions[0].amplitude, 80.0);

        let unknown = format!("{text}\nshear = 3\n");
        assert!(SceneSpec::from_toml_str(&unknown, "inline").is_err());

        let mut bad = spec.clone();
        bad.regions[0].rect.x = 30;
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("regions[0]"), "{msg}");

        let mut bad = spec.clone();
        bad.changes[0].amplitude_delta = -60.0;
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("changes[0]"), "{msg}");

        let mut bad = spec.clone();
        bad.spike_fraction = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.looks = 0.5;
        assert!(bad.validate().is_err());
    }
}
