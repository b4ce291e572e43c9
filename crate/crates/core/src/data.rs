//! Procedural multi-domain shape images.
//!
//! Each sample draws one of five shapes at a random position, scale and
//! rotation with random foreground/background colours, then passes through
//! its domain's appearance transform.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "star"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    /// Hue rotation in degrees.
    pub hue_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Std of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Replace the rendering by dark outlines on a white background.
    pub sketch: bool,
    /// Outline half-width in pixels.
    pub sketch_stroke: usize,
    /// Period of the diagonal hatching inside sketched shapes (0 disables it).
    pub sketch_hatch: usize,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            name: "photo".into(),
            hue_deg: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            sketch: false,
            sketch_stroke: 1,
            sketch_hatch: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_domain")]
    pub per_domain: usize,
    #[serde(default = "default_domains")]
    pub domains: Vec<DomainSpec>,
}

/// Calibrated domain definitions shipped with the crate.
pub const DEFAULT_DOMAINS_JSON: &str = include_str!("../../../configs/domains.json");

fn bundled(key: &str) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(DEFAULT_DOMAINS_JSON).expect("bundled domain config parses");
    v[key].clone()
}

fn default_image_size() -> usize {
    serde_json::from_value(bundled("image_size")).expect("bundled image_size")
}

fn default_classes() -> usize {
    serde_json::from_value(bundled("classes")).expect("bundled classes")
}

fn default_per_domain() -> usize {
    serde_json::from_value(bundled("per_domain")).expect("bundled per_domain")
}

fn default_domains() -> Vec<DomainSpec> {
    serde_json::from_value(bundled("domains")).expect("bundled domains")
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: default_image_size(),
            classes: default_classes(),
            per_domain: default_per_domain(),
            domains: default_domains(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        if self.classes < 2 || self.classes > SHAPES.len() {
            return Err(Error::Config(format!("classes must be in 2..={}, got {}", SHAPES.len(), self.classes)));
        }
        if self.per_domain < 2 * self.classes {
            return Err(Error::Config(format!(
                "per_domain must be at least 2 x classes ({}), got {}",
                2 * self.classes,
                self.per_domain
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() || d.name.contains(|c: char| c.is_whitespace() || c == '/' || c == ',') {
                return Err(Error::Config(format!("domain name {:?} is not a plain identifier", d.name)));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate domain name {}", d.name)));
            }
            if !(d.contrast > 0.0) || !(d.noise_sigma >= 0.0) {
                return Err(Error::Config(format!("domain {}: contrast must be > 0 and noise >= 0", d.name)));
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

/// Images `N x 3 x S x S` in `[0, 1]` with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub domain: String,
    pub role: Role,
    pub classes: usize,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], role: Role) -> DatasetSplit {
        DatasetSplit {
            domain: self.domain.clone(),
            role,
            classes: self.classes,
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Deterministic stratified split; `val_fraction` of every class goes to validation.
    pub fn split_val(&self, val_fraction: f64) -> (DatasetSplit, DatasetSplit) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let n_val = (members.len() as f64 * val_fraction).round() as usize;
            let cut = members.len() - n_val;
            train.extend_from_slice(&members[..cut]);
            val.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train, Role::Train), self.subset(&val, Role::Val))
    }

    pub fn concat(parts: &[DatasetSplit], domain: &str, role: Role) -> Result<DatasetSplit> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.images.shape()[1..] != first.images.shape()[1..] || p.classes != first.classes {
                return Err(Error::Shape("datasets with different image shapes or class counts".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let mut shape = first.images.shape().to_vec();
        shape[0] = labels.len();
        Ok(DatasetSplit {
            domain: domain.to_string(),
            role,
            classes: first.classes,
            images: Tensor::from_vec(&shape, data)?,
            labels,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "dataset")?;
        c.set_meta("domain", self.domain.clone())?;
        c.set_meta("role", self.role.name())?;
        c.set_meta("classes", self.classes.to_string())?;
        c.push_tensor("images", &self.images)?;
        let labels: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        c.push_u32("labels", &[labels.len()], &labels)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<DatasetSplit> {
        if c.meta("kind") != Some("dataset") {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let role = match c.require_meta("role")? {
            "train" => Role::Train,
            "val" => Role::Val,
            "test" => Role::Test,
            r => return Err(Error::Format(format!("unknown dataset role {r}"))),
        };
        let classes: usize = c
            .require_meta("classes")?
            .parse()
            .map_err(|_| Error::Format("bad class count".into()))?;
        let images: Tensor<f32> = c.tensor("images")?;
        let labels: Vec<usize> = c.u32s("labels")?.into_iter().map(|l| l as usize).collect();
        images.dims4()?;
        if labels.len() != images.batch() || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Format("labels do not match images or class count".into()));
        }
        Ok(DatasetSplit {
            domain: c.require_meta("domain")?.to_string(),
            role,
            classes,
            images,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<DatasetSplit> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Renders every configured domain; a pure function of `cfg` and `seed`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<DatasetSplit>> {
    cfg.validate()?;
    cfg.domains.iter().map(|d| generate_domain(cfg, d, seed)).collect()
}

pub fn generate_domain(cfg: &DatasetConfig, domain: &DomainSpec, seed: u64) -> Result<DatasetSplit> {
    let s = cfg.image_size;
    let plane = s * s;
    let mut data = vec![0f32; cfg.per_domain * 3 * plane];
    let mut labels = Vec::with_capacity(cfg.per_domain);
    let root = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ domain.seed;
    for i in 0..cfg.per_domain {
        let mut rng = ChaCha8Rng::seed_from_u64(root);
        rng.set_stream(i as u64);
        let label = i % cfg.classes;
        let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        render_sample(label, s, domain, &mut rng, out);
        labels.push(label);
    }
    Ok(DatasetSplit {
        domain: domain.name.clone(),
        role: Role::Test,
        classes: cfg.classes,
        images: Tensor::from_vec(&[cfg.per_domain, 3, s, s], data)?,
        labels,
    })
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render_sample(label: usize, s: usize, domain: &DomainSpec, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let sf = s as f64;
    let cx = rng.gen_range(0.38..0.62) * sf;
    let cy = rng.gen_range(0.38..0.62) * sf;
    let r = rng.gen_range(0.24..0.36) * sf;
    let theta = rng.gen_range(0.0..2.0 * PI);
    let bg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let fg = loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        if (luminance(c) - luminance(bg)).abs() >= 0.25 {
            break c;
        }
    };
    let (sin, cos) = theta.sin_cos();
    // 3x3 supersampled coverage of the shape.
    let mut cover = vec![0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = (x as f64 + (sx as f64 + 0.5) / 3.0 - cx) / r;
                    let py = (y as f64 + (sy as f64 + 0.5) / 3.0 - cy) / r;
                    let u = cos * px + sin * py;
                    let v = -sin * px + cos * py;
                    if inside(label, u, v) {
                        hits += 1;
                    }
                }
            }
            cover[y * s + x] = hits as f64 / 9.0;
        }
    }

    let plane = s * s;
    if domain.sketch {
        for y in 0..s {
            for x in 0..s {
                let c = cover[y * s + x];
                let r = domain.sketch_stroke.max(1) as i64;
                let mut edge: f64 = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s {
                            edge = edge.max((c - cover[ny as usize * s + nx as usize]).abs());
                        }
                    }
                }
                let hatch = domain.sketch_hatch > 0 && c > 0.5 && (x + y) % domain.sketch_hatch == 0;
                let v = if edge > 0.3 || hatch { 0.0 } else { 1.0 };
                for k in 0..3 {
                    out[k * plane + y * s + x] = v as f32;
                }
            }
        }
    } else {
        let hue = hue_matrix(domain.hue_deg);
        for p in 0..plane {
            let c = cover[p];
            let rgb = [0, 1, 2].map(|k| c * fg[k] + (1.0 - c) * bg[k]);
            for k in 0..3 {
                out[k * plane + p] = (hue[k][0] * rgb[0] + hue[k][1] * rgb[1] + hue[k][2] * rgb[2]) as f32;
            }
        }
    }

    let noise = Normal::new(0.0, domain.noise_sigma.max(0.0)).expect("finite sigma");
    for v in out.iter_mut() {
        let mut x = (*v as f64 - 0.5) * domain.contrast + 0.5 + domain.brightness;
        if domain.noise_sigma > 0.0 {
            x += noise.sample(rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
}

/// Rotation of RGB about the grey axis.
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - s / 3f64.sqrt();
    let d = (1.0 - c) / 3.0 + s / 3f64.sqrt();
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn inside(label: usize, u: f64, v: f64) -> bool {
    match label {
        0 => u * u + v * v <= 0.85 * 0.85,
        1 => u.abs() <= 0.7 && v.abs() <= 0.7,
        2 => in_polygon(&regular(3, 1.0, 1.0), u, v),
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        _ => in_polygon(&regular(10, 1.0, 0.42), u, v),
    }
}

/// Vertices alternating between two radii, starting at the top.
fn regular(n: usize, r_even: f64, r_odd: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let a = -PI / 2.0 + 2.0 * PI * k as f64 / n as f64;
            let r = if k % 2 == 0 { r_even } else { r_odd };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Per-channel mean and std over a whole split.
pub fn channel_moments(images: &Tensor<f32>) -> Result<Vec<(f64, f64)>> {
    let (n, c, h, w) = images.dims4()?;
    let plane = h * w;
    Ok((0..c)
        .map(|k| {
            let vals = (0..n).flat_map(|i| images.data()[(i * c + k) * plane..(i * c + k + 1) * plane].iter());
            let (mut s, mut s2, mut cnt) = (0.0, 0.0, 0.0);
            for v in vals {
                let v = *v as f64;
                s += v;
                s2 += v * v;
                cnt += 1.0;
            }
            let m = s / cnt;
            (m, (s2 / cnt - m * m).max(0.0).sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            per_domain: 40,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn bundled_config_is_valid() {
        let cfg = DatasetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.domains.len(), 4);
        assert_eq!(cfg.classes, 5);
        assert!(cfg.domains.iter().any(|d| d.sketch));
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg, 3).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cfg, 4).unwrap();
        assert_ne!(a[0].images, c[0].images);
    }

    #[test]
    fn values_in_range_and_classes_balanced() {
        for split in generate_dataset(&small_cfg(), 0).unwrap() {
            assert!(split.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut counts = vec![0usize; split.classes];
            for &l in &split.labels {
                counts[l] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn shapes_cover_distinct_areas() {
        let mut areas = Vec::new();
        for label in 0..5 {
            let mut hits = 0;
            for i in 0..200 {
                for j in 0..200 {
                    let (u, v) = (-1.0 + i as f64 / 100.0, -1.0 + j as f64 / 100.0);
                    if inside(label, u, v) {
                        hits += 1;
                    }
                }
            }
            areas.push(hits);
        }
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(areas[a], areas[b]);
            }
        }
    }

    #[test]
    fn sketch_images_are_binary() {
        let cfg = small_cfg();
        let d = cfg.domains.iter().find(|d| d.sketch).unwrap().clone();
        let plain = DomainSpec {
            noise_sigma: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            ..d
        };
        let split = generate_domain(&cfg, &plain, 1).unwrap();
        assert!(split.images.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(split.images.data().iter().any(|v| *v == 0.0));
    }

    #[test]
    fn identity_hue_rotation() {
        let m = hue_matrix(0.0);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let m = hue_matrix(120.0);
        // 120 degrees permutes the channels.
        assert!((m[0][2] - 1.0).abs() < 1e-12 && (m[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_split_and_round_trip() {
        let split = generate_domain(&small_cfg(), &DomainSpec::default(), 2).unwrap();
        let (train, val) = split.split_val(0.1);
        assert_eq!(train.len() + val.len(), split.len());
        assert_eq!(val.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ttc");
        val.save(&path).unwrap();
        assert_eq!(DatasetSplit::load(&path).unwrap(), val);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.per_domain = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.domains[1].name = cfg.domains[0].name.clone();
        assert!(cfg.validate().is_err());
    }
}
