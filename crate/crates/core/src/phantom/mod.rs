//! Synthetic two-domain segmentation phantoms.
//!
//! Every image is a stack of rotated ellipses, one per foreground class, drawn
//! in class order so later classes occlude earlier ones. Source and target
//! images share the geometry process and differ only in the per-class
//! intensity table.

mod io;

pub use io::{load_dataset, save_dataset, Manifest, ManifestEntry, MANIFEST_FORMAT};

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{Image, LabelMap};

/// Minimum gap between two class means of one intensity table.
pub const MIN_CLASS_SEPARATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub intensity_table_target: Vec<f64>,
    pub intensity_table_source: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::new(64, 5, 0)
    }
}

impl PhantomSpec {
    /// Spec with the default intensity tables for `num_classes`.
    ///
    /// Target means are evenly spaced from 0.05; source means are the same
    /// ladder shifted up by one rung, so source class `c` collides with
    /// target class `c + 1`. The remap is monotone, which keeps it invertible
    /// by intensity-only alignment.
    pub fn new(image_size: usize, num_classes: usize, seed: u64) -> Self {
        let step = 0.9 / num_classes.max(1) as f64;
        let target = (0..num_classes).map(|c| 0.05 + step * c as f64).collect();
        let source = (0..num_classes).map(|c| 0.05 + step * (c + 1) as f64).collect();
        PhantomSpec {
            image_size,
            num_classes,
            intensity_table_target: target,
            intensity_table_source: source,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn structures_per_image(&self) -> usize {
        self.num_classes.saturating_sub(1)
    }

    pub fn table(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::Source => &self.intensity_table_source,
            Domain::Target => &self.intensity_table_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be a finite non-negative value, got {}",
                self.noise_sigma
            )));
        }
        for (name, table) in [
            ("intensity_table_target", &self.intensity_table_target),
            ("intensity_table_source", &self.intensity_table_source),
        ] {
            if table.len() != self.num_classes {
                return Err(Error::config(format!(
                    "{name} has {} entries, expected num_classes = {}",
                    table.len(),
                    self.num_classes
                )));
            }
            if let Some(v) = table.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::config(format!("{name} contains {v}, outside [0, 1]")));
            }
            for i in 0..table.len() {
                for j in i + 1..table.len() {
                    // small slack so evenly spaced tables at exactly 0.1 pass
                    if (table[i] - table[j]).abs() < MIN_CLASS_SEPARATION - 1e-9 {
                        return Err(Error::config(format!(
                            "{name}: classes {i} and {j} are closer than {MIN_CLASS_SEPARATION}"
                        )));
                    }
                }
            }
        }
        if self.intensity_table_target == self.intensity_table_source {
            return Err(Error::config(
                "intensity_table_target equals intensity_table_source; there is no domain gap",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub id: String,
    pub domain: Domain,
    pub image: Image,
    pub label: Option<LabelMap>,
}

impl DomainSample {
    pub fn without_label(&self) -> DomainSample {
        DomainSample {
            label: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetBundle {
    pub d_s: Vec<DomainSample>,
    pub d_t: Vec<DomainSample>,
    pub d_u: Vec<DomainSample>,
    pub val: Vec<DomainSample>,
    pub fold_index: usize,
    pub spec: Option<PhantomSpec>,
}

impl DatasetBundle {
    /// Structural invariants: label presence per role and id disjointness.
    ///
    /// Stream sizes are checked separately by [`DatasetBundle::validate_sizes`]
    /// and by the trainer, which knows which streams a method needs.
    pub fn validate_structure(&self) -> Result<()> {
        let roles: [(&str, &[DomainSample], bool); 4] = [
            ("d_s", &self.d_s, true),
            ("d_t", &self.d_t, true),
            ("d_u", &self.d_u, false),
            ("val", &self.val, true),
        ];
        let mut seen = HashSet::new();
        for (role, samples, labeled) in roles {
            for s in samples {
                if s.label.is_some() != labeled {
                    return Err(Error::Format(format!(
                        "sample `{}` in {role} {} a label",
                        s.id,
                        if labeled { "lacks" } else { "carries" }
                    )));
                }
                let want = if role == "d_s" { Domain::Source } else { Domain::Target };
                if s.domain != want {
                    return Err(Error::Format(format!(
                        "sample `{}` in {role} has domain {:?}",
                        s.id, s.domain
                    )));
                }
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Format(format!("sample id `{}` appears twice", s.id)));
                }
            }
        }
        Ok(())
    }

    /// `m_t <= m_u / 2`, the "few labeled, many unlabeled" premise.
    pub fn validate_sizes(&self) -> Result<()> {
        if self.d_t.is_empty() || 2 * self.d_t.len() > self.d_u.len() {
            return Err(Error::config(format!(
                "need 1 <= m_t <= m_u / 2, got m_t = {}, m_u = {}",
                self.d_t.len(),
                self.d_u.len()
            )));
        }
        Ok(())
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &DomainSample> {
        self.d_s
            .iter()
            .chain(&self.d_t)
            .chain(&self.d_u)
            .chain(&self.val)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Label map for one image drawn from the geometry stream of `(seed, item)`.
pub fn render_geometry(spec: &PhantomSpec, item: u64) -> LabelMap {
    let size = spec.image_size;
    let s = size as f64;
    let mut rng = rng::item_stream(spec.seed, streams::GEOMETRY, item);
    let ellipses: Vec<Ellipse> = (0..spec.structures_per_image())
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            Ellipse {
                cx: rng.random_range(0.25 * s..0.75 * s),
                cy: rng.random_range(0.25 * s..0.75 * s),
                a: rng.random_range(s / 10.0..=s / 4.0),
                b: rng.random_range(s / 10.0..=s / 4.0),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();
    let mut data = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (k, e) in ellipses.iter().enumerate() {
                if e.contains(px, py) {
                    data[y * size + x] = (k + 1) as u8;
                }
            }
        }
    }
    LabelMap {
        height: size,
        width: size,
        data,
    }
}

/// Renders intensities for a label map using one domain's table.
pub fn render_appearance(spec: &PhantomSpec, label: &LabelMap, domain: Domain, item: u64) -> Image {
    let table = spec.table(domain);
    let tag = match domain {
        Domain::Source => 0,
        Domain::Target => 1 << 32,
    };
    let mut rng = rng::item_stream(spec.seed, streams::APPEARANCE, tag | item);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let data = label
        .data
        .iter()
        .map(|&c| {
            let mean = table[c as usize];
            match &noise {
                Some(n) => (mean + n.sample(&mut rng)).clamp(0.0, 1.0),
                None => mean,
            }
        })
        .collect();
    Image {
        height: label.height,
        width: label.width,
        data,
    }
}

fn sample_id(domain: Domain, index: usize) -> String {
    match domain {
        Domain::Source => format!("src-{index:04}"),
        Domain::Target => format!("tgt-{index:04}"),
    }
}

// Source and target items draw geometry from disjoint item ranges.
fn geometry_item(domain: Domain, index: usize) -> u64 {
    match domain {
        Domain::Source => index as u64,
        Domain::Target => (1 << 32) | index as u64,
    }
}

pub fn generate_sample(spec: &PhantomSpec, domain: Domain, index: usize) -> DomainSample {
    let item = geometry_item(domain, index);
    let label = render_geometry(spec, item);
    let image = render_appearance(spec, &label, domain, item);
    DomainSample {
        id: sample_id(domain, index),
        domain,
        image,
        label: Some(label),
    }
}

/// Source/target rendering of one shared geometry, for inspecting the domain gap.
pub fn generate_pair(spec: &PhantomSpec, index: usize) -> Result<(DomainSample, DomainSample)> {
    spec.validate()?;
    let item = (2 << 32) | index as u64;
    let label = render_geometry(spec, item);
    let make = |domain| DomainSample {
        id: format!("pair-{index:04}-{}", if domain == Domain::Source { "s" } else { "t" }),
        domain,
        image: render_appearance(spec, &label, domain, item),
        label: Some(label.clone()),
    };
    Ok((make(Domain::Source), make(Domain::Target)))
}

/// `n_source` labeled source samples followed by `n_target` labeled target samples.
pub fn generate_dataset(spec: &PhantomSpec, n_source: usize, n_target: usize) -> Result<Vec<DomainSample>> {
    spec.validate()?;
    if n_source < 1 {
        return Err(Error::config("n_source must be at least 1"));
    }
    if n_target < 4 {
        return Err(Error::config(format!("n_target must be at least 4, got {n_target}")));
    }
    let mut out = Vec::with_capacity(n_source + n_target);
    out.extend((0..n_source).map(|i| generate_sample(spec, Domain::Source, i)));
    out.extend((0..n_target).map(|i| generate_sample(spec, Domain::Target, i)));
    Ok(out)
}

/// Cross-validation folds over the target samples.
///
/// Every fold validates on its own target group; the remaining targets are
/// split into a labeled `d_t` (a `labeled_frac` share) and an unlabeled `d_u`.
/// All source samples go to `d_s` in every fold.
pub fn make_folds(
    samples: &[DomainSample],
    n_folds: usize,
    labeled_frac: f64,
    seed: u64,
) -> Result<Vec<DatasetBundle>> {
    if n_folds < 2 {
        return Err(Error::config(format!("n_folds must be at least 2, got {n_folds}")));
    }
    if !(labeled_frac > 0.0 && labeled_frac < 1.0) {
        return Err(Error::config(format!(
            "labeled_frac must lie strictly between 0 and 1, got {labeled_frac}"
        )));
    }
    let sources: Vec<&DomainSample> = samples.iter().filter(|s| s.domain == Domain::Source).collect();
    let mut targets: Vec<&DomainSample> = samples.iter().filter(|s| s.domain == Domain::Target).collect();
    if targets.len() % n_folds != 0 || targets.is_empty() {
        return Err(Error::config(format!(
            "{} target samples cannot be divided into {n_folds} equal folds; \
             the target count must be a positive multiple of the fold count",
            targets.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::Input(format!("sample `{}` has no label", s.id)));
    }
    let group = targets.len() / n_folds;
    targets.shuffle(&mut rng::stream(seed, streams::FOLDS));

    let mut folds = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let val: Vec<DomainSample> = targets[k * group..(k + 1) * group].iter().map(|&s| s.clone()).collect();
        let mut rest: Vec<&DomainSample> = targets[..k * group]
            .iter()
            .chain(&targets[(k + 1) * group..])
            .copied()
            .collect();
        rest.shuffle(&mut rng::item_stream(seed, streams::FOLDS, k as u64 + 1));
        let m_t = (labeled_frac * rest.len() as f64).round() as usize;
        let bundle = DatasetBundle {
            d_s: sources.iter().map(|&s| s.clone()).collect(),
            d_t: rest[..m_t].iter().map(|&s| s.clone()).collect(),
            d_u: rest[m_t..].iter().map(|s| s.without_label()).collect(),
            val,
            fold_index: k,
            spec: None,
        };
        bundle.validate_structure()?;
        bundle.validate_sizes()?;
        folds.push(bundle);
    }
    Ok(folds)
}
