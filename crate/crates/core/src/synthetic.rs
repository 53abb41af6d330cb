//! Multi-modal phantom volumes with nested tumour regions.
//!
//! Four latent tissue fields (healthy tissue, edema, non-enhancing core,
//! enhancing tumour) are smoothed indicator maps of nested ellipsoids. Each
//! modality is a fixed linear mix of the latent fields plus Gaussian noise, so
//! every modality is, up to noise, a linear function of the others.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::io::{read_tensor, write_tensor};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::modality::Modality;

/// Resampling budget for region placement.
pub const MAX_ATTEMPTS: usize = 100;

/// Lower bound on pairwise modality correlation over head voxels that the
/// default spec satisfies for `noise_sigma <= 0.1`.
pub const HEAD_CORRELATION_FLOOR: f64 = 0.4;

/// Semi-axis range as a fraction of the volume extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusRange {
    pub min: f64,
    pub max: f64,
}

impl RadiusRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Rows are modalities (FLAIR, T1, T1c, T2); columns are latent tissues
    /// (healthy, edema, core, enhancing).
    pub mixing: [[f64; 4]; 4],
    pub brain_radius: RadiusRange,
    pub complete_radius: RadiusRange,
    pub core_radius: RadiusRange,
    pub enhancing_radius: RadiusRange,
    /// Gaussian smoothing of the latent indicator maps, in voxels.
    pub smoothing: f64,
    /// Accepted range for the mean complete-tumour fraction of the volume.
    pub tumor_fraction: RadiusRange,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 32,
            seed: 42,
            noise_sigma: 0.05,
            mixing: DEFAULT_MIXING,
            brain_radius: RadiusRange::new(0.38, 0.45),
            complete_radius: RadiusRange::new(0.16, 0.24),
            core_radius: RadiusRange::new(0.09, 0.14),
            enhancing_radius: RadiusRange::new(0.045, 0.075),
            smoothing: 0.7,
            tumor_fraction: RadiusRange::new(0.01, 0.08),
        }
    }
}

pub const DEFAULT_MIXING: [[f64; 4]; 4] = [
    [0.00, 1.24, 0.49, 0.16],
    [0.62, 1.50, 0.01, 0.42],
    [0.67, 1.50, 0.16, 0.31],
    [0.00, 1.01, 0.29, 0.00],
];

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::arg("phantom spec", m));
        if self.size < 4 {
            return fail(format!("size must be at least 4, got {}", self.size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return fail(format!("smoothing must be finite and non-negative, got {}", self.smoothing));
        }
        let ranges = [
            ("enhancing", self.enhancing_radius),
            ("core", self.core_radius),
            ("complete", self.complete_radius),
            ("brain", self.brain_radius),
        ];
        for (name, r) in ranges {
            if !(r.min > 0.0 && r.min <= r.max && r.max < 0.5) {
                return fail(format!("{name} radius range must satisfy 0 < min <= max < 0.5, got {r:?}"));
            }
        }
        for pair in ranges.windows(2) {
            if pair[0].1.max >= pair[1].1.min {
                return fail(format!("{} radii must be smaller than {} radii", pair[0].0, pair[1].0));
            }
        }
        if self.mixing.iter().flatten().any(|v| !v.is_finite()) {
            return fail("mixing matrix must be finite".into());
        }
        let sigma = min_singular_value(&self.mixing);
        if sigma <= 0.1 {
            return fail(format!("mixing matrix is ill-conditioned: smallest singular value {sigma:.4} <= 0.1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn min_singular_value(m: &[[f64; 4]; 4]) -> f64 {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    nalgebra::Matrix4::from_row_slice(&flat).singular_values().min()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: usize,
    pub spec_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1,S,S,S]` each, in [`Modality::ALL`] order.
    pub volumes: [Tensor<f32>; 4],
    /// `[3,S,S,S]` binary, in [`crate::Region::ALL`] order.
    pub labels: Tensor<f32>,
    pub meta: SampleMeta,
}

impl Sample {
    /// Checks that labels are binary and enhancing ⊆ core ⊆ complete.
    pub fn check_labels(&self) -> Result<()> {
        for &v in self.labels.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinary { what: "labels", value: v });
            }
        }
        let [complete, core, enh] = [0, 1, 2].map(|c| self.labels.channel(c));
        let nested = (0..complete.len()).all(|i| enh[i] <= core[i] && core[i] <= complete[i]);
        if !nested {
            return Err(Error::arg("labels", "regions are not nested"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, v) in Modality::ALL.iter().zip(&self.volumes) {
            write_tensor(&dir.join(m.name()), v)?;
        }
        write_tensor(&dir.join("labels"), &self.labels)
    }

    pub fn load(dir: &Path, meta: SampleMeta) -> Result<Self> {
        let mut volumes = Vec::with_capacity(4);
        for m in Modality::ALL {
            volumes.push(read_tensor(&dir.join(m.name()))?);
        }
        let labels = read_tensor(&dir.join("labels"))?;
        let s = labels.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Format {
                path: dir.join("labels.json"),
                reason: format!("labels must be [3,S,S,S], got {s:?}"),
            });
        }
        for (m, v) in Modality::ALL.iter().zip(&volumes) {
            if v.shape() != [1, s[1], s[2], s[3]] {
                return Err(Error::Format {
                    path: dir.join(format!("{}.json", m.name())),
                    reason: format!("volume shape {:?} does not match labels {s:?}", v.shape()),
                });
            }
        }
        let volumes: [Tensor<f32>; 4] = volumes.try_into().expect("four modalities");
        Ok(Self { volumes, labels, meta })
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn voxels(size: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..size).flat_map(move |z| (0..size).flat_map(move |y| (0..size).map(move |x| [z, y, x])))
}

fn sample_radii(rng: &mut impl Rng, range: RadiusRange, size: usize) -> [f64; 3] {
    [(); 3].map(|_| rng.gen_range(range.min..=range.max) * size as f64)
}

/// Places a child inside `parent`, offset at most 80% of the axis slack.
fn place_inside(rng: &mut impl Rng, parent: &Ellipsoid, range: RadiusRange, size: usize) -> Ellipsoid {
    let radii = sample_radii(rng, range, size);
    let mut center = parent.center;
    for a in 0..3 {
        let slack = (parent.radii[a] - radii[a]).max(0.0) * 0.8;
        center[a] += rng.gen_range(-1.0..=1.0) * slack;
    }
    Ellipsoid { center, radii }
}

/// Brain, complete, core and enhancing masks, outermost first.
fn place_regions(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<[Vec<bool>; 4]> {
    let s = spec.size;
    let mid = (s as f64 - 1.0) / 2.0;
    for _ in 0..MAX_ATTEMPTS {
        let jitter = 0.03 * s as f64;
        let brain = Ellipsoid {
            center: [(); 3].map(|_| mid + rng.gen_range(-jitter..=jitter)),
            radii: sample_radii(rng, spec.brain_radius, s),
        };
        let complete = place_inside(rng, &brain, spec.complete_radius, s);
        let core = place_inside(rng, &complete, spec.core_radius, s);
        let enh = place_inside(rng, &core, spec.enhancing_radius, s);
        let masks = [brain, complete, core, enh].map(|e| voxels(s).map(|p| e.contains(p)).collect::<Vec<_>>());
        let nested = masks
            .windows(2)
            .all(|w| w[1].iter().zip(&w[0]).all(|(&inner, &outer)| !inner || outer));
        let nonempty = masks.iter().all(|m| m.iter().any(|&v| v));
        if nested && nonempty {
            return Ok(masks);
        }
    }
    Err(Error::NestingFailed(MAX_ATTEMPTS))
}

/// Separable Gaussian blur of a cubic volume with zero boundary.
fn smooth(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let strides = [size * size, size, 1];
    let mut cur = field.to_vec();
    for stride in strides {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride % size) as isize;
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let q = pos + t as isize - radius;
                if q >= 0 && q < size as isize {
                    acc += w * cur[(i as isize + (q - pos) * stride as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::arg("phantom", "constant modality volume cannot be normalized"));
    }
    let inv = var.sqrt().recip();
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    Ok(())
}

fn sample_rng(spec: &PhantomSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic in `(spec.seed, index)`; samples are independent streams.
pub fn generate_sample(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = sample_rng(spec, index);
    let [brain, complete, core, enh] = place_regions(spec, &mut rng)?;
    let s = spec.size;
    let n = s * s * s;

    let indicator = |f: &dyn Fn(usize) -> bool| (0..n).map(|i| if f(i) { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let latent = [
        indicator(&|i| brain[i] && !complete[i]),
        indicator(&|i| complete[i] && !core[i]),
        indicator(&|i| core[i] && !enh[i]),
        indicator(&|i| enh[i]),
    ]
    .map(|f| smooth(&f, s, spec.smoothing));

    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut volumes = Vec::with_capacity(4);
    for row in &spec.mixing {
        let mut v: Vec<f64> = (0..n)
            .map(|i| row.iter().zip(&latent).map(|(m, l)| m * l[i]).sum::<f64>() + noise.sample(&mut rng))
            .collect();
        normalize(&mut v)?;
        let data = v.into_iter().map(|x| x as f32).collect();
        volumes.push(Tensor::new(&[1, s, s, s], data)?);
    }

    let mut labels = Vec::with_capacity(3 * n);
    for mask in [&complete, &core, &enh] {
        labels.extend(mask.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    Ok(Sample {
        volumes: volumes.try_into().expect("four modalities"),
        labels: Tensor::new(&[3, s, s, s], labels)?,
        meta: SampleMeta {
            seed: spec.seed,
            index,
            spec_hash: spec.hash(),
        },
    })
}

/// Generates `indices` in parallel; order follows `indices`.
pub fn generate_samples(spec: &PhantomSpec, indices: Range<usize>) -> Result<Vec<Sample>> {
    spec.validate()?;
    indices.into_par_iter().map(|i| generate_sample(spec, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub spec_hash: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
        root.join(format!("sample_{index}"))
    }

    fn meta(&self, index: usize) -> SampleMeta {
        SampleMeta {
            seed: self.spec.seed,
            index,
            spec_hash: self.spec_hash.clone(),
        }
    }
}

/// Writes `n_train` then `n_test` samples with disjoint, consecutive indices.
pub fn make_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, dir: &Path) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::arg("make_dataset", "n_train and n_test must be positive"));
    }
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        train: (0..n_train).collect(),
        test: (n_train..n_train + n_test).collect(),
    };
    (0..n_train + n_test).into_par_iter().try_for_each(|i| {
        generate_sample(spec, i)?.save(&DatasetManifest::sample_dir(dir, i))
    })?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// In-memory equivalent of [`make_dataset`] followed by [`Dataset::load`].
    pub fn generate(spec: &PhantomSpec, n_train: usize, n_test: usize) -> Result<Self> {
        if n_train == 0 || n_test == 0 {
            return Err(Error::arg("make_dataset", "n_train and n_test must be positive"));
        }
        let all = generate_samples(spec, 0..n_train + n_test)?;
        let mut train = all;
        let test = train.split_off(n_train);
        Ok(Self {
            manifest: DatasetManifest {
                spec: spec.clone(),
                spec_hash: spec.hash(),
                train: (0..n_train).collect(),
                test: (n_train..n_train + n_test).collect(),
            },
            train,
            test,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
        let load = |indices: &[usize]| -> Result<Vec<Sample>> {
            indices
                .par_iter()
                .map(|&i| Sample::load(&DatasetManifest::sample_dir(dir, i), manifest.meta(i)))
                .collect()
        };
        let train = load(&manifest.train)?;
        let test = load(&manifest.test)?;
        Ok(Self { manifest, train, test })
    }
}

/// Pearson correlation of `a` and `b` restricted to `mask`.
pub fn masked_correlation(a: &[f32], b: &[f32], mask: &[bool]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&x, &y), _)| (x as f64, y as f64))
        .collect();
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x / n, sy + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Brain mask of sample `index`, replaying the region placement.
pub fn brain_mask(spec: &PhantomSpec, index: usize) -> Result<Vec<bool>> {
    spec.validate()?;
    let [brain, ..] = place_regions(spec, &mut sample_rng(spec, index))?;
    Ok(brain)
}

#[cfg(test)]
mod tests;
