//! Deterministic synthetic phantoms, the VOLX volume format and dataset
//! manifests.
//!
//! Two regimes: `small_roi` hides one to three small irregular lesions among
//! tubular distractors of similar brightness; `multi_organ` packs three to
//! five large smooth structures of very different sizes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::metrics::LabelVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VOLX";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 12 + 12;

/// Voxel payload of a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Image intensities (dtype 0).
    F32(Vec<f32>),
    /// Integer labels (dtype 1).
    U8(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

/// A multi-channel volume as stored on disk: channel-major, then `D, H, W`
/// row-major, little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    /// `(sz, sy, sx)` in mm.
    pub spacing: [f32; 3],
    pub payload: Payload,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f32; 3], payload: Payload) -> Result<Self> {
        let want = channels * dims.iter().product::<usize>();
        if payload.len() != want {
            return Err(invalid!("volume payload holds {} values, expected {want}", payload.len()));
        }
        Ok(Volume {
            channels,
            dims,
            spacing,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (dtype, size) = match &self.payload {
            Payload::F32(_) => (0u8, 4),
            Payload::U8(_) => (1u8, 1),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * size);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype);
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format { kind: "VOLX", detail };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let channels = u32_at(6);
        let dims = [u32_at(10), u32_at(14), u32_at(18)];
        let spacing = [f32_at(22), f32_at(26), f32_at(30)];
        let n = channels * dims.iter().product::<usize>();
        let body = &bytes[HEADER_LEN..];
        let payload = match bytes[5] {
            0 if body.len() == 4 * n => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 if body.len() == n => Payload::U8(body.to_vec()),
            0 | 1 => return Err(bad(format!("payload of {} bytes does not match header {channels}×{dims:?}", body.len()))),
            t => return Err(bad(format!("unknown dtype {t}"))),
        };
        Volume::new(channels, dims, spacing, payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Volume::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { kind, detail } => Error::Format {
                kind,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    /// Image payload as a `(C, D, H, W)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match &self.payload {
            Payload::F32(v) => Tensor::new(&[self.channels, self.dims[0], self.dims[1], self.dims[2]], v.clone()),
            Payload::U8(_) => Err(invalid!("expected an image volume, found labels")),
        }
    }

    /// Single-channel label payload as a [`LabelVolume`].
    pub fn to_labels(&self) -> Result<LabelVolume> {
        match &self.payload {
            Payload::U8(v) if self.channels == 1 => LabelVolume::new(self.dims, v.clone(), self.spacing.map(f64::from)),
            _ => Err(invalid!("expected a single-channel label volume")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    SmallRoi,
    MultiOrgan,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SmallRoi => "small_roi",
            Regime::MultiOrgan => "multi_organ",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_roi" => Ok(Regime::SmallRoi),
            "multi_organ" => Ok(Regime::MultiOrgan),
            _ => Err(invalid!("unknown regime {s:?} (expected small_roi or multi_organ)")),
        }
    }
}

/// Recipe for one phantom; the seed fixes every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub regime: Regime,
    pub size: [usize; 3],
    pub num_classes: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Foreground fraction range for `small_roi`.
    pub roi_fraction: (f64, f64),
    pub n_distractors: usize,
}

impl PhantomSpec {
    pub fn small_roi(seed: u64) -> Self {
        PhantomSpec {
            regime: Regime::SmallRoi,
            size: [32; 3],
            num_classes: 2,
            seed,
            noise_std: 0.1,
            roi_fraction: (0.001, 0.015),
            n_distractors: 2,
        }
    }

    pub fn multi_organ(seed: u64) -> Self {
        PhantomSpec {
            regime: Regime::MultiOrgan,
            num_classes: 5,
            ..PhantomSpec::small_roi(seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn spacing(&self) -> [f32; 3] {
        match self.regime {
            Regime::SmallRoi => [3.75, 1.0, 1.0],
            Regime::MultiOrgan => [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 16) {
            return Err(invalid!("phantom size {:?} is below 16³", self.size));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(invalid!("noise_std must be finite and non-negative"));
        }
        match self.regime {
            Regime::SmallRoi => {
                let (lo, hi) = self.roi_fraction;
                if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                    return Err(invalid!("roi fraction range ({lo}, {hi}) must satisfy 0 < lo ≤ hi < 1"));
                }
                if self.num_classes != 2 {
                    return Err(invalid!("small_roi phantoms have 2 classes, got {}", self.num_classes));
                }
            }
            Regime::MultiOrgan => {
                if !(4..=6).contains(&self.num_classes) {
                    return Err(invalid!("multi_organ phantoms have 3 to 5 structures, so 4 to 6 classes; got {}", self.num_classes));
                }
            }
        }
        Ok(())
    }
}

/// Voxel grid helper.
#[derive(Clone, Copy)]
struct Grid([usize; 3]);

impl Grid {
    fn len(self) -> usize {
        self.0.iter().product()
    }

    fn points(self) -> impl Iterator<Item = (usize, [f64; 3])> {
        let [d, h, w] = self.0;
        (0..d * h * w).map(move |i| (i, [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64]))
    }
}

/// Gaussian noise smoothed by repeated 3-tap box filters, rescaled to unit
/// standard deviation.
fn smooth_noise(rng: &mut Rng, grid: Grid, passes: usize) -> Vec<f64> {
    let [_, h, w] = grid.0;
    let mut v = rng.normal_vec(grid.len());
    let strides = [h * w, w, 1];
    for _ in 0..passes {
        for (axis, &stride) in strides.iter().enumerate() {
            let extent = grid.0[axis];
            let src = v.clone();
            for (i, out) in v.iter_mut().enumerate() {
                let pos = (i / stride) % extent;
                let prev = if pos > 0 { src[i - stride] } else { src[i] };
                let next = if pos + 1 < extent { src[i + stride] } else { src[i] };
                *out = (prev + src[i] + next) / 3.0;
            }
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt().max(1e-12);
    v.iter().map(|x| (x - mean) / std).collect()
}

/// Low-frequency sinusoidal displacement field.
#[derive(Clone)]
struct Warp {
    amp: f64,
    freq: [[f64; 3]; 3],
    phase: [f64; 3],
}

impl Warp {
    fn random(rng: &mut Rng, amp: f64, max_freq: f64) -> Self {
        let mut freq = [[0.0; 3]; 3];
        for row in &mut freq {
            for f in row.iter_mut() {
                *f = rng.uniform(-max_freq, max_freq);
            }
        }
        let phase = std::array::from_fn(|_| rng.uniform(0.0, std::f64::consts::TAU));
        Warp { amp, freq, phase }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| {
            let f = self.freq[a];
            p[a] + self.amp * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + self.phase[a]).sin()
        })
    }
}

#[derive(Clone)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Smallest radius scale at which the ellipsoid contains `p`.
    fn reach(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Union of ellipsoids, warped.
#[derive(Clone)]
struct Blob {
    parts: Vec<Ellipsoid>,
    warp: Warp,
}

impl Blob {
    fn random(rng: &mut Rng, center: [f64; 3], radius: f64, lobes: usize) -> Self {
        let parts = (0..lobes)
            .map(|k| {
                let offset = if k == 0 { 0.0 } else { 0.7 * radius };
                Ellipsoid {
                    center: center.map(|c| c + rng.uniform(-offset, offset.max(f64::MIN_POSITIVE))),
                    radii: std::array::from_fn(|_| radius * rng.uniform(0.6, 1.2)),
                }
            })
            .collect();
        Blob {
            parts,
            warp: Warp::random(rng, 0.35 * radius, 0.6),
        }
    }

    /// Smallest common scale of all lobes at which the blob contains `p`.
    fn reach(&self, p: [f64; 3]) -> f64 {
        let q = self.warp.apply(p);
        self.parts.iter().map(|e| e.reach(q)).fold(f64::INFINITY, f64::min)
    }
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

const LESION_INTENSITY: f64 = 1.0;

/// Generates the `(image, labels)` pair for `spec`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let grid = Grid(spec.size);
    let mut rng = Rng::new(spec.seed);
    let (intensity, labels) = match spec.regime {
        Regime::SmallRoi => small_roi(spec, grid, &mut rng)?,
        Regime::MultiOrgan => multi_organ(spec, grid, &mut rng)?,
    };
    let image: Vec<f32> = intensity
        .iter()
        .map(|&v| (v + spec.noise_std * rng.normal()) as f32)
        .collect();
    let spacing = spec.spacing();
    Ok((
        Volume::new(1, spec.size, spacing, Payload::F32(image))?,
        Volume::new(1, spec.size, spacing, Payload::U8(labels))?,
    ))
}

fn small_roi(spec: &PhantomSpec, grid: Grid, rng: &mut Rng) -> Result<(Vec<f64>, Vec<u8>)> {
    let n = grid.len() as f64;
    let (lo, hi) = spec.roi_fraction;
    let texture = smooth_noise(rng, grid, 3);
    let mut intensity: Vec<f64> = texture.iter().map(|t| 0.25 * t).collect();

    let count = rng.int(1, 3);
    let target = rng.uniform(lo, hi) * n;
    let margin = |extent: usize| (extent as f64 * 0.2).max(3.0);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let center = spec.size.map(|e| rng.uniform(margin(e), e as f64 - margin(e)));
            let lobes = rng.int(1, 3);
            Blob::random(rng, center, 1.0, lobes)
        })
        .collect();
    // A voxel joins the union once the common scale reaches its `reach`, so
    // the k-th smallest reach yields exactly k voxels.
    let reach: Vec<f64> = grid
        .points()
        .map(|(_, p)| blobs.iter().map(|b| b.reach(p)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut sorted = reach.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (target.round() as usize).clamp(1, sorted.len());
    let scale = sorted[k - 1];
    let lesion: Vec<bool> = reach.iter().map(|&r| r <= scale).collect();
    let frac = lesion.iter().filter(|&&v| v).count() as f64 / n;
    if !(lo..=hi).contains(&frac) {
        return Err(invalid!(
            "cannot place lesions covering {:.4}%–{:.4}% of a {:?} volume (got {:.4}%)",
            100.0 * lo,
            100.0 * hi,
            spec.size,
            100.0 * frac
        ));
    }
    let lesion_points: Vec<[f64; 3]> = grid.points().filter(|(i, _)| lesion[*i]).map(|(_, p)| p).collect();
    let mut labels = vec![0u8; grid.len()];
    let bump = smooth_noise(rng, grid, 1);
    for (i, &m) in lesion.iter().enumerate() {
        if m {
            labels[i] = 1;
            intensity[i] += LESION_INTENSITY + 0.1 * bump[i];
        }
    }

    // Thin tubes of lesion-like brightness, kept clear of the lesions.
    for _ in 0..spec.n_distractors {
        for _attempt in 0..50 {
            let a = spec.size.map(|e| rng.uniform(2.0, e as f64 - 2.0));
            let dir = {
                let v: [f64; 3] = std::array::from_fn(|_| rng.normal());
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.map(|x| x / norm)
            };
            let len = rng.uniform(8.0, 14.0);
            let b: [f64; 3] = std::array::from_fn(|i| a[i] + len * dir[i]);
            let radius = rng.uniform(0.9, 1.3);
            let clear = lesion_points.iter().all(|&p| segment_distance(p, a, b) > radius + 2.5);
            if !clear {
                continue;
            }
            let level = LESION_INTENSITY * rng.uniform(0.9, 1.1);
            for (i, p) in grid.points() {
                if segment_distance(p, a, b) <= radius {
                    intensity[i] = 0.25 * texture[i] + level;
                }
            }
            break;
        }
    }
    Ok((intensity, labels))
}

fn multi_organ(spec: &PhantomSpec, grid: Grid, rng: &mut Rng) -> Result<(Vec<f64>, Vec<u8>)> {
    let k = spec.num_classes - 1;
    let n = grid.len() as f64;
    let texture = smooth_noise(rng, grid, 2);
    for _attempt in 0..20 {
        let mut labels = vec![0u8; grid.len()];
        // Target volume fractions fall geometrically from 14% to 1.5%.
        for c in 0..k {
            let t = c as f64 / (k - 1) as f64;
            let frac = 0.14 * (0.015f64 / 0.14).powf(t);
            let radius = (frac * n * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
            let center = spec.size.map(|e| rng.uniform(radius.min(e as f64 / 2.0), e as f64 - radius.min(e as f64 / 2.0)));
            let organ = Blob::random(rng, center, radius, 1);
            let organ = Blob {
                warp: Warp::random(rng, 0.15 * radius, 0.15),
                ..organ
            };
            for (i, p) in grid.points() {
                if organ.reach(p) <= 1.0 {
                    labels[i] = c as u8 + 1;
                }
            }
        }
        let sizes: Vec<usize> = (1..=k).map(|c| labels.iter().filter(|&&l| l as usize == c).count()).collect();
        let (min, max) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        if min == 0 || max < 4 * min {
            continue;
        }
        let intensity = labels
            .iter()
            .zip(&texture)
            .map(|(&l, t)| 0.1 * t + if l == 0 { 0.0 } else { 0.4 + 0.35 * l as f64 })
            .collect();
        return Ok((intensity, labels));
    }
    Err(invalid!("could not place {k} structures of sufficiently different sizes in {:?}", spec.size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Split membership of a dataset; one `split<TAB>image<TAB>label` line per
/// volume. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.split.name(), e.image.display(), e.label.display()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, image, label] = fields[..] else {
                return Err(Error::Format {
                    kind: "manifest",
                    detail: format!("{}:{}: expected 3 tab-separated fields", path.display(), no + 1),
                });
            };
            entries.push(ManifestEntry {
                split: split.parse()?,
                image: base.join(image),
                label: base.join(label),
            });
        }
        Ok(Manifest { entries })
    }
}

/// Writes `n_train + n_val + n_test` phantoms into `dir` with seeds
/// `spec.seed + index` and saves `dir/manifest.tsv`.
pub fn generate_dataset(spec: &PhantomSpec, n_train: usize, n_val: usize, n_test: usize, dir: &Path) -> Result<Manifest> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(invalid!("every split needs at least one volume"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = std::iter::repeat_n(Split::Train, n_train)
        .chain(std::iter::repeat_n(Split::Val, n_val))
        .chain(std::iter::repeat_n(Split::Test, n_test));
    let mut entries = Vec::new();
    let mut text = String::new();
    for (index, split) in splits.enumerate() {
        let (image, labels) = gen_phantom(&spec.with_seed(spec.seed + index as u64))?;
        let stem = format!("{}_{index:03}", split.name());
        let (img_name, lbl_name) = (format!("{stem}_img.volx"), format!("{stem}_lbl.volx"));
        image.save(&dir.join(&img_name))?;
        labels.save(&dir.join(&lbl_name))?;
        text.push_str(&format!("{}\t{img_name}\t{lbl_name}\n", split.name()));
        entries.push(ManifestEntry {
            split,
            image: dir.join(img_name),
            label: dir.join(lbl_name),
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { entries })
}

/// An image tensor `(C, D, H, W)` with its labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let image = Volume::load(&entry.image)?;
    let labels = Volume::load(&entry.label)?.to_labels()?;
    if image.dims != labels.dims {
        return Err(Error::shape("sample", &image.dims, &labels.dims));
    }
    Ok(Sample {
        image: image.to_tensor()?,
        labels,
    })
}

pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    manifest.split(split).map(load_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(labels: &Volume) -> f64 {
        let Payload::U8(l) = &labels.payload else { panic!() };
        l.iter().filter(|&&v| v > 0).count() as f64 / l.len() as f64
    }

    #[test]
    fn phantoms_are_deterministic() {
        for spec in [PhantomSpec::small_roi(3), PhantomSpec::multi_organ(3)] {
            let (a, b) = gen_phantom(&spec).unwrap();
            let (c, d) = gen_phantom(&spec).unwrap();
            assert_eq!(a.to_bytes(), c.to_bytes());
            assert_eq!(b.to_bytes(), d.to_bytes());
        }
        let (a, _) = gen_phantom(&PhantomSpec::small_roi(4)).unwrap();
        let (b, _) = gen_phantom(&PhantomSpec::small_roi(5)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn small_roi_fraction_stays_in_range() {
        for seed in 0..100 {
            let spec = PhantomSpec::small_roi(seed);
            let (image, labels) = gen_phantom(&spec).unwrap();
            let f = fraction(&labels);
            assert!((0.001..=0.015).contains(&f), "seed {seed}: {f}");
            assert!(labels.to_labels().unwrap().labels.iter().all(|&l| l < 2));
            assert_eq!(image.spacing, [3.75, 1.0, 1.0]);
        }
    }

    #[test]
    fn multi_organ_sizes_vary_at_least_fourfold() {
        for seed in 0..10 {
            let spec = PhantomSpec::multi_organ(seed);
            let (_, labels) = gen_phantom(&spec).unwrap();
            let l = labels.to_labels().unwrap().labels;
            let sizes: Vec<usize> = (1..5).map(|c| l.iter().filter(|&&v| v == c).count()).collect();
            assert!(l.iter().all(|&v| v < 5));
            let (min, max) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            assert!(min > 0 && max >= 4 * min, "seed {seed}: {sizes:?}");
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = PhantomSpec::small_roi(0);
        spec.roi_fraction = (0.00001, 0.00002);
        assert!(gen_phantom(&spec).is_err());
        spec.roi_fraction = (0.2, 0.1);
        assert!(gen_phantom(&spec).is_err());
        let mut spec = PhantomSpec::small_roi(0);
        spec.size = [8, 32, 32];
        assert!(gen_phantom(&spec).is_err());
    }

    #[test]
    fn volume_bytes_round_trip_and_validation() {
        let (image, labels) = gen_phantom(&PhantomSpec::small_roi(1)).unwrap();
        for v in [image, labels] {
            let bytes = v.to_bytes();
            assert_eq!(Volume::from_bytes(&bytes).unwrap(), v);
            assert_eq!(Volume::from_bytes(&bytes).unwrap().to_bytes(), bytes);
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(Volume::from_bytes(&bad).is_err());
            assert!(Volume::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}
