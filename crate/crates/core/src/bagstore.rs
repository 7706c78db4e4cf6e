//! Bag files, dataset manifests, stratified splitting and the synthetic
//! focal-signal MIL dataset.
//!
//! Bag binary layout (little-endian):
//!
//! ```text
//! "MILB" | version u16 = 1 | reserved u16 = 0 | n_patches u32 | dim u32
//! n_patches × (x u32, y u32)
//! n_patches × dim × f32, row-major
//! ```
//!
//! Labels live in the manifest, never in the bag file.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const BAG_MAGIC: [u8; 4] = *b"MILB";
pub const BAG_VERSION: u16 = 1;
pub const BAG_HEADER_LEN: usize = 16;
pub const N_CLASSES: usize = 3;

/// Three-level FIR stage; stages 2 and 3 share a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FirLabel {
    Fir0,
    Fir1,
    Fir23,
}

impl FirLabel {
    pub const ALL: [FirLabel; 3] = [FirLabel::Fir0, FirLabel::Fir1, FirLabel::Fir23];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::invalid(format!("label {i} is not 0, 1 or 2")))
    }
}

impl fmt::Display for FirLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FirLabel::Fir0 => "FIR 0",
            FirLabel::Fir1 => "FIR 1",
            FirLabel::Fir23 => "FIR 2,3",
        })
    }
}

impl Serialize for FirLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for FirLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        FirLabel::from_index(v as usize).map_err(serde::de::Error::custom)
    }
}

/// One slide: patch coordinates and their embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub dim: usize,
    pub coords: Vec<[u32; 2]>,
    /// `n_patches × dim`, row-major.
    pub embeddings: Vec<f32>,
    pub label: Option<FirLabel>,
}

impl Bag {
    pub fn new(slide_id: impl Into<String>, dim: usize, coords: Vec<[u32; 2]>, embeddings: Vec<f32>) -> Result<Self> {
        let bag = Self { slide_id: slide_id.into(), dim, coords, embeddings, label: None };
        bag.validate()?;
        Ok(bag)
    }

    pub fn with_label(mut self, label: FirLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::EmptyBag);
        }
        if self.dim == 0 {
            return Err(Error::invalid("bag dimension must be at least 1"));
        }
        if self.embeddings.len() != self.coords.len() * self.dim {
            return Err(Error::invalid(format!(
                "{} embedding values for {} patches of dim {}",
                self.embeddings.len(),
                self.coords.len(),
                self.dim
            )));
        }
        if let Some(i) = self.embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bag {} patch {}", self.slide_id, i / self.dim)));
        }
        Ok(())
    }

    pub fn embedding(&self, patch: usize) -> &[f32] {
        &self.embeddings[patch * self.dim..(patch + 1) * self.dim]
    }

    /// Embeddings widened to f64.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n_patches(), self.dim, self.embeddings.iter().map(|&v| v as f64).collect())
    }

    pub fn encoded_len(&self) -> usize {
        BAG_HEADER_LEN + self.n_patches() * 8 + self.embeddings.len() * 4
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n_patches() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for [x, y] in &self.coords {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], slide_id: impl Into<String>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, header needs {BAG_HEADER_LEN}", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != BAG_MAGIC {
            return Err(Error::BadMagic { expected: BAG_MAGIC, found: magic });
        }
        if bytes.len() < BAG_HEADER_LEN {
            return Err(Error::Truncated(format!("{} bytes, header needs {BAG_HEADER_LEN}", bytes.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != BAG_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let expected = BAG_HEADER_LEN as u64 + n as u64 * 8 + n as u64 * dim as u64 * 4;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated(format!("{} bytes, n_patches={n} dim={dim} needs {expected}", bytes.len())));
        }
        if bytes.len() as u64 > expected {
            return Err(Error::TrailingBytes((bytes.len() as u64 - expected) as usize));
        }
        let mut coords = Vec::with_capacity(n);
        let mut off = BAG_HEADER_LEN;
        for _ in 0..n {
            coords.push([u32_at(off), u32_at(off + 4)]);
            off += 8;
        }
        let embeddings = bytes[off..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Bag::new(slide_id, dim, coords, embeddings)
    }
}

pub fn write_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bag.encode()?;
    let mut w = BufWriter::new(std::fs::File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a bag; the slide id is the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Bag> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Bag::decode(&bytes, stem).map_err(|e| Error::at_path(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag: PathBuf,
    pub label: FirLabel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub extractor_id: String,
    pub dim: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.bag) {
                return Err(Error::invalid(format!("duplicate bag path {}", e.bag.display())));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path)?;
        let m: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::at_path(path, e.into()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every bag of a split, resolving relative paths against `base`
    /// and checking each bag's dimension against the manifest.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<Bag>> {
        self.entries_in(split)
            .map(|e| {
                let path = if e.bag.is_absolute() { e.bag.clone() } else { base.join(&e.bag) };
                let bag = read_bag(&path)?;
                if bag.dim != self.dim as usize {
                    return Err(Error::at_path(
                        path,
                        Error::DimensionMismatch { expected: self.dim as usize, found: bag.dim },
                    ));
                }
                Ok(bag.with_label(e.label))
            })
            .collect()
    }
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `fractions`; leftover units go to the largest remainders, earlier parts
/// first on ties. Fractions are resolved to parts per million.
pub fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    const SCALE: u64 = 1_000_000;
    let ppm: Vec<u64> = fractions.iter().map(|f| (f * SCALE as f64).round() as u64).collect();
    let denom: u64 = ppm.iter().sum();
    let mut counts: Vec<usize> = ppm.iter().map(|&p| (total as u64 * p / denom) as usize).collect();
    let mut remainders: Vec<(u64, usize)> = ppm.iter().enumerate().map(|(i, &p)| (total as u64 * p % denom, i)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, i) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Per-class largest-remainder split with a seeded shuffle inside each class.
pub fn stratified_split(labels: &[FirLabel], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    for class in FirLabel::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::MissingClass(class.index()));
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &fractions);
        let mut it = members.into_iter();
        for (split, count) in Split::ALL.iter().zip(counts) {
            for i in it.by_ref().take(count) {
                out[i] = *split;
            }
        }
    }
    Ok(out)
}

/// Parameters of the synthetic focal-evidence dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_bags_per_class: usize,
    pub dim: usize,
    /// Inclusive range of instances per bag.
    pub patches_per_bag: (usize, usize),
    pub signal_fraction: f64,
    pub class_center_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_bags_per_class: 60,
            dim: 16,
            patches_per_bag: (16, 32),
            signal_fraction: 0.1,
            class_center_separation: 8.0,
            noise_sigma: 1.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub bags: Vec<Bag>,
    pub splits: Vec<Split>,
    /// Indices of the signal instances in each bag (empty for FIR 0).
    pub signal_indices: Vec<Vec<usize>>,
    /// Orthogonal class centers, one per class.
    pub centers: Vec<Vec<f64>>,
}

impl SynthDataset {
    pub fn labels(&self) -> Vec<FirLabel> {
        self.bags.iter().map(|b| b.label.expect("synthetic bags are labelled")).collect()
    }

    /// Indices of the bags assigned to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.bags.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Writes one bag file per slide plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir.join("bags"))?;
        let mut entries = Vec::with_capacity(self.bags.len());
        for (bag, split) in self.bags.iter().zip(&self.splits) {
            let rel = PathBuf::from("bags").join(format!("{}.milb", bag.slide_id));
            write_bag(bag, dir.join(&rel))?;
            entries.push(ManifestEntry { bag: rel, label: bag.label.expect("labelled"), split: *split });
        }
        let manifest = DatasetManifest {
            extractor_id: "synthetic-gaussian".to_string(),
            dim: self.bags.first().map_or(0, |b| b.dim) as u32,
            entries,
        };
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

/// Gram-Schmidt on Gaussian draws: `count` mutually orthogonal vectors of norm `norm`.
fn orthogonal_centers(count: usize, dim: usize, norm: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj = crate::linalg::dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let len = crate::linalg::dot(&v, &v).sqrt();
        if len > 1e-6 {
            basis.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    basis.into_iter().map(|b| b.into_iter().map(|x| x * norm).collect()).collect()
}

/// Bags of background noise in which FIR 1 / FIR 2,3 bags hide a small
/// cluster of signal instances near their class center.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.dim < 3 {
        return Err(Error::invalid(format!("synthetic dim {} < 3", spec.dim)));
    }
    if !(spec.signal_fraction > 0.0 && spec.signal_fraction <= 1.0) {
        return Err(Error::invalid("signal_fraction must lie in (0, 1]"));
    }
    if !(spec.class_center_separation > 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(Error::invalid("separation must be positive and noise non-negative"));
    }
    let (lo, hi) = spec.patches_per_bag;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("bad patches_per_bag range {lo}..={hi}")));
    }
    if spec.n_bags_per_class == 0 {
        return Err(Error::invalid("n_bags_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = orthogonal_centers(N_CLASSES, spec.dim, spec.class_center_separation, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let mut bags = Vec::new();
    let mut signal_indices = Vec::new();
    for class in FirLabel::ALL {
        for b in 0..spec.n_bags_per_class {
            let n = rng.random_range(lo..=hi);
            let mut signal = Vec::new();
            if class != FirLabel::Fir0 {
                let k = ((spec.signal_fraction * n as f64).round() as usize).clamp(1, n);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                signal = idx[..k].to_vec();
                signal.sort_unstable();
            }
            let width = (n as f64).sqrt().ceil() as u32;
            let mut coords = Vec::with_capacity(n);
            let mut embeddings = Vec::with_capacity(n * spec.dim);
            for i in 0..n {
                coords.push([(i as u32 % width) * 224, (i as u32 / width) * 224]);
                let is_signal = signal.binary_search(&i).is_ok();
                for j in 0..spec.dim {
                    let center = if is_signal { centers[class.index()][j] } else { 0.0 };
                    embeddings.push((center + noise.sample(&mut rng)) as f32);
                }
            }
            let id = format!("synth_{}_{b:04}", class.index());
            bags.push(Bag::new(id, spec.dim, coords, embeddings)?.with_label(class));
            signal_indices.push(signal);
        }
    }
    let labels: Vec<FirLabel> = bags.iter().map(|b| b.label.unwrap()).collect();
    let splits = stratified_split(&labels, [0.8, 0.1, 0.1], spec.seed)?;
    Ok(SynthDataset { bags, splits, signal_indices, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_arithmetic() {
        let bag = Bag::new("s", 1, vec![[3, 4]], vec![0.5]).unwrap();
        let bytes = bag.encode().unwrap();
        assert_eq!(bytes.len(), 16 + 8 + 4);
        assert_eq!(&bytes[..4], b"MILB");
        assert_eq!(&bytes[24..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bag = Bag::new("s", 2, vec![[0, 0], [224, 0]], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = bag.encode().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Bag::decode(&bad, "s"), Err(Error::BadMagic { .. })));
        assert!(matches!(Bag::decode(&good[..good.len() - 1], "s"), Err(Error::Truncated(_))));
        assert!(matches!(Bag::decode(&good[..10], "s"), Err(Error::Truncated(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Bag::decode(&long, "s"), Err(Error::TrailingBytes(1))));
        let mut nan = good.clone();
        let off = good.len() - 4;
        nan[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Bag::decode(&nan, "s"), Err(Error::NonFinite(_))));
        let mut ver = good;
        ver[4] = 2;
        assert!(matches!(Bag::decode(&ver, "s"), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn empty_bag_is_invalid() {
        assert!(matches!(Bag::new("e", 4, vec![], vec![]), Err(Error::EmptyBag)));
    }

    /// Hamilton apportionment minimizes the squared deviation from the quotas
    /// among all integer vectors with the right total.
    fn brute_apportion(total: usize, fractions: &[f64; 3]) -> Vec<usize> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for a in 0..=total {
            for b in 0..=total - a {
                let c = total - a - b;
                let cand = [a, b, c];
                let dev: f64 = cand.iter().zip(fractions).map(|(&n, f)| (n as f64 - f * total as f64).powi(2)).sum();
                if best.as_ref().is_none_or(|(d, _)| dev < d - 1e-9) {
                    best = Some((dev, cand.to_vec()));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(apportion(100, &[0.8, 0.1, 0.1]), vec![80, 10, 10]);
        assert_eq!(apportion(1, &[0.8, 0.1, 0.1]), vec![1, 0, 0]);
        for (n, expect) in [(3337, [2669, 334, 334]), (480, [384, 48, 48]), (283, [227, 28, 28])] {
            let got = apportion(n, &[0.8, 0.1, 0.1]);
            assert_eq!(got, expect.to_vec());
            assert_eq!(got, brute_apportion(n, &[0.8, 0.1, 0.1]));
            assert_eq!(got.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn split_of_cohort_counts() {
        let mut labels = vec![FirLabel::Fir0; 3337];
        labels.extend(vec![FirLabel::Fir1; 480]);
        labels.extend(vec![FirLabel::Fir23; 283]);
        let splits = stratified_split(&labels, [0.8, 0.1, 0.1], 1).unwrap();
        let count = |c: FirLabel, s: Split| labels.iter().zip(&splits).filter(|(l, x)| **l == c && **x == s).count();
        assert_eq!((count(FirLabel::Fir1, Split::Train), count(FirLabel::Fir1, Split::Val)), (384, 48));
        assert_eq!(count(FirLabel::Fir23, Split::Test), 28);
        assert_eq!(splits, stratified_split(&labels, [0.8, 0.1, 0.1], 1).unwrap());
        assert_ne!(splits, stratified_split(&labels, [0.8, 0.1, 0.1], 2).unwrap());
    }

    #[test]
    fn split_requires_every_class() {
        let labels = vec![FirLabel::Fir0, FirLabel::Fir1];
        assert!(matches!(stratified_split(&labels, [0.8, 0.1, 0.1], 0), Err(Error::MissingClass(2))));
        let single = vec![FirLabel::Fir0, FirLabel::Fir1, FirLabel::Fir23];
        assert_eq!(stratified_split(&single, [0.8, 0.1, 0.1], 0).unwrap(), vec![Split::Train; 3]);
    }

    #[test]
    fn synthetic_zero_noise_and_full_signal() {
        let spec = SynthSpec { noise_sigma: 0.0, class_center_separation: 10.0, ..SynthSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        for (bag, sig) in ds.bags.iter().zip(&ds.signal_indices) {
            let class = bag.label.unwrap().index();
            for i in 0..bag.n_patches() {
                let expect: Vec<f32> = if sig.contains(&i) {
                    ds.centers[class].iter().map(|&c| c as f32).collect()
                } else {
                    vec![0.0; bag.dim]
                };
                assert_eq!(bag.embedding(i), &expect[..]);
            }
        }
        let full = generate_synthetic(&SynthSpec { signal_fraction: 1.0, ..SynthSpec::default() }).unwrap();
        for (bag, sig) in full.bags.iter().zip(&full.signal_indices) {
            if bag.label != Some(FirLabel::Fir0) {
                assert_eq!(sig.len(), bag.n_patches());
            } else {
                assert!(sig.is_empty());
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_centers_orthogonal() {
        let a = generate_synthetic(&SynthSpec::default()).unwrap();
        let b = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(a.bags, b.bags);
        assert_eq!(a.splits, b.splits);
        for i in 0..3 {
            assert!((crate::linalg::dot(&a.centers[i], &a.centers[i]).sqrt() - 8.0).abs() < 1e-9);
            for j in 0..i {
                assert!(crate::linalg::dot(&a.centers[i], &a.centers[j]).abs() < 1e-9);
            }
        }
        assert!(generate_synthetic(&SynthSpec { dim: 2, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn nearest_center_classifies_every_signal_instance() {
        let spec = SynthSpec { class_center_separation: 20.0, noise_sigma: 0.5, ..SynthSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        for (bag, sig) in ds.bags.iter().zip(&ds.signal_indices) {
            for &i in sig {
                let x: Vec<f64> = bag.embedding(i).iter().map(|&v| v as f64).collect();
                let nearest = (0..3)
                    .min_by(|&a, &b| {
                        crate::linalg::squared_distance(&x, &ds.centers[a])
                            .total_cmp(&crate::linalg::squared_distance(&x, &ds.centers[b]))
                    })
                    .unwrap();
                assert_eq!(nearest, bag.label.unwrap().index());
            }
        }
    }

    fn arb_bag() -> impl Strategy<Value = Bag> {
        (1usize..12, 1usize..9).prop_flat_map(|(n, dim)| {
            (
                proptest::collection::vec(any::<[u32; 2]>(), n),
                proptest::collection::vec(-1e30f32..1e30f32, n * dim),
            )
                .prop_map(move |(coords, emb)| Bag::new("slide", dim, coords, emb).unwrap())
        })
    }

    proptest! {
        #[test]
        fn bag_round_trip(bag in arb_bag()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("slide.milb");
            write_bag(&bag, &path).unwrap();
            let back = read_bag(&path).unwrap();
            prop_assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, bag.encoded_len());
            prop_assert_eq!(back, bag);
        }

        #[test]
        fn split_is_proportional_disjoint_and_exhaustive(
            counts in proptest::array::uniform3(1usize..60), seed in any::<u64>()
        ) {
            let labels: Vec<FirLabel> = FirLabel::ALL.iter()
                .zip(counts)
                .flat_map(|(&l, n)| std::iter::repeat_n(l, n))
                .collect();
            let splits = stratified_split(&labels, [0.8, 0.1, 0.1], seed).unwrap();
            prop_assert_eq!(splits.len(), labels.len());
            for (class, n) in FirLabel::ALL.iter().zip(counts) {
                for (s, f) in Split::ALL.iter().zip([0.8, 0.1, 0.1]) {
                    let got = labels.iter().zip(&splits).filter(|(l, x)| *l == class && *x == s).count();
                    prop_assert!((got as f64 - f * n as f64).abs() < 1.0 + 1e-9);
                }
            }
        }
    }
}
