//! CIFAR-10 ingestion and pretext dataset construction.
//!
//! Pretext datasets are index tables over a shared source list; the
//! transformed pixels are produced on demand from `(source, set, label)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, TransformSet, CIFAR_CHANNELS, CIFAR_HEIGHT, CIFAR_WIDTH};
use crate::nn::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 10;
pub const RECORD_PIXELS: usize = CIFAR_HEIGHT * CIFAR_WIDTH * CIFAR_CHANNELS;
/// One label byte followed by the channel-planar pixels.
pub const RECORD_BYTES: usize = 1 + RECORD_PIXELS;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: Image,
    pub class_label: u8,
}

#[derive(Clone, Debug)]
pub struct CifarSplits {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl CifarSplits {
    /// Images fed to pretext construction: the train split, plus the test
    /// split when `include_test` is set.
    pub fn pretext_sources(&self, include_test: bool) -> Vec<LabeledImage> {
        let mut out = self.train.clone();
        if include_test {
            out.extend(self.test.iter().cloned());
        }
        out
    }
}

pub fn class_histogram(images: &[LabeledImage]) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for img in images {
        h[img.class_label as usize] += 1;
    }
    h
}

fn read_batch_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.is_empty() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "file is empty".into(),
        });
    }
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes is not a whole number of {RECORD_BYTES}-byte records (final record has {} bytes)",
                bytes.len(),
                bytes.len() % RECORD_BYTES
            ),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let class_label = rec[0];
            if class_label as usize >= NUM_CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("record {i} has label {class_label}, expected 0..=9"),
                });
            }
            let image = Image::from_planar(&rec[1..], CIFAR_HEIGHT, CIFAR_WIDTH, CIFAR_CHANNELS)?;
            Ok(LabeledImage { image, class_label })
        })
        .collect()
}

/// Reads the binary CIFAR-10 distribution (`data_batch_{1..5}.bin`,
/// `test_batch.bin`) from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<CifarSplits> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    for name in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(name))?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    Ok(CifarSplits { train, test })
}

/// Writes images in the CIFAR binary record format.
pub fn write_cifar_batch(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(images.len() * RECORD_BYTES);
    for img in images {
        if img.image.shape() != (CIFAR_HEIGHT, CIFAR_WIDTH, CIFAR_CHANNELS) {
            return Err(Error::invalid("CIFAR records hold 32x32x3 images only"));
        }
        buf.push(img.class_label);
        buf.extend(img.image.to_planar());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a full split set: the train list is divided over five batch files.
pub fn write_cifar10(dir: impl AsRef<Path>, splits: &CifarSplits) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per = splits.train.len().div_ceil(TRAIN_FILES.len()).max(1);
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let lo = (i * per).min(splits.train.len());
        let hi = ((i + 1) * per).min(splits.train.len());
        write_cifar_batch(dir.join(name), &splits.train[lo..hi])?;
    }
    write_cifar_batch(dir.join(TEST_FILE), &splits.test)
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel mean and standard deviation on the [0, 1] intensity scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.data().chunks_exact(3) {
                for ch in 0..3 {
                    let v = px[ch] as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += img.height() * img.width();
        }
        let n = count.max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for ch in 0..3 {
            mean[ch] = sum[ch] / n;
            let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            std[ch] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    /// NCHW tensor of normalized intensities.
    pub fn to_tensor<T: Scalar>(&self, images: &[&Image]) -> Tensor<T> {
        let Some(first) = images.first() else {
            return Tensor::zeros(&[0, CIFAR_CHANNELS, CIFAR_HEIGHT, CIFAR_WIDTH]);
        };
        let (h, w, c) = first.shape();
        let plane = h * w;
        let mut lut = vec![[T::zero(); 256]; c];
        for (ch, table) in lut.iter_mut().enumerate() {
            for (v, slot) in table.iter_mut().enumerate() {
                *slot = T::from_f64_lossy((v as f64 / 255.0 - self.mean[ch % 3]) / self.std[ch % 3]);
            }
        }
        let mut data = vec![T::zero(); images.len() * c * plane];
        for (n, img) in images.iter().enumerate() {
            assert_eq!(img.shape(), (h, w, c), "mixed image shapes in one batch");
            let base = n * c * plane;
            for (p, px) in img.data().chunks_exact(c).enumerate() {
                for ch in 0..c {
                    data[base + ch * plane + p] = lut[ch][px[ch] as usize];
                }
            }
        }
        Tensor::from_vec(&[images.len(), c, h, w], data)
    }
}

// ---------------------------------------------------------------------------
// Pretext datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildMethod {
    /// Every transform applied to every image.
    Separate,
    /// A fixed number of copies per image with uniformly drawn transforms.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretextSample {
    pub image: Image,
    pub transform_label: usize,
    pub source_index: usize,
    pub class_label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    source: u32,
    label: u16,
}

/// Transformed images paired with transform labels, generated lazily.
#[derive(Clone, Debug)]
pub struct PretextDataset {
    sources: Arc<[LabeledImage]>,
    set: TransformSet,
    method: BuildMethod,
    seed: u64,
    copies_per_source: usize,
    entries: Vec<Entry>,
}

pub fn build_pretext_separate(
    images: impl Into<Arc<[LabeledImage]>>,
    set: &TransformSet,
) -> Result<PretextDataset> {
    let sources: Arc<[LabeledImage]> = images.into();
    if sources.is_empty() {
        return Err(Error::invalid("cannot build a pretext dataset from zero images"));
    }
    let k = set.k();
    let entries = (0..sources.len())
        .flat_map(|s| (0..k).map(move |y| Entry { source: s as u32, label: y as u16 }))
        .collect();
    Ok(PretextDataset {
        sources,
        set: set.clone(),
        method: BuildMethod::Separate,
        seed: 0,
        copies_per_source: k,
        entries,
    })
}

pub fn build_pretext_random(
    images: impl Into<Arc<[LabeledImage]>>,
    set: &TransformSet,
    copies: usize,
    seed: u64,
) -> Result<PretextDataset> {
    if copies < 1 {
        return Err(Error::invalid("copies per image must be at least 1"));
    }
    let sources: Arc<[LabeledImage]> = images.into();
    if sources.is_empty() {
        return Err(Error::invalid("cannot build a pretext dataset from zero images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = set.k();
    let mut entries = Vec::with_capacity(sources.len() * copies);
    for s in 0..sources.len() {
        for _ in 0..copies {
            entries.push(Entry {
                source: s as u32,
                label: rng.random_range(0..k) as u16,
            });
        }
    }
    Ok(PretextDataset {
        sources,
        set: set.clone(),
        method: BuildMethod::Random,
        seed,
        copies_per_source: copies,
        entries,
    })
}

impl PretextDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set(&self) -> &TransformSet {
        &self.set
    }

    pub fn method(&self) -> BuildMethod {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[LabeledImage] {
        &self.sources
    }

    /// Samples per source image (K for the separate method).
    pub fn copies_per_source(&self) -> usize {
        self.copies_per_source
    }

    pub fn label(&self, index: usize) -> usize {
        self.entries[index].label as usize
    }

    pub fn source_index(&self, index: usize) -> usize {
        self.entries[index].source as usize
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.set.k()];
        for e in &self.entries {
            h[e.label as usize] += 1;
        }
        h
    }

    pub fn sample(&self, index: usize) -> Result<PretextSample> {
        let e = *self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))?;
        let src = &self.sources[e.source as usize];
        Ok(PretextSample {
            image: self.set.apply(&src.image, e.label as usize)?,
            transform_label: e.label as usize,
            source_index: e.source as usize,
            class_label: src.class_label,
        })
    }

    /// Normalized input tensor and labels for the given sample indices.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize], norm: &NormStats) -> Result<(Tensor<T>, Vec<usize>)> {
        let samples = indices.iter().map(|&i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let labels = samples.iter().map(|s| s.transform_label).collect();
        Ok((norm.to_tensor(&refs), labels))
    }

    /// Writes one PNG per sample plus `manifest.csv`
    /// (sample_id, source_index, transform_label, class_label).
    pub fn export(&self, dir: impl AsRef<Path>, limit: Option<usize>) -> Result<usize> {
        let dir = dir.as_ref();
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let manifest_path = dir.join("manifest.csv");
        let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| Error::Ingestion {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| Error::Ingestion {
            path: manifest_path.clone(),
            reason: e.to_string(),
        };
        writer
            .write_record(["sample_id", "source_index", "transform_label", "class_label"])
            .map_err(csv_err)?;
        let n = limit.map_or(self.len(), |l| l.min(self.len()));
        for i in 0..n {
            let s = self.sample(i)?;
            save_png(images_dir.join(format!("{i:07}.png")), &s.image)?;
            writer
                .write_record([
                    i.to_string(),
                    s.source_index.to_string(),
                    s.transform_label.to_string(),
                    s.class_label.to_string(),
                ])
                .map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
        Ok(n)
    }
}

pub fn save_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image as PNG"))),
    };
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    Image::new(rgb.height() as usize, rgb.width() as usize, 3, rgb.into_raw())
}

// ---------------------------------------------------------------------------
// Batching

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// All copies of a source image share a batch.
    Grouped,
    /// Plain per-sample shuffling.
    Flat,
}

/// Shuffled mini-batches of sample indices for one epoch.
pub fn pretext_batches(
    ds: &PretextDataset,
    batch_size: usize,
    epoch_seed: u64,
    grouping: Grouping,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    match grouping {
        Grouping::Flat => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
        }
        Grouping::Grouped => {
            let group = ds.copies_per_source();
            if batch_size % group != 0 {
                return Err(Error::config(format!(
                    "batch size {batch_size} is not divisible by {group} copies per image"
                )));
            }
            // entries are source-major, so source s owns [s*group, (s+1)*group)
            let mut sources: Vec<usize> = (0..ds.num_sources()).collect();
            sources.shuffle(&mut rng);
            let per_batch = batch_size / group;
            Ok(sources
                .chunks(per_batch)
                .map(|chunk| chunk.iter().flat_map(|&s| s * group..(s + 1) * group).collect())
                .collect())
        }
    }
}

/// Deterministic seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        path.with_file_name(name)
    };
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, make_transform_set, SetName};

    fn images(n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| {
                let data = (0..RECORD_PIXELS).map(|p| ((p * 7 + i * 13) % 251) as u8).collect();
                LabeledImage {
                    image: Image::new(32, 32, 3, data).unwrap(),
                    class_label: (i % NUM_CLASSES) as u8,
                }
            })
            .collect()
    }

    #[test]
    fn cifar_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let splits = CifarSplits {
            train: images(23),
            test: images(10),
        };
        write_cifar10(dir.path(), &splits).unwrap();
        let raw = fs::read(dir.path().join(TEST_FILE)).unwrap();
        assert_eq!(raw.len(), 10 * RECORD_BYTES);
        assert_eq!(raw[0], 0);
        // first pixel byte is the red channel of (0, 0)
        assert_eq!(raw[1], splits.test[0].image.get(0, 0, 0));
        assert_eq!(raw[1 + 1024], splits.test[0].image.get(0, 0, 1));
        let loaded = load_cifar10(dir.path()).unwrap();
        assert_eq!(loaded.train, splits.train);
        assert_eq!(loaded.test, splits.test);
        assert_eq!(class_histogram(&loaded.test), [1; 10]);
    }

    #[test]
    fn short_final_record_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10(dir.path(), &CifarSplits { train: images(5), test: images(2) }).unwrap();
        let path = dir.path().join(TEST_FILE);
        let mut raw = fs::read(&path).unwrap();
        raw.truncate(RECORD_BYTES + 3072);
        fs::write(&path, raw).unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Format { path: p, .. }) => assert!(p.ends_with(TEST_FILE)),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10(dir.path(), &CifarSplits { train: images(5), test: images(2) }).unwrap();
        fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
        assert!(err.to_string().contains("data_batch_3.bin"));
    }

    #[test]
    fn bad_label_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10(dir.path(), &CifarSplits { train: images(5), test: images(2) }).unwrap();
        let path = dir.path().join(TEST_FILE);
        let mut raw = fs::read(&path).unwrap();
        raw[RECORD_BYTES] = 10;
        fs::write(&path, raw).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn separate_method_counts_and_order() {
        let set = make_transform_set(SetName::Rot2).unwrap();
        let ds = build_pretext_separate(images(1), &set).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.label(0), ds.label(1)), (0, 1));
        let set = make_transform_set(SetName::Affine10).unwrap();
        let ds = build_pretext_separate(images(7), &set).unwrap();
        assert_eq!(ds.len(), 70);
        assert_eq!(ds.label_histogram(), vec![7; 10]);
        for i in 0..ds.len() {
            assert_eq!(ds.source_index(i), i / 10);
            assert_eq!(ds.label(i), i % 10);
        }
        assert!(build_pretext_separate(Vec::new(), &set).is_err());
    }

    #[test]
    fn separate_samples_reconstruct_from_source() {
        let set = make_transform_set(SetName::Affine5).unwrap();
        let src = images(3);
        let ds = build_pretext_separate(src.clone(), &set).unwrap();
        for i in 0..ds.len() {
            let s = ds.sample(i).unwrap();
            assert_eq!(s.image, apply_transform(&src[s.source_index].image, &set, s.transform_label).unwrap());
            assert_eq!(s.class_label, src[s.source_index].class_label);
        }
    }

    #[test]
    fn random_method_is_seeded() {
        let set = make_transform_set(SetName::Affine10).unwrap();
        let a = build_pretext_random(images(50), &set, 10, 42).unwrap();
        let b = build_pretext_random(images(50), &set, 10, 42).unwrap();
        let c = build_pretext_random(images(50), &set, 10, 43).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a.entries, b.entries);
        assert_ne!(a.entries, c.entries);
        assert!(build_pretext_random(images(2), &set, 0, 1).is_err());
    }

    #[test]
    fn grouped_batches_keep_copies_together() {
        let set = make_transform_set(SetName::Rot4).unwrap();
        let ds = build_pretext_separate(images(70), &set).unwrap();
        let batches = pretext_batches(&ds, 128, 9, Grouping::Grouped).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].len(), 128);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 280);
        for b in &batches {
            let mut counts = std::collections::HashMap::new();
            for &i in b {
                *counts.entry(ds.source_index(i)).or_insert(0) += 1;
            }
            assert!(counts.values().all(|&c| c == 4));
        }
        let other = pretext_batches(&ds, 128, 10, Grouping::Grouped).unwrap();
        assert_ne!(batches, other);
        assert!(matches!(pretext_batches(&ds, 30, 1, Grouping::Grouped), Err(Error::Config(_))));
        let flat = pretext_batches(&ds, 30, 1, Grouping::Flat).unwrap();
        let mut all: Vec<usize> = flat.concat();
        all.sort();
        assert_eq!(all, (0..280).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_layout() {
        let imgs = images(2);
        let norm = NormStats::compute(imgs.iter().map(|i| &i.image));
        let t: Tensor<f64> = norm.to_tensor(&[&imgs[0].image, &imgs[1].image]);
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        let expect = (imgs[1].image.get(2, 5, 1) as f64 / 255.0 - norm.mean[1]) / norm.std[1];
        assert!((t.data()[3 * 1024 + 1024 + 2 * 32 + 5] - expect).abs() < 1e-12);
        let mean: f64 = t.data()[..1024].iter().chain(&t.data()[3072..4096]).sum::<f64>() / 2048.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn export_writes_manifest_and_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let set = make_transform_set(SetName::Rot4).unwrap();
        let ds = build_pretext_separate(images(3), &set).unwrap();
        assert_eq!(ds.export(dir.path(), Some(6)).unwrap(), 6);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let lines: Vec<&str> = manifest.lines().collect();
        assert_eq!(lines[0], "sample_id,source_index,transform_label,class_label");
        assert_eq!(lines[6], "5,1,1,1");
        let back = load_png(dir.path().join("images/0000005.png")).unwrap();
        assert_eq!(back, ds.sample(5).unwrap().image);
    }
}
