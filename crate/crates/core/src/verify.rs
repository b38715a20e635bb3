//! Quick self-check of the core invariants, run by `tssl verify`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::dataset::{build_pretext_separate, LabeledImage, NormStats};
use crate::experiment::{config_hash, ExperimentConfig};
use crate::geometry::{
    rotate_quarter, scale_about_center, shear, translate, Image, SetName, TransformSet, CIFAR_CHANNELS, CIFAR_HEIGHT,
    CIFAR_WIDTH,
};
use crate::models::{attach_pretext_head, build_backbone, BackboneSpec};
use crate::nn::Tensor;
use crate::pretext::{lr_schedule, pretext_loss};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    let n = CIFAR_HEIGHT * CIFAR_WIDTH * CIFAR_CHANNELS;
    let data = (0..n).map(|_| rng.random()).collect();
    Image::new(CIFAR_HEIGHT, CIFAR_WIDTH, CIFAR_CHANNELS, data).expect("consistent shape")
}

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

fn rotation_group(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let n = 200;
    for i in 0..n {
        let img = random_image(rng);
        let (a, b) = (rng.random_range(0..4u8), rng.random_range(0..4u8));
        let lhs = rotate_quarter(&rotate_quarter(&img, a).map_err(|e| e.to_string())?, b).map_err(|e| e.to_string())?;
        let rhs = rotate_quarter(&img, (a + b) % 4).map_err(|e| e.to_string())?;
        if lhs != rhs {
            return Err(format!("image {i}: R^{a} R^{b} differs from R^{}", (a + b) % 4));
        }
    }
    Ok(format!("{n} images"))
}

fn identities(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let img = random_image(rng);
        let e = |r: crate::Result<Image>| r.map_err(|e| e.to_string());
        if e(shear(&img, 0.0))? != img || e(scale_about_center(&img, 1.0))? != img || e(translate(&img, 0, 0))? != img {
            return Err("a zero-parameter transform changed the image".into());
        }
    }
    Ok("shear(0), scale(1), translate(0,0)".into())
}

fn dataset_counts(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let sources: Vec<LabeledImage> = (0..60)
        .map(|i| LabeledImage {
            image: random_image(rng),
            class_label: (i % 10) as u8,
        })
        .collect();
    for name in SetName::CANONICAL {
        let set = TransformSet::canonical(name).map_err(|e| e.to_string())?;
        let ds = build_pretext_separate(sources.clone(), &set).map_err(|e| e.to_string())?;
        let k = set.k();
        if ds.len() != sources.len() * k || ds.label_histogram().iter().any(|&c| c != sources.len()) {
            return Err(format!("{name}: {} samples, histogram {:?}", ds.len(), ds.label_histogram()));
        }
    }
    Ok("balanced for every canonical set".into())
}

fn uniform_loss(_: &mut ChaCha8Rng) -> Result<String, String> {
    for k in [2usize, 4, 8, 10] {
        let probs = Tensor::<f64>::from_vec(&[3, k], vec![1.0 / k as f64; 3 * k]);
        let loss = pretext_loss(&probs, &[0, 1, k - 1], k).map_err(|e| e.to_string())?;
        if (loss - (k as f64).ln()).abs() > 1e-9 {
            return Err(format!("K={k}: loss {loss}"));
        }
    }
    Ok("ln K for K in 2, 4, 8, 10".into())
}

fn schedule(_: &mut ChaCha8Rng) -> Result<String, String> {
    let expected = [(0, 1e-3), (29, 1e-3), (30, 2e-4), (59, 2e-4), (60, 4e-5), (79, 4e-5), (80, 8e-6), (99, 8e-6)];
    for (epoch, lr) in expected {
        let got = lr_schedule(epoch).map_err(|e| e.to_string())?;
        if got != lr {
            return Err(format!("epoch {epoch}: {got:e}"));
        }
    }
    Ok("pretext drops at 30, 60, 80".into())
}

fn checkpoint_round_trip(_: &mut ChaCha8Rng) -> Result<String, String> {
    let spec: BackboneSpec = "vgg16-1/w16".parse().map_err(|e: crate::Error| e.to_string())?;
    let backbone = build_backbone::<f32>(spec, 3).map_err(|e| e.to_string())?;
    let mut model = attach_pretext_head(backbone, 4, 4).map_err(|e| e.to_string())?;
    let provenance = Provenance {
        transform_set: SetName::Rot4,
        epochs_completed: 0,
        total_epochs: 0,
        seed: 3,
        config_hash: String::new(),
        producer: "verify".into(),
    };
    let ck = Checkpoint::from_model(&mut model, NormStats::identity(), provenance);
    let bytes = ck.to_bytes();
    let dir = std::env::temp_dir().join(format!("tssl-verify-{}", std::process::id()));
    let path = dir.join("model.tssl");
    ck.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    if back.to_bytes() != bytes {
        return Err("save, load, save changed the bytes".into());
    }
    Ok(format!("{} bytes", bytes.len()))
}

fn hash_stability(_: &mut ChaCha8Rng) -> Result<String, String> {
    let a = "[data]\nsynthetic = { train_per_class = 1, test_per_class = 1 }\ninclude_test_split = false\n";
    let b = "[data]\ninclude_test_split   = false\nsynthetic = {test_per_class=1,train_per_class=1}\n";
    let ha = ExperimentConfig::from_toml(a).map_err(|e| e.to_string())?.hash();
    let hb = ExperimentConfig::from_toml(b).map_err(|e| e.to_string())?.hash();
    if ha != hb || ha == config_hash(&0) {
        return Err(format!("{ha} != {hb}"));
    }
    Ok("key order and whitespace ignored".into())
}

const CHECKS: [(&str, Check); 7] = [
    ("rotation composition mod 4", rotation_group),
    ("identity transforms", identities),
    ("pretext dataset counts", dataset_counts),
    ("uniform prediction loss", uniform_loss),
    ("learning-rate schedule", schedule),
    ("checkpoint round trip", checkpoint_round_trip),
    ("config hash stability", hash_stability),
];

/// Runs every check with a fixed seed.
pub fn run_invariant_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let r = check(&mut rng);
            CheckOutcome {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn suite_passes() {
        for c in super::run_invariant_suite(1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
