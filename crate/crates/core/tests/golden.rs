//! Transformed images compared against lossless PNG fixtures.
//! Run with `UPDATE_GOLDEN=1` to rewrite the fixtures after an intended
//! change to a kernel.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tssl::dataset::{load_png, save_png};
use tssl::geometry::{rotate_degrees, SetName, TransformSet};
use tssl::synthetic::render;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn transforms_match_golden_images() {
    let update = std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1");
    let source = render(3, &mut ChaCha8Rng::seed_from_u64(2024));
    let set = TransformSet::canonical(SetName::Affine10).unwrap();
    let mut cases = vec![("source.png".to_string(), source.clone())];
    for label in 0..set.k() {
        cases.push((format!("affine10-{label}.png"), set.apply(&source, label).unwrap()));
    }
    cases.push(("rotate-45.png".to_string(), rotate_degrees(&source, 45.0, 0).unwrap()));

    let mut mismatched = Vec::new();
    for (name, img) in &cases {
        let path = fixture(name);
        if update {
            save_png(&path, img).unwrap();
            continue;
        }
        let golden = load_png(&path).unwrap_or_else(|e| panic!("{e}; run with UPDATE_GOLDEN=1 to create it"));
        if golden != *img {
            mismatched.push(name.clone());
        }
    }
    assert!(mismatched.is_empty(), "differs from fixtures: {mismatched:?}");
}
