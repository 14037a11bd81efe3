mod common;

use dsf_cli::idx::{encode_idx, load_idx, parse_idx, rotate_augment, IMAGE_MAGIC, LABEL_MAGIC};
use dsf_core::Error;
use proptest::prelude::*;

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    std::iter::once(magic).chain(dims.iter().copied()).flat_map(u32::to_be_bytes).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_bytes_never_panic(images in proptest::collection::vec(any::<u8>(), 0..64),
                                   labels in proptest::collection::vec(any::<u8>(), 0..32)) {
        if let Err(e) = parse_idx(&images, &labels) {
            prop_assert!(matches!(e, Error::Format(_) | Error::Consistency(_)), "{e}");
        }
    }

    #[test]
    fn malformed_headers_are_format_errors(count in any::<u32>(), rows in any::<u32>(), cols in any::<u32>(),
                                           body in 0usize..64, cut in 0usize..16) {
        let mut images = header(IMAGE_MAGIC, &[count, rows, cols]);
        images.extend(std::iter::repeat_n(7u8, body));
        let labels = header(LABEL_MAGIC, &[count]);
        let declared = (count as u128) * (rows as u128) * (cols as u128);
        if declared > body as u128 {
            prop_assert!(matches!(parse_idx(&images, &labels), Err(Error::Format(_))));
        }
        // Any truncation inside the header is rejected too.
        prop_assert!(matches!(parse_idx(&images[..cut], &labels), Err(Error::Format(_))));
        prop_assert!(matches!(parse_idx(&images, &labels[..cut.min(7)]), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_magic_is_rejected(magic in any::<u32>()) {
        prop_assume!(magic != IMAGE_MAGIC);
        let (mut images, labels) = encode_idx(&common::ring_dataset(2, 0));
        images[..4].copy_from_slice(&magic.to_be_bytes());
        prop_assert!(matches!(parse_idx(&images, &labels), Err(Error::Format(_))));
    }
}

#[test]
fn missing_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let result = load_idx(&dir.path().join("a"), &dir.path().join("b"));
    assert!(matches!(result, Err(Error::Format(_))));
}

#[test]
fn rotation_is_deterministic_per_seed() {
    let ds = common::ring_dataset(8, 4);
    assert_eq!(rotate_augment(&ds, 11), rotate_augment(&ds, 11));
    assert_ne!(rotate_augment(&ds, 11), rotate_augment(&ds, 12));
    assert_eq!(rotate_augment(&ds, 11).labels, ds.labels);
}

#[test]
fn rotation_roughly_conserves_pixel_mass_on_digits() {
    let Some(dir) = common::mnist_dir() else {
        eprintln!("MNIST not found; skipping the real-data mass check");
        return;
    };
    let ds = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap().take(1000);
    let rotated = rotate_augment(&ds, 0);
    let mut rel = 0.0;
    for i in 0..ds.len() {
        let mass = |img: &[u8]| img.iter().map(|&p| f64::from(p)).sum::<f64>();
        let (before, after) = (mass(ds.image(i)), mass(rotated.image(i)));
        rel += (after - before).abs() / before;
    }
    let rel = rel / ds.len() as f64;
    assert!(rel <= 0.02, "mean relative mass change {rel}");
}
