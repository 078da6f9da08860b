//! Fixtures shared by the benchmarks.

use afsm_core::afsm::PyramidConfig;
use afsm_core::datakit::{gen_synthetic_dataset, AnnotatedImage, SyntheticSpec};
use afsm_core::numkit::{FeatureMap, Fill};

/// Seeded random maps for each level of `cfg`, as if extracted from an `h` by `w` image.
pub fn random_pyramid(cfg: &PyramidConfig, h: usize, w: usize, seed: u64) -> Vec<FeatureMap> {
    cfg.levels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let s = 1usize << l;
            let fill = Fill::SeededUniform { lo: -1.0, hi: 1.0, seed: seed + i as u64 };
            FeatureMap::new(cfg.channels, h / s, w / s, fill)
                .expect("valid shape")
                .with_level(l)
        })
        .collect()
}

pub fn synthetic_images(n: usize, size: usize) -> Vec<AnnotatedImage> {
    let spec = SyntheticSpec { num_images: n, image_size: size, ..Default::default() };
    gen_synthetic_dataset(&spec).expect("default spec is valid").0
}
