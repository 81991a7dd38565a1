//! Fixtures shared by the benchmarks.

use msplat_core::{generate, Camera, GaussianCloud, SceneSpec, SpectralImage};

/// Ground truth and first view of a generated scene with `primitives`
/// primitives at `size` x `size` pixels.
pub struct Fixture {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub target: SpectralImage,
}

pub fn fixture(primitives: usize, size: usize) -> Fixture {
    let scene = generate(&SceneSpec {
        primitive_count: primitives,
        image_size: size,
        camera_count: 2,
        ..SceneSpec::default()
    })
    .expect("valid spec");
    let view = scene.manifest.views.len() - 1;
    Fixture {
        camera: scene.manifest.views[view].camera.clone(),
        target: scene.manifest.image(view).expect("in memory").clone(),
        cloud: scene.truth,
    }
}
