//! Seeded synthetic driving scenes: cars on a flat ground plane rendered into
//! a small multi-channel image.
//!
//! Channels: 0 = object mask, 1 = depth cue `Z/10`, 2 = `sin α`, 3 = `cos α`,
//! 4 = `α/π`.
//! Nearer objects are painted last.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{ProjectedBox, StatsSample};
use crate::error::Result;
use crate::geometry::{project_box, Box2D, Box3D, CameraIntrinsics};
use crate::kitti::{LabelRecord, CLASSES};
use crate::tensor::{Shape, Tensor};

pub const SCENE_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Camera height above the ground, metres.
    pub camera_height: f64,
    pub depth_range: (f64, f64),
    pub max_objects: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            focal: 150.0,
            camera_height: 1.65,
            depth_range: (8.0, 16.0),
            max_objects: 3,
            noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::pinhole(
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 * 0.25,
        )
        .expect("valid camera")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub occlusion: i32,
}

impl SceneObject {
    pub fn projected(&self, k: &CameraIntrinsics) -> Result<ProjectedBox> {
        ProjectedBox::from_box3d(&self.box3d, k)
    }

    pub fn label(&self) -> LabelRecord {
        let b = &self.box3d;
        LabelRecord {
            kind: CLASSES[self.class].to_string(),
            truncation: 0.0,
            occlusion: self.occlusion,
            alpha: b.alpha(),
            bbox: self.box2d.corners(),
            dims: [b.h, b.w, b.l],
            location: [b.x, b.y, b.z],
            rotation_y: b.yaw,
            score: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `(1, SCENE_CHANNELS, H, W)`
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    pub camera: CameraIntrinsics,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<Box2D> {
        self.objects.iter().map(|o| o.box2d).collect()
    }
}

fn sample_object<R: Rng>(
    cfg: &SceneConfig,
    k: &CameraIntrinsics,
    rng: &mut R,
) -> Option<SceneObject> {
    for _ in 0..50 {
        let z = rng.random_range(cfg.depth_range.0..cfg.depth_range.1);
        let x = rng.random_range(-0.35..0.35) * z;
        let dims = [
            rng.random_range(1.5..1.75),
            rng.random_range(1.4..1.6),
            rng.random_range(3.5..4.3),
        ];
        let yaw = rng.random_range(-PI..PI);
        let b = Box3D::new([x, cfg.camera_height, z], dims, yaw).ok()?;
        let Ok(env) = project_box(&b, k) else {
            continue;
        };
        let inside = env.x1 >= 0.0
            && env.y1 >= 0.0
            && env.x2 <= cfg.width as f64
            && env.y2 <= cfg.height as f64;
        if inside {
            return Some(SceneObject {
                class: 0,
                box3d: b,
                box2d: env,
                occlusion: 0,
            });
        }
    }
    None
}

/// Pixels `[lo, hi)` covered by a box edge pair, clamped to `n`.
fn span(a: f64, b: f64, n: usize) -> std::ops::Range<usize> {
    let lo = a.round().max(0.0) as usize;
    let hi = (b.round().max(0.0) as usize).min(n);
    lo.min(hi)..hi
}

pub fn generate_scene<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Scene {
    let k = cfg.camera();
    let n = rng.random_range(1..=cfg.max_objects.max(1));
    let mut objects: Vec<SceneObject> =
        (0..n).filter_map(|_| sample_object(cfg, &k, rng)).collect();
    // far to near
    objects.sort_by(|a, b| b.box3d.z.total_cmp(&a.box3d.z));

    let s = Shape::new(1, SCENE_CHANNELS, cfg.height, cfg.width);
    let mut img = Tensor::zeros(s);
    for v in img.data_mut() {
        *v = rng.random_range(-cfg.noise..=cfg.noise);
    }
    let mut owner = vec![usize::MAX; cfg.height * cfg.width];
    for (i, o) in objects.iter().enumerate() {
        let alpha = o.box3d.alpha();
        let vals = [1.0, o.box3d.z / 10.0, alpha.sin(), alpha.cos(), alpha / PI];
        for y in span(o.box2d.y1, o.box2d.y2, cfg.height) {
            for x in span(o.box2d.x1, o.box2d.x2, cfg.width) {
                for (c, v) in vals.iter().enumerate() {
                    img.set(0, c, y, x, *v);
                }
                owner[y * cfg.width + x] = i;
            }
        }
    }
    for (i, o) in objects.iter_mut().enumerate() {
        let mut total = 0usize;
        let mut visible = 0usize;
        for y in span(o.box2d.y1, o.box2d.y2, cfg.height) {
            for x in span(o.box2d.x1, o.box2d.x2, cfg.width) {
                total += 1;
                visible += usize::from(owner[y * cfg.width + x] == i);
            }
        }
        let hidden = 1.0 - visible as f64 / total.max(1) as f64;
        o.occlusion = if hidden < 0.1 {
            0
        } else if hidden < 0.5 {
            1
        } else {
            2
        };
    }
    Scene {
        image: img,
        objects,
        camera: k,
    }
}

/// `n` scenes from one seed.
pub fn synthetic_dataset(n: usize, seed: u64, cfg: &SceneConfig) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_scene(cfg, &mut rng)).collect()
}

/// The fixed scene set used by the toy trainer and the demo.
pub fn bundled_scenes() -> Vec<Scene> {
    synthetic_dataset(32, 20_210_505, &SceneConfig::default())
}

/// Anchor-statistics samples for every object in `scenes`.
pub fn stats_samples(scenes: &[Scene]) -> Result<Vec<StatsSample>> {
    let mut out = Vec::new();
    for s in scenes {
        for o in &s.objects {
            let p = o.projected(&s.camera)?;
            out.push(StatsSample {
                box2d: o.box2d,
                stats: crate::anchors::AnchorStats {
                    z: p.zp,
                    w: p.w,
                    h: p.h,
                    l: p.l,
                    alpha: p.alpha,
                },
            });
        }
    }
    Ok(out)
}

/// Stacks scene images into one `(B, C, H, W)` tensor.
pub fn stack_images(scenes: &[&Scene]) -> Result<Tensor> {
    let first = scenes
        .first()
        .ok_or_else(|| crate::error::arg_err("stack_images", "no scenes"))?
        .image
        .shape();
    let mut data = Vec::with_capacity(first.numel() * scenes.len());
    for s in scenes {
        if s.image.shape() != first {
            return Err(crate::error::shape_err(
                "stack_images",
                "scene sizes differ",
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(
        Shape::new(scenes.len(), first.channels, first.height, first.width),
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_frame() {
        let cfg = SceneConfig::default();
        let a = synthetic_dataset(4, 7, &cfg);
        let b = synthetic_dataset(4, 7, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.objects, y.objects);
            for o in &x.objects {
                assert!(o.box2d.x1 >= 0.0 && o.box2d.x2 <= cfg.width as f64);
                assert!(o.box2d.y1 >= 0.0 && o.box2d.y2 <= cfg.height as f64);
            }
        }
    }

    #[test]
    fn bundled_set_has_objects() {
        let s = bundled_scenes();
        assert_eq!(s.len(), 32);
        assert!(s.iter().all(|sc| !sc.objects.is_empty()));
        assert_eq!(
            stack_images(&s.iter().take(4).collect::<Vec<_>>())
                .unwrap()
                .shape()
                .batch,
            4
        );
    }
}
