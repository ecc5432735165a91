//! Synthetic multi-face data where the class of a face is visible only
//! through its similarity to the other faces of the same image.
//!
//! Each image (or clip of `track_len` frames) draws a scene direction `d`.
//! Real faces are noisy copies of `d`. Every fake face gets its own
//! direction at angle `theta` from `d`. A single feature vector is therefore
//! uniformly distributed on the sphere whatever its label; only "does this
//! face have a near-duplicate in its image" separates the classes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_label, BBox, Dataset, FaceRecord, ImageRecord};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    /// Per-face probability of being fake before the `min_reals` floor.
    pub fake_fraction: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub sigma: f64,
    /// Angle between the scene direction and each fake direction.
    pub theta: f64,
    /// Fewest real faces per image (clamped to the face count).
    pub min_reals: usize,
    /// Consecutive images sharing identities; > 1 emits track ids.
    pub track_len: usize,
    pub id_prefix: String,
    pub split_tag: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 500,
            min_faces: 2,
            max_faces: 5,
            fake_fraction: 0.3,
            feature_dim: 32,
            sigma: 0.1,
            theta: std::f64::consts::FRAC_PI_2,
            min_reals: 2,
            track_len: 1,
            id_prefix: "img".into(),
            split_tag: String::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim < 2 {
            return fail("feature_dim must be at least 2");
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return fail("fake_fraction must lie strictly between 0 and 1");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return fail("sigma must be finite and non-negative");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta) {
            return fail("theta must lie in [0, pi]");
        }
        if self.num_images == 0 {
            return fail("num_images must be positive");
        }
        if self.min_faces == 0 || self.max_faces < self.min_faces {
            return fail("faces per image range must satisfy 1 <= min <= max");
        }
        if self.track_len == 0 {
            return fail("track_len must be at least 1");
        }
        Ok(())
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = gaussian(dim, rng);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to the unit vector `d`.
fn orthogonal_unit(d: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian(d.len(), rng);
        let p = dot(&v, d);
        v.iter_mut().zip(d).for_each(|(x, di)| *x -= p * di);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(dir: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = dir
            .iter()
            .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn gen_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = config.feature_dim;
    let (cos_t, sin_t) = (config.theta.cos(), config.theta.sin());
    let mut images = Vec::with_capacity(config.num_images);
    let mut clip = 0usize;
    while images.len() < config.num_images {
        let n = rng.random_range(config.min_faces..=config.max_faces);
        let scene = unit(dim, &mut rng);
        let mut labels: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random_bool(config.fake_fraction)))
            .collect();
        let floor = config.min_reals.min(n);
        while labels.iter().filter(|&&l| l == 0).count() < floor {
            let fakes: Vec<usize> = (0..n).filter(|&k| labels[k] == 1).collect();
            let &k = fakes.choose(&mut rng).expect("a fake exists while reals are short");
            labels[k] = 0;
        }
        let dirs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    scene.clone()
                } else {
                    let u = orthogonal_unit(&scene, &mut rng);
                    scene.iter().zip(&u).map(|(d, o)| cos_t * d + sin_t * o).collect()
                }
            })
            .collect();
        let size: f64 = rng.random_range(48.0..96.0);
        for _ in 0..config.track_len {
            if images.len() == config.num_images {
                break;
            }
            let index = images.len();
            let image_id = format!("{}{:05}", config.id_prefix, index);
            let faces = labels
                .iter()
                .zip(&dirs)
                .enumerate()
                .map(|(k, (&label, dir))| FaceRecord {
                    face_id: format!("{image_id}-f{k}"),
                    bbox: BBox {
                        x: 16.0 + k as f64 * (size + 16.0),
                        y: 32.0,
                        w: size,
                        h: size,
                    },
                    label,
                    feature: noisy(dir, config.sigma, &mut rng),
                    track_id: (config.track_len > 1).then(|| format!("{}clip{:05}-p{k}", config.id_prefix, clip)),
                    score: None,
                })
                .collect();
            images.push(ImageRecord {
                image_id,
                label: image_label(&labels)?,
                faces,
                score: None,
            });
        }
        clip += 1;
    }
    let ds = Dataset {
        feature_dim: dim,
        images,
        split_tag: config.split_tag.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::cosine_sim;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            num_images: 20,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg, 5).unwrap().to_jsonl().unwrap();
        let b = gen_synthetic(&cfg, 5).unwrap().to_jsonl().unwrap();
        let c = gen_synthetic(&cfg, 6).unwrap().to_jsonl().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_geometry() {
        let cfg = SynthConfig {
            num_images: 30,
            sigma: 0.0,
            min_faces: 3,
            max_faces: 5,
            fake_fraction: 0.4,
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg, 1).unwrap();
        let mut checked_cross = false;
        for im in &ds.images {
            for a in &im.faces {
                for b in &im.faces {
                    let c = cosine_sim(&a.feature, &b.feature).unwrap();
                    match (a.label, b.label) {
                        (0, 0) => assert!((c - 1.0).abs() < 1e-12),
                        (0, 1) | (1, 0) => {
                            assert!(c.abs() < 1e-12);
                            checked_cross = true;
                        }
                        _ => {}
                    }
                }
            }
        }
        assert!(checked_cross);
    }

    #[test]
    fn image_labels_follow_faces() {
        let cfg = SynthConfig {
            num_images: 200,
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg, 2).unwrap();
        let mut all_real = 0;
        for im in &ds.images {
            assert_eq!(im.label, *im.face_labels().iter().max().unwrap());
            let reals = im.faces.iter().filter(|f| f.label == 0).count();
            assert!(reals >= 2.min(im.faces.len()));
            if im.label == 0 {
                all_real += 1;
            }
        }
        assert!(all_real > 0 && all_real < ds.images.len());
    }

    #[test]
    fn tracks_share_labels_across_frames() {
        let cfg = SynthConfig {
            num_images: 9,
            track_len: 3,
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg, 3).unwrap();
        for clip in ds.images.chunks(3) {
            let ids: Vec<_> = clip[0].faces.iter().map(|f| f.track_id.clone()).collect();
            for frame in clip {
                assert_eq!(frame.face_labels(), clip[0].face_labels());
                let got: Vec<_> = frame.faces.iter().map(|f| f.track_id.clone()).collect();
                assert_eq!(got, ids);
            }
        }
        assert!(ds.images[0].faces[0].track_id.is_some());
    }

    #[test]
    fn rejects_bad_config() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig {
                feature_dim: 1,
                ..base.clone()
            },
            SynthConfig {
                fake_fraction: 0.0,
                ..base.clone()
            },
            SynthConfig {
                fake_fraction: 1.0,
                ..base.clone()
            },
            SynthConfig {
                sigma: -0.1,
                ..base.clone()
            },
            SynthConfig {
                min_faces: 4,
                max_faces: 3,
                ..base.clone()
            },
        ] {
            assert!(matches!(gen_synthetic(&bad, 0), Err(Error::Config(_))));
        }
    }
}
