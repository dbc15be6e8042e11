//! Synthetic datasets and their on-disk form.
//!
//! A dataset directory holds `manifest.json` and `latents.bin`, the
//! latents as consecutive little-endian `f32` in item order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gentron::numerics::{Rng, Tensor};
use gentron::trainer::{ImageTextPair, VideoTextPair};

use crate::error::CliError;

pub const LATENT: [usize; 3] = [8, 8, 4];
pub const SHAPES: [&str; 2] = ["square", "cross"];
pub const VERTICAL: [&str; 2] = ["top", "bottom"];
pub const HORIZONTAL: [&str; 2] = ["left", "right"];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];
pub const CLUSTER_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
pub const CLUSTER_STD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Gaussians,
    Shapes,
    ShapesVideo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub prompt: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub seed: u64,
    pub latent_shape: [usize; 3],
    /// 1 for image datasets.
    pub frames: usize,
    /// Prompt of each label.
    pub classes: Vec<String>,
    /// Per-class means, for Gaussian clusters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub means: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// `[H, W, C]` per image or `[frames, H, W, C]` per clip.
    pub latents: Vec<Tensor>,
}

/// Prompt of a shapes class: `<shape> <vertical> <horizontal>`.
pub fn shape_class(label: usize) -> String {
    format!("{} {} {}", SHAPES[label / 4], VERTICAL[(label / 2) % 2], HORIZONTAL[label % 2])
}

fn stamp(latent: &mut [f32], shape: usize, y0: isize, x0: isize, amp: f32) {
    let [h, w, c] = LATENT;
    for dy in 0..3isize {
        for dx in 0..3isize {
            let on = shape == 0 || dy == 1 || dx == 1;
            if !on {
                continue;
            }
            let y = (y0 + dy).rem_euclid(h as isize) as usize;
            let x = (x0 + dx).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                // Squares light the first two channels, crosses the last two.
                let sign = if (ch < 2) == (shape == 0) { 1.0 } else { -0.5 };
                latent[(y * w + x) * c + ch] = amp * sign;
            }
        }
    }
}

fn blank() -> Vec<f32> {
    vec![0.0; LATENT.iter().product()]
}

/// Images of 3×3 squares or crosses in one quadrant of an 8×8 latent, with
/// one-pixel position jitter and amplitude jitter. Item `i` has class `i % 8`.
pub fn shapes(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut items = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 8;
        let shape = label / 4;
        let y0 = 4 * ((label / 2) % 2) + rng.below(2);
        let x0 = 4 * (label % 2) + rng.below(2);
        let amp = rng.uniform_range(0.7, 1.0) as f32;
        let mut lat = blank();
        stamp(&mut lat, shape, y0 as isize, x0 as isize, amp);
        latents.push(Tensor::new(&LATENT, lat).unwrap());
        items.push(Item { prompt: shape_class(label), label });
    }
    let classes = (0..8).map(shape_class).collect();
    let manifest = Manifest { kind: DatasetKind::Shapes, seed, latent_shape: LATENT, frames: 1, classes, means: vec![], std: None, items };
    Dataset { manifest, latents }
}

/// Clips of a shape moving one pixel per frame, wrapping at the border.
/// Item `i` has class `i % 8`: `<shape> moving <direction>`.
pub fn shapes_video(n: usize, frames: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let class = |l: usize| format!("{} moving {}", SHAPES[l / 4], DIRECTIONS[l % 4]);
    let mut items = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 8;
        let (dy, dx) = [(0, -1), (0, 1), (-1, 0), (1, 0)][label % 4];
        let (y0, x0) = (rng.below(8) as isize, rng.below(8) as isize);
        let amp = rng.uniform_range(0.7, 1.0) as f32;
        let mut data = Vec::with_capacity(frames * 256);
        for f in 0..frames as isize {
            let mut lat = blank();
            stamp(&mut lat, label / 4, y0 + dy * f, x0 + dx * f, amp);
            data.extend(lat);
        }
        let mut shape = vec![frames];
        shape.extend_from_slice(&LATENT);
        latents.push(Tensor::new(&shape, data).unwrap());
        items.push(Item { prompt: class(label), label });
    }
    let classes = (0..8).map(class).collect();
    let manifest = Manifest { kind: DatasetKind::ShapesVideo, seed, latent_shape: LATENT, frames, classes, means: vec![], std: None, items };
    Dataset { manifest, latents }
}

/// Isotropic Gaussian clusters with standard deviation [`CLUSTER_STD`];
/// each mean is a random sign pattern of magnitude 0.5. Item `i` has
/// cluster `i % clusters`.
pub fn gaussians(n: usize, clusters: usize, seed: u64) -> Result<Dataset, CliError> {
    if !(2..=4).contains(&clusters) {
        return Err(CliError::Usage(format!("clusters must be 2..=4, got {clusters}")));
    }
    let mut rng = Rng::new(seed);
    let d: usize = LATENT.iter().product();
    let means: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..d).map(|_| if rng.bernoulli(0.5) { 0.5 } else { -0.5 }).collect())
        .collect();
    let mut items = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % clusters;
        let data: Vec<f64> = means[label].iter().map(|m| m + CLUSTER_STD * rng.normal()).collect();
        latents.push(Tensor::from_f64(&LATENT, &data).unwrap());
        items.push(Item { prompt: CLUSTER_NAMES[label].into(), label });
    }
    let classes = CLUSTER_NAMES[..clusters].iter().map(|s| s.to_string()).collect();
    let manifest = Manifest {
        kind: DatasetKind::Gaussians,
        seed,
        latent_shape: LATENT,
        frames: 1,
        classes,
        means,
        std: Some(CLUSTER_STD),
        items,
    };
    Ok(Dataset { manifest, latents })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn is_video(&self) -> bool {
        self.manifest.kind == DatasetKind::ShapesVideo
    }

    pub fn image_pairs(&self) -> Result<Vec<ImageTextPair>, CliError> {
        if self.is_video() {
            return Err(CliError::Schema("expected an image dataset, found video clips".into()));
        }
        Ok(self
            .latents
            .iter()
            .zip(&self.manifest.items)
            .map(|(l, it)| ImageTextPair { latent: l.clone(), prompt: it.prompt.clone() })
            .collect())
    }

    pub fn video_pairs(&self) -> Result<Vec<VideoTextPair>, CliError> {
        if !self.is_video() {
            return Err(CliError::Schema("expected a video dataset, found images".into()));
        }
        Ok(self
            .latents
            .iter()
            .zip(&self.manifest.items)
            .map(|(l, it)| VideoTextPair { frames: l.clone(), prompt: it.prompt.clone() })
            .collect())
    }

    /// Mean latent of each class, in label order.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let k = self.manifest.classes.len();
        let d = self.latents[0].numel();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (l, it) in self.latents.iter().zip(&self.manifest.items) {
            counts[it.label] += 1;
            for (s, &v) in sums[it.label].iter_mut().zip(l.data()) {
                *s += v as f64;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        sums
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json)?;
        let mut bytes = Vec::with_capacity(self.latents.iter().map(Tensor::numel).sum::<usize>() * 4);
        for l in &self.latents {
            l.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        fs::write(dir.join("latents.bin"), bytes)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        if !dir.join("manifest.json").is_file() {
            return Err(CliError::Usage(format!("no dataset at {}", dir.display())));
        }
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("dataset manifest: {e}")))?;
        let bytes = fs::read(dir.join("latents.bin"))?;
        let mut shape = Vec::new();
        if manifest.frames > 1 || manifest.kind == DatasetKind::ShapesVideo {
            shape.push(manifest.frames);
        }
        shape.extend_from_slice(&manifest.latent_shape);
        let per: usize = shape.iter().product();
        if per == 0 || bytes.len() != per * 4 * manifest.items.len() {
            return Err(CliError::Schema(format!(
                "latents.bin holds {} bytes, manifest implies {}",
                bytes.len(),
                per * 4 * manifest.items.len()
            )));
        }
        if manifest.items.iter().any(|it| it.label >= manifest.classes.len()) {
            return Err(CliError::Schema("item label outside the class list".into()));
        }
        let latents = bytes
            .chunks_exact(per * 4)
            .map(|c| {
                let data = c.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                Tensor::new(&shape, data).unwrap()
            })
            .collect();
        Ok(Self { manifest, latents })
    }
}

/// Index of the nearest centroid in squared Euclidean distance.
pub fn nearest_centroid(x: &[f32], centroids: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
    (0..centroids.len())
        .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        assert_eq!(shapes(16, 3), shapes(16, 3));
        assert_ne!(shapes(16, 3).latents, shapes(16, 4).latents);
        assert_eq!(gaussians(10, 3, 1).unwrap(), gaussians(10, 3, 1).unwrap());
        assert_eq!(shapes_video(4, 8, 2), shapes_video(4, 8, 2));
    }

    #[test]
    fn prompt_grammar() {
        for it in &shapes(40, 1).manifest.items {
            let words: Vec<&str> = it.prompt.split(' ').collect();
            assert_eq!(words.len(), 3);
            assert!(SHAPES.contains(&words[0]) && VERTICAL.contains(&words[1]) && HORIZONTAL.contains(&words[2]));
        }
        for it in &shapes_video(16, 4, 1).manifest.items {
            let words: Vec<&str> = it.prompt.split(' ').collect();
            assert!(SHAPES.contains(&words[0]) && words[1] == "moving" && DIRECTIONS.contains(&words[2]));
        }
        for it in &gaussians(9, 4, 1).unwrap().manifest.items {
            assert!(CLUSTER_NAMES.contains(&it.prompt.as_str()));
        }
        assert!(gaussians(4, 5, 1).is_err());
    }

    #[test]
    fn shapes_sit_in_their_quadrant() {
        let ds = shapes(64, 9);
        for (l, it) in ds.latents.iter().zip(&ds.manifest.items) {
            let (vy, hx) = ((it.label / 2) % 2, it.label % 2);
            for y in 0..8 {
                for x in 0..8 {
                    let v = l.data()[(y * 8 + x) * 4];
                    if v != 0.0 {
                        assert_eq!((y / 4, x / 4), (vy, hx));
                    }
                }
            }
        }
    }

    #[test]
    fn cluster_means_within_three_standard_errors() {
        let n = 3000;
        let ds = gaussians(n, 3, 5).unwrap();
        let per = (n / 3) as f64;
        let se = CLUSTER_STD / per.sqrt();
        let centroids = ds.centroids();
        let mut outside = 0;
        for (c, mu) in centroids.iter().zip(&ds.manifest.means) {
            for (a, b) in c.iter().zip(mu) {
                if (a - b).abs() > 3.0 * se {
                    outside += 1;
                }
            }
        }
        // 768 coordinates; 3 SE leaves about 0.27% outside by chance.
        assert!(outside <= 8, "{outside} coordinates outside 3 SE");
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [shapes(5, 1), shapes_video(3, 4, 2), gaussians(6, 2, 3).unwrap()] {
            ds.write(dir.path()).unwrap();
            assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
        }
        assert!(matches!(Dataset::read(&dir.path().join("missing")), Err(CliError::Usage(_))));
        fs::write(dir.path().join("latents.bin"), [0u8; 7]).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(CliError::Schema(_))));
    }
}
