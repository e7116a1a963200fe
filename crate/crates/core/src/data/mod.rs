//! Dataset manifest handling, clip extraction and preprocessing, splits,
//! augmentation, and the raw tensor codec.
//!
//! A clip is cut around its apex frame: `T` frame indices from
//! `apex - floor(T/2)` through `apex + ceil(T/2) - 1`, clamped to the valid
//! range so edge frames replicate. Frames are bilinearly resized to
//! 112x112, stacked to `[3,T,112,112]`, and normalized with per-channel
//! statistics computed over the training split.

mod codec;
mod ppm;
pub mod synthetic;

pub use codec::{read_tensor, write_tensor, FORMAT_VERSION, MAGIC};
pub use ppm::{read_pgm, read_ppm, write_pgm};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_HEIGHT: usize = 112;
pub const CLIP_WIDTH: usize = 112;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One clip in the manifest: either raw frames to preprocess or a path to
/// an already preprocessed tensor file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    /// Directory holding this clip's frames, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Ordered frame file names (P6 PPM).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
    /// Apex frame position; the middle frame is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apex: Option<usize>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Preprocessed `[3,T,112,112]` tensor file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<[f32; 3]>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::BadManifest("no classes".into()));
        }
        for (i, clip) in self.clips.iter().enumerate() {
            if clip.label >= self.classes.len() {
                return Err(Error::BadManifest(format!(
                    "clip {i}: label {} out of range for {} classes",
                    clip.label,
                    self.classes.len()
                )));
            }
            if let (Some(apex), false) = (clip.apex, clip.frames.is_empty()) {
                if apex >= clip.frames.len() {
                    return Err(Error::BadManifest(format!(
                        "clip {i}: apex {apex} out of range for {} frames",
                        clip.frames.len()
                    )));
                }
            }
            if clip.frames.is_empty() && clip.tensor.is_none() {
                return Err(Error::BadManifest(format!(
                    "clip {i}: neither frames nor a preprocessed tensor"
                )));
            }
        }
        Ok(())
    }
}

/// One preprocessed sample.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub tensor: Tensor,
    pub label: usize,
    pub source: String,
}

/// Frame indices of a `t`-frame window centered on the apex, clamped to
/// `[0, frame_count)` so edge frames replicate.
pub fn extract_clip(frame_count: usize, apex: usize, t: usize) -> Result<Vec<usize>> {
    if frame_count == 0 || t == 0 {
        return Err(Error::InvalidArgument("empty clip window".into()));
    }
    if apex >= frame_count {
        return Err(Error::InvalidArgument(format!(
            "apex {apex} out of range for {frame_count} frames"
        )));
    }
    let start = apex as i64 - (t / 2) as i64;
    Ok((0..t)
        .map(|i| (start + i as i64).clamp(0, frame_count as i64 - 1) as usize)
        .collect())
}

/// Bilinear resize of a `[C,H,W]` image with half-pixel-center alignment.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("resize expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let scale_h = h as f64 / out_h as f64;
    let scale_w = w as f64 / out_w as f64;
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v = (plane[y0 * w + x0] as f64) * (1.0 - fy) * (1.0 - fx)
                    + (plane[y0 * w + x1] as f64) * (1.0 - fy) * fx
                    + (plane[y1 * w + x0] as f64) * fy * (1.0 - fx)
                    + (plane[y1 * w + x1] as f64) * fy * fx;
                out.data_mut()[ci * out_h * out_w + oy * out_w + ox] = v as f32;
            }
        }
    }
    Ok(out)
}

/// `(x - mean_c) / std_c` per channel over a `[3,T,H,W]` clip.
pub fn normalize_sample(clip: &Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Result<Tensor> {
    if clip.shape().len() != 4 || clip.shape()[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "normalize expects [3,T,H,W], got {:?}",
            clip.shape()
        )));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument(format!("non-positive std {std:?}")));
    }
    let plane: usize = clip.shape()[1..].iter().product();
    let mut out = clip.clone();
    for c in 0..3 {
        let (m, s) = (mean[c], std[c]);
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Reverses the width axis of a `[C,T,H,W]` clip.
pub fn hflip(clip: &Tensor) -> Tensor {
    let s = clip.shape();
    let w = s[s.len() - 1];
    let rows = clip.len() / w;
    let mut out = clip.clone();
    for r in 0..rows {
        out.data_mut()[r * w..(r + 1) * w].reverse();
    }
    out
}

/// Horizontal flip with probability 0.5.
pub fn augment_hflip(clip: &Tensor, rng: &mut impl Rng) -> Tensor {
    if rng.gen_bool(0.5) {
        hflip(clip)
    } else {
        clip.clone()
    }
}

/// Deterministic per-clip augmentation stream derived from the master seed,
/// the epoch, and the clip id, so parallel loading cannot reorder draws.
pub fn augment_rng(master_seed: u64, epoch: usize, clip_id: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&(clip_id as u64).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Assigns stratified split tags: per class, `1 - train_frac` of samples go
/// to test, and `val_frac_of_train` of the remaining pool to validation.
/// Rounding is half-up per class, so each split's per-class share deviates
/// from the global fraction by at most one sample.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    train_frac: f64,
    val_frac_of_train: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..1.0).contains(&(1.0 - train_frac)) || train_frac <= 0.0 || train_frac >= 1.0 {
        return Err(Error::InvalidArgument("train_frac must be in (0,1)".into()));
    }
    if val_frac_of_train <= 0.0 || val_frac_of_train >= 1.0 {
        return Err(Error::InvalidArgument("val_frac_of_train must be in (0,1)".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, clip) in manifest.clips.iter().enumerate() {
        by_class.entry(clip.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (&label, indices) in &mut by_class {
        if indices.len() < 3 {
            return Err(Error::TooFewSamples(
                manifest
                    .classes
                    .get(label)
                    .cloned()
                    .unwrap_or_else(|| label.to_string()),
            ));
        }
        // Fisher-Yates with the shared seeded stream
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let n = indices.len();
        let n_test = round_half_up(n as f64 * (1.0 - train_frac)).clamp(1, n - 2);
        let pool = n - n_test;
        let n_val = round_half_up(pool as f64 * val_frac_of_train).clamp(1, pool - 1);
        for (pos, &idx) in indices.iter().enumerate() {
            manifest.clips[idx].split = Some(if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(())
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Preprocesses one raw clip entry: decode PPM frames, apex-centered window,
/// resize, stack, normalize.
pub fn preprocess_entry(
    entry: &ClipEntry,
    base_dir: &Path,
    t: usize,
    mean: &[f32; 3],
    std: &[f32; 3],
) -> Result<Tensor> {
    let clip = stack_frames(entry, base_dir, t)?;
    normalize_sample(&clip, mean, std)
}

/// Decodes, windows, resizes and stacks an entry's frames into
/// `[3,t,112,112]` without normalization.
pub fn stack_frames(entry: &ClipEntry, base_dir: &Path, t: usize) -> Result<Tensor> {
    if entry.frames.is_empty() {
        return Err(Error::BadManifest("clip entry has no frames".into()));
    }
    let apex = entry.apex.unwrap_or(entry.frames.len() / 2);
    let indices = extract_clip(entry.frames.len(), apex, t)?;
    let dir = match &entry.dir {
        Some(d) => base_dir.join(d),
        None => base_dir.to_path_buf(),
    };
    let mut cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut out = Tensor::zeros(&[3, t, CLIP_HEIGHT, CLIP_WIDTH]);
    let plane = CLIP_HEIGHT * CLIP_WIDTH;
    for (ti, &fi) in indices.iter().enumerate() {
        if !cache.contains_key(&fi) {
            let img = read_ppm(&dir.join(&entry.frames[fi]))?;
            cache.insert(fi, resize_bilinear(&img, CLIP_HEIGHT, CLIP_WIDTH)?);
        }
        let frame = &cache[&fi];
        for c in 0..3 {
            let src = &frame.data()[c * plane..(c + 1) * plane];
            let dst = (c * t + ti) * plane;
            out.data_mut()[dst..dst + plane].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation over a set of unnormalized clips.
pub fn channel_statistics(clips: &[Tensor]) -> Result<([f32; 3], [f32; 3])> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips for statistics".into()));
    }
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for clip in clips {
        let plane = clip.len() / 3;
        count += plane;
        for c in 0..3 {
            for &v in &clip.data()[c * plane..(c + 1) * plane] {
                mean[c] += v as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0f64; 3];
    for clip in clips {
        let plane = clip.len() / 3;
        for c in 0..3 {
            for &v in &clip.data()[c * plane..(c + 1) * plane] {
                let d = v as f64 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        std[c] = ((var[c] / count as f64).sqrt() as f32).max(1e-6);
    }
    Ok(([mean[0] as f32, mean[1] as f32, mean[2] as f32], std))
}

/// Loads every clip of one split, preferring preprocessed tensor files and
/// falling back to raw frames (which requires manifest statistics).
pub fn load_split(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Split,
    t: usize,
) -> Result<Vec<ClipSample>> {
    let mut samples = Vec::new();
    for (i, entry) in manifest.clips.iter().enumerate() {
        if entry.split != Some(split) {
            continue;
        }
        let tensor = match &entry.tensor {
            Some(rel) => read_tensor(&base_dir.join(rel))?,
            None => {
                let (mean, std) = match (manifest.mean, manifest.std) {
                    (Some(m), Some(s)) => (m, s),
                    _ => {
                        return Err(Error::BadManifest(
                            "raw-frame loading needs manifest mean/std; run preprocess first"
                                .into(),
                        ))
                    }
                };
                preprocess_entry(entry, base_dir, t, &mean, &std)?
            }
        };
        if !tensor.is_finite() {
            return Err(Error::BadManifest(format!("clip {i} has non-finite values")));
        }
        samples.push(ClipSample { tensor, label: entry.label, source: format!("clip{i}") });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_clip_examples() {
        assert_eq!(
            extract_clip(10, 4, 16).unwrap(),
            vec![0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9]
        );
        assert_eq!(extract_clip(16, 8, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(extract_clip(1, 0, 16).unwrap(), vec![0; 16]);
        assert!(extract_clip(10, 10, 16).is_err());
    }

    #[test]
    fn extract_clip_is_sorted_and_valid() {
        for l in 1..20 {
            for apex in 0..l {
                let idx = extract_clip(l, apex, 16).unwrap();
                assert_eq!(idx.len(), 16);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                assert!(idx.iter().all(|&i| i < l));
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::new(
            vec![3, 4, 4],
            (0..48).map(|v| v as f32 / 48.0).collect(),
        )
        .unwrap();
        let same = resize_bilinear(&img, 4, 4).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = Tensor::full(&[3, 5, 9], 7.0);
        let out = resize_bilinear(&flat, 112, 112).unwrap();
        assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn resize_2x2_to_4x4_hand_oracle() {
        // half-pixel mapping: src = (d + 0.5)/2 - 0.5 -> [-0.25, 0.25, 0.75, 1.25]
        // clamped to [0,1]; weights therefore 0, 0.25, 0.75, 1 along each axis.
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut rgb = Tensor::zeros(&[3, 2, 2]);
        rgb.data_mut()[..4].copy_from_slice(img.data());
        let out = resize_bilinear(&rgb, 4, 4).unwrap();
        let fy = [0.0f64, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let want = 2.0 * fy[y] + fy[x];
                assert!(
                    (out.at(&[0, y, x]) as f64 - want).abs() < 1e-6,
                    "({y},{x}): got {} want {want}",
                    out.at(&[0, y, x])
                );
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let clip = Tensor::full(&[3, 2, 2, 2], 3.0);
        let out = normalize_sample(&clip, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(out, clip);
        let out = normalize_sample(&clip, &[3.0; 3], &[2.0; 3]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(normalize_sample(&clip, &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn normalize_with_own_statistics_standardizes() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clips: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::new(
                    vec![3, 2, 8, 8],
                    (0..384).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
                )
                .unwrap()
            })
            .collect();
        let (mean, std) = channel_statistics(&clips).unwrap();
        let normalized: Vec<Tensor> =
            clips.iter().map(|c| normalize_sample(c, &mean, &std).unwrap()).collect();
        let (m2, s2) = channel_statistics(&normalized).unwrap();
        for c in 0..3 {
            assert!(m2[c].abs() < 1e-4);
            assert!((s2[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn hflip_involution_and_symmetry() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let clip = Tensor::new(
            vec![3, 2, 4, 4],
            (0..96).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        assert_eq!(hflip(&hflip(&clip)), clip);

        // width-symmetric clip unchanged
        let mut sym = clip.clone();
        for r in 0..24 {
            let row: Vec<f32> = sym.data()[r * 4..r * 4 + 4].to_vec();
            sym.data_mut()[r * 4 + 2] = row[1];
            sym.data_mut()[r * 4 + 3] = row[0];
        }
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn hflip_frequency_near_half() {
        let clip = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut flips = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            if augment_hflip(&clip, &mut rng) != clip {
                flips += 1;
            }
        }
        let freq = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "flip frequency {freq}");
    }

    fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
        let mut clips = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                clips.push(ClipEntry {
                    dir: None,
                    frames: vec!["f.ppm".into()],
                    apex: Some(0),
                    label,
                    split: None,
                    tensor: None,
                });
            }
        }
        DatasetManifest {
            classes: (0..counts.len()).map(|i| format!("c{i}")).collect(),
            mean: None,
            std: None,
            clips,
        }
    }

    #[test]
    fn split_balanced_40_samples() {
        let mut m = manifest_with_counts(&[20, 20]);
        split_dataset(&mut m, 0.75, 0.2, 7).unwrap();
        for label in 0..2 {
            let test = m
                .clips
                .iter()
                .filter(|c| c.label == label && c.split == Some(Split::Test))
                .count();
            let pool = m
                .clips
                .iter()
                .filter(|c| c.label == label && c.split != Some(Split::Test))
                .count();
            assert_eq!(test, 5);
            assert_eq!(pool, 15);
        }
    }

    #[test]
    fn split_is_seed_deterministic_disjoint_exhaustive() {
        let mut a = manifest_with_counts(&[18, 22, 17]);
        let mut b = manifest_with_counts(&[18, 22, 17]);
        split_dataset(&mut a, 0.8, 0.2, 42).unwrap();
        split_dataset(&mut b, 0.8, 0.2, 42).unwrap();
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.split, y.split);
        }
        assert!(a.clips.iter().all(|c| c.split.is_some()));
        // per-class test counts within one sample of 20%
        let test_counts: Vec<usize> = (0..3)
            .map(|l| {
                a.clips
                    .iter()
                    .filter(|c| c.label == l && c.split == Some(Split::Test))
                    .count()
            })
            .collect();
        assert_eq!(test_counts[0], 4); // round(18 * .2) = 4
        assert!(test_counts[1] == 4 || test_counts[1] == 5); // 22 * .2 = 4.4
        assert_eq!(test_counts[2], 3); // round(17 * .2) = 3
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let mut m = manifest_with_counts(&[10, 2]);
        assert!(matches!(split_dataset(&mut m, 0.8, 0.2, 1), Err(Error::TooFewSamples(_))));
    }
}
