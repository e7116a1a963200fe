//! Gradient-weighted class activation maps over the recorded feature
//! volumes, plus rendering of per-frame heatmaps as PGM images.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{BnMode, Tensor};

/// Default target layer: the attention-recalibrated output of the last
/// block, before the shortcut sum.
pub const DEFAULT_LAYER: &str = "block4_2/st";

/// Core map computation: channel weights are the global average of the
/// class-score gradient over each channel of `activation` (`[1,C,t,h,w]`),
/// the raw map is the ReLU of the weighted channel sum, and the result is
/// scaled into `[0,1]` by its maximum (all-zero maps stay all zero).
pub fn cam_from(activation: &Tensor, gradient: &Tensor) -> Result<Tensor> {
    let s = activation.shape();
    if s.len() != 5 || s[0] != 1 || gradient.shape() != s {
        return Err(Error::ShapeMismatch(format!(
            "activation {s:?} and gradient {:?} must both be [1,C,t,h,w]",
            gradient.shape()
        )));
    }
    let (c, plane) = (s[1], s[2] * s[3] * s[4]);
    let mut map = vec![0.0f64; plane];
    for ci in 0..c {
        let ch = &activation.data()[ci * plane..(ci + 1) * plane];
        let g = &gradient.data()[ci * plane..(ci + 1) * plane];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (m, &a) in map.iter_mut().zip(ch) {
            *m += weight * a as f64;
        }
    }
    let mut max = 0.0f64;
    for m in &mut map {
        *m = m.max(0.0);
        max = max.max(*m);
    }
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Tensor::new(s[2..].to_vec(), map.iter().map(|&m| (m * scale) as f32).collect())
}

/// Trilinear resampling of a `[T,H,W]` volume with half-pixel-centered
/// coordinates.
pub fn resize_trilinear(volume: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [T,H,W], got {s:?}")));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("zero output extent".into()));
    }
    let (st, sh, sw) = (s[0], s[1], s[2]);
    // floor index, next index, and fractional weight along one axis
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
                    .clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                (lo, (lo + 1).min(inp - 1), (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ct, ch, cw) = (coords(t, st), coords(h, sh), coords(w, sw));
    let mut out = Tensor::zeros(&[t, h, w]);
    let at = |ti: usize, hi: usize, wi: usize| volume.data()[(ti * sh + hi) * sw + wi] as f64;
    for (to, &(t0, t1, ft)) in ct.iter().enumerate() {
        for (ho, &(h0, h1, fh)) in ch.iter().enumerate() {
            for (wo, &(w0, w1, fw)) in cw.iter().enumerate() {
                let lerp = |a: f64, b: f64, f: f32| a + (b - a) * f as f64;
                let c00 = lerp(at(t0, h0, w0), at(t1, h0, w0), ft);
                let c01 = lerp(at(t0, h0, w1), at(t1, h0, w1), ft);
                let c10 = lerp(at(t0, h1, w0), at(t1, h1, w0), ft);
                let c11 = lerp(at(t0, h1, w1), at(t1, h1, w1), ft);
                let c0 = lerp(c00, c10, fh);
                let c1 = lerp(c01, c11, fh);
                out.set(&[to, ho, wo], lerp(c0, c1, fw) as f32);
            }
        }
    }
    Ok(out)
}

/// Class activation map for one clip (`[3,T,H,W]`) at the named feature
/// volume, upsampled to the clip's own `[T,H,W]`. Inference-mode forward;
/// BN running statistics are left untouched.
pub fn grad_cam(model: &mut Model, clip: &Tensor, layer: &str, class: usize) -> Result<Tensor> {
    let s = clip.shape().to_vec();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::ShapeMismatch(format!("clip must be [3,T,H,W], got {s:?}")));
    }
    if class >= model.config.num_classes {
        return Err(Error::LabelOutOfRange { label: class, classes: model.config.num_classes });
    }
    let mut tape = crate::autodiff::Tape::new();
    let input = tape.constant(clip.reshape(&[1, s[0], s[1], s[2], s[3]])?);
    let pass = model.forward_on(&mut tape, input, BnMode::Infer)?;
    let target = pass
        .activations
        .iter()
        .find(|(name, _)| name == layer)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let known: Vec<&str> = pass.activations.iter().map(|(n, _)| n.as_str()).collect();
            Error::UnknownLayer(format!("{layer:?}; available: {}", known.join(", ")))
        })?;
    let score = tape.select(pass.logits, class)?;
    let grads = tape.backward_keeping(score, &[target])?;
    let gradient = grads
        .get(target)
        .ok_or_else(|| Error::UnknownLayer(format!("no gradient reached {layer:?}")))?;
    let map = cam_from(tape.value(target), gradient)?;
    resize_trilinear(&map, s[1], s[2], s[3])
}

/// Writes one PGM per frame (`{stem}-f{index}.pgm`); returns the paths.
pub fn export_frames(dir: &Path, stem: &str, map: &Tensor) -> Result<Vec<PathBuf>> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("saliency volume must be [T,H,W], got {s:?}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, plane) = (s[0], s[1] * s[2]);
    let mut paths = Vec::with_capacity(t);
    for ti in 0..t {
        let frame = Tensor::new(
            vec![s[1], s[2]],
            map.data()[ti * plane..(ti + 1) * plane].to_vec(),
        )?;
        let path = dir.join(format!("{stem}-f{ti}.pgm"));
        crate::data::write_pgm(&path, &frame)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, ModelVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cam_matches_hand_computation() {
        // Two channels over a 1x1x2 grid.
        // weights: w0 = mean(1, 3) = 2, w1 = mean(-2, -2) = -2
        // raw map: 2*[1, 2] + (-2)*[0, 1] = [2, 2]; relu then /max -> [1, 1]
        let a = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let g = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 3.0, -2.0, -2.0]).unwrap();
        let map = cam_from(&a, &g).unwrap();
        assert_eq!(map.shape(), &[1, 1, 2]);
        assert!((map.data()[0] - 1.0).abs() < 1e-5);
        assert!((map.data()[1] - 1.0).abs() < 1e-5);

        // asymmetric case: raw = 2*[1,2] - 2*[2,0] = [-2, 4] -> relu [0,4] -> [0,1]
        let a2 = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 2.0, 0.0]).unwrap();
        let map = cam_from(&a2, &g).unwrap();
        assert!(map.data()[0].abs() < 1e-6);
        assert!((map.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_gives_all_zero_map() {
        let a = Tensor::new(vec![1, 2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let g = Tensor::zeros(&[1, 2, 1, 2, 2]);
        let map = cam_from(&a, &g).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::new(vec![1, 3, 2, 2, 2], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let g = Tensor::new(vec![1, 3, 2, 2, 2], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let base = cam_from(&a, &g).unwrap();
        let scaled = cam_from(&a, &g.map(|v| 7.5 * v)).unwrap();
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(base.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn trilinear_keeps_constants_and_interpolates_midpoints() {
        let c = Tensor::full(&[2, 2, 2], 0.7);
        let up = resize_trilinear(&c, 3, 5, 4).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        // [1,1,2] volume [0,1] doubled in width: centers at 0, 1/3, 2/3, 1 of the source span
        let line = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = resize_trilinear(&line, 1, 1, 4).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", up.data());
        }
    }

    fn tiny_model() -> crate::model::Model {
        build_model(
            ModelConfig {
                variant: ModelVariant::MeraNet18,
                stage_channels: [4, 4, 4, 4],
                st_kernel: 3,
                ..ModelConfig::default()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn grad_cam_runs_end_to_end_on_a_small_model() {
        let mut model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = Tensor::new(
            vec![3, 4, 8, 8],
            (0..3 * 4 * 64).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let map = grad_cam(&mut model, &clip, DEFAULT_LAYER, 1).unwrap();
        assert_eq!(map.shape(), &[4, 8, 8]);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(map.is_finite());

        assert!(matches!(
            grad_cam(&mut model, &clip, "block9_9/st", 1),
            Err(Error::UnknownLayer(_))
        ));
        assert!(grad_cam(&mut model, &clip, DEFAULT_LAYER, 9).is_err());
    }

    #[test]
    fn exported_frames_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        let paths = export_frames(dir.path(), "demo", &map).unwrap();
        assert_eq!(paths.len(), 2);
        for (ti, p) in paths.iter().enumerate() {
            let back = crate::data::read_pgm(p).unwrap();
            assert_eq!(back.shape(), &[2, 3]);
            for (i, &v) in back.data().iter().enumerate() {
                let orig = map.data()[ti * 6 + i];
                assert!((v - orig).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
