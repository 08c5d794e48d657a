//! Weakly-supervised sign detection. A small conv backbone scores each
//! 8x8-downsampled region of the input; the maximum region score stands in
//! for the image-level disease probability, supervised by binary labels
//! only (region-score-max).

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::nn::blocks::Conv2dLayer;
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::{collect_grads, ParamStore};
use crate::rng::substream;
use crate::synthdata::{LoadedDataset, Split};

/// Region scores in [0,1] at 1/8 input resolution.
pub type SignMap = Array2<f32>;

/// Thresholded sign map; `mask[i,j] = 1` iff `score > tau` (strict).
#[derive(Debug, Clone, PartialEq)]
pub struct SignMask {
    pub mask: Array2<u8>,
    pub tau: f32,
}

pub const SCORE_CLAMP: f32 = 1e-6;

/// Binary cross-entropy of the max region score against a binary label.
/// The probability is clamped to [1e-6, 1 - 1e-6].
pub fn detection_loss(scores: &SignMap, label: u8) -> f32 {
    let p = scores.iter().fold(f32::MIN, |m, &v| m.max(v));
    let p = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let y = label as f32;
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Strict threshold; `tau` must lie inside (0,1).
pub fn threshold_mask(scores: &SignMap, tau: f32) -> Result<SignMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0,1)")));
    }
    Ok(SignMask {
        mask: scores.mapv(|s| u8::from(s > tau)),
        tau,
    })
}

/// Spatial gating: `out[c,i,j] = f[c,i,j] * mask[i,j]`.
pub fn mask_features(features: &Array3<f32>, mask: &SignMask) -> Result<Array3<f32>> {
    let (c, h, w) = features.dim();
    if mask.mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} vs features ({h},{w})",
            mask.mask.dim()
        )));
    }
    let mut out = features.clone();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ci, i, j]] *= mask.mask[[i, j]] as f32;
            }
        }
    }
    Ok(out)
}

/// Conv backbone (3 stride-2 stages) plus a per-region linear scorer with
/// a sigmoid.
pub struct Detector<T: Scalar> {
    pub store: ParamStore<T>,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    scorer: Conv2dLayer,
}

impl<T: Scalar> Detector<T> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "detector-init");
        let conv1 = Conv2dLayer::new(&mut store, &mut rng, "det.conv1", 3, 16, 3, 2, 1);
        let conv2 = Conv2dLayer::new(&mut store, &mut rng, "det.conv2", 16, 32, 3, 2, 1);
        let conv3 = Conv2dLayer::new(&mut store, &mut rng, "det.conv3", 32, 64, 3, 2, 1);
        let scorer = Conv2dLayer::new(&mut store, &mut rng, "det.score", 64, 1, 1, 1, 0);
        Detector {
            store,
            conv1,
            conv2,
            conv3,
            scorer,
        }
    }

    /// Batch scores on-tape: (n,3,h,w) -> (n, h/8, w/8) in [0,1].
    pub fn scores_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let h = self.conv1.forward(tape, &self.store, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, &self.store, h);
        let h = tape.relu(h);
        let h = self.conv3.forward(tape, &self.store, h);
        let h = tape.relu(h);
        let s = self.scorer.forward(tape, &self.store, h);
        let s = tape.sigmoid(s);
        let shape = tape.shape(s).to_vec(); // (n,1,h8,w8)
        tape.reshape(s, &[shape[0], shape[2], shape[3]])
    }
}

impl Detector<f32> {
    /// Region scores for one image; dims must be divisible by 8.
    pub fn score_regions(&self, image: &Image) -> Result<SignMap> {
        let (_, h, w) = image.dim();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by 8"
            )));
        }
        let batch = imageio::batch(&[image]);
        let mut tape = Tape::new();
        let x = tape.constant(batch.into_dyn());
        let s = self.scores_on_tape(&mut tape, x);
        let v = tape.value(s);
        Ok(v
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("sign map rank"))
    }
}

/// In-graph region-score-max BCE over a batch.
pub fn detection_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    labels: &[u8],
) -> Var {
    let n = tape.shape(scores)[0];
    assert_eq!(n, labels.len());
    let p = tape.max_per_item(scores);
    let eps = crate::autodiff::c::<T>(SCORE_CLAMP as f64);
    let p = tape.clamp(p, eps, T::one() - eps);
    let y = tape.constant(
        ArrayD::from_shape_vec(
            ndarray::IxDyn(&[n]),
            labels
                .iter()
                .map(|&l| crate::autodiff::c::<T>(l as f64))
                .collect(),
        )
        .unwrap(),
    );
    let ones = tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[n]), T::one()));
    let ln_p = tape.ln(p);
    let one_minus_p = tape.sub(ones, p);
    let ln_1p = tape.ln(one_minus_p);
    let one_minus_y = {
        let o = tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[n]), T::one()));
        tape.sub(o, y)
    };
    let t1 = tape.mul(y, ln_p);
    let t2 = tape.mul(one_minus_y, ln_1p);
    let s = tape.add(t1, t2);
    let m = tape.mean_all(s);
    tape.neg(m)
}

/// Area-fraction random crop (30%..100%) resized back to the canvas.
fn random_crop<R: Rng>(img: &Image, min_scale: f64, rng: &mut R) -> Image {
    let (_, h, w) = img.dim();
    let area = min_scale + rng.gen::<f64>() * (1.0 - min_scale);
    let side_frac = area.sqrt();
    let ch = ((h as f64 * side_frac).round() as usize).clamp(8, h);
    let cw = ((w as f64 * side_frac).round() as usize).clamp(8, w);
    let top = rng.gen_range(0..=(h - ch));
    let left = rng.gen_range(0..=(w - cw));
    imageio::crop_resize(img, top, left, ch, cw, h, w)
}

pub struct DetectorEval {
    pub mean_iou: f64,
    pub diseased_mean_max: f64,
    pub healthy_mean_max: f64,
    pub n_diseased: usize,
    pub n_healthy: usize,
}

impl DetectorEval {
    pub fn score_gap(&self) -> f64 {
        self.diseased_mean_max - self.healthy_mean_max
    }
}

/// IoU between the x8-upsampled sign mask and the pixel-level lesion mask.
pub fn mask_iou(sign: &SignMask, lesion: &Array2<u8>) -> f64 {
    let (h8, w8) = sign.mask.dim();
    let (h, w) = lesion.dim();
    assert_eq!((h8 * 8, w8 * 8), (h, w), "mask scale mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..h {
        for j in 0..w {
            let s = sign.mask[[i / 8, j / 8]] != 0;
            let l = lesion[[i, j]] != 0;
            if s && l {
                inter += 1;
            }
            if s || l {
                union += 1;
            }
        }
    }
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Train on binary labels from the train split; evaluation goes through
/// [`evaluate_detector`].
pub fn train_detector(
    dataset: &LoadedDataset,
    cfg: &RunConfig,
) -> Result<Detector<f32>> {
    let mut detector = Detector::<f32>::new(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: 1e-8,
        weight_decay: cfg.train.weight_decay,
    });
    let train_idx = dataset.indices_in(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::State("empty train split".into()));
    }
    let mut rng = substream(cfg.seed, "detector-train");
    let batch = cfg.train.detector_batch;
    for _step in 0..cfg.train.detector_steps {
        let mut images: Vec<Image> = Vec::with_capacity(batch);
        let mut labels: Vec<u8> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = train_idx[rng.gen_range(0..train_idx.len())];
            let mut img = dataset.images[idx].clone();
            img = random_crop(&img, cfg.train.crop_min_scale, &mut rng);
            if rng.gen::<f64>() < cfg.train.flip_prob {
                img = imageio::flip_horizontal(&img);
            }
            images.push(img);
            labels.push(dataset.manifest.records[idx].label);
        }
        let refs: Vec<&Image> = images.iter().collect();
        let x = imageio::batch(&refs);
        let mut tape = Tape::new();
        let xv = tape.constant(x.into_dyn());
        let scores = detector.scores_on_tape(&mut tape, xv);
        let loss = detection_loss_on_tape(&mut tape, scores, &labels);
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("detector step {_step}: {lv}")));
        }
        tape.backward(loss);
        let grads = collect_grads(&tape);
        opt.step(&mut detector.store, &grads);
    }
    Ok(detector)
}

/// Sign-map quality on a split: IoU on diseased samples and the max-score
/// gap between diseased and healthy images.
pub fn evaluate_detector(
    detector: &Detector<f32>,
    dataset: &LoadedDataset,
    split: Split,
    tau: f32,
) -> Result<DetectorEval> {
    let mut iou_sum = 0.0;
    let mut diseased_max = 0.0;
    let mut healthy_max = 0.0;
    let mut n_d = 0usize;
    let mut n_h = 0usize;
    for idx in dataset.indices_in(split) {
        let rec = &dataset.manifest.records[idx];
        let scores = detector.score_regions(&dataset.images[idx])?;
        let max = scores.iter().fold(f32::MIN, |m, &v| m.max(v)) as f64;
        if rec.label == 1 {
            let mask = threshold_mask(&scores, tau)?;
            iou_sum += mask_iou(&mask, &dataset.masks[idx]);
            diseased_max += max;
            n_d += 1;
        } else {
            healthy_max += max;
            n_h += 1;
        }
    }
    Ok(DetectorEval {
        mean_iou: if n_d > 0 { iou_sum / n_d as f64 } else { 0.0 },
        diseased_mean_max: if n_d > 0 { diseased_max / n_d as f64 } else { 0.0 },
        healthy_mean_max: if n_h > 0 { healthy_max / n_h as f64 } else { 0.0 },
        n_diseased: n_d,
        n_healthy: n_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn score_map_shape_and_range() {
        let det = Detector::<f32>::new(0);
        let img = Image::from_elem((3, 64, 64), 0.1);
        let s = det.score_regions(&img).unwrap();
        assert_eq!(s.dim(), (8, 8));
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn non_divisible_dims_are_a_shape_error() {
        let det = Detector::<f32>::new(0);
        let img = Image::from_elem((3, 60, 64), 0.0);
        assert!(matches!(det.score_regions(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_of_perfect_positive_is_near_zero() {
        let s = arr2(&[[1.0 - 1e-6, 0.1], [0.0, 0.3]]);
        assert!(detection_loss(&s, 1) < 1e-5);
    }

    #[test]
    fn loss_at_half_is_ln_two() {
        let s = arr2(&[[0.5, 0.2], [0.1, 0.3]]);
        let loss = detection_loss(&s, 1);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn max_matches_exhaustive_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let s = SignMap::from_shape_fn((8, 8), |_| rng.gen::<f32>());
        // brute-force loop oracle over all 64 entries
        let mut brute = f32::MIN;
        for i in 0..8 {
            for j in 0..8 {
                if s[[i, j]] > brute {
                    brute = s[[i, j]];
                }
            }
        }
        let y = 1u8;
        let expected = -(brute.clamp(1e-6, 1.0 - 1e-6)).ln();
        assert!((detection_loss(&s, y) - expected).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_strict() {
        let s = arr2(&[[0.5, 0.3], [0.5, 0.7]]);
        let m = threshold_mask(&s, 0.5).unwrap();
        assert_eq!(m.mask, arr2(&[[0u8, 0], [0, 1]]));
        let empty = threshold_mask(&SignMap::from_elem((4, 4), 0.3), 0.5).unwrap();
        assert!(empty.mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        let s = SignMap::zeros((4, 4));
        assert!(threshold_mask(&s, 0.0).is_err());
        assert!(threshold_mask(&s, 1.0).is_err());
        assert!(threshold_mask(&s, -0.1).is_err());
    }

    #[test]
    fn mask_features_identity_and_zero() {
        let f = Array3::from_shape_fn((4, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f32);
        let ones = SignMask {
            mask: Array2::from_elem((3, 3), 1),
            tau: 0.5,
        };
        let zeros = SignMask {
            mask: Array2::zeros((3, 3)),
            tau: 0.5,
        };
        assert_eq!(mask_features(&f, &ones).unwrap(), f);
        assert!(mask_features(&f, &zeros)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let bad = SignMask {
            mask: Array2::zeros((2, 3)),
            tau: 0.5,
        };
        assert!(matches!(mask_features(&f, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_features_matches_scalar_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let f = Array3::from_shape_fn((6, 4, 5), |_| rng.gen::<f32>() - 0.5);
        let m = SignMask {
            mask: Array2::from_shape_fn((4, 5), |_| u8::from(rng.gen::<f32>() > 0.5)),
            tau: 0.5,
        };
        let out = mask_features(&f, &m).unwrap();
        for c in 0..6 {
            for i in 0..4 {
                for j in 0..5 {
                    let expect = f[[c, i, j]] * m.mask[[i, j]] as f32;
                    assert_eq!(out[[c, i, j]], expect);
                }
            }
        }
    }

    #[test]
    fn bce_is_monotone_in_p() {
        // decreasing for y=1, increasing for y=0, on a grid
        let grid: Vec<f32> = (1..20).map(|k| k as f32 / 20.0).collect();
        for w in grid.windows(2) {
            let s_lo = SignMap::from_elem((1, 1), w[0]);
            let s_hi = SignMap::from_elem((1, 1), w[1]);
            assert!(detection_loss(&s_hi, 1) < detection_loss(&s_lo, 1));
            assert!(detection_loss(&s_hi, 0) > detection_loss(&s_lo, 0));
        }
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let scores = Array3::from_shape_fn((3, 8, 8), |_| rng.gen::<f32>());
        let labels = [1u8, 0, 1];
        let mut expected = 0.0f32;
        for (n, &l) in labels.iter().enumerate() {
            let map: SignMap = scores.index_axis(Axis(0), n).to_owned();
            expected += detection_loss(&map, l);
        }
        expected /= 3.0;
        let mut tape = Tape::<f32>::new();
        let s = tape.constant(scores.into_dyn());
        let loss = detection_loss_on_tape(&mut tape, s, &labels);
        assert!((tape.scalar(loss) - expected).abs() < 1e-6);
    }

    proptest! {
        /// Mask monotonicity: lower thresholds give supersets.
        #[test]
        fn masks_shrink_as_tau_grows(values in proptest::collection::vec(0.0f32..1.0, 16),
                                     t1 in 0.05f32..0.9, dt in 0.01f32..0.09) {
            let s = SignMap::from_shape_vec((4, 4), values).unwrap();
            let t2 = t1 + dt;
            let m1 = threshold_mask(&s, t1).unwrap();
            let m2 = threshold_mask(&s, t2).unwrap();
            for (a, b) in m1.mask.iter().zip(m2.mask.iter()) {
                prop_assert!(a >= b, "mask at lower tau must contain higher-tau mask");
            }
        }
    }
}
