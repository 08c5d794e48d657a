//! Sign-region substitution, seam refinement, and image decoding.
//!
//! Substitution is convex masking: with a binary mask it is exact
//! replacement of anonymized features by sign-preserving ones; a soft mask
//! (raw scores) is available behind a config flag for ablations. The
//! refiner is two transformer blocks; the decoder is the fixed
//! residual/upsample sequence ending in a tanh-bounded RGB projection.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::blocks::{Conv2dLayer, ResidualBlock, UpsampleBlock};
use crate::nn::transformer::{BlockConfig, TransformerBlock};
use crate::nn::{init, ParamId, ParamStore};
use crate::sign_detector::SignMask;

/// Feature map after sign-region substitution, bundled with the mask that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub features: Array3<f32>,
    pub mask: SignMask,
}

/// `out[c,i,j] = m[i,j]*sign[c,i,j] + (1-m[i,j])*protected[c,i,j]`.
pub fn substitute(
    protected: &Array3<f32>,
    sign: &Array3<f32>,
    mask: &SignMask,
) -> Result<FusedFeatures> {
    let (c, h, w) = protected.dim();
    if sign.dim() != (c, h, w) {
        return Err(Error::Shape(format!(
            "sign features {:?} vs protected {:?}",
            sign.dim(),
            protected.dim()
        )));
    }
    if mask.mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} vs features ({h},{w})",
            mask.mask.dim()
        )));
    }
    let mut features = protected.clone();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let m = mask.mask[[i, j]] as f32;
                features[[ci, i, j]] = m * sign[[ci, i, j]] + (1.0 - m) * protected[[ci, i, j]];
            }
        }
    }
    Ok(FusedFeatures {
        features,
        mask: mask.clone(),
    })
}

/// In-graph convex masking with an arbitrary (possibly soft) mask in
/// [0,1]: `m*sign + (1-m)*protected`. The mask enters as a constant.
pub fn substitute_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    protected: Var,
    sign: Var,
    mask: &Array2<f32>,
) -> Var {
    let n = tape.shape(protected)[0];
    let (h, w) = mask.dim();
    let mut m = ndarray::Array3::<T>::zeros((n, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                m[[ni, i, j]] = crate::autodiff::c::<T>(mask[[i, j]] as f64);
            }
        }
    }
    let mv = tape.constant(m.clone().into_dyn());
    let inv = tape.constant(m.mapv(|v| T::one() - v).into_dyn());
    let a = tape.mul_chan_broadcast(sign, mv);
    let b = tape.mul_chan_broadcast(protected, inv);
    tape.add(a, b)
}

/// Per-item masks variant of [`substitute_on_tape`].
pub fn substitute_batch_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    protected: Var,
    sign: Var,
    masks: &[Array2<f32>],
) -> Var {
    let n = tape.shape(protected)[0];
    assert_eq!(n, masks.len());
    let (h, w) = masks[0].dim();
    let mut m = ndarray::Array3::<T>::zeros((n, h, w));
    for (ni, mask) in masks.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                m[[ni, i, j]] = crate::autodiff::c::<T>(mask[[i, j]] as f64);
            }
        }
    }
    let mv = tape.constant(m.clone().into_dyn());
    let inv = tape.constant(m.mapv(|v| T::one() - v).into_dyn());
    let a = tape.mul_chan_broadcast(sign, mv);
    let b = tape.mul_chan_broadcast(protected, inv);
    tape.add(a, b)
}

/// Two-block transformer refiner that repairs substitution seams.
pub struct DaFormer<T: Scalar> {
    pub grid: usize,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> DaFormer<T> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: BlockConfig,
        n_blocks: usize,
        grid: usize,
    ) -> Self {
        DaFormer {
            grid,
            pos_emb: store.add(
                "da.pos_emb",
                init::normal(&[grid * grid, cfg.channels], 0.02, rng),
            ),
            blocks: (0..n_blocks)
                .map(|i| TransformerBlock::new(store, rng, &format!("da.block{i}"), cfg))
                .collect(),
            _marker: std::marker::PhantomData,
        }
    }

    /// (n,c,h,w) -> (n,c,h,w): flatten, refine, unflatten.
    pub fn refine(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let mut tokens = tape.feat_to_tokens(x);
        let pos = store.on_tape(tape, self.pos_emb);
        tokens = tape.add_bcast0(tokens, pos);
        for block in &self.blocks {
            tokens = block.forward(tape, store, tokens);
        }
        tape.tokens_to_feat(tokens, h, w)
    }
}

/// Decoder: 4 residual blocks, upsample, 2 residual blocks, upsample,
/// 1 residual block, upsample, then a 3x3 projection to RGB with tanh.
pub struct DecNet<T: Scalar> {
    res_a: Vec<ResidualBlock>,
    up1: UpsampleBlock,
    res_b: Vec<ResidualBlock>,
    up2: UpsampleBlock,
    res_c: ResidualBlock,
    up3: UpsampleBlock,
    out: Conv2dLayer,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> DecNet<T> {
    pub fn new<R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: usize) -> Self {
        assert!(channels % 8 == 0, "decoder channels must split three times");
        let c1 = channels / 2;
        let c2 = channels / 4;
        let c3 = channels / 8;
        DecNet {
            res_a: (0..4)
                .map(|i| ResidualBlock::new(store, rng, &format!("dec.res_a{i}"), channels))
                .collect(),
            up1: UpsampleBlock::new(store, rng, "dec.up1", channels, c1),
            res_b: (0..2)
                .map(|i| ResidualBlock::new(store, rng, &format!("dec.res_b{i}"), c1))
                .collect(),
            up2: UpsampleBlock::new(store, rng, "dec.up2", c1, c2),
            res_c: ResidualBlock::new(store, rng, "dec.res_c", c2),
            up3: UpsampleBlock::new(store, rng, "dec.up3", c2, c3),
            out: Conv2dLayer::new(store, rng, "dec.out", c3, 3, 3, 1, 1),
            _marker: std::marker::PhantomData,
        }
    }

    /// (n,c,h,w) -> (n,3,8h,8w), tanh-bounded.
    pub fn decode(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for block in &self.res_a {
            h = block.forward(tape, store, h);
        }
        h = self.up1.forward(tape, store, h);
        for block in &self.res_b {
            h = block.forward(tape, store, h);
        }
        h = self.up2.forward(tape, store, h);
        h = self.res_c.forward(tape, store, h);
        h = self.up3.forward(tape, store, h);
        let rgb = self.out.forward(tape, store, h);
        tape.tanh(rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_diff, max_rel_error};
    use ndarray::Array2;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_feats(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>() - 0.5)
    }

    fn rand_mask(h: usize, w: usize, seed: u64) -> SignMask {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        SignMask {
            mask: Array2::from_shape_fn((h, w), |_| u8::from(rng.gen::<f32>() > 0.5)),
            tau: 0.5,
        }
    }

    #[test]
    fn substitute_limits() {
        let a = rand_feats(4, 3, 3, 1);
        let b = rand_feats(4, 3, 3, 2);
        let zeros = SignMask {
            mask: Array2::zeros((3, 3)),
            tau: 0.5,
        };
        let ones = SignMask {
            mask: Array2::from_elem((3, 3), 1),
            tau: 0.5,
        };
        assert_eq!(substitute(&a, &b, &zeros).unwrap().features, a);
        assert_eq!(substitute(&a, &b, &ones).unwrap().features, b);
    }

    #[test]
    fn substitute_matches_elementwise_loop() {
        let a = rand_feats(5, 4, 4, 3);
        let b = rand_feats(5, 4, 4, 4);
        let m = rand_mask(4, 4, 5);
        let out = substitute(&a, &b, &m).unwrap();
        for c in 0..5 {
            for i in 0..4 {
                for j in 0..4 {
                    let mm = m.mask[[i, j]] as f32;
                    let expect = mm * b[[c, i, j]] + (1.0 - mm) * a[[c, i, j]];
                    assert_eq!(out.features[[c, i, j]], expect);
                }
            }
        }
    }

    #[test]
    fn substitute_is_idempotent_in_the_mask() {
        let a = rand_feats(4, 4, 4, 6);
        let b = rand_feats(4, 4, 4, 7);
        let m = rand_mask(4, 4, 8);
        let once = substitute(&a, &b, &m).unwrap();
        let twice = substitute(&once.features, &b, &m).unwrap();
        assert_eq!(once.features, twice.features);
    }

    #[test]
    fn substitute_shape_errors() {
        let a = rand_feats(4, 4, 4, 9);
        let b = rand_feats(4, 3, 4, 10);
        let m = rand_mask(4, 4, 11);
        assert!(matches!(substitute(&a, &b, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn refine_preserves_shape_and_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let cfg = BlockConfig {
            channels: 16,
            n_heads: 4,
            mlp_ratio: 2.0,
        };
        let da = DaFormer::new(&mut store, &mut rng, cfg, 2, 4);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 16, 4, 4]), |ix| {
            (ix[1] as f32 * 0.3 - ix[2] as f32 * 0.2).cos()
        });
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(x0.clone());
            let y = da.refine(&mut tape, &store, x);
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 16, 4, 4]);
        assert_eq!(a, run());
    }

    #[test]
    fn decode_triples_upsample_to_8x() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let dec = DecNet::new(&mut store, &mut rng, 64);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 64, 8, 8]), 0.2f32));
        let y = dec.decode(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[1, 3, 64, 64]);
        assert!(tape.value(y).iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let dec = DecNet::new(&mut store, &mut rng, 8);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 8, 4, 4]), |_| {
            rng.gen::<f64>() * 2.0 - 1.0
        });
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), true);
        let y = dec.decode(&mut tape, &store, x);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let analytic = tape.grad(x).unwrap().clone();
        // smaller step than the shallow-block checks: the composition is
        // deep enough for eps^2 truncation to dominate at 1e-3
        let numeric = finite_diff(&x0, 1e-4, |xv| {
            let mut t = Tape::<f64>::new();
            let xx = t.leaf(xv.clone(), false);
            let yy = dec.decode(&mut t, &store, xx);
            let l = t.mean_all(yy);
            t.scalar(l)
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn on_tape_substitution_matches_array_version() {
        let a = rand_feats(4, 4, 4, 20);
        let b = rand_feats(4, 4, 4, 21);
        let m = rand_mask(4, 4, 22);
        let expected = substitute(&a, &b, &m).unwrap();
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(a.insert_axis(ndarray::Axis(0)).into_dyn());
        let bv = tape.constant(b.insert_axis(ndarray::Axis(0)).into_dyn());
        let mask_f = m.mask.mapv(|v| v as f32);
        let out = substitute_on_tape(&mut tape, av, bv, &mask_f);
        let got = tape.value(out);
        for c in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(got[[0, c, i, j]], expected.features[[c, i, j]]);
                }
            }
        }
    }
}
