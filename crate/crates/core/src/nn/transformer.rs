//! Pre-norm transformer encoder block: multi-head self-attention and an
//! MLP, each wrapped in a residual skip.

use rand::Rng;

use super::blocks::LinearLayer;
use super::{init, ParamId, ParamStore};
use crate::autodiff::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub channels: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.channels % self.n_heads != 0 {
            return Err(crate::Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct TransformerBlock {
    pub cfg: BlockConfig,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    mlp1: LinearLayer,
    mlp2: LinearLayer,
}

pub struct BlockOutput {
    pub tokens: Var,
    /// The attention node, for inspecting saved weights.
    pub attn_node: Var,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: BlockConfig,
    ) -> Self {
        cfg.validate().expect("block config");
        let d = cfg.channels;
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        let ones = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[d]), T::one());
        TransformerBlock {
            cfg,
            ln1_gamma: store.add(format!("{name}.ln1.g"), ones.clone()),
            ln1_beta: store.add(format!("{name}.ln1.b"), init::zeros(&[d])),
            wq: LinearLayer::new(store, rng, &format!("{name}.wq"), d, d),
            wk: LinearLayer::new(store, rng, &format!("{name}.wk"), d, d),
            wv: LinearLayer::new(store, rng, &format!("{name}.wv"), d, d),
            wo: LinearLayer::new(store, rng, &format!("{name}.wo"), d, d),
            ln2_gamma: store.add(format!("{name}.ln2.g"), ones),
            ln2_beta: store.add(format!("{name}.ln2.b"), init::zeros(&[d])),
            mlp1: LinearLayer::new(store, rng, &format!("{name}.mlp1"), d, hidden),
            mlp2: LinearLayer::new(store, rng, &format!("{name}.mlp2"), hidden, d),
        }
    }

    /// tokens: (n, t, d) -> (n, t, d)
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.forward_detailed(tape, store, x).tokens
    }

    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> BlockOutput {
        let g1 = store.on_tape(tape, self.ln1_gamma);
        let b1 = store.on_tape(tape, self.ln1_beta);
        let h = tape.layer_norm(x, g1, b1);
        let q = self.wq.forward_tokens(tape, store, h);
        let k = self.wk.forward_tokens(tape, store, h);
        let v = self.wv.forward_tokens(tape, store, h);
        let attn_node = tape.mha(q, k, v, self.cfg.n_heads);
        let o = self.wo.forward_tokens(tape, store, attn_node);
        let x = tape.add(x, o);

        let g2 = store.on_tape(tape, self.ln2_gamma);
        let b2 = store.on_tape(tape, self.ln2_beta);
        let h2 = tape.layer_norm(x, g2, b2);
        let m = self.mlp1.forward_tokens(tape, store, h2);
        let m = tape.relu(m);
        let m = self.mlp2.forward_tokens(tape, store, m);
        let tokens = tape.add(x, m);
        BlockOutput { tokens, attn_node }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_diff, max_rel_error};
    use crate::autodiff::Tape;
    use ndarray::{ArrayD, Axis, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> BlockConfig {
        BlockConfig {
            channels: 64,
            n_heads: 4,
            mlp_ratio: 2.0,
        }
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init::normal::<f64, _>(shape, 1.0, &mut rng)
    }

    #[test]
    fn shape_preserved_for_65_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", cfg());
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[1, 65, 64], 1), false);
        let y = block.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[1, 65, 64]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", cfg());
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[1, 17, 64], 3), false);
        let out = block.forward_detailed(&mut tape, &store, x);
        let attn = tape.attention_weights(out.attn_node).unwrap();
        for h in 0..4 {
            for r in 0..17 {
                let s: f64 = attn.slice(ndarray::s![0, h, r, ..]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let bad = BlockConfig {
            channels: 65,
            n_heads: 4,
            mlp_ratio: 2.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn permutation_equivariance_without_positional_embeddings() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", cfg());
        let x0 = randn(&[1, 10, 64], 5);
        // permutation: reverse token order
        let mut xp = x0.clone();
        for t in 0..10 {
            xp.index_axis_mut(Axis(1), t)
                .assign(&x0.index_axis(Axis(1), 9 - t));
        }
        let run = |input: ArrayD<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(input, false);
            let y = block.forward(&mut tape, &store, x);
            tape.value(y).clone()
        };
        let y = run(x0);
        let yp = run(xp);
        for t in 0..10 {
            let a = y.index_axis(Axis(1), 9 - t);
            let b = yp.index_axis(Axis(1), t);
            for (&u, &v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-9, "equivariance violated");
            }
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let small = BlockConfig {
            channels: 8,
            n_heads: 2,
            mlp_ratio: 2.0,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", small);
        let x0 = randn(&[1, 5, 8], 7);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = block.forward(&mut tape, &store, x);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let analytic = tape.grad(x).unwrap().clone();
        let numeric = finite_diff(&x0, 1e-3, |xv| {
            let mut t = Tape::new();
            let xx = t.leaf(xv.clone(), false);
            let yy = block.forward(&mut t, &store, xx);
            let l = t.mean_all(yy);
            t.scalar(l)
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "rel err {}", err);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let block = TransformerBlock::new(&mut store, &mut rng, "tb", cfg());
        let x0 = randn(&[2, 12, 64], 9);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false);
            let y = block.forward(&mut tape, &store, x);
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hidden_width_follows_mlp_ratio() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let block = TransformerBlock::new(
            &mut store,
            &mut rng,
            "tb",
            BlockConfig {
                channels: 16,
                n_heads: 4,
                mlp_ratio: 4.0,
            },
        );
        assert_eq!(store.value(block.mlp1.w).shape(), &[16, 64]);
        let _ = IxDyn(&[]);
    }
}
