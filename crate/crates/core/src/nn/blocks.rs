//! Convolutional layers and the residual / upsampling blocks used across
//! the detector, translator, decoder, and embedders.

use ndarray::ArrayD;
use rand::Rng;

use super::{init, ParamId, ParamStore};
use crate::autodiff::{Scalar, Tape, Var};

/// 2-D convolution with bias.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init::he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
        );
        let b = store.add(format!("{name}.b"), init::zeros(&[c_out]));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = store.on_tape(tape, self.w);
        let b = store.on_tape(tape, self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.add_chan_bias(y, b)
    }
}

/// Fully connected layer over the last axis of a (rows, d_in) input.
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init::xavier_normal(&[d_in, d_out], d_in, d_out, rng),
        );
        let b = store.add(format!("{name}.b"), init::zeros(&[d_out]));
        LinearLayer { w, b }
    }

    /// x: (rows, d_in) -> (rows, d_out)
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = store.on_tape(tape, self.w);
        let b = store.on_tape(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_bias(y, b)
    }

    /// Tokens (n, t, d_in) -> (n, t, d_out), applied row-wise.
    pub fn forward_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let shape = tape.shape(x).to_vec();
        let (n, t, d_in) = (shape[0], shape[1], shape[2]);
        let d_out = store.value(self.w).shape()[1];
        let flat = tape.reshape(x, &[n * t, d_in]);
        let y = self.forward(tape, store, flat);
        tape.reshape(y, &[n, t, d_out])
    }
}

/// Two 3x3 convolutions with an intermediate ReLU and an identity skip.
/// No normalization layers.
pub struct ResidualBlock {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            conv2: Conv2dLayer::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Nearest-neighbor 2x resize followed by a 3x3 convolution.
pub struct UpsampleBlock {
    pub conv: Conv2dLayer,
}

impl UpsampleBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        UpsampleBlock {
            conv: Conv2dLayer::new(store, rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let up = tape.nearest_up2(x);
        self.conv.forward(tape, store, up)
    }
}

/// Overwrite a conv's kernel with the identity map (same channel count,
/// center tap 1). Used by tests and ablation stubs.
pub fn set_conv_identity<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv2dLayer) {
    let shape = store.value(conv.w).shape().to_vec();
    let (co, ci, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(co, ci, "identity kernel needs equal channels");
    let mut w = ArrayD::<T>::zeros(ndarray::IxDyn(&shape));
    for o in 0..co {
        w[[o, o, kh / 2, kw / 2]] = T::one();
    }
    store.set_value(conv.w, w);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_diff, max_rel_error};
    use crate::autodiff::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init::normal::<f64, _>(shape, 1.0, &mut rng)
    }

    #[test]
    fn residual_block_zero_second_conv_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 16);
        store.set_value(block.conv2.w, init::zeros(&[16, 16, 3, 3]));
        store.set_value(block.conv2.b, init::zeros(&[16]));
        let x0 = randn(&[1, 16, 8, 8], 1);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), false);
        let y = block.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn residual_block_preserves_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 16);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[2, 16, 8, 8], 2), false);
        let y = block.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[2, 16, 8, 8]);
    }

    #[test]
    fn residual_block_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 4);
        let x0 = randn(&[1, 4, 4, 4], 4);
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
    fn upsample_block_doubles_spatial_dims() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let block = UpsampleBlock::new(&mut store, &mut rng, "up", 32, 12);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[1, 32, 8, 8], 6), false);
        let y = block.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[1, 12, 16, 16]);
    }

    #[test]
    fn upsample_identity_conv_preserves_constants() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let block = UpsampleBlock::new(&mut store, &mut rng, "up", 3, 3);
        set_conv_identity(&mut store, &block.conv);
        let x0 = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.37);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, false);
        let y = block.forward(&mut tape, &store, x);
        for &v in tape.value(y).iter() {
            assert!((v - 0.37f64).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_block_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let block = UpsampleBlock::new(&mut store, &mut rng, "up", 4, 4);
        let x0 = randn(&[1, 4, 4, 4], 9);
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
        assert!(max_rel_error(&analytic, &numeric) < 1e-3);
    }
}
