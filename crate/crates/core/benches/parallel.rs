//! Compares the data-parallel batch fan-out against a single-thread pool
//! on the training-critical kernels. Build with `--no-default-features`
//! to measure the fully sequential fallback instead.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use rofi_core::autodiff::Tape;
use rofi_core::nn::blocks::{Conv2dLayer, ResidualBlock};
use rofi_core::nn::transformer::{BlockConfig, TransformerBlock};
use rofi_core::nn::ParamStore;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f32>() * 2.0 - 1.0)
}

fn conv_fwd_bwd(store: &ParamStore<f32>, conv: &Conv2dLayer, x0: &ArrayD<f32>) -> f32 {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = conv.forward(&mut tape, store, x);
    let loss = tape.mean_all(y);
    tape.backward(loss);
    tape.scalar(loss)
}

fn residual_fwd_bwd(store: &ParamStore<f32>, block: &ResidualBlock, x0: &ArrayD<f32>) -> f32 {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = block.forward(&mut tape, store, x);
    let loss = tape.mean_all(y);
    tape.backward(loss);
    tape.scalar(loss)
}

fn transformer_fwd_bwd(store: &ParamStore<f32>, block: &TransformerBlock, x0: &ArrayD<f32>) -> f32 {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = block.forward(&mut tape, store, x);
    let loss = tape.mean_all(y);
    tape.backward(loss);
    tape.scalar(loss)
}

fn bench_kernels(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2dLayer::new(&mut store, &mut rng, "conv", 16, 16, 3, 1, 1);
    let res = ResidualBlock::new(&mut store, &mut rng, "res", 64);
    let tb = TransformerBlock::new(
        &mut store,
        &mut rng,
        "tb",
        BlockConfig {
            channels: 64,
            n_heads: 4,
            mlp_ratio: 2.0,
        },
    );
    let x_conv = randn(&[12, 16, 32, 32], 1);
    let x_res = randn(&[12, 64, 8, 8], 2);
    let x_tok = randn(&[12, 65, 64], 3);

    let mut group = c.benchmark_group("train_kernels");
    group.sample_size(20);
    group.bench_function("conv16x32x32_fwd_bwd", |b| {
        b.iter(|| conv_fwd_bwd(&store, &conv, &x_conv))
    });
    group.bench_function("residual64x8x8_fwd_bwd", |b| {
        b.iter(|| residual_fwd_bwd(&store, &res, &x_res))
    });
    group.bench_function("transformer65x64_fwd_bwd", |b| {
        b.iter(|| transformer_fwd_bwd(&store, &tb, &x_tok))
    });

    // Same work forced onto one rayon thread, for comparison with the
    // default pool. With `--no-default-features` the default path is
    // already sequential and this section is skipped.
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("pool");
        group.bench_function("conv16x32x32_fwd_bwd_1thread", |b| {
            b.iter(|| pool.install(|| conv_fwd_bwd(&store, &conv, &x_conv)))
        });
        group.bench_function("residual64x8x8_fwd_bwd_1thread", |b| {
            b.iter(|| pool.install(|| residual_fwd_bwd(&store, &res, &x_res)))
        });
        group.bench_function("transformer65x64_fwd_bwd_1thread", |b| {
            b.iter(|| pool.install(|| transformer_fwd_bwd(&store, &tb, &x_tok)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
