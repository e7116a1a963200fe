//! Throughput benchmarks for the hot kernels: direct 3D convolution, the
//! two attention maps, and a whole residual attention block.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meranet_core::attention::{
    channel_attention_map, st_attention_map, ChannelAttentionParams, STAttentionParams,
};
use meranet_core::model::{init_block, ra_block_forward, ModelConfig};
use meranet_core::tensor::{conv3d, BnMode, ConvParams, Tensor};
use meranet_core::ChannelVariant;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
        .expect("valid shape")
}

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // one mid-network convolution: 32 -> 32 channels over 4x14x14
    let input = rand_tensor(&[1, 32, 4, 14, 14], &mut rng);
    let weight = rand_tensor(&[32, 32, 3, 3, 3], &mut rng);
    let params = ConvParams::new(weight, None, (1, 1, 1), (1, 1, 1)).unwrap();
    c.bench_function("conv3d 32x4x14x14 k3", |b| {
        b.iter(|| conv3d(std::hint::black_box(&input), &params).unwrap())
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feature = rand_tensor(&[1, 64, 8, 28, 28], &mut rng);
    let st = STAttentionParams::init(5, &mut rng).unwrap();
    let ch = ChannelAttentionParams::init(64, 16, ChannelVariant::Scnn, &mut rng).unwrap();
    c.bench_function("st_attention_map 64x8x28x28 k5", |b| {
        b.iter(|| st_attention_map(std::hint::black_box(&feature), &st).unwrap())
    });
    c.bench_function("channel_attention_map 64x8x28x28 r16", |b| {
        b.iter(|| channel_attention_map(std::hint::black_box(&feature), &ch).unwrap())
    });
}

fn bench_ra_block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig { stage_channels: [16, 16, 32, 32], st_kernel: 3, ..ModelConfig::default() };
    let mut block = init_block(16, 16, 1, &cfg, &mut rng).unwrap();
    let input = rand_tensor(&[1, 16, 8, 14, 14], &mut rng);
    c.bench_function("ra_block 16x8x14x14", |b| {
        b.iter(|| ra_block_forward(std::hint::black_box(&input), &mut block, BnMode::Infer).unwrap())
    });
}

criterion_group!(kernels, bench_conv3d, bench_attention, bench_ra_block);
criterion_main!(kernels);
