use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use roigate_core::backend::{synth_generate, synthetic_image};
use roigate_core::cost::prefill_flops;
use roigate_core::harness::{run_batch, samples_from_synthetic, BatchConfig, TransportMode};
use roigate_core::image::resize;
use roigate_core::protocol::{decode, encode, ImagePayload, Message};
use roigate_core::roi::{find_bbox, relative_attention};
use roigate_core::server::DEFAULT_WINDOW_SCALES;
use roigate_core::{Codec, LlmShape, SynthParams, SyntheticBackend};
use std::hint::black_box;

fn window_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("find_bbox");
    for g in [8u32, 24, 48] {
        let params = SynthParams {
            num_samples: 1,
            grid_side: g,
            encoder_resolution: g * 14,
            ..SynthParams::default()
        };
        let t = synth_generate(&params).unwrap().remove(0);
        let map = relative_attention(&t.task_attention, &t.generic_attention, t.attention_layer, 1e-8).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(g), &map, |b, map| {
            b.iter(|| find_bbox(black_box(map), &t.geometry, &DEFAULT_WINDOW_SCALES).unwrap())
        });
    }
    group.finish();
}

fn flops(c: &mut Criterion) {
    let shape = LlmShape::llava_7b();
    c.bench_function("prefill_flops", |b| b.iter(|| prefill_flops(black_box(1152), &shape)));
}

fn codecs(c: &mut Criterion) {
    let img = resize(&synthetic_image("syn000000", 672, 672), 336, 336);
    let mut group = c.benchmark_group("codec");
    group.throughput(Throughput::Bytes(img.pixels().len() as u64));
    for codec in [Codec::Raw, Codec::Deflate, Codec::Dct { quality: 75 }] {
        let data = codec.encode(&img).unwrap();
        group.bench_function(BenchmarkId::new("encode", codec), |b| b.iter(|| codec.encode(black_box(&img)).unwrap()));
        group.bench_function(BenchmarkId::new("decode", codec), |b| {
            b.iter(|| Codec::decode(codec.id(), 336, 336, black_box(&data)).unwrap())
        });
    }
    let frame = encode(&Message::LocalImage {
        session_id: 1,
        image: ImagePayload::encode_image(&img, Codec::Raw).unwrap(),
    })
    .unwrap();
    group.bench_function("frame_decode", |b| b.iter(|| decode(black_box(&frame)).unwrap()));
    group.finish();
}

fn batch(c: &mut Criterion) {
    let params = SynthParams {
        num_samples: 32,
        ..SynthParams::small()
    };
    let backend = SyntheticBackend::new(params.clone()).unwrap();
    let samples = samples_from_synthetic(&params).unwrap();
    let mut group = c.benchmark_group("batch32");
    group.sample_size(20);
    for transport in [TransportMode::InProcess, TransportMode::TcpLoopback] {
        let cfg = BatchConfig {
            transport,
            ..BatchConfig::default()
        };
        group.bench_function(format!("{transport:?}"), |b| b.iter(|| run_batch(&samples, &backend, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, window_search, flops, codecs, batch);
criterion_main!(benches);
