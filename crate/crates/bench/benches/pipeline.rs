use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pointseq_core::autodiff::Tape;
use pointseq_core::geometry::{farthest_point_sample, make_patches, PointCloud};
use pointseq_core::model::{forward_cloud, BoundParams, ForwardConfig, ModelDims, ModelState};
use pointseq_core::serial::{hilbert_encode, serialize, OrderKind};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
}

fn bench_hilbert(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<[u32; 3]> = (0..1024)
        .map(|_| [rng.gen_range(0..1024), rng.gen_range(0..1024), rng.gen_range(0..1024)])
        .collect();
    c.bench_function("hilbert_encode_1024pts_bits10", |b| {
        b.iter(|| {
            for p in &points {
                black_box(hilbert_encode(*p, 10).unwrap());
            }
        })
    });
}

fn bench_fps(c: &mut Criterion) {
    let cloud = random_cloud(512, 1);
    c.bench_function("fps_512pts_32centers", |b| {
        b.iter(|| black_box(farthest_point_sample(&cloud, 32, 0).unwrap()))
    });
}

fn bench_serialize(c: &mut Criterion) {
    let cloud = random_cloud(512, 2);
    let patches = make_patches(&cloud, 64, 8, 0).unwrap();
    c.bench_function("serialize_64centers_hilbert", |b| {
        b.iter(|| black_box(serialize(&patches.centers, OrderKind::Hilbert, 10, 0).unwrap()))
    });
}

fn bench_forward(c: &mut Criterion) {
    let dims = ModelDims::desk();
    let state: ModelState<f32> = ModelState::init(dims, 0).unwrap();
    let cloud = random_cloud(512, 3);
    let patches = make_patches(&cloud, 32, 16, 0).unwrap();
    let order = serialize(&patches.centers, OrderKind::Hilbert, 10, 0).unwrap();
    let fwd = ForwardConfig::default();
    c.bench_function("forward_desk_32tokens", |b| {
        b.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = BoundParams::bind(&mut tape, &state).unwrap();
            black_box(forward_cloud(&mut tape, &bound, &state, &patches, &order, &fwd).unwrap());
        })
    });
}

criterion_group!(benches, bench_hilbert, bench_fps, bench_serialize, bench_forward);
criterion_main!(benches);
