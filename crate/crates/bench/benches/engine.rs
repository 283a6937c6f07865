use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ivsgen::arbitrage::ArbitrageChecker;
use ivsgen::cvae::{Architecture, CvaeModel};
use ivsgen::dataset::{build_dataset, sample_heston_surface, sample_sabr_surface, HestonBox, SabrBox, SamplerConfig};
use ivsgen::features::extract_features;
use ivsgen::pricing::{bs_call_price, heston_call_prices, implied_vol, BsInputs, CosConfig};
use ivsgen::repair::{repair_surface, RepairConfig};
use ivsgen::{Feature, GridSpec};

fn pricing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let heston = HestonBox::default().sample(&mut rng);
    let sabr = SabrBox::default().sample(&mut rng);
    let grid = Arc::new(GridSpec::default());
    let strikes: Vec<f64> = grid.m_values().iter().map(|m| m.exp()).collect();
    let price = bs_call_price(&BsInputs::new(1.0, 1.1, 0.0, 0.4, 0.25).unwrap());

    c.bench_function("implied_vol", |b| b.iter(|| implied_vol(black_box(price), 1.0, 1.1, 0.0, 0.4)));
    c.bench_function("heston_cos_28_strikes", |b| {
        b.iter(|| heston_call_prices(black_box(&heston), &strikes, 0.35, &CosConfig::default()))
    });
    c.bench_function("heston_surface", |b| b.iter(|| sample_heston_surface(black_box(&heston), &grid)));
    c.bench_function("sabr_surface", |b| b.iter(|| sample_sabr_surface(black_box(&sabr), &grid)));
}

fn surfaces(c: &mut Criterion) {
    let ds = build_dataset(&SamplerConfig::with_counts(32, 32, 2)).unwrap();
    let s = &ds.surfaces[0];
    let checker = ArbitrageChecker::new(Arc::clone(&ds.grid));
    c.bench_function("extract_features", |b| b.iter(|| extract_features(black_box(s), &Feature::ALL)));
    c.bench_function("audit", |b| b.iter(|| checker.audit(black_box(s))));

    let labels: Vec<_> = ds.labels.iter().map(|l| l.select(&[Feature::Level]).unwrap()).collect();
    let model = CvaeModel::new(Architecture::desk(), 1.0, &ds.surfaces, &labels, 3).unwrap();
    let y = model.mean_features().unwrap();
    let z = vec![0.5; model.d_z()];
    c.bench_function("decode", |b| b.iter(|| model.decode_values(black_box(&y), &z)));
    let cfg = RepairConfig {
        max_iters: 20,
        ..RepairConfig::default()
    };
    let mut g = c.benchmark_group("repair");
    g.sample_size(10);
    g.bench_function("repair_20_iters", |b| b.iter(|| repair_surface(&model, black_box(&y), &[4.0; 5], &cfg)));
    g.finish();
}

criterion_group!(benches, pricing, surfaces);
criterion_main!(benches);
