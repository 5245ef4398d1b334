//! Criterion benchmarks for the hot paths of a simulation run.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcsr_core::catsim::{emc_select, fisher_select};
use dcsr_core::cdm::{AbilityVector, Cdm, IrtParams, ItemParams, MleConfig, NcdParams};
use dcsr_core::data::{ConceptId, DomainId, QMatrix, QuestionId};
use dcsr_core::diffusion::{fast_sample, DenoiserConfig, DenoiserNet, NoiseSchedule};
use dcsr_core::eval::auc;

pub fn irt_bank(rng: &mut ChaCha8Rng, n: usize) -> Cdm {
    let items: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.3..2.5), rng.random_range(-2.0..2.0)))
        .collect();
    Cdm {
        domain: DomainId(0),
        params: ItemParams::Irt(IrtParams::from_pairs(&items).expect("positive discrimination")),
        abilities: BTreeMap::new(),
    }
}

pub fn ncd_bank(rng: &mut ChaCha8Rng, n: usize, concepts: usize) -> Cdm {
    let q = QMatrix::new((0..n).map(|j| vec![ConceptId((j % concepts) as u32)]).collect()).expect("q-matrix");
    Cdm {
        domain: DomainId(0),
        params: ItemParams::Ncd(NcdParams::new(rng, &q, 16)),
        abilities: BTreeMap::new(),
    }
}

fn predict(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let irt = irt_bank(&mut rng, 200);
    let ncd = ncd_bank(&mut rng, 200, 8);
    let mut g = c.benchmark_group("predict_prob");
    g.bench_function("irt", |b| b.iter(|| irt.predict_prob(black_box(&[0.3]), QuestionId(17))));
    let theta = vec![0.1; 8];
    g.bench_function("ncd", |b| b.iter(|| ncd.predict_prob(black_box(&theta), QuestionId(17))));
    g.finish();
}

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let irt = irt_bank(&mut rng, 1000);
    let ncd = ncd_bank(&mut rng, 1000, 8);
    let mle = MleConfig::default();
    let mut g = c.benchmark_group("select");
    for size in [100usize, 1000] {
        let pool: Vec<QuestionId> = (0..size as u32).map(QuestionId).collect();
        let t1 = AbilityVector(vec![0.2]);
        g.bench_with_input(BenchmarkId::new("fisher", size), &pool, |b, p| {
            b.iter(|| fisher_select(p, &t1, &irt))
        });
        let t8 = AbilityVector(vec![0.2; 8]);
        g.bench_with_input(BenchmarkId::new("emc_ncd", size), &pool, |b, p| {
            b.iter(|| emc_select(p, &t8, &ncd, &mle))
        });
    }
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = DenoiserNet::new(&mut rng, DenoiserConfig::new(8, 8));
    let sched = NoiseSchedule::default();
    let cond = Array2::from_shape_fn((256, 8), |_| rng.random_range(-1.0..1.0));
    let eps = Array2::from_shape_fn((256, 8), |_| rng.random_range(-1.0..1.0));
    let mut g = c.benchmark_group("fast_sample");
    for steps in [10usize, 30, 100] {
        g.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, &k| {
            b.iter(|| fast_sample(&net, &cond, &eps, &sched, k))
        });
    }
    g.finish();
}

fn metric(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    c.bench_function("auc_10k", |b| b.iter(|| auc(black_box(&scores), &labels)));
}

pub fn benchmarks(c: &mut Criterion) {
    predict(c);
    selection(c);
    sampler(c);
    metric(c);
}
