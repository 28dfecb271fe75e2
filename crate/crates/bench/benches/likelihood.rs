use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lccmkit::design::{filter_dominated_and_symmetric, full_factorial};
use lccmkit::schema::Schema;
use lccmkit::{ChoiceRule, PanelLikelihood};
use lccmkit_bench::paper_fixture;

fn likelihood(c: &mut Criterion) {
    let (spec, data) = paper_fixture(513);
    let free = spec.initial_free();
    let mut group = c.benchmark_group("paper_2class_n513");
    for rule in [ChoiceRule::Top, ChoiceRule::Rank] {
        let lik = PanelLikelihood::new(&spec, &data, rule).unwrap();
        group.bench_with_input(BenchmarkId::new("loglik", format!("{rule:?}")), &free, |b, x| {
            b.iter(|| lik.loglik(x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loglik_gradient", format!("{rule:?}")), &free, |b, x| {
            b.iter(|| lik.loglik_gradient(x).unwrap())
        });
    }
    group.finish();
}

fn design(c: &mut Criterion) {
    let schema = Schema::paper();
    c.bench_function("design_filter", |b| {
        b.iter(|| filter_dominated_and_symmetric(&schema, full_factorial(&schema).unwrap()).len())
    });
}

criterion_group!(benches, likelihood, design);
criterion_main!(benches);
