use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use frm_core::fit::{assemble_ugee, pair_score_table};
use frm_core::kernels::Kernel;
use frm_core::model::{FrmModel, Link, SubjectRecord, WorkingVariance};
use frm_core::simulate::{gen_nb_scenario, NbParams};
use frm_core::ustat::{hajek_scores, ustatistic_mean, Exec};
use std::hint::black_box;

fn modes() -> [(&'static str, Exec); 3] {
    [("serial", Exec::serial()), ("parallel", Exec::parallel()), ("tree", Exec::tree())]
}

fn bench_assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("assemble_ugee");
    let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::NegBinomial(10.0));
    for n in [200, 800] {
        let data = gen_nb_scenario(n, 1, &NbParams::default()).unwrap();
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &data, |b, d| {
                b.iter(|| assemble_ugee(&model, d, black_box(&[3.0, 3.0]), exec).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_hajek(c: &mut Criterion) {
    let mut g = c.benchmark_group("hajek_scores");
    let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::Poisson);
    for n in [200, 800] {
        let data = gen_nb_scenario(n, 2, &NbParams::default()).unwrap();
        let table = pair_score_table(&model, &data, &[3.0, 3.0]).unwrap();
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &table, |b, t| b.iter(|| hajek_scores(t, exec).unwrap()));
        }
    }
    g.finish();
}

fn bench_ustatistic(c: &mut Criterion) {
    let mut g = c.benchmark_group("ustatistic_mean");
    for n in [500, 2000] {
        let subjects: Vec<SubjectRecord> = (0..n)
            .map(|i| SubjectRecord::new(i.to_string(), vec![((i * 7919) % 1013) as f64], vec![]).unwrap())
            .collect();
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &subjects, |b, s| {
                b.iter(|| ustatistic_mean(&Kernel::SqHalfDiff, s, exec).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_assembly, bench_hajek, bench_ustatistic);
criterion_main!(benches);
