use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vqbridge::data::{generate_corpus, split_of, CorpusSpec, Split, SyntheticOptions};
use vqbridge::model::{AsrModel, ModelConfig};
use vqbridge::parallel::Exec;
use vqbridge::trainkit::{step_gradients, StagePlan, TrainState};

fn bench_batch_gradients(c: &mut Criterion) {
    let opts = SyntheticOptions {
        train: 64,
        test_id: 1,
        test_ood: 1,
        ..SyntheticOptions::default()
    };
    let corpus = generate_corpus(&CorpusSpec::synthetic(&opts, 1).unwrap()).unwrap();
    let train = split_of(&corpus, Split::Train);
    let model = AsrModel::new(ModelConfig::default(), 1).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    for mode in ["hard", "soft"] {
        let plan = StagePlan::from_pairs([("mode", mode), ("k", "10")]).unwrap();
        let state = TrainState::from_pretrained(model.clone(), plan).unwrap();
        for batch in [4usize, 16] {
            let items = &train[..batch];
            for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
                let id = BenchmarkId::new(format!("{mode}/{name}"), batch);
                group.bench_with_input(id, &items, |b, items| {
                    b.iter(|| step_gradients(&state, items, exec).unwrap().loss)
                });
            }
        }
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batch_gradients
}
criterion_main!(benches);
