use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dtr_core::cohort::{FeatureLayout, FeatureVector};
use dtr_core::dqn::{run_rng, state_code, ReplayBuffer, DEFAULT_CAPACITY};
use dtr_core::imitation::predict_topn;
use dtr_core::nn::{init_mlp, loss_and_grad, Example, Head};
use dtr_core::synth::{
    generate_cohort, solve_oracle, synthetic_vocabularies, CohortMdpSpec, GroundTruthMdp, SynthConfig,
};
use dtr_core::{AgentConfig, ImitationModel, QAgent, TaskKind, Transition};

const K: usize = 20;

fn input(i: usize, dim: usize) -> Vec<f64> {
    (0..dim).map(|j| ((i * 31 + j * 7) % 13) as f64 / 13.0).collect()
}

fn nn(c: &mut Criterion) {
    let imitation = init_mlp(&[9, 16, 32, K], 1).unwrap();
    let q = init_mlp(&[8, 32, 64, K], 2).unwrap();
    let x = input(3, 9);
    c.bench_function("forward_imitation_net", |b| b.iter(|| imitation.forward(black_box(&x)).unwrap()));

    let classes: Vec<Example> = (0..32).map(|i| Example::class(input(i, 9), i % K)).collect();
    c.bench_function("backprop_softmax_batch32", |b| {
        b.iter(|| loss_and_grad(&imitation, black_box(&classes), Head::SoftmaxCrossEntropy).unwrap())
    });
    let values: Vec<Example> = (0..32).map(|i| Example::value(input(i, 8), i % K, 0.5)).collect();
    c.bench_function("backprop_value_batch32", |b| {
        b.iter(|| loss_and_grad(&q, black_box(&values), Head::SquaredError).unwrap())
    });
}

fn imitation(c: &mut Criterion) {
    let vocab = synthetic_vocabularies(K).unwrap();
    let task = TaskKind::AcuteGvhdTreatment;
    let model = ImitationModel::new(task, vocab[&task].clone(), 4).unwrap();
    let x = FeatureVector::new(input(5, 9), FeatureLayout::Imitation).unwrap();
    c.bench_function("predict_top5", |b| b.iter(|| predict_topn(&model, black_box(&x), 5).unwrap()));
}

fn dqn(c: &mut Criterion) {
    let mut buffer = ReplayBuffer::new(DEFAULT_CAPACITY).unwrap();
    for i in 0..DEFAULT_CAPACITY {
        buffer.push(Transition::terminal(state_code(i % 32, i % 6).unwrap(), i % K, 0.5)).unwrap();
    }
    let mut rng = run_rng(&AgentConfig::default());
    c.bench_function("replay_sample32_of_20000", |b| b.iter(|| buffer.sample(32, &mut rng).unwrap()));

    let mut agent = QAgent::new(8, K, AgentConfig::default()).unwrap();
    for tr in buffer.iter().take(1000) {
        agent.buffer.push(tr.clone()).unwrap();
    }
    c.bench_function("dqn_train_step", |b| b.iter(|| agent.train_step(&mut rng).unwrap()));
}

fn synth(c: &mut Criterion) {
    let mdp = GroundTruthMdp::cohort(&CohortMdpSpec::default()).unwrap();
    c.bench_function("solve_oracle_cohort_mdp", |b| b.iter(|| solve_oracle(black_box(&mdp), 1.0).unwrap()));
    c.bench_function("generate_cohort_1000", |b| {
        b.iter_batched(
            || SynthConfig::new(mdp.clone(), 1000, 9),
            |cfg| generate_cohort(&cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, nn, imitation, dqn, synth);
criterion_main!(benches);
