use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use latentts::autograd::{Graph, ParamStore};
use latentts::batch::Batch;
use latentts::benchmark::mnar_benchmark;
use latentts::data::Instance;
use latentts::missing::{MissingAutoencoder, MissingConfig};
use latentts::model::{stream_rng, SequenceModel};
use latentts::nn::GruStack;
use latentts::wgan::{sample_noise, LatentGan};

fn gru_step(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let stack = GruStack::new(&mut store, "gru", 64, 128, 3, &mut stream_rng(0, 0));
    let x = sample_noise(128, 64, &mut stream_rng(0, 1));
    c.bench_function("gru_step_3x128_batch128_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h0 = stack.zero_state(&mut g, 128);
            let h = stack.step(&mut g, &store, xv, &h0, None);
            let top = g.sum(*h.last().expect("layers"));
            g.backward(top)
        })
    });
}

fn missing_ae_loss(c: &mut Criterion) {
    let (train, _) = mnar_benchmark(128, 1, 0).expect("benchmark data");
    let cfg = MissingConfig {
        layers: 3,
        hidden: 64,
        decide_layers: 2,
        embed_dim: 64,
        observation_embedding: true,
        two_step_decoder: true,
        binarize: Default::default(),
    };
    let model = MissingAutoencoder::new(&train, cfg, &mut stream_rng(0, 2)).expect("valid config");
    let refs: Vec<&Instance> = train.instances.iter().collect();
    let batch = Batch::new(&refs, model.layout());
    c.bench_function("missing_ae_loss_batch128_fwd_bwd", |b| {
        b.iter_batched(
            || stream_rng(0, 3),
            |mut rng| {
                let mut g = Graph::new();
                let loss = model.batch_loss(&mut g, &batch, &mut rng);
                g.backward(loss)
            },
            BatchSize::SmallInput,
        )
    });
}

fn critic_loss(c: &mut Criterion) {
    let gan = LatentGan::new(512, 3, &mut stream_rng(0, 4)).expect("positive width");
    let real = sample_noise(512, 512, &mut stream_rng(0, 5));
    let fake = sample_noise(512, 512, &mut stream_rng(0, 6));
    c.bench_function("critic_loss_dim512_batch512_fwd_bwd", |b| {
        b.iter_batched(
            || stream_rng(0, 7),
            |mut rng| {
                let mut g = Graph::new();
                let (loss, _) = gan.critic_loss(&mut g, &real, &fake, 10.0, &mut rng).expect("matching shapes");
                g.backward(loss)
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = gru_step, missing_ae_loss, critic_loss
}
criterion_main!(kernels);
