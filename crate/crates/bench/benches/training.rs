use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sigvae::data::gen_sprites;
use sigvae::training::Trainer;
use sigvae::{ObjectiveMode, SharingScheme, SpriteConfig, TrainConfig};

fn train_step(c: &mut Criterion) {
    let data = gen_sprites(&SpriteConfig::default()).unwrap().train();
    let mut g = c.benchmark_group("train step (B=128, 16x16)");
    let objectives = [
        ("optimal sigma", ObjectiveMode::SigmaVaeOptimal { sharing: SharingScheme::shared() }),
        ("learned sigma", ObjectiveMode::SigmaVaeShared),
        ("beta-vae", ObjectiveMode::BetaVae { beta: 1.0 }),
    ];
    for (name, objective) in objectives {
        let cfg = TrainConfig {
            objective,
            ..TrainConfig::default()
        };
        g.bench_function(name, |b| {
            b.iter_batched_ref(
                || Trainer::new(cfg.clone(), &data).unwrap(),
                |t| t.step_once().unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
