use motionprior::models::{build_model, Arch, Injection, ModelConfig};
use motionprior::motion::{corrupt_slice, draw_motion_params, MotionConfig};
use motionprior::priors::SliceSample;
use motionprior::train::{train, TrainConfig, TrainOptions};
use motionprior::volume::{generate_phantom, Contrast};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small UNet memorizes eight corrupted/clean pairs.
#[test]
fn unet_overfits_eight_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<SliceSample> = (0..8)
        .map(|i| {
            let set = generate_phantom(i, [32, 32, 16], 20).unwrap();
            let target = set[&Contrast::T2].data().slice(s![.., .., 8]).to_owned();
            let trace = draw_motion_params(&MotionConfig::default(), target.dim(), &mut rng).unwrap();
            SliceSample {
                corrupted: corrupt_slice(&target, &trace).unwrap(),
                priors: vec![],
                target,
                subject_id: format!("s{i}"),
                slice_index: 8,
                trace,
            }
        })
        .collect();
    let cfg = ModelConfig {
        depth: 2,
        base_features: 8,
        ..ModelConfig::desk(Arch::Unet, Injection::Baseline, 0)
    };
    let model = build_model::<f32>(&cfg, 0).unwrap();
    let train_cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 8,
        epochs: 200,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let out = train(model, &samples, &samples, &train_cfg, TrainOptions::default()).unwrap();
    let losses: Vec<f64> = out.history.entries.iter().map(|e| e.train_loss).collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}
