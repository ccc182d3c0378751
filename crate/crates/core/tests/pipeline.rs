use promodet::harness::checkpoint::{self, CheckpointMeta};
use promodet::harness::data::{resize_sample, to_tensor, Dataset};
use promodet::harness::runner::train;
use promodet::harness::TrainConfig;
use promodet::nn::Visit;

fn micro() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.detector.backbone.encoder_widths = [4, 4, 8, 8, 8];
    c.detector.backbone.decoder_channels = 8;
    c.train_data = "synth:8:3".into();
    c.batch_size = 4;
    c.schedule = c.schedule.rescaled(25);
    c
}

fn snapshot(model: &mut dyn Visit) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
    out
}

#[test]
fn fifty_steps_are_bitwise_reproducible() {
    let cfg = micro();
    let data = Dataset::open(&cfg.train_data, 128).unwrap();
    let run = || {
        let mut losses = Vec::new();
        let mut m = train(&cfg, &data, |log, _| {
            losses.push(log.total);
            Ok(())
        })
        .unwrap();
        (losses, snapshot(&mut m))
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la.len(), 50);
    assert_eq!(la, lb);
    assert!(pa == pb, "parameters differ between identical runs");
}

#[test]
fn batch_order_does_not_change_detections() {
    let mut cfg = micro();
    cfg.max_steps = Some(10);
    let data = Dataset::open(&cfg.train_data, 128).unwrap();
    let model = train(&cfg, &data, |_, _| Ok(())).unwrap();
    let samples: Vec<_> = data.samples.iter().take(4).map(|s| resize_sample(s, 128)).collect();
    let forward: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let reversed: Vec<_> = forward.iter().rev().cloned().collect();
    let a = model.infer(&to_tensor(&forward).unwrap()).unwrap();
    let mut b = model.infer(&to_tensor(&reversed).unwrap()).unwrap();
    b.reverse();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_preserves_detections() {
    let mut cfg = micro();
    cfg.max_steps = Some(5);
    let data = Dataset::open(&cfg.train_data, 128).unwrap();
    let mut model = train(&cfg, &data, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let meta = CheckpointMeta {
        config: cfg.clone(),
        class_names: data.class_names.clone(),
        category_ids: data.category_ids.clone(),
        step: 5,
    };
    checkpoint::save(&path, &mut model, &meta).unwrap();
    let (mut loaded, back) = checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 5);
    assert!(snapshot(&mut model) == snapshot(&mut loaded));
    let s = resize_sample(&data.samples[0], 128);
    let x = to_tensor(&[&s.image]).unwrap();
    assert_eq!(model.infer(&x).unwrap(), loaded.infer(&x).unwrap());
}
