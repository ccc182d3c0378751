mod common;

use common::max_rel_error;
use promodet::backbone::{Backbone, BackboneConfig};
use promodet::detector::{Detector, DetectorConfig, GroundTruth};
use promodet::fam::{DeformConv, OffsetMode, OFFSET_CHANNELS};
use promodet::geometry::BBox;
use promodet::nn::{zero_grads, Mode, Param, Tensor, Visit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(n, c, h, w, data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn with_param<M: Visit + ?Sized>(model: &mut M, name: &str, f: &mut dyn FnMut(&mut Param)) {
    let mut found = false;
    model.visit("", &mut |n, p| {
        if n == name {
            f(p);
            found = true;
        }
    });
    assert!(found, "no parameter {name}");
}

/// Zero biases on sparse ReLU inputs put many activations exactly on the
/// kink, where one-sided differences disagree with the subgradient.
fn jitter_offsets<M: Visit + ?Sized>(model: &mut M, rng: &mut ChaCha8Rng) {
    model.visit("", &mut |n, p| {
        if n.ends_with(".bias") || n.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    });
}

fn param_names<M: Visit + ?Sized>(model: &mut M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    model.visit("", &mut |n, p| {
        if p.trainable {
            out.push((n.to_string(), p.value.len()));
        }
    });
    out
}

#[test]
fn deformable_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let (c, oc, h, w) = (4, 4, 8, 8);
        let mut layer = DeformConv::new(&mut rng, c, oc);
        let feat = random_tensor(&mut rng, 1, c, h, w, 1.0);
        let offsets = random_tensor(&mut rng, 1, OFFSET_CHANNELS, h, w, 2.0);
        let r = random_tensor(&mut rng, 1, oc, h, w, 1.0);
        let y = layer.forward(&feat, &offsets).unwrap();
        let mut dy = y.zeros_like();
        dy.data.copy_from_slice(&r.data);
        let (dfeat, doff) = layer.backward(&dy).unwrap();
        let loss = |l: &DeformConv, f: &Tensor, o: &Tensor| dot(&l.eval(f, o).unwrap(), &r);

        let mut numeric = Vec::new();
        for i in 0..feat.data.len() {
            let (mut p, mut m) = (feat.clone(), feat.clone());
            p.data[i] += STEP;
            m.data[i] -= STEP;
            numeric.push((loss(&layer, &p, &offsets) - loss(&layer, &m, &offsets)) / (2.0 * STEP));
        }
        assert!(max_rel_error(&dfeat.data, &numeric, 1e-6) <= 1e-3);

        let mut numeric = Vec::new();
        for i in 0..offsets.data.len() {
            let (mut p, mut m) = (offsets.clone(), offsets.clone());
            p.data[i] += STEP;
            m.data[i] -= STEP;
            numeric.push((loss(&layer, &feat, &p) - loss(&layer, &feat, &m)) / (2.0 * STEP));
        }
        assert!(max_rel_error(&doff.data, &numeric, 1e-6) <= 1e-3);

        let analytic = layer.weight.grad.clone();
        let mut numeric = Vec::new();
        for i in 0..analytic.len() {
            layer.weight.value[i] += STEP;
            let lp = loss(&layer, &feat, &offsets);
            layer.weight.value[i] -= 2.0 * STEP;
            let lm = loss(&layer, &feat, &offsets);
            layer.weight.value[i] += STEP;
            numeric.push((lp - lm) / (2.0 * STEP));
        }
        assert!(max_rel_error(&analytic, &numeric, 1e-6) <= 1e-3);
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = BackboneConfig {
        input_size: 128,
        encoder_widths: [3, 3, 4, 4, 4],
        decoder_channels: 3,
        ..BackboneConfig::default()
    };
    let mut net = Backbone::new(&mut rng, config).unwrap();
    jitter_offsets(&mut net, &mut rng);
    let x = random_tensor(&mut rng, 1, 3, 128, 128, 0.5);
    let pyr = net.forward(&x, Mode::Frozen).unwrap();
    let probes: Vec<Tensor> = pyr
        .levels
        .iter()
        .map(|t| random_tensor(&mut rng, t.n, t.c, t.h, t.w, 1.0))
        .collect();
    let loss = |net: &Backbone, x: &Tensor| {
        let p = net.eval(x).unwrap();
        p.levels.iter().zip(&probes).map(|(a, b)| dot(a, b)).sum::<f64>()
    };
    let dx = net.backward(&probes).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..20 {
        let i = rng.gen_range(0..x.data.len());
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data[i] += STEP;
        m.data[i] -= STEP;
        analytic.push(dx.data[i]);
        numeric.push((loss(&net, &p) - loss(&net, &m)) / (2.0 * STEP));
    }
    for (name, len) in param_names(&mut net) {
        for _ in 0..2 {
            let i = rng.gen_range(0..len);
            let mut g = 0.0;
            with_param(&mut net, &name, &mut |p| {
                g = p.grad[i];
                p.value[i] += STEP;
            });
            let lp = loss(&net, &x);
            with_param(&mut net, &name, &mut |p| p.value[i] -= 2.0 * STEP);
            let lm = loss(&net, &x);
            with_param(&mut net, &name, &mut |p| p.value[i] += STEP);
            analytic.push(g);
            numeric.push((lp - lm) / (2.0 * STEP));
        }
    }
    let err = max_rel_error(&analytic, &numeric, 1e-4);
    assert!(err <= 1e-3, "max relative error {err}");
}

fn detector_gradient_error(config: DetectorConfig, probe: impl Fn(&str) -> bool) -> f64 {
    let mut model = Detector::new(config, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    jitter_offsets(&mut model, &mut rng);
    // non-zero offset convs exercise the deformable path; scores far from
    // the gate keep the negative set fixed under perturbation
    model.visit("", &mut |n, p| {
        if n.starts_with("fam.") {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        }
        if n.contains(".score.bias") {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let x = random_tensor(&mut rng, 2, 3, 128, 128, 0.5);
    let targets = vec![
        vec![GroundTruth { bbox: BBox::new(10.0, 12.0, 60.0, 50.0), class: 0 }],
        vec![
            GroundTruth { bbox: BBox::new(40.0, 30.0, 110.0, 120.0), class: 2 },
            GroundTruth { bbox: BBox::new(5.0, 70.0, 30.0, 95.0), class: 1 },
        ],
    ];
    zero_grads(&mut model);
    model.forward_backward(&x, &targets, Mode::Frozen).unwrap();
    let mut grads = Vec::new();
    model.visit("", &mut |n, p| {
        if p.trainable {
            grads.push((n.to_string(), p.grad.clone()))
        }
    });

    let loss = |model: &mut Detector| {
        let r = model.forward_backward(&x, &targets, Mode::Frozen).unwrap();
        zero_grads(model);
        r.loss.total()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, g) in &grads {
        if !probe(name) || g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let i = (0..g.len()).max_by(|a, b| g[*a].abs().total_cmp(&g[*b].abs())).unwrap();
        with_param(&mut model, name, &mut |p| p.value[i] += STEP);
        let lp = loss(&mut model);
        with_param(&mut model, name, &mut |p| p.value[i] -= 2.0 * STEP);
        let lm = loss(&mut model);
        with_param(&mut model, name, &mut |p| p.value[i] += STEP);
        analytic.push(g[i]);
        numeric.push((lp - lm) / (2.0 * STEP));
    }
    assert!(analytic.len() >= 10, "only {} parameters probed", analytic.len());
    max_rel_error(&analytic, &numeric, 1e-4)
}

fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        backbone: BackboneConfig {
            input_size: 128,
            encoder_widths: [3, 3, 3, 3, 3],
            decoder_channels: 3,
            ..BackboneConfig::default()
        },
        ..DetectorConfig::default()
    }
}

#[test]
fn detector_head_gradients_match_finite_differences() {
    // promoted boxes are constants, so upstream parameters see only part
    // of the total derivative
    let err = detector_gradient_error(tiny_detector(), |n| {
        n.starts_with("fam.") || n.starts_with("detector.") || n.contains(".score.")
    });
    // a shared offset bias moves every sampling point and ReLU input at
    // once, so some kink always falls inside the difference step
    assert!(err <= 1e-2, "max relative error {err}");
}

#[test]
fn end_to_end_gradients_without_adjustment() {
    let mut config = tiny_detector();
    config.apm.adjustment = false;
    for m in config.fam_modes.iter_mut().take(4) {
        *m = OffsetMode::Implicit;
    }
    let err = detector_gradient_error(config, |_| true);
    assert!(err <= 1e-3, "max relative error {err}");
}
