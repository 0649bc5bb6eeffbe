use ssod_core::evaluator::detection_metrics;
use ssod_core::pipeline::{reforward, stream_rng, supervised_terms};
use ssod_core::synth::{generate_dataset, student_sgd_step, Detection};
use ssod_core::*;

#[test]
fn planted_detector_scores_above_point_nine() {
    for seed in 0..3 {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let t = Trainer::new(cfg).unwrap();
        let oracle = ToyDetector::oracle(t.world(), 1.0);
        let (preds, gts) = t.predictions(&oracle);
        let m = detection_metrics(&preds, &gts, t.world().num_classes());
        assert!(m.map_50 > 0.9, "seed {seed}: oracle mAP@50 {}", m.map_50);
    }
}

/// Full-batch gradient descent on the supervised loss over a fixed set of
/// proposals and features, starting from zero weights.
fn supervised_curve(seed: u64, steps: usize, lr: f64) -> Vec<f64> {
    let cfg = RunConfig::default();
    let world = World::new(cfg.world.clone(), &mut stream_rng(seed, &[1])).unwrap();
    let (labeled, _) = generate_dataset(&world, &cfg.imbalance, &mut stream_rng(seed, &[2]));
    let mut model = ToyDetector::zeros(world.num_classes(), world.feature_dim());
    let mut rng = stream_rng(seed, &[3]);
    let fixed: Vec<Vec<Detection>> = labeled
        .iter()
        .map(|s| model.detect(&world, s, cfg.sampled_proposals, Source::Student, &mut rng))
        .collect();
    let n = labeled.len() as f64;
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut total = 0.0;
        let mut grad = vec![0.0; model.params.len()];
        for (scene, dets) in labeled.iter().zip(&fixed) {
            let dets = reforward(&model, dets, scene.canvas);
            let (v, g) = supervised_terms(&model, &dets, &scene.objects);
            total += v / n;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
        }
        curve.push(total);
        if step < steps {
            model = student_sgd_step(&model, &ModelParams(grad), lr);
        }
    }
    curve
}

#[test]
fn supervised_loss_decreases_over_first_fifty_steps() {
    let curves: Vec<Vec<f64>> = (0..10).map(|s| supervised_curve(s, 50, 0.001)).collect();
    let mean: Vec<f64> = (0..=50)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect();
    for k in 1..mean.len() {
        assert!(mean[k] < mean[k - 1], "step {k}: {} -> {}", mean[k - 1], mean[k]);
    }
}
