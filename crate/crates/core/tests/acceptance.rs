//! Acceptance runner. Each check prints one PASS/FAIL line; the process exits
//! nonzero when any of them fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssod_core::evaluator::{average_precision, write_csv, GroundTruth, Prediction};
use ssod_core::geometry::iou;
use ssod_core::gradcheck::{run_suite, TOLERANCE};
use ssod_core::jitter_bagging::{refine_box, BoxPredictor};
use ssod_core::pipeline::median;
use ssod_core::synth::SceneHead;
use ssod_core::weight_update::{dema_step, ema_step, DemaState};
use ssod_core::*;

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let checks = run_suite(100, 2024);
    let secs = t0.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed(TOLERANCE))
        .map(|c| c.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && secs < 10.0,
        format!(
            "{} gradients, worst rel err {worst:.2e}, {secs:.2}s{}",
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn recomposition() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.iterations = 500;
    cfg.burn_in = 100;
    cfg.eval_every = 500;
    let lambda = cfg.loss.lambda;
    let mut t = Trainer::new(cfg).expect("valid config");
    let mut worst = 0.0f64;
    let mut pl_active = 0;
    for _ in 0..500 {
        let b = t.step().expect("finite run");
        worst = worst.max(b.recomposition_error(lambda));
        if b.pl_weak + b.pl_strong > 0.0 {
            pl_active += 1;
        }
    }
    outcome(
        worst <= 1e-9 && pl_active > 0,
        format!("500 iterations ({pl_active} with pseudo-label terms), max |error| {worst:.2e}"),
    )
}

fn threshold_arithmetic() -> Outcome {
    let mut ok = true;
    let mut s = ThresholdState::default();
    ok &= s.compute(&[0.9], &[0.9]) == 0.9;
    ok &= s.compute(&[0.05], &[0.9]) == 0.8;
    ok &= s.compute(&[0.3], &[0.9]) == 0.9;
    let worked = ok;

    let allowed = [0.5, 0.6, 0.7, 0.8, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut off_grid = 0;
    let mut non_monotone = 0;
    for _ in 0..10_000 {
        let nf = rng.random_range(1..30);
        let nb = rng.random_range(1..30);
        // log-uniform scores so the ratio spans many decades
        let fg: Vec<f64> = (0..nf).map(|_| 10f64.powf(rng.random_range(-6.0..0.0))).collect();
        let bg: Vec<f64> = (0..nb).map(|_| 10f64.powf(rng.random_range(-6.0..0.0))).collect();
        let bump = rng.random_range(0.0..1.0);
        let raised: Vec<f64> = fg.iter().map(|x| (x + bump).min(1.0)).collect();
        let a = ThresholdState::default().compute(&fg, &bg);
        let b = ThresholdState::default().compute(&raised, &bg);
        if !allowed.contains(&a) || !allowed.contains(&b) {
            off_grid += 1;
        }
        if b < a {
            non_monotone += 1;
        }
    }
    ok &= off_grid == 0 && non_monotone == 0;
    outcome(
        ok,
        format!("worked examples {}, 10^4 populations: {off_grid} off-grid, {non_monotone} monotonicity violations",
            if worked { "exact" } else { "WRONG" }),
    )
}

fn dema_lag() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for alpha in [0.999, 0.9] {
        let zero = ModelParams(vec![0.0]);
        let target = ModelParams(vec![1.0]);
        let mut ema = zero.clone();
        let mut dema = DemaState::new(alpha, &zero);
        let mut violations = 0;
        let mut first = None;
        let mut worst_excess = 0.0f64;
        for k in 1..=10_000 {
            ema = ema_step(&ema, &target, alpha).unwrap();
            let d = dema_step(&mut dema, &target).unwrap();
            let (e_ema, e_dema) = ((1.0 - ema.0[0]).abs(), (1.0 - d.0[0]).abs());
            if e_dema > e_ema {
                violations += 1;
                first.get_or_insert(k);
                worst_excess = worst_excess.max(e_dema - e_ema);
            }
        }
        ok &= violations == 0;
        detail.push(match first {
            None => format!("alpha {alpha}: dominant at all 10^4 steps"),
            Some(k) => format!(
                "alpha {alpha}: {violations} steps where DEMA error exceeds EMA error, first at step {k}, max excess {worst_excess:.3e}"
            ),
        });
    }
    let mut s = DemaState::new(0.999, &ModelParams(vec![1.0]));
    let v = dema_step(&mut s, &ModelParams(vec![0.0])).unwrap().0[0];
    let worked = (v - 0.996006).abs() <= 1e-9;
    ok &= worked;
    detail.push(format!("worked value {v:.9} (|diff| {:.1e})", (v - 0.996006).abs()));
    outcome(ok, detail.join("; "))
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
    let (w, h) = (rng.random_range(1.0..10.0), rng.random_range(1.0..10.0));
    BBox::new(x, y, x + w, y + h)
}

/// Enumerates every subset and returns those that are a fixed point of suppression:
/// a box is kept exactly when no kept, higher-ranked box overlaps it at `thr` or more.
fn nms_fixed_points(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<BTreeSet<usize>> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let blockers: Vec<u32> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| rank[j] < rank[i] && iou(&boxes[i], &boxes[j]) >= thr)
                .fold(0u32, |m, j| m | (1 << j))
        })
        .collect();
    (0u32..(1u32 << n))
        .filter(|&s| (0..n).all(|i| ((s >> i) & 1 == 1) == (s & blockers[i] == 0)))
        .map(|s| (0..n).filter(|&i| (s >> i) & 1 == 1).collect())
        .collect()
}

fn nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=20);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let thr = rng.random_range(0.1..0.9);
        let got: BTreeSet<usize> = ssod_core::detection::nms_indices(&boxes, &scores, thr).into_iter().collect();
        let reference = nms_fixed_points(&boxes, &scores, thr);
        if reference.len() != 1 || reference[0] != got {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 sets with up to 20 boxes, {mismatches} mismatches"))
}

/// Single-class AP from first principles: match in score order, list every
/// (recall, precision) point, then sum precision envelopes over recall increments.
fn reference_ap(preds: &[Prediction], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, p) in ranked.iter().enumerate() {
        let candidate = (0..gts.len())
            .filter(|&g| !taken[g] && gts[g].image == p.image)
            .map(|g| (g, iou(&p.bbox, &gts[g].bbox)))
            .filter(|&(_, v)| v >= thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = candidate {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let envelope = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    Some(ap)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut structural = 0;
    for _ in 0..50 {
        let images = rng.random_range(1..=3);
        let classes = rng.random_range(1..=3);
        let n_gt = rng.random_range(1..=10);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                image: rng.random_range(0..images),
                bbox: random_box(&mut rng),
                class: rng.random_range(0..classes),
            })
            .collect();
        let n_pred = rng.random_range(0..=10);
        let preds: Vec<Prediction> = (0..n_pred)
            .map(|_| {
                // half the predictions are perturbed copies of a ground truth
                let (image, bbox, class) = if rng.random_bool(0.5) {
                    let g = &gts[rng.random_range(0..gts.len())];
                    let d = rng.random_range(-1.5..1.5);
                    (g.image, g.bbox.translate(d, -d / 2.0), g.class)
                } else {
                    (rng.random_range(0..images), random_box(&mut rng), rng.random_range(0..classes))
                };
                Prediction {
                    image,
                    bbox,
                    class,
                    score: rng.random(),
                }
            })
            .collect();
        for thr in [0.5, 0.75] {
            let got = average_precision(&preds, &gts, classes, thr);
            for (c, g) in got.iter().enumerate() {
                match (g, reference_ap(&preds, &gts, c, thr)) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => structural += 1,
                }
            }
        }
    }
    outcome(
        worst <= 1e-9 && structural == 0,
        format!("50 cases at IoU 0.5 and 0.75, max |diff| {worst:.2e}, {structural} defined/undefined mismatches"),
    )
}

/// Teacher whose regression head is a shrunken, perturbed copy of the planted
/// regressor: it moves boxes only part of the way toward the object, with noise.
fn noisy_teacher<R: Rng>(world: &World, rng: &mut R) -> ToyDetector {
    let oracle = ToyDetector::oracle(world, 1.0);
    let n_cls = ToyDetector::param_count(world.num_classes(), world.feature_dim())
        - 4 * (world.feature_dim() + 1);
    let shrink = rng.random_range(0.3..0.8);
    let mut p = oracle.params.clone();
    for v in &mut p.0[n_cls..] {
        *v = shrink * *v + 0.03 * rng.random_range(-1.0..1.0);
    }
    oracle.with_params(p)
}

fn jitter_bagging_direction() -> Outcome {
    let t0 = Instant::now();
    let jcfg = JitterConfig::default();
    let (mut raw_sum, mut refined_sum, mut count) = (0.0, 0.0, 0usize);
    let mut seeds_improved = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = World::new(WorldConfig::default(), &mut rng).unwrap();
        let teacher = noisy_teacher(&world, &mut rng);
        let freqs = ImbalanceSpec::default().class_frequencies;
        let (mut r_seed, mut f_seed) = (0.0, 0.0);
        for _ in 0..5 {
            let scene = world.generate_scene(&freqs, &mut rng);
            let head = SceneHead {
                model: &teacher,
                world: &world,
                scene: &scene,
            };
            let gt: Vec<BBox> = scene.objects.iter().map(|(b, _)| *b).collect();
            for p in world.proposals(&scene, 60, &mut rng) {
                let Some(target) = gt.iter().copied().max_by(|a, b| iou(&p, a).total_cmp(&iou(&p, b))) else {
                    continue;
                };
                if iou(&p, &target) < 0.5 {
                    continue;
                }
                let (raw, _) = head.predict(&p, &mut rng);
                let refined = refine_box(&raw, &head, &jcfg, world.canvas(), &mut rng);
                r_seed += iou(&raw, &target);
                f_seed += iou(&refined, &target);
                count += 1;
            }
        }
        raw_sum += r_seed;
        refined_sum += f_seed;
        if f_seed >= r_seed {
            seeds_improved += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (raw, refined) = (raw_sum / count as f64, refined_sum / count as f64);
    outcome(
        refined >= raw && secs < 60.0,
        format!(
            "100 seeds, {count} boxes: mean IoU refined {refined:.4} vs raw {raw:.4} ({seeds_improved}/100 seeds improved), {secs:.1}s"
        ),
    )
}

fn named(dim: AblationDimension, base: &RunConfig, name: &str) -> RunConfig {
    dim.variants(base)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, c)| c)
        .unwrap_or_else(|| panic!("no variant {name}"))
}

fn end_to_end() -> Vec<(String, Outcome)> {
    let t0 = Instant::now();
    let mut base = RunConfig::default();
    base.eval_every = base.iterations;
    let configs = [
        ("full", base.clone()),
        ("static 0.7", named(AblationDimension::Threshold, &base, "0.7")),
        ("ema", named(AblationDimension::Update, &base, "ema")),
        ("deepcopy", named(AblationDimension::Update, &base, "deepcopy")),
        ("case I", named(AblationDimension::Losses, &base, "CaseI")),
        ("weak only", named(AblationDimension::Generators, &base, "weak")),
        ("strong only", named(AblationDimension::Generators, &base, "strong")),
    ];
    let seeds: Vec<u64> = (0..10).collect();
    // (map50, pl_recall) per config per seed
    let results: Vec<Vec<(f64, f64)>> = configs
        .iter()
        .map(|(_, cfg)| {
            seeds
                .iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.seed = s;
                    let out = train(&c).expect("training run");
                    let r = out.final_record();
                    (r.map_50, r.pl_recall)
                })
                .collect()
        })
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let map = |i: usize| median(&results[i].iter().map(|r| r.0).collect::<Vec<_>>());
    let recall = |i: usize| median(&results[i].iter().map(|r| r.1).collect::<Vec<_>>());
    let in_budget = secs < 600.0;
    let budget = format!("{secs:.0}s for 70 runs");

    let wins = (0..seeds.len()).filter(|&k| results[0][k].0 > results[1][k].0).count();
    let (dema, ema, deepcopy) = (map(0), map(2), map(3));
    let (both, weak, strong) = (map(0), map(5), map(6));
    vec![
        (
            "end-to-end (a) adaptive vs static 0.7".into(),
            outcome(wins >= 8 && in_budget, format!("adaptive ahead in {wins}/10 seeds; {budget}")),
        ),
        (
            "end-to-end (b) DEMA >= EMA >= deepcopy".into(),
            outcome(
                dema >= ema && ema >= deepcopy && in_budget,
                format!("median mAP@50 {dema:.4} / {ema:.4} / {deepcopy:.4}"),
            ),
        ),
        (
            "end-to-end (c) full suite vs case I recall".into(),
            outcome(
                recall(0) >= recall(4) && in_budget,
                format!("median PL recall {:.4} vs {:.4}", recall(0), recall(4)),
            ),
        ),
        (
            "end-to-end (d) both generators vs either".into(),
            outcome(
                both >= weak && both >= strong && in_budget,
                format!("median mAP@50 both {both:.4}, weak {weak:.4}, strong {strong:.4}"),
            ),
        ),
    ]
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 42;
    cfg.iterations = 300;
    cfg.burn_in = 100;
    cfg.eval_every = 50;
    let csv = || {
        let out = train(&cfg).expect("training run");
        let mut buf = Vec::new();
        write_csv(&out.records, &mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(), csv());
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or test filters are accepted and ignored
    let checks: [Check; 8] = [
        ("gradient suite", gradient_suite),
        ("loss recomposition", recomposition),
        ("adaptive threshold arithmetic", threshold_arithmetic),
        ("DEMA lag dominance", dema_lag),
        ("NMS oracle equivalence", nms_oracle),
        ("AP oracle equivalence", ap_oracle),
        ("Jitter-Bagging direction", jitter_bagging_direction),
        ("determinism", determinism),
    ];
    let mut results: Vec<(String, Outcome)> = checks.into_iter().map(|(n, f)| (n.to_string(), f())).collect();
    results.extend(end_to_end());

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
