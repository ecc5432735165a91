//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Run with `cargo test --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use filter_core::dataset::{image_label, Dataset};
use filter_core::encoder::{encoder_forward, EncoderParams};
use filter_core::eval::{evaluate, roc_auc};
use filter_core::global::{aggregate, GlobalParams, Pooling};
use filter_core::gradcheck::{check_all, DEFAULT_POINTS, GRADCHECK_TOL};
use filter_core::losses::{pull_loss, push_loss, total_loss, LossWeights};
use filter_core::model::{run_batch, ModelParams, Objective};
use filter_core::numeric::Tensor;
use filter_core::simmat::{build_groups, read_heatmap_csv, similarity_matrix};
use filter_core::synth::{gen_synthetic, SynthConfig};
use filter_core::trainer::{epoch_checkpoint_path, train, TrainConfig};

const AUC_TARGET: f64 = 0.95;
const E2E_BUDGET_S: f64 = 300.0;
const GRAD_BUDGET_S: f64 = 60.0;
const NO_SM_MARGIN: f64 = 0.10;
const SM_TREND_TOL: f64 = 0.02;

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

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_filter")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("spawn filter binary")
}

fn split(ds: &Dataset, n_train: usize) -> (Dataset, Dataset) {
    let part = |images: &[_]| Dataset {
        feature_dim: ds.feature_dim,
        images: images.to_vec(),
        split_tag: ds.split_tag.clone(),
    };
    (part(&ds.images[..n_train]), part(&ds.images[n_train..]))
}

/// The reference task: 500 images at seed 7, first 400 train, last 100 test.
fn reference_task() -> (Dataset, Dataset) {
    let ds = gen_synthetic(&SynthConfig::default(), 7).expect("synthetic data");
    split(&ds, 400)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let summaries = match check_all(2024, DEFAULT_POINTS) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let worst = summaries.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed).map(|s| s.op.as_str()).collect();
    let pass = failed.is_empty() && worst < GRADCHECK_TOL && secs < GRAD_BUDGET_S;
    outcome(
        pass,
        format!(
            "{} ops x {} points, worst rel err {worst:.2e} (< {GRADCHECK_TOL:.0e}), {secs:.1}s (< {GRAD_BUDGET_S}s){}",
            summaries.len(),
            DEFAULT_POINTS,
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {failed:?}")
            }
        ),
    )
}

fn random_group(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor, Vec<u8>, Vec<bool>) {
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    mask[0] = true;
    mask[1] = true;
    (Tensor::from_vec(&[n, d], data).unwrap(), labels, mask)
}

fn loss_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = LossWeights::default();
    if (w.local, w.pull, w.push) != (1.0, 4.0, 1.0) {
        return outcome(false, format!("default weights are {w:?}"));
    }
    // Bitwise identity on random components and on real batches.
    for _ in 0..1000 {
        let (g, l, p, q) = (
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>() * 50.0,
            rng.random::<f64>() * 50.0,
        );
        let b = total_loss(g, l, p, q, w).unwrap();
        if b.total.to_bits() != (g + 1.0 * l + 4.0 * p + 1.0 * q).to_bits() {
            return outcome(false, format!("total mismatch at ({g}, {l}, {p}, {q})"));
        }
    }
    let (train_ds, _) = reference_task();
    let cfg = TrainConfig::default();
    let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for batch in train_ds.images.chunks(16).take(5) {
        let b = run_batch(&params, batch, &Objective::default(), false)
            .unwrap()
            .breakdown;
        if b.total.to_bits() != (b.global + 1.0 * b.local + 4.0 * b.pull + 1.0 * b.push).to_bits() {
            return outcome(false, format!("batch total mismatch: {b:?}"));
        }
    }
    // Pull is zero (to rounding) exactly when members align with their
    // prototypes: random features align only when each class has a single
    // live member; scaled copies of one direction per class always do.
    let (mut iff_violations, mut max_aligned) = (0usize, 0.0f64);
    let (mut push_lo, mut push_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..500 {
        let n = rng.random_range(4..24);
        let d = rng.random_range(2..10);
        let (x, labels, mask) = random_group(&mut rng, n, d);
        let live = |c: u8| (0..n).filter(|&i| mask[i] && labels[i] == c).count();
        let lone = live(0) == 1 && live(1) == 1;
        let pull = pull_loss(&x, &labels, &mask).unwrap().value;
        if pull < 0.0 || (pull <= 1e-12) != lone {
            iff_violations += 1;
        }
        let q = push_loss(&x, &labels, &mask).unwrap().value;
        push_lo = push_lo.min(q);
        push_hi = push_hi.max(q);

        let dirs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let aligned: Vec<f64> = labels
            .iter()
            .flat_map(|&y| {
                let s = rng.random_range(0.5..2.0);
                dirs[y as usize].iter().map(move |v| v * s).collect::<Vec<_>>()
            })
            .collect();
        let aligned = Tensor::from_vec(&[n, d], aligned).unwrap();
        max_aligned = max_aligned.max(pull_loss(&aligned, &labels, &mask).unwrap().value);
    }
    let pass = iff_violations == 0 && max_aligned <= 1e-12 && push_lo > 0.0 && push_hi <= 2.0;
    outcome(
        pass,
        format!(
            "total bitwise over 1000 draws + 5 batches; pull >= 0 and zero iff aligned ({iff_violations} violations, aligned max {max_aligned:.1e} <= 1e-12); push in [{push_lo:.3e}, {push_hi:.3}] within (0, 2]"
        ),
    )
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn metric_oracle() -> Outcome {
    let example = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..50);
        // Coarse levels force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        if roc_auc(&scores, &labels).unwrap() != brute_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && example == 0.75,
        format!("1000 instances (n <= 200, tied scores), {mismatches} mismatches; worked example = {example}"),
    )
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut problems = Vec::new();
    for trial in 0..100 {
        let n = rng.random_range(3..16);
        let d = rng.random_range(2..12);
        let (x, _, mask) = random_group(&mut rng, n, d);
        let s = similarity_matrix(&x, &mask).unwrap();
        for i in 0..n {
            for j in 0..n {
                let v = s.row(i)[j];
                let ok = if !(mask[i] && mask[j]) {
                    v == 0.0
                } else if i == j {
                    v == 1.0
                } else {
                    v == s.row(j)[i]
                };
                if !ok {
                    problems.push(format!("S[{i},{j}] trial {trial}"));
                }
            }
        }

        // Encoder: permuting slots permutes outputs bit for bit; masked slot
        // contents never reach live outputs.
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let dm = heads * rng.random_range(1..4);
        let p = EncoderParams::init(dm, heads, rng.random_range(2..9), &mut rng).unwrap();
        let tokens = Tensor::from_vec(&[n, dm], (0..n * dm).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (out, _) = encoder_forward(&tokens, &mask, &p).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pt: Vec<f64> = perm.iter().flat_map(|&k| tokens.row(k).to_vec()).collect();
        let pm: Vec<bool> = perm.iter().map(|&k| mask[k]).collect();
        let (pout, _) = encoder_forward(&Tensor::from_vec(&[n, dm], pt).unwrap(), &pm, &p).unwrap();
        for (i, &k) in perm.iter().enumerate() {
            if pout
                .row(i)
                .iter()
                .zip(out.row(k))
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                problems.push(format!("encoder equivariance trial {trial}"));
                break;
            }
        }
        let mut noisy = tokens.clone();
        for i in (0..n).filter(|&i| !mask[i]) {
            for v in noisy.row_mut(i) {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        let (nout, _) = encoder_forward(&noisy, &mask, &p).unwrap();
        for i in (0..n).filter(|&i| mask[i]) {
            if nout
                .row(i)
                .iter()
                .zip(out.row(i))
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                problems.push(format!("mask isolation trial {trial}"));
                break;
            }
        }

        // Aggregation ignores face order.
        let gp = GlobalParams::init(d, 8, &mut rng);
        let faces: Vec<&[f64]> = (0..n).map(|i| x.row(i)).collect();
        let mut shuffled = faces.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for pooling in [Pooling::Mean, Pooling::Max] {
            let a = aggregate(&faces, &gp, pooling).unwrap();
            let b = aggregate(&shuffled, &gp, pooling).unwrap();
            if a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits()) {
                problems.push(format!("aggregate {pooling} trial {trial}"));
            }
        }

        // Image label is the max rule: one fake makes the image fake.
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let y = image_label(&labels).unwrap();
        let mut more = labels.clone();
        more.push(1);
        let mut flipped = labels.clone();
        flipped[rng.random_range(0..n)] = 1;
        if image_label(&more).unwrap() < y || image_label(&flipped).unwrap() < y || image_label(&more).unwrap() != 1 {
            problems.push(format!("image label trial {trial}"));
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "100 random groups: S symmetric/unit-diag/masked-zero, encoder equivariance + mask isolation bitwise, aggregate order-free, max-rule labels; {} violations{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    )
}

struct E2E {
    train_ds: Dataset,
    test_ds: Dataset,
    test_path: PathBuf,
    ckpt: PathBuf,
    face_auc: f64,
    image_acc: f64,
}

fn end_to_end(dir: &Path) -> (Outcome, E2E) {
    let (train_ds, test_ds) = reference_task();
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let ckpt = dir.join("full.ckpt");
    let t = Instant::now();
    let out = train(&train_ds, &test_ds, &cfg, Some(&ckpt)).expect("training");
    let secs = t.elapsed().as_secs_f64();
    let r = evaluate(&out.params, &test_ds, false).expect("evaluation");
    let face_auc = r.face_auc.unwrap_or(f64::NAN);
    let test_path = dir.join("test.jsonl");
    filter_core::dataset::save_dataset(&test_ds, &test_path).unwrap();
    let o = outcome(
        face_auc >= AUC_TARGET && secs < E2E_BUDGET_S,
        format!(
            "held-out face AUC {face_auc:.4} (>= {AUC_TARGET}) after {} epochs, {secs:.1}s (< {E2E_BUDGET_S}s); image ACC {:.3}",
            cfg.epochs, r.image_acc
        ),
    );
    let e2e = E2E {
        train_ds,
        test_ds,
        test_path,
        ckpt,
        face_auc,
        image_acc: r.image_acc,
    };
    (o, e2e)
}

fn ablation(e2e: &E2E) -> Outcome {
    let run = |tweak: fn(&mut TrainConfig)| {
        let mut cfg = TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        };
        tweak(&mut cfg);
        let out = train(&e2e.train_ds, &e2e.test_ds, &cfg, None).expect("training");
        evaluate(&out.params, &e2e.test_ds, false).expect("evaluation")
    };
    let no_sm = run(|c| c.model.no_sm = true);
    let no_global = run(|c| c.objective.no_global = true);
    let no_sm_auc = no_sm.face_auc.unwrap_or(f64::NAN);
    let gap = e2e.face_auc - no_sm_auc;
    outcome(
        gap >= NO_SM_MARGIN && e2e.image_acc > no_global.image_acc,
        format!(
            "face AUC Full {:.4} vs No-SM {no_sm_auc:.4} (gap {gap:.4} >= {NO_SM_MARGIN}); image ACC Full {:.3} vs No-global {:.3}",
            e2e.face_auc, e2e.image_acc, no_global.image_acc
        ),
    )
}

fn sm_size_trend() -> Outcome {
    let sizes = [10usize, 20, 40];
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    for &n in &sizes {
        let mut total = 0.0;
        for &seed in &seeds {
            let synth = SynthConfig {
                num_images: 250,
                min_faces: 10,
                max_faces: 10,
                ..SynthConfig::default()
            };
            let ds = gen_synthetic(&synth, 100 + seed).unwrap();
            let (tr, te) = split(&ds, 200);
            let mut cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            cfg.model.group_size = n;
            let out = train(&tr, &te, &cfg, None).expect("training");
            total += evaluate(&out.params, &te, false).unwrap().face_auc.unwrap_or(f64::NAN);
        }
        means.push(total / seeds.len() as f64);
    }
    let pass = means.windows(2).all(|w| w[1] >= w[0] - SM_TREND_TOL);
    let shown: Vec<String> = sizes
        .iter()
        .zip(&means)
        .map(|(n, a)| format!("n={n}: {a:.4}"))
        .collect();
    outcome(
        pass,
        format!(
            "mean face AUC over 3 seeds, 10 faces/image: {} (non-decreasing within {SM_TREND_TOL})",
            shown.join(", ")
        ),
    )
}

/// Mean similarity of same-label pairs minus mean of cross-label pairs.
fn class_contrast(sim: &Tensor, labels: &[u8], mask: &[bool]) -> f64 {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j || !mask[i] || !mask[j] {
                continue;
            }
            if labels[i] == labels[j] {
                within += sim.row(i)[j];
                nw += 1;
            } else {
                cross += sim.row(i)[j];
                nc += 1;
            }
        }
    }
    within / nw as f64 - cross / nc as f64
}

fn heatmap_evolution(dir: &Path, e2e: &E2E) -> Outcome {
    let prefix = dir.join("probe");
    let out = run_cli(&[
        "heatmap",
        "--ckpt",
        e2e.ckpt.to_str().unwrap(),
        "--data",
        e2e.test_path.to_str().unwrap(),
        "--group-index",
        "0",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    if !out.status.success() {
        return outcome(
            false,
            format!("heatmap command failed: {}", String::from_utf8_lossy(&out.stderr)),
        );
    }
    let group = build_groups(&e2e.test_ds.images, TrainConfig::default().model.group_size)
        .unwrap()
        .remove(0);
    let mut values = Vec::new();
    for epoch in [1usize, 5, 10] {
        let csv = PathBuf::from(format!("{}.epoch{epoch:03}.csv", prefix.display()));
        match read_heatmap_csv(&csv) {
            Ok(sim) => values.push(class_contrast(&sim, &group.labels, &group.mask)),
            Err(e) => return outcome(false, format!("{}: {e}", csv.display())),
        }
    }
    outcome(
        values.windows(2).all(|w| w[1] > w[0]),
        format!(
            "within-minus-cross similarity on probe group 0 ({} faces): epoch 1 {:.4}, epoch 5 {:.4}, epoch 10 {:.4} (strictly increasing)",
            group.live(),
            values[0],
            values[1],
            values[2]
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("det.jsonl");
    let synth = run_cli(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--images",
        "120",
        "--seed",
        "3",
    ]);
    if !synth.status.success() {
        return outcome(false, "synth command failed");
    }
    let mut files: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run in ["a", "b"] {
        let sub = dir.join(run);
        fs::create_dir_all(&sub).unwrap();
        let ckpt = sub.join("model.ckpt");
        let out = run_cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out-ckpt",
            ckpt.to_str().unwrap(),
            "--epochs",
            "3",
            "--seed",
            "5",
            "--threads",
            "1",
        ]);
        if !out.status.success() {
            return outcome(
                false,
                format!("train run {run} failed: {}", String::from_utf8_lossy(&out.stderr)),
            );
        }
        let mut paths: Vec<PathBuf> = (1..=3).map(|e| epoch_checkpoint_path(&ckpt, e)).collect();
        paths.push(ckpt.clone());
        paths.push(filter_core::trainer::log_path(&ckpt));
        files.push(
            paths
                .iter()
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        fs::read(p).unwrap_or_default(),
                    )
                })
                .collect(),
        );
    }
    let differing: Vec<&str> = files[0]
        .iter()
        .zip(&files[1])
        .filter(|(a, b)| a.1.is_empty() || a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "two CLI train runs (seed 5, threads 1): {} files compared, {} differ{}",
            files[0].len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" {differing:?}")
            }
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let (e2e_outcome, e2e) = end_to_end(dir.path());
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("loss algebra", loss_algebra()),
        ("metric oracle", metric_oracle()),
        ("structural invariants", structural_invariants()),
        ("end-to-end learning", e2e_outcome),
        ("ablation direction", ablation(&e2e)),
        ("group-size trend", sm_size_trend()),
        ("heatmap evolution", heatmap_evolution(dir.path(), &e2e)),
        ("determinism", determinism(dir.path())),
    ];

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
