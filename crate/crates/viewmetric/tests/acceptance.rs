//! Acceptance suite: every release criterion, one pass/fail line each.
//!
//! Run with `cargo test -p viewmetric --test acceptance -- --nocapture` to
//! see the lines; assertions fail the build when a criterion is missed.
//!
//! The directional criteria (4-8) run full training on the calibration
//! dataset: 80 identities split 50 train / 30 test, 4 images each, d_x=32,
//! d_z=8, viewpoint gap 6.0, noise 0.3, averaged over 3 master-seed-derived
//! replicates.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viewmetric::config::ExperimentConfig;
use viewmetric::data::{generate_dataset, Viewpoint};
use viewmetric::eval::mean_average_precision;
use viewmetric::experiments::{run_ablation, run_branch_sweep, run_sigma_sweep};
use viewmetric::linalg::Matrix;
use viewmetric::loss::{
    cross_space_loss, id_equal_mask, pairwise_distances, relation_masks, total_loss,
    training_loss, training_loss_eval, within_space_loss, LossFlags, MinedFor, SquareMask,
    TripletSelection,
};
use viewmetric::model::{finite_difference_check, init_model, ModelConfig};
use viewmetric::trainer::Variant;

fn report(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion:2} {} - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn calibration_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn vp(i: usize) -> Viewpoint {
    Viewpoint::ALL[i]
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness of the full forward + total-loss
// composite, all four variants, >= 20 seeded small models, < 1 minute.
// ---------------------------------------------------------------------------
#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let variants = Variant::ALL;
    let seeds = 0..5u64;
    let mut models_checked = 0usize;
    let mut worst = 0.0f64;
    let mut total_checked = 0usize;

    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let n = 8;
        let x = Matrix::from_fn(n, 6, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let ids: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let preds: Vec<Viewpoint> = (0..n).map(|i| vp(i % 2)).collect();

        for variant in variants {
            let cfg = ModelConfig {
                d_x: 6,
                trunk_widths: vec![8],
                branch_widths: vec![8],
                d_e: 4,
                n_branches: variant.default_branches(),
                n_viewpoints: 2,
                n_classes: 2,
                use_ce_head: true,
                normalize_embeddings: false,
                init_seed: seed,
            };
            let model = init_model(&cfg).unwrap();
            let flags = variant.flags(true);
            let (_, analytic) =
                training_loss(&model, &x, &preds, &ids, 0.5, 1.0, &flags).unwrap();
            let fd = finite_difference_check(
                &model,
                |m| training_loss_eval(m, &x, &preds, &ids, 0.5, 1.0, &flags),
                &analytic,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                fd.checked > 0,
                "variant {variant} seed {seed}: no parameters checked"
            );
            worst = worst.max(fd.max_rel_error);
            total_checked += fd.checked;
            models_checked += 1;
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && models_checked >= 20 && elapsed < 60.0;
    report(
        1,
        ok,
        &format!(
            "gradient check: {models_checked} models, {total_checked} params compared, \
             max relative error {worst:.3e}, {elapsed:.1}s"
        ),
    );
    assert!(ok, "max rel error {worst}, {models_checked} models, {elapsed}s");
}

// ---------------------------------------------------------------------------
// Criterion 2: batch-hard mining equals exhaustive enumeration on 200
// random batches with N <= 16, to 1e-10, < 1 minute.
// ---------------------------------------------------------------------------

/// Exhaustive oracle: scan every candidate with explicit sorting, entirely
/// independent of the mining implementation.
fn oracle_mine(
    pos_d: &Matrix,
    neg_d: &Matrix,
    pos_ok: impl Fn(usize, usize) -> bool,
    neg_ok: impl Fn(usize, usize) -> bool,
    alpha: f64,
) -> (f64, Vec<(Option<usize>, Option<usize>)>) {
    let n = pos_d.rows();
    let mut picks = Vec::new();
    let mut total = 0.0;
    let mut valid = 0usize;
    for a in 0..n {
        let mut positives: Vec<(usize, f64)> = (0..n)
            .filter(|&j| pos_ok(a, j))
            .map(|j| (j, pos_d[(a, j)]))
            .collect();
        let mut negatives: Vec<(usize, f64)> = (0..n)
            .filter(|&j| neg_ok(a, j))
            .map(|j| (j, neg_d[(a, j)]))
            .collect();
        // Stable sorts keep the lowest index first among ties.
        positives.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
        negatives.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
        let hp = positives
            .iter()
            .filter(|(_, d)| *d == positives[0].1)
            .map(|(j, _)| *j)
            .min();
        let hn = negatives
            .iter()
            .filter(|(_, d)| *d == negatives[0].1)
            .map(|(j, _)| *j)
            .min();
        match (hp, hn) {
            (Some(p), Some(ng)) => {
                total += (pos_d[(a, p)] - neg_d[(a, ng)] + alpha).max(0.0);
                valid += 1;
                picks.push((Some(p), Some(ng)));
            }
            (p, ng) => picks.push((p, ng)),
        }
    }
    let loss = if valid > 0 { total / valid as f64 } else { 0.0 };
    (loss, picks)
}

fn selections_match(sel: &TripletSelection, oracle: &[(Option<usize>, Option<usize>)]) -> bool {
    sel.anchors
        .iter()
        .zip(oracle)
        .all(|(t, &(p, n))| match (t.is_valid(), p.is_some() && n.is_some()) {
            (true, true) => t.positive == p && t.negative == n,
            (false, false) => true,
            _ => false,
        })
}

#[test]
fn criterion_2_mining_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut ok = true;
    for batch in 0..200 {
        let n = rng.random_range(4..=16usize);
        let e_s = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let e_d = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let d_s = pairwise_distances(&e_s).unwrap();
        let d_d = pairwise_distances(&e_d).unwrap();
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
        let preds: Vec<Viewpoint> = (0..n).map(|_| vp(rng.random_range(0..2usize))).collect();
        let (s_mask, d_mask) = relation_masks(&preds);
        let id_eq = id_equal_mask(&ids);
        let alpha = 0.5;

        let (l_s, sel_s) = within_space_loss(&d_s, &s_mask, &id_eq, alpha);
        let (o_l_s, o_sel_s) = oracle_mine(
            &d_s,
            &d_s,
            |a, j| j != a && ids[a] == ids[j] && preds[a] == preds[j],
            |a, j| ids[a] != ids[j] && preds[a] == preds[j],
            alpha,
        );
        let (l_d, sel_d) = within_space_loss(&d_d, &d_mask, &id_eq, alpha);
        let (o_l_d, o_sel_d) = oracle_mine(
            &d_d,
            &d_d,
            |a, j| j != a && ids[a] == ids[j] && preds[a] != preds[j],
            |a, j| ids[a] != ids[j] && j != a && preds[a] != preds[j],
            alpha,
        );
        let (l_c, sel_c) = cross_space_loss(&d_d, &d_s, &d_mask, &s_mask, &id_eq, alpha);
        let (o_l_c, o_sel_c) = oracle_mine(
            &d_d,
            &d_s,
            |a, j| j != a && ids[a] == ids[j] && preds[a] != preds[j],
            |a, j| ids[a] != ids[j] && preds[a] == preds[j],
            alpha,
        );

        let batch_ok = (l_s - o_l_s).abs() < 1e-10
            && (l_d - o_l_d).abs() < 1e-10
            && (l_c - o_l_c).abs() < 1e-10
            && selections_match(&sel_s, &o_sel_s)
            && selections_match(&sel_d, &o_sel_d)
            && selections_match(&sel_c, &o_sel_c);
        if !batch_ok {
            ok = false;
            eprintln!("mining mismatch in batch {batch} (n={n})");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let ok = ok && elapsed < 60.0;
    report(
        2,
        ok,
        &format!("batch-hard mining vs exhaustive enumeration: 200 batches, {elapsed:.1}s"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 3: grey-cell invariance — perturbing D_s at D-view cells and
// D_d at S-view cells changes no loss value, exact equality, 100 instances.
// ---------------------------------------------------------------------------
#[test]
fn criterion_3_grey_cell_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(4..=12usize);
        let e_s = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let e_d = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let mut d_s = pairwise_distances(&e_s).unwrap();
        let mut d_d = pairwise_distances(&e_d).unwrap();
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
        let preds: Vec<Viewpoint> = (0..n).map(|_| vp(rng.random_range(0..2usize))).collect();
        let (s_mask, d_mask) = relation_masks(&preds);
        let id_eq = id_equal_mask(&ids);
        let alpha = 0.5;

        let before = (
            within_space_loss(&d_s, &s_mask, &id_eq, alpha).0,
            within_space_loss(&d_d, &d_mask, &id_eq, alpha).0,
            cross_space_loss(&d_d, &d_s, &d_mask, &s_mask, &id_eq, alpha).0,
        );
        for i in 0..n {
            for j in 0..n {
                if i != j && d_mask.get(i, j) {
                    d_s[(i, j)] = rng.random::<f64>() * 50.0;
                }
                if i != j && s_mask.get(i, j) {
                    d_d[(i, j)] = rng.random::<f64>() * 50.0;
                }
            }
        }
        let after = (
            within_space_loss(&d_s, &s_mask, &id_eq, alpha).0,
            within_space_loss(&d_d, &d_mask, &id_eq, alpha).0,
            cross_space_loss(&d_d, &d_s, &d_mask, &s_mask, &id_eq, alpha).0,
        );
        if before != after {
            ok = false;
        }
    }
    report(
        3,
        ok,
        "losses invariant to arbitrary changes of excluded (grey) distance cells, 100 instances",
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criteria 4, 5, 6: directional reproduction of the ablation table, the
// viewpoint-related protocol table, and the distance-histogram separation,
// all from one ablation run on the calibration dataset.
// ---------------------------------------------------------------------------
#[test]
fn criteria_4_5_6_ablation_directional() {
    let started = Instant::now();
    let cfg = calibration_config();
    let ds = generate_dataset(&cfg.gen_config()).unwrap();
    let outcome = run_ablation(&ds, &cfg).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let baseline = outcome.get(Variant::Baseline);
    let vanet = outcome.get(Variant::Vanet);
    let no_cross = outcome.get(Variant::VanetNoCross);
    let no_within = outcome.get(Variant::VanetNoWithin);

    println!(
        "ablation means: baseline top1={:.4} top1_d={:.4} | vanet top1={:.4} top1_d={:.4} | \
         no_cross top1={:.4} top1_d={:.4} | no_within top1={:.4} top1_d={:.4} ({elapsed:.0}s)",
        baseline.top1(),
        baseline.top1_d().unwrap_or(f64::NAN),
        vanet.top1(),
        vanet.top1_d().unwrap_or(f64::NAN),
        no_cross.top1(),
        no_cross.top1_d().unwrap_or(f64::NAN),
        no_within.top1(),
        no_within.top1_d().unwrap_or(f64::NAN),
    );

    // Criterion 4: overall top1 ordering with a 5-point margin, and the
    // no-cross degradation below baseline; whole run under 10 minutes.
    let c4_gap = vanet.top1() - baseline.top1();
    let c4 = c4_gap >= 0.05 && no_cross.top1() < baseline.top1() && elapsed < 600.0;
    report(
        4,
        c4,
        &format!(
            "top1: vanet {:.4} vs baseline {:.4} (gap {:+.4}, need >= +0.05); \
             no_cross {:.4} < baseline; ablation ran {elapsed:.0}s",
            vanet.top1(),
            baseline.top1(),
            c4_gap,
            no_cross.top1()
        ),
    );

    // Criterion 5: D-view family. The starred inequality must hold exactly
    // on every trial of every variant and replicate.
    let vanet_d = vanet.top1_d().expect("D-view queries present");
    let baseline_d = baseline.top1_d().expect("D-view queries present");
    let no_cross_d = no_cross.top1_d().expect("D-view queries present");
    let mut starred_ok = true;
    for vr in &outcome.variants {
        for rep in &vr.replicates {
            for trial in &rep.report.trials {
                if let (Some(star), Some(plain)) = (trial.top1_d_star, trial.top1_d) {
                    if star < plain {
                        starred_ok = false;
                    }
                }
                if let (Some(star), Some(plain)) = (trial.top1_s_star, trial.top1_s) {
                    if star < plain {
                        starred_ok = false;
                    }
                }
            }
        }
    }
    let c5 = vanet_d >= baseline_d + 0.10 && no_cross_d < baseline_d && starred_ok;
    report(
        5,
        c5,
        &format!(
            "top1_d: vanet {vanet_d:.4} vs baseline {baseline_d:.4} (need >= +0.10); \
             no_cross {no_cross_d:.4} < baseline; starred >= unstarred on every trial: {starred_ok}"
        ),
    );

    // Criterion 6: histogram overlap between D-view-pos and S-view-neg is
    // lower for the two-branch model on every replicate.
    let mut c6 = true;
    for (b_rep, v_rep) in baseline.replicates.iter().zip(&vanet.replicates) {
        println!(
            "overlap replicate {}: baseline {:.4}, vanet {:.4}",
            b_rep.replicate, b_rep.histograms.overlap, v_rep.histograms.overlap
        );
        if v_rep.histograms.overlap >= b_rep.histograms.overlap {
            c6 = false;
        }
    }
    report(
        6,
        c6,
        "D-view-pos / S-view-neg distance overlap lower for vanet than baseline on every seed",
    );

    let _ = no_within;
    assert!(c4, "criterion 4 failed");
    assert!(c5, "criterion 5 failed");
    assert!(c6, "criterion 6 failed");
}

// ---------------------------------------------------------------------------
// Criterion 7: top1 under growing viewpoint-prediction error.
// ---------------------------------------------------------------------------
#[test]
fn criterion_7_sigma_sweep_directional() {
    let cfg = calibration_config();
    let ds = generate_dataset(&cfg.gen_config()).unwrap();
    let outcome = run_sigma_sweep(&ds, &cfg).unwrap();
    println!(
        "sigma sweep: sigmas {:?} vanet {:?} baseline {:?}",
        outcome.sigmas, outcome.vanet_top1, outcome.baseline_top1
    );

    let mut monotone = true;
    for w in outcome.vanet_top1.windows(2) {
        if w[1] > w[0] + 0.01 {
            monotone = false;
        }
    }
    let drop = outcome.vanet_top1.first().unwrap() - outcome.vanet_top1.last().unwrap();
    let ok = monotone && drop > 0.02;
    report(
        7,
        ok,
        &format!(
            "vanet top1 non-increasing over sigma within 1 point per step: {monotone}; \
             total drop {drop:+.4} (need > 0.02)"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 8: branch granularity — two branches at least as good as four.
// ---------------------------------------------------------------------------
#[test]
fn criterion_8_branch_granularity() {
    let mut cfg = calibration_config();
    cfg.branch_counts = vec![2, 4];
    let ds = generate_dataset(&cfg.gen_config()).unwrap();
    let outcome = run_branch_sweep(&ds, &cfg).unwrap();
    let k2 = outcome.top1_for(2).unwrap();
    let k4 = outcome.top1_for(4).unwrap();
    let ok = k2 >= k4;
    report(
        8,
        ok,
        &format!("top1: K=2 {k2:.4} >= K=4 {k4:.4} on the fixed-size dataset"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 9: CMC and mAP against brute-force fixtures; single-relevant
// mAP equals mean reciprocal rank to 1e-12.
// ---------------------------------------------------------------------------
#[test]
fn criterion_9_metric_oracles() {
    // Hand-enumerated mAP fixtures, ties included.
    let d = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]);
    let rel = vec![vec![true, false, true]];
    let exact1 =
        (mean_average_precision(&d, &rel).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15;

    // Tie between columns 0 and 1: the lower index ranks first.
    let d = Matrix::from_rows(&[vec![0.5, 0.5, 0.9]]);
    let rel = vec![vec![false, true, false]];
    let exact2 = (mean_average_precision(&d, &rel).unwrap() - 0.5).abs() < 1e-15;

    let d = Matrix::from_rows(&[vec![0.5, 0.5, 0.9]]);
    let rel = vec![vec![true, false, false]];
    let exact3 = (mean_average_precision(&d, &rel).unwrap() - 1.0).abs() < 1e-15;

    // Random single-relevant fixtures: mAP must equal mean reciprocal rank.
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut mrr_ok = true;
    for _ in 0..60 {
        let q = rng.random_range(1..6usize);
        let g = rng.random_range(2..9usize);
        let d = Matrix::from_fn(q, g, |_, _| rng.random::<f64>());
        let truth: Vec<usize> = (0..q).map(|_| rng.random_range(0..g)).collect();
        let rel: Vec<Vec<bool>> = truth
            .iter()
            .map(|&t| (0..g).map(|j| j == t).collect())
            .collect();
        let map = mean_average_precision(&d, &rel).unwrap();
        let mut mrr = 0.0;
        for (qi, &t) in truth.iter().enumerate() {
            let row = d.row(qi);
            let mut rank = 1usize;
            for (j, &v) in row.iter().enumerate() {
                if j != t && (v < row[t] || (v == row[t] && j < t)) {
                    rank += 1;
                }
            }
            mrr += 1.0 / rank as f64;
        }
        mrr /= q as f64;
        if (map - mrr).abs() >= 1e-12 {
            mrr_ok = false;
        }
    }

    let ok = exact1 && exact2 && exact3 && mrr_ok;
    report(
        9,
        ok,
        "CMC/mAP fixtures exact (ties included); single-relevant mAP = MRR to 1e-12 on 60 fixtures",
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 10: byte-identical artifacts under re-runs.
// ---------------------------------------------------------------------------
#[test]
fn criterion_10_reproducibility() {
    let mut cfg = calibration_config();
    cfg.epochs = 3;
    cfg.steps_per_epoch = 10;
    cfg.lr_decay_epochs = vec![2];
    cfg.trials = 3;
    cfg.replicates = 1;

    let run_once = || -> (String, String, String) {
        let ds = generate_dataset(&cfg.gen_config()).unwrap();
        let dataset_text = ds.to_string_lossless().unwrap();
        let ctx = viewmetric::experiments::prepare_replicate(&ds, &cfg, 0).unwrap();
        let (model, _) =
            viewmetric::experiments::train_variant(&ctx, &cfg, Variant::Vanet, 2).unwrap();
        let checkpoint_text = model.to_string_lossless().unwrap();
        let eval = viewmetric::eval::evaluate(
            &model,
            &ctx.test,
            &ctx.preds_test,
            cfg.trials,
            ctx.seeds.eval_trials(),
        )
        .unwrap();
        let mut buf = Vec::new();
        eval.write_csv(&mut buf).unwrap();
        (dataset_text, checkpoint_text, String::from_utf8(buf).unwrap())
    };

    let first = run_once();
    let second = run_once();
    let ok = first == second;
    report(
        10,
        ok,
        "dataset file, trained checkpoint, and eval CSV byte-identical across re-runs",
    );
    assert!(ok);

    // The total-loss path is itself a pure function of its inputs.
    let ds = generate_dataset(&cfg.gen_config()).unwrap();
    let ctx = viewmetric::experiments::prepare_replicate(&ds, &cfg, 0).unwrap();
    let model = init_model(&cfg.model_config(2, ctx.train.n_ids(), 1)).unwrap();
    let x = ctx.train.feature_matrix(&[0, 1, 2, 3, 4, 5, 6, 7]);
    let ids: Vec<usize> = (0..8).map(|i| ctx.train.samples[i].id).collect();
    let preds: Vec<Viewpoint> = (0..8).map(|i| ctx.train.samples[i].viewpoint).collect();
    let flags = LossFlags {
        within: true,
        cross: true,
        ce: false,
    };
    let (emb, _) = viewmetric::model::forward(&model, &x).unwrap();
    let (r1, _) = total_loss(&emb, &preds, &ids, &model.partition, 0.5, 1.0, &flags).unwrap();
    let (r2, _) = total_loss(&emb, &preds, &ids, &model.partition, 0.5, 1.0, &flags).unwrap();
    assert_eq!(r1.l_total, r2.l_total);
    assert!(matches!(
        r1.selections.first().map(|s| s.mined_for),
        Some(MinedFor::Within(0))
    ));
    let _ = SquareMask::new(2);
}
