//! End-to-end acceptance suite. Each test prints one PASS/FAIL line for
//! its numbered criterion, with the measured values beside the verdict.
//!
//! The trend criteria (6 and 7) share one training battery: twelve runs
//! on the default benchmark (30 train / 10 test sequences, three seeds),
//! sweeping stage count and self-supervision. The battery runs once
//! behind a OnceLock; expect several minutes.

use std::sync::OnceLock;
use std::time::Instant;

use dtgrm::config::RunConfig;
use dtgrm::data::generate_dataset;
use dtgrm::dtgrm::{DtgrmConfig, DtgrmStage, FrameGraph, GraphVariant};
use dtgrm::gradcheck::run_full_suite;
use dtgrm::metrics::{edit_score, f1_counts, f1_at_k, frame_accuracy, Segment, F1_THRESHOLDS};
use dtgrm::rng::SplitMix64;
use dtgrm::selfsup::exchange_frames;
use dtgrm::tensor::Tensor;
use dtgrm::train::{exchange_balanced_accuracy, load_model, run_training};

fn verdict(criterion: usize, detail: &str, pass: bool) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {criterion}: {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor<f64> {
    let values = (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect();
    Tensor::from_vec(vec![rows, cols], values)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let report = run_full_suite(false);
    let elapsed = started.elapsed().as_secs_f64();

    let has_model = report.entries.iter().any(|e| e.name == "composed model");
    let worst = report
        .entries
        .iter()
        .map(|e| e.worst_rel_err)
        .fold(0.0f64, f64::max);
    let pass = report.pass() && has_model && elapsed < 60.0;
    verdict(
        1,
        &format!(
            "all {} gradient checks under 1e-4 (worst rel err {worst:.3e}, {elapsed:.1}s)",
            report.entries.len()
        ),
        pass,
    );
}

#[test]
fn criterion_2_graph_invariants_hold_on_random_instances() {
    let mut rng = SplitMix64::new(0xACC2);
    let mut pass = true;
    for _ in 0..1000 {
        let t_len = rng.range_inclusive(4, 24);
        let d = rng.range_inclusive(2, 8);
        let level = rng.below(4);
        let t = rng.below(t_len);
        let h = random_matrix(t_len, d, &mut rng);
        // an occasional zero row exercises the cosine denominator floor
        if rng.next_f64() < 0.1 {
            let row = rng.below(t_len);
            let mut v = h.values_vec();
            v[row * d..(row + 1) * d].fill(0.0);
            h.set_values(&v);
        }
        let l_filter = random_matrix(1, 3 * d * 9, &mut rng).reshape(vec![3, d, 9]);
        let l_bias = random_matrix(1, 9, &mut rng).reshape(vec![9]);
        let g = FrameGraph::build(&h, t, level, &l_filter, &l_bias);

        let s = g.s_logits.values_vec();
        for i in 0..3 {
            for j in 0..3 {
                pass &= s[i * 3 + j] == s[j * 3 + i];
            }
            if g.valid[i] {
                pass &= (s[i * 3 + i] - 1.0).abs() <= 1e-9;
            }
        }
        for adj in [&g.adj_s, &g.adj_l] {
            let a = adj.values_vec();
            for i in 0..3 {
                if g.valid[i] {
                    let row_sum: f64 = (0..3).map(|j| a[i * 3 + j]).sum();
                    pass &= (row_sum - 1.0).abs() <= 1e-6;
                }
                for j in 0..3 {
                    if !g.valid[i] || !g.valid[j] {
                        pass &= a[i * 3 + j] == 0.0;
                    }
                }
            }
        }
        if !pass {
            break;
        }
    }
    verdict(
        2,
        "similarity logits symmetric with unit diagonal, adjacency rows \
         stochastic, masked entries zero (1000 random graphs)",
        pass,
    );
}

#[test]
fn criterion_3_drgc_output_is_local_to_the_dilated_neighborhood() {
    let mut rng = SplitMix64::new(0xACC3);
    let cfg = DtgrmConfig {
        d_hidden: 6,
        num_levels: 4,
        num_stages: 1,
        graph_variant: GraphVariant::Both,
    };
    let stage = DtgrmStage::<f64>::new("stage1", 3, &cfg, &mut rng);
    let d = cfg.d_hidden;

    let mut pass = true;
    for _ in 0..100 {
        let k = rng.below(cfg.num_levels);
        let tau = 1usize << k;
        let t_len = rng.range_inclusive(2 * tau + 2, 2 * tau + 14);
        let t = rng.below(t_len);
        let neighborhood = [t.wrapping_sub(tau), t, t + tau];
        let t_other = loop {
            let c = rng.below(t_len);
            if !neighborhood.contains(&c) {
                break c;
            }
        };

        let h = random_matrix(t_len, d, &mut rng);
        let before = stage.levels()[k].forward(&h).values_vec();
        let mut v = h.values_vec();
        for j in 0..d {
            v[t_other * d + j] += rng.uniform(0.5, 1.5);
        }
        let perturbed = Tensor::from_vec(vec![t_len, d], v);
        let after = stage.levels()[k].forward(&perturbed).values_vec();

        for j in 0..d {
            pass &= before[t * d + j].to_bits() == after[t * d + j].to_bits();
        }
        if !pass {
            break;
        }
    }
    verdict(
        3,
        "perturbing any frame outside {t-2^k, t, t+2^k} leaves the level \
         output at t bit-identical (100 random triples)",
        pass,
    );
}

// Brute-force metric references, written independently of the library
// implementations: quadratic Levenshtein matrix, linear-scan segment
// extraction and matching.

fn ref_segments(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut segs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match segs.last_mut() {
            Some(s) if s.0 == c && s.2 == t => s.2 = t + 1,
            _ => segs.push((c, t, t + 1)),
        }
    }
    segs
}

fn ref_accuracy(pred: &[usize], gt: &[usize]) -> f64 {
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    100.0 * hits as f64 / pred.len() as f64
}

fn ref_edit(pred: &[usize], gt: &[usize]) -> f64 {
    let a: Vec<usize> = ref_segments(pred).iter().map(|s| s.0).collect();
    let b: Vec<usize> = ref_segments(gt).iter().map(|s| s.0).collect();
    let (m, n) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        dp[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    (100.0 * (1.0 - dp[m][n] as f64 / m.max(n) as f64)).max(0.0)
}

fn ref_f1(
    pred: &[usize],
    gt: &[usize],
    threshold: f64,
    exclude: Option<usize>,
) -> (usize, usize, usize) {
    let keep = |s: &&(usize, usize, usize)| Some(s.0) != exclude;
    let preds: Vec<_> = ref_segments(pred).iter().filter(keep).copied().collect();
    let gts: Vec<_> = ref_segments(gt).iter().filter(keep).copied().collect();

    let mut claimed = vec![false; gts.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in &preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.0 != p.0 {
                continue;
            }
            let inter = p.2.min(g.2).saturating_sub(p.1.max(g.1));
            let union = (p.2 - p.1) + (g.2 - g.1) - inter;
            let iou = inter as f64 / union as f64;
            // strictly greater keeps the earliest ground-truth segment on ties
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= threshold => {
                claimed[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = claimed.iter().filter(|c| !**c).count();
    (tp, fp, fn_)
}

fn random_labels(t_len: usize, c: usize, runs: bool, rng: &mut SplitMix64) -> Vec<usize> {
    if !runs {
        return (0..t_len).map(|_| rng.below(c)).collect();
    }
    let mut labels = Vec::with_capacity(t_len);
    while labels.len() < t_len {
        let label = rng.below(c);
        let run = rng.range_inclusive(1, 8).min(t_len - labels.len());
        labels.extend(std::iter::repeat(label).take(run));
    }
    labels
}

#[test]
fn criterion_4_metrics_match_brute_force_references() {
    let mut rng = SplitMix64::new(0xACC4);
    let mut pass = true;
    for case in 0..1000 {
        let t_len = rng.range_inclusive(1, 50);
        let c = rng.range_inclusive(1, 5);
        let runs = case % 2 == 0;
        let pred = random_labels(t_len, c, runs, &mut rng);
        let gt = random_labels(t_len, c, runs, &mut rng);
        let exclude = (case % 4 == 0).then(|| rng.below(c));

        pass &= frame_accuracy(&pred, &gt) == ref_accuracy(&pred, &gt);
        pass &= edit_score(&pred, &gt) == ref_edit(&pred, &gt);
        for (_, thr) in F1_THRESHOLDS {
            let (f1, counts) = f1_at_k(&pred, &gt, thr, exclude);
            let (tp, fp, fn_) = ref_f1(&pred, &gt, thr, exclude);
            pass &= (counts.true_pos, counts.false_pos, counts.false_neg) == (tp, fp, fn_);
            let ref_score = if tp == 0 {
                0.0
            } else {
                let p = tp as f64 / (tp + fp) as f64;
                let r = tp as f64 / (tp + fn_) as f64;
                100.0 * 2.0 * p * r / (p + r)
            };
            pass &= f1 == ref_score;
        }
        if !pass {
            break;
        }
    }

    // worked examples: segment strings (A,B,A) vs (A,B) sit one edit
    // apart; a split prediction over one true segment scores one true
    // and one false positive
    let edit = edit_score(&[0, 1, 0], &[0, 1]);
    pass &= (edit - 200.0 / 3.0).abs() < 1e-3;
    let seg = |label, start, end| Segment { label, start, end };
    let counts = f1_counts(&[seg(0, 0, 8), seg(0, 12, 14)], &[seg(0, 0, 10)], 0.5, None);
    pass &= (counts.true_pos, counts.false_pos, counts.false_neg) == (1, 1, 0);
    pass &= (counts.f1() - 200.0 / 3.0).abs() < 1e-3;

    verdict(
        4,
        &format!(
            "accuracy, edit and F1 equal brute-force references exactly on \
             1000 random pairs; worked examples give edit {edit:.3} and F1 {:.3}",
            counts.f1()
        ),
        pass,
    );
}

#[test]
fn criterion_5_exchange_involution_count_and_frequency() {
    let (t_len, d, trials) = (100usize, 3usize, 10_000usize);
    let mut rng = SplitMix64::new(0xACC5);
    let x = random_matrix(t_len, d, &mut rng);
    let x_ref = x.values_vec();

    let mut pass = true;
    let mut frame_hits = vec![0usize; t_len];
    let mut exchanged_total = 0usize;
    for _ in 0..trials {
        let (x_ex, spec) = exchange_frames(&x, 20.0, &mut rng);
        pass &= spec.num_exchanged() == 20;
        let mut touched: Vec<usize> = spec.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        touched.sort_unstable();
        touched.dedup();
        pass &= touched.len() == 20;
        pass &= spec.p.iter().sum::<usize>() == 20;
        pass &= touched.iter().all(|&i| spec.p[i] == 1);
        pass &= spec.apply(&x_ex).values_vec() == x_ref;
        for (i, &flag) in spec.p.iter().enumerate() {
            frame_hits[i] += flag;
        }
        exchanged_total += spec.num_exchanged();
    }
    let mean = exchanged_total as f64 / (trials * t_len) as f64;
    pass &= (0.18..=0.22).contains(&mean);
    // selection should be uniform: every frame individually near the rate
    for &hits in &frame_hits {
        let f = hits as f64 / trials as f64;
        pass &= (0.18..=0.22).contains(&f);
    }
    // too short to exchange at this rate: identity, empty spec
    let short = random_matrix(5, d, &mut rng);
    let (short_ex, short_spec) = exchange_frames(&short, 20.0, &mut rng);
    pass &= short_spec.pairs.is_empty() && short_ex.values_vec() == short.values_vec();

    verdict(
        5,
        &format!(
            "exchange is an involution, swaps exactly 20 of 100 frames, \
             mean frequency {mean:.4} in [0.18, 0.22] over 10000 trials"
        ),
        pass,
    );
}

// Shared battery for the two trend criteria: for each seed, train the
// backbone alone, one refinement stage, three stages, and three stages
// without self-supervision, all on the same generated dataset.

struct TrendRun {
    edit_backbone: f64,
    edit_one_stage: f64,
    edit_three_stages: f64,
    edit_no_selfsup: f64,
    detection: f64,
}

struct Battery {
    runs: Vec<TrendRun>,
    _dirs: tempfile::TempDir,
}

fn battery_config(dir: &std::path::Path, seed: u64, stages: usize, self_sup: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = 100;
    cfg.val_every = 100;
    cfg.seed = seed;
    cfg.out_dir = dir.to_string_lossy().into_owned();
    cfg.self_supervision = self_sup;
    // a shallow backbone leaves repairable over-segmentation for the
    // stages and keeps exchange anomalies visible in its likelihoods
    cfg.backbone.d_hidden = 16;
    cfg.backbone.num_layers = 1;
    cfg.dtgrm.d_hidden = 16;
    cfg.dtgrm.num_levels = 5;
    cfg.dtgrm.num_stages = stages;
    cfg.data.seed = seed;
    cfg
}

fn final_edit(summary: &dtgrm::train::TrainSummary) -> f64 {
    let last = summary.validations.last().expect("final validation");
    last.reports.last().expect("final stage report").1.edit
}

fn battery() -> &'static Battery {
    static BATTERY: OnceLock<Battery> = OnceLock::new();
    BATTERY.get_or_init(|| {
        let dirs = tempfile::tempdir().expect("battery dir");
        let mut runs = Vec::new();
        for seed in [1u64, 2, 3] {
            let probe = battery_config(dirs.path(), seed, 0, true);
            let dataset = generate_dataset::<f32>(&probe.data, probe.n_train, probe.n_test);
            let mut edits = Vec::new();
            for (name, stages, self_sup) in [
                ("s0", 0usize, true),
                ("s1", 1, true),
                ("s3", 3, true),
                ("s3-off", 3, false),
            ] {
                let dir = dirs.path().join(format!("seed{seed}-{name}"));
                let cfg = battery_config(&dir, seed, stages, self_sup);
                let summary = run_training::<f32>(&cfg, &dataset).expect("battery run");
                edits.push(final_edit(&summary));
            }
            let ckpt = dirs.path().join(format!("seed{seed}-s3")).join("last.ckpt");
            let (model, cfg, _) = load_model::<f32>(&ckpt).expect("battery checkpoint");
            let detection = exchange_balanced_accuracy(&model, &dataset.test, cfg.eta, seed);
            runs.push(TrendRun {
                edit_backbone: edits[0],
                edit_one_stage: edits[1],
                edit_three_stages: edits[2],
                edit_no_selfsup: edits[3],
                detection,
            });
        }
        Battery { runs, _dirs: dirs }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_stacking_stages_lifts_held_out_edit() {
    let b = battery();
    let bk = mean(b.runs.iter().map(|r| r.edit_backbone));
    let one = mean(b.runs.iter().map(|r| r.edit_one_stage));
    let three = mean(b.runs.iter().map(|r| r.edit_three_stages));
    let pass = bk < one && one <= three && three - bk >= 5.0;
    verdict(
        6,
        &format!(
            "held-out Edit over 3 seeds: backbone {bk:.2} < +1 stage {one:.2} \
             <= +3 stages {three:.2}, gap {:.2} >= 5",
            three - bk
        ),
        pass,
    );
}

#[test]
fn criterion_7_self_supervision_helps_and_detects_exchanges() {
    let b = battery();
    let with = mean(b.runs.iter().map(|r| r.edit_three_stages));
    let without = mean(b.runs.iter().map(|r| r.edit_no_selfsup));
    let detection = mean(b.runs.iter().map(|r| r.detection));
    let pass = with >= without && detection > 0.6;
    verdict(
        7,
        &format!(
            "held-out Edit with self-supervision {with:.2} >= without {without:.2}; \
             exchanged-frame balanced accuracy {detection:.3} > 0.6"
        ),
        pass,
    );
}

#[test]
fn criterion_8_default_config_loss_decreases_and_stays_finite() {
    let dir = tempfile::tempdir().expect("run dir");
    let mut cfg = RunConfig::default();
    cfg.epochs = 20;
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let dataset = generate_dataset::<f32>(&cfg.data, cfg.n_train, cfg.n_test);
    let summary = run_training::<f32>(&cfg, &dataset).expect("default-config run");

    let losses = &summary.epoch_losses;
    let mut pass = losses.len() == 20;
    for l in losses {
        for v in [l.total, l.cls, l.tmse, l.cls_exchanged, l.tmse_exchanged, l.exchange_detect] {
            pass &= v.is_finite();
        }
    }
    for record in &summary.validations {
        for (_, report) in &record.reports {
            pass &= report.acc.is_finite() && report.edit.is_finite();
            pass &= report.f1.values().all(|v| v.is_finite());
        }
    }
    let (first, last) = (losses[0].total, losses[19].total);
    pass &= last < first;
    verdict(
        8,
        &format!("training loss fell from {first:.4} to {last:.4} over 20 epochs, all terms finite"),
        pass,
    );
}

#[test]
fn criterion_9_identical_runs_reproduce_reports_and_checkpoints() {
    let dir = tempfile::tempdir().expect("run dir");
    let mut cfg = RunConfig::default();
    cfg.epochs = 4;
    cfg.val_every = 2;
    cfg.seed = 11;
    cfg.n_train = 6;
    cfg.n_test = 3;
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    cfg.backbone.d_hidden = 8;
    cfg.backbone.num_layers = 2;
    cfg.dtgrm.d_hidden = 8;
    cfg.dtgrm.num_levels = 2;
    cfg.dtgrm.num_stages = 1;
    cfg.data.num_classes = 4;
    cfg.data.d_in = 12;
    cfg.data.min_segments = 2;
    cfg.data.max_segments = 4;
    cfg.data.min_segment_len = 8;
    cfg.data.max_segment_len = 20;
    cfg.data.seed = 11;
    let dataset = generate_dataset::<f32>(&cfg.data, cfg.n_train, cfg.n_test);

    // same output directory on purpose: the checkpoint embeds the config
    let ckpt = dir.path().join("last.ckpt");
    let first = run_training::<f32>(&cfg, &dataset).expect("first run");
    let first_bytes = std::fs::read(&ckpt).expect("first checkpoint");
    let second = run_training::<f32>(&cfg, &dataset).expect("second run");
    let second_bytes = std::fs::read(&ckpt).expect("second checkpoint");

    let mut pass = first_bytes == second_bytes;
    pass &= first.validations.len() == second.validations.len();
    for (a, b) in first.validations.iter().zip(&second.validations) {
        pass &= a.epoch == b.epoch && a.reports == b.reports;
    }

    let (model, loaded_cfg, epoch) = load_model::<f32>(&ckpt).expect("reload");
    let resaved = dir.path().join("resaved.ckpt");
    dtgrm::checkpoint::save(&resaved, &model.params(), epoch, &loaded_cfg).expect("resave");
    pass &= std::fs::read(&resaved).expect("resaved bytes") == second_bytes;

    verdict(
        9,
        "repeated runs reproduce metric reports and checkpoint bytes; \
         checkpoints round-trip byte-identically",
        pass,
    );
}
