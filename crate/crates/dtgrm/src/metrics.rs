//! Frame-wise accuracy, segmental edit score, and segmental overlap F1.

use std::collections::BTreeMap;

use serde::Serialize;

/// Maximal run of frames sharing one label. `start` inclusive, `end`
/// exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

pub fn segments_from_labels(labels: &[usize]) -> Vec<Segment> {
    assert!(!labels.is_empty(), "cannot segment an empty label sequence");
    let mut segs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segs.push(Segment { label: labels[start], start, end: t });
            start = t;
        }
    }
    segs
}

/// Percent of frames where prediction and ground truth agree.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "frame count mismatch");
    assert!(!pred.is_empty(), "empty sequences");
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    100.0 * hits as f64 / pred.len() as f64
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Segmental edit score: Levenshtein distance between the two segment
/// label strings, rescaled to a 0..100 score.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = segments_from_labels(pred).iter().map(|s| s.label).collect();
    let g: Vec<usize> = segments_from_labels(gt).iter().map(|s| s.label).collect();
    let dist = levenshtein(&p, &g);
    (100.0 * (1.0 - dist as f64 / p.len().max(g.len()) as f64)).max(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    /// F1 percent; 0 when precision + recall vanish.
    pub fn f1(&self) -> f64 {
        if self.true_pos == 0 {
            return 0.0;
        }
        let p = self.true_pos as f64 / (self.true_pos + self.false_pos) as f64;
        let r = self.true_pos as f64 / (self.true_pos + self.false_neg) as f64;
        100.0 * 2.0 * p * r / (p + r)
    }
}

/// Greedy matching in prediction order: each predicted segment claims the
/// still-unmatched ground-truth segment of its label with the highest IoU,
/// a true positive iff that IoU reaches the threshold. `exclude` drops one
/// class (e.g. background) from both segment lists before matching.
pub fn f1_counts(
    pred_segs: &[Segment],
    gt_segs: &[Segment],
    threshold: f64,
    exclude: Option<usize>,
) -> F1Counts {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "threshold must lie in (0, 1]"
    );
    let keep = |s: &&Segment| Some(s.label) != exclude;
    let preds: Vec<&Segment> = pred_segs.iter().filter(keep).collect();
    let gts: Vec<&Segment> = gt_segs.iter().filter(keep).collect();

    let mut matched = vec![false; gts.len()];
    let mut counts = F1Counts::default();
    for p in &preds {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !matched[*j] && g.label == p.label)
            .map(|(j, g)| (j, p.iou(g)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
        match best {
            Some((j, iou)) if iou >= threshold => {
                matched[j] = true;
                counts.true_pos += 1;
            }
            _ => counts.false_pos += 1,
        }
    }
    counts.false_neg = matched.iter().filter(|m| !**m).count();
    counts
}

pub fn f1_at_k(
    pred: &[usize],
    gt: &[usize],
    threshold: f64,
    exclude: Option<usize>,
) -> (f64, F1Counts) {
    let counts = f1_counts(
        &segments_from_labels(pred),
        &segments_from_labels(gt),
        threshold,
        exclude,
    );
    (counts.f1(), counts)
}

pub const F1_THRESHOLDS: [(u32, f64); 3] = [(10, 0.10), (25, 0.25), (50, 0.50)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: f64,
    pub edit: f64,
    pub f1: BTreeMap<u32, f64>,
}

impl MetricReport {
    /// One line per metric, stable order, fixed precision.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("acc = {:.4}\n", self.acc));
        out.push_str(&format!("edit = {:.4}\n", self.edit));
        for (k, v) in &self.f1 {
            out.push_str(&format!("f1@{k} = {v:.4}\n"));
        }
        out
    }
}

/// Dataset-level report: accuracy pooled over frames, edit averaged per
/// video, F1 from pooled TP/FP/FN counts.
pub fn evaluate_videos(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
    exclude: Option<usize>,
) -> MetricReport {
    assert_eq!(preds.len(), gts.len(), "video count mismatch");
    assert!(!preds.is_empty(), "no videos to evaluate");
    let mut hit = 0usize;
    let mut total = 0usize;
    let mut edit_sum = 0.0;
    let mut pooled: BTreeMap<u32, F1Counts> = F1_THRESHOLDS
        .iter()
        .map(|(k, _)| (*k, F1Counts::default()))
        .collect();
    for (p, g) in preds.iter().zip(gts) {
        assert_eq!(p.len(), g.len(), "frame count mismatch");
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += p.len();
        edit_sum += edit_score(p, g);
        let ps = segments_from_labels(p);
        let gs = segments_from_labels(g);
        for (k, thr) in F1_THRESHOLDS {
            pooled
                .get_mut(&k)
                .unwrap()
                .add(f1_counts(&ps, &gs, thr, exclude));
        }
    }
    MetricReport {
        acc: 100.0 * hit as f64 / total as f64,
        edit: edit_sum / preds.len() as f64,
        f1: pooled.into_iter().map(|(k, c)| (k, c.f1())).collect(),
    }
}
