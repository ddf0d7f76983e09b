//! Training loop, evaluation, and the ablation driver.
//!
//! One optimizer step per sequence (full-sequence gradient). Every
//! random choice derives from the run seed, so a run is reproducible
//! bit-for-bit at fixed precision.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{evaluate_videos, MetricReport};
use crate::model::Model;
use crate::optim::{zero_grads, Adam};
use crate::rng::{derive, derive2, SplitMix64};
use crate::scalar::Scalar;
use crate::selfsup::exchange_frames;
use crate::tensor::Tensor;

const INIT_TAG: u64 = 0x696E_6974;
const ORDER_TAG: u64 = 0x6F72_6472;
const EXCHANGE_TAG: u64 = 0x6578_6368;

/// Per-epoch loss terms, averaged over sequences (unweighted sums per
/// sequence, matching the loss breakdown).
#[derive(Debug, Clone, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub tmse: f64,
    pub cls_exchanged: f64,
    pub tmse_exchanged: f64,
    pub exchange_detect: f64,
}

#[derive(Debug, Clone)]
pub struct ValidationRecord {
    pub epoch: usize,
    /// One report per stage: trunk first.
    pub reports: Vec<(String, MetricReport)>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epoch_losses: Vec<EpochLoss>,
    pub validations: Vec<ValidationRecord>,
    /// Epoch and held-out Edit of the best final-stage validation.
    pub best: (usize, f64),
}

pub fn stage_names(num_stages: usize) -> Vec<String> {
    (0..=num_stages)
        .map(|i| {
            if i == 0 {
                "backbone".to_string()
            } else {
                format!("stage{i}")
            }
        })
        .collect()
}

/// Lower class index wins ties.
pub fn argmax_rows<T: Scalar>(y: &Tensor<T>) -> Vec<usize> {
    let (rows, cols) = y.dims2("argmax input");
    let vals = y.values();
    (0..rows)
        .map(|r| {
            let mut best = 0;
            for c in 1..cols {
                if vals[r * cols + c] > vals[r * cols + best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Frame labels per stage (trunk first) for one sequence.
pub fn predict_stages<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Vec<Vec<usize>> {
    model
        .forward(x)
        .predictions
        .iter()
        .map(argmax_rows)
        .collect()
}

/// Per-stage metric reports over a set of sequences.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    seqs: &[LabeledSequence<T>],
) -> Vec<(String, MetricReport)> {
    let num_stages = model.num_stages();
    let mut preds: Vec<Vec<Vec<usize>>> = vec![Vec::new(); num_stages + 1];
    let mut gts: Vec<Vec<usize>> = Vec::new();
    for seq in seqs {
        for (s, labels) in predict_stages(model, &seq.features).into_iter().enumerate() {
            preds[s].push(labels);
        }
        gts.push(seq.labels.clone());
    }
    stage_names(num_stages)
        .into_iter()
        .zip(preds)
        .map(|(name, stage_preds)| (name, evaluate_videos(&stage_preds, &gts, None)))
        .collect()
}

/// Balanced exchanged-frame detection accuracy over fresh exchanges of
/// the given sequences. Detection reads the first stage's head: that
/// stage sees the backbone's raw likelihoods, where exchange anomalies
/// are still visible; later stages consume already-repaired likelihoods.
/// A frame counts as detected when its exchanged probability exceeds the
/// positive-class rate eta/100, the threshold that maximizes balanced
/// accuracy for a calibrated posterior under this class imbalance. Pools
/// true/false positives across sequences; sequences too short to
/// exchange at the given rate contribute negatives only.
pub fn exchange_balanced_accuracy<T: Scalar>(
    model: &Model<T>,
    seqs: &[LabeledSequence<T>],
    eta: f64,
    seed: u64,
) -> f64 {
    assert!(model.num_stages() > 0, "detection needs at least one stage");
    let threshold = T::of(eta / 100.0);
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (i, seq) in seqs.iter().enumerate() {
        let mut rng = SplitMix64::new(derive2(seed, EXCHANGE_TAG, i as u64));
        let (x_ex, spec) = exchange_frames(&seq.features, eta, &mut rng);
        let out = model.forward(&x_ex);
        let head = &model.exchange_heads()[0];
        let scores = head.forward(&out.hiddens[0]);
        let values = scores.values_vec();
        for (t, &want) in spec.p.iter().enumerate() {
            let got = usize::from(values[t * 2 + 1] > threshold);
            match (want, got) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fp += 1,
                _ => fn_ += 1,
            }
        }
    }
    let tpr = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let tnr = if tn + fp == 0 {
        0.0
    } else {
        tn as f64 / (tn + fp) as f64
    };
    (tpr + tnr) / 2.0
}

fn finite(bd: &crate::loss::LossBreakdown) -> bool {
    [
        bd.total,
        bd.cls,
        bd.tmse,
        bd.cls_exchanged,
        bd.tmse_exchanged,
        bd.exchange_detect,
    ]
    .iter()
    .all(|v| v.is_finite())
}

/// Trains on the dataset's train split, validating on the test split
/// every `val_every` epochs and at the end. Writes `train_log.jsonl`,
/// `best.ckpt` (highest final-stage held-out Edit) and `last.ckpt` into
/// `cfg.out_dir`.
pub fn run_training<T: Scalar>(cfg: &RunConfig, dataset: &Dataset<T>) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.num_classes != cfg.data.num_classes || dataset.d_in != cfg.data.d_in {
        return Err(Error::Dataset(format!(
            "dataset has {} classes / {} dims, config expects {} / {}",
            dataset.num_classes, dataset.d_in, cfg.data.num_classes, cfg.data.d_in
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.jsonl"))?);

    let mut init_rng = SplitMix64::new(derive(cfg.seed, INIT_TAG));
    let mut model = Model::<T>::new(
        dataset.d_in,
        dataset.num_classes,
        &cfg.backbone,
        &cfg.dtgrm,
        &mut init_rng,
    );
    let adam = Adam::with_lr(cfg.learning_rate);
    let weights = cfg.effective_loss();
    let self_sup = cfg.self_supervision;
    let mut order_rng = SplitMix64::new(derive(cfg.seed, ORDER_TAG));

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut validations: Vec<ValidationRecord> = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut sums = EpochLoss {
            epoch,
            total: 0.0,
            cls: 0.0,
            tmse: 0.0,
            cls_exchanged: 0.0,
            tmse_exchanged: 0.0,
            exchange_detect: 0.0,
        };
        for &i in &order {
            let seq = &dataset.train[i];
            let out = model.forward(&seq.features);
            let (exchanged_preds, head_scores, p);
            if self_sup {
                let mut ex_rng = SplitMix64::new(derive2(
                    cfg.seed,
                    EXCHANGE_TAG,
                    ((epoch as u64) << 32) | i as u64,
                ));
                let (x_ex, spec) = exchange_frames(&seq.features, cfg.eta, &mut ex_rng);
                let out_ex = model.forward(&x_ex);
                head_scores = model.exchange_scores(&out_ex.hiddens);
                exchanged_preds = out_ex.predictions;
                p = spec.p;
            } else {
                exchanged_preds = Vec::new();
                head_scores = Vec::new();
                p = vec![0; seq.labels.len()];
            }
            let (loss, bd) = total_loss(
                &out.predictions,
                &exchanged_preds,
                &head_scores,
                &seq.labels,
                &p,
                &weights,
            );
            if !finite(&bd) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    sequence: seq.id.clone(),
                });
            }
            loss.backward();
            // the detection heads only see gradients from the exchanged pass
            adam.step(
                model
                    .params_mut()
                    .into_iter()
                    .filter(|q| self_sup || !q.name().starts_with("exchange")),
            );
            zero_grads(model.params());
            sums.total += bd.total;
            sums.cls += bd.cls;
            sums.tmse += bd.tmse;
            sums.cls_exchanged += bd.cls_exchanged;
            sums.tmse_exchanged += bd.tmse_exchanged;
            sums.exchange_detect += bd.exchange_detect;
        }
        let n = dataset.train.len() as f64;
        for field in [
            &mut sums.total,
            &mut sums.cls,
            &mut sums.tmse,
            &mut sums.cls_exchanged,
            &mut sums.tmse_exchanged,
            &mut sums.exchange_detect,
        ] {
            *field /= n;
        }
        let mut record = serde_json::to_value(&sums).expect("epoch record");
        record["kind"] = json!("epoch");
        record["seconds"] = json!(started.elapsed().as_secs_f64());
        writeln!(log, "{record}")?;
        epoch_losses.push(sums);

        if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let reports = evaluate_model(&model, &dataset.test);
            for (stage, report) in &reports {
                let mut v = serde_json::to_value(report).expect("metric record");
                v["kind"] = json!("validation");
                v["epoch"] = json!(epoch);
                v["stage"] = json!(stage);
                writeln!(log, "{v}")?;
            }
            let final_edit = reports.last().expect("at least the trunk report").1.edit;
            if final_edit > best.1 {
                best = (epoch, final_edit);
                checkpoint::save(
                    &out_dir.join("best.ckpt"),
                    &model.params(),
                    epoch,
                    cfg,
                )?;
            }
            validations.push(ValidationRecord { epoch, reports });
        }
    }
    checkpoint::save(&out_dir.join("last.ckpt"), &model.params(), cfg.epochs, cfg)?;
    log.flush()?;
    Ok(TrainSummary {
        epoch_losses,
        validations,
        best,
    })
}

/// Rebuilds the model a checkpoint was trained with and restores its
/// parameters and optimizer state.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, RunConfig, usize)> {
    let (cfg, _) = checkpoint::peek_config(path)?;
    // any seed works: the checkpoint overwrites every value
    let mut rng = SplitMix64::new(0);
    let mut model = Model::<T>::new(
        cfg.data.d_in,
        cfg.data.num_classes,
        &cfg.backbone,
        &cfg.dtgrm,
        &mut rng,
    );
    let meta = checkpoint::load(path, model.params_mut())?;
    Ok((model, meta.config, meta.epoch))
}

/// Ablatable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Eta,
    LambdaE,
    LambdaC,
    Omega,
    NumStages,
    NumLevels,
    GraphVariant,
}

impl std::str::FromStr for AblationParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(AblationParam::Eta),
            "lambda_e" => Ok(AblationParam::LambdaE),
            "lambda_c" => Ok(AblationParam::LambdaC),
            "omega" => Ok(AblationParam::Omega),
            "num_stages" => Ok(AblationParam::NumStages),
            "num_levels" => Ok(AblationParam::NumLevels),
            "graph-variant" => Ok(AblationParam::GraphVariant),
            other => Err(Error::Config(format!(
                "unknown ablation parameter {other:?} (expected eta, lambda_e, lambda_c, \
                 omega, num_stages, num_levels or graph-variant)"
            ))),
        }
    }
}

impl AblationParam {
    /// Canonical command-line spelling.
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Eta => "eta",
            AblationParam::LambdaE => "lambda_e",
            AblationParam::LambdaC => "lambda_c",
            AblationParam::Omega => "omega",
            AblationParam::NumStages => "num_stages",
            AblationParam::NumLevels => "num_levels",
            AblationParam::GraphVariant => "graph-variant",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} value {value:?}"));
        match self {
            AblationParam::Eta => cfg.eta = value.parse().map_err(|_| bad("eta"))?,
            AblationParam::LambdaE => {
                cfg.loss.lambda_e = value.parse().map_err(|_| bad("lambda_e"))?
            }
            AblationParam::LambdaC => {
                cfg.loss.lambda_c = value.parse().map_err(|_| bad("lambda_c"))?
            }
            AblationParam::Omega => cfg.loss.omega = value.parse().map_err(|_| bad("omega"))?,
            AblationParam::NumStages => {
                cfg.dtgrm.num_stages = value.parse().map_err(|_| bad("num_stages"))?
            }
            AblationParam::NumLevels => {
                cfg.dtgrm.num_levels = value.parse().map_err(|_| bad("num_levels"))?
            }
            AblationParam::GraphVariant => cfg.dtgrm.graph_variant = value.parse()?,
        }
        cfg.validate()
    }
}

/// One row of an ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub reports: Vec<(String, MetricReport)>,
}

/// Trains one run per value under the shared seed; each run writes into
/// `{out_dir}/{param}-{value}/`. Returns the final held-out reports.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    param: AblationParam,
    values: &[String],
    dataset: &Dataset<T>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value)?;
        cfg.out_dir = format!("{}/{}-{}", base.out_dir, param.name(), value);
        let summary = run_training(&cfg, dataset)?;
        rows.push(AblationRow {
            value: value.clone(),
            reports: summary.validations.last().expect("final validation").reports.clone(),
        });
    }
    Ok(rows)
}

/// Fixed-width text table over the sweep's final-stage reports.
pub fn render_ablation_table(param: &str, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{param:>14} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "stage", "acc", "edit", "f1@10", "f1@25"
    ));
    for row in rows {
        for (stage, report) in &row.reports {
            out.push_str(&format!(
                "{:>14} {:>10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                row.value,
                stage,
                report.acc,
                report.edit,
                report.f1.get(&10).copied().unwrap_or(0.0),
                report.f1.get(&25).copied().unwrap_or(0.0),
            ));
        }
    }
    out
}
