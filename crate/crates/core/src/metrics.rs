//! Plan evaluation: success rate, mean accuracy, per-sequence IoU and the
//! sample-based uncertainty metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Plan = Vec<usize>;

fn check_aligned(pred: &[Plan], gt: &[Plan]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty("no plans to evaluate".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} ground-truth plans", pred.len(), gt.len())));
    }
    if let Some(i) = (0..pred.len()).find(|&i| pred[i].len() != gt[i].len()) {
        return Err(Error::shape(format!(
            "instance {i}: predicted horizon {} vs ground truth {}",
            pred[i].len(),
            gt[i].len()
        )));
    }
    Ok(())
}

/// Fraction of instances whose plan matches the ground truth exactly.
pub fn success_rate(pred: &[Plan], gt: &[Plan]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Positionwise accuracy over all steps of all instances.
pub fn mean_accuracy(pred: &[Plan], gt: &[Plan]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (hits, total) = pred.iter().zip(gt).fold((0usize, 0usize), |(h, n), (p, g)| {
        (h + p.iter().zip(g).filter(|(a, b)| a == b).count(), n + g.len())
    });
    Ok(hits as f64 / total as f64)
}

pub fn sequence_iou(pred: &[usize], gt: &[usize]) -> f64 {
    let p: BTreeSet<_> = pred.iter().collect();
    let g: BTreeSet<_> = gt.iter().collect();
    let union = p.union(&g).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&g).count() as f64 / union as f64
}

/// Set IoU computed per instance, then averaged (batch size one).
pub fn mean_iou(pred: &[Plan], gt: &[Plan]) -> Result<f64> {
    check_aligned(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| sequence_iou(p, g)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEvalReport {
    pub label: String,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub n_instances: usize,
    pub per_horizon: Vec<HorizonMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyReport>,
}

impl PlanEvalReport {
    pub fn evaluate(label: impl Into<String>, pred: &[Plan], gt: &[Plan]) -> Result<Self> {
        let sr = success_rate(pred, gt)?;
        let macc = mean_accuracy(pred, gt)?;
        let miou = mean_iou(pred, gt)?;
        let horizons: BTreeSet<usize> = gt.iter().map(Vec::len).collect();
        let per_horizon = horizons
            .into_iter()
            .map(|h| {
                let idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].len() == h).collect();
                let p: Vec<Plan> = idx.iter().map(|&i| pred[i].clone()).collect();
                let g: Vec<Plan> = idx.iter().map(|&i| gt[i].clone()).collect();
                Ok(HorizonMetrics {
                    horizon: h,
                    sr: success_rate(&p, &g)?,
                    macc: mean_accuracy(&p, &g)?,
                    miou: mean_iou(&p, &g)?,
                    n_instances: idx.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            label: label.into(),
            sr,
            macc,
            miou,
            n_instances: pred.len(),
            per_horizon,
            sampling_seconds: None,
            uncertainty: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub kl_div: f64,
    pub nll: f64,
    pub mode_prec: f64,
    pub mode_rec: f64,
    pub samples_per_instance: usize,
    pub n_groups: usize,
}

/// One start/goal group: the ground-truth plans that share it and the plans
/// sampled for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGroup {
    pub gt: Vec<Plan>,
    pub samples: Vec<Plan>,
}

/// `KL(q || p) = sum_x q(x) ln(q(x) / p(x))` over the support of `q`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi / pi).ln())
        .sum()
}

fn counts(plans: &[Plan]) -> BTreeMap<&Plan, usize> {
    let mut m = BTreeMap::new();
    for p in plans {
        *m.entry(p).or_insert(0) += 1;
    }
    m
}

/// Uncertainty metrics averaged over groups. The sample distribution uses
/// add-one smoothing over the union of sampled and ground-truth plans.
pub fn uncertainty_metrics(groups: &[PlanGroup], samples_per_instance: usize) -> Result<UncertaintyReport> {
    if samples_per_instance < 1 {
        return Err(Error::config("need at least one sample per instance"));
    }
    if groups.is_empty() {
        return Err(Error::Empty("no groups".into()));
    }
    let (mut kl, mut nll, mut prec, mut rec) = (0.0, 0.0, 0.0, 0.0);
    for g in groups {
        if g.gt.is_empty() || g.samples.is_empty() {
            return Err(Error::Empty("group without ground truth or samples".into()));
        }
        let gt_counts = counts(&g.gt);
        let s_counts = counts(&g.samples);
        let support: BTreeSet<&Plan> = gt_counts.keys().chain(s_counts.keys()).copied().collect();
        let denom = (g.samples.len() + support.len()) as f64;
        let p_hat = |plan: &Plan| (s_counts.get(plan).copied().unwrap_or(0) + 1) as f64 / denom;
        let q: Vec<f64> = support
            .iter()
            .map(|p| gt_counts.get(p).copied().unwrap_or(0) as f64 / g.gt.len() as f64)
            .collect();
        let p: Vec<f64> = support.iter().map(|p| p_hat(p)).collect();
        kl += kl_divergence(&q, &p);
        nll += -g.gt.iter().map(|plan| p_hat(plan).ln()).sum::<f64>() / g.gt.len() as f64;
        prec += g.samples.iter().filter(|s| gt_counts.contains_key(s)).count() as f64 / g.samples.len() as f64;
        rec += gt_counts.keys().filter(|m| s_counts.contains_key(*m)).count() as f64 / gt_counts.len() as f64;
    }
    let n = groups.len() as f64;
    Ok(UncertaintyReport {
        kl_div: kl / n,
        nll: nll / n,
        mode_prec: prec / n,
        mode_rec: rec / n,
        samples_per_instance,
        n_groups: groups.len(),
    })
}

fn join(plan: &[usize]) -> String {
    plan.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn split_plan(field: &str, path: &Path) -> Result<Plan> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("bad action id {t:?}"),
            })
        })
        .collect()
}

/// One line of a plan file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub instance_id: usize,
    pub horizon: usize,
    pub gt: Plan,
    /// One predicted plan, or the K sampled plans.
    pub pred: Vec<Plan>,
}

pub const PLAN_FILE_HEADER: [&str; 5] = ["instance_id", "horizon", "sample", "gt", "pred"];

/// Tab-separated plan file, columns `instance_id, horizon, sample, gt, pred`;
/// action ids inside a plan are space separated and each sample gets its own
/// row.
pub fn write_plan_file(path: impl AsRef<Path>, records: &[PlanRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(PLAN_FILE_HEADER).map_err(csv_err)?;
    for r in records {
        for (k, p) in r.pred.iter().enumerate() {
            w.write_record([
                r.instance_id.to_string(),
                r.horizon.to_string(),
                k.to_string(),
                join(&r.gt),
                join(p),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan_file(path: impl AsRef<Path>) -> Result<Vec<PlanRecord>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(csv_err)?;
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut out: Vec<PlanRecord> = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 5 {
            return Err(malformed(format!("expected 5 columns, found {}", row.len())));
        }
        let num = |i: usize| row[i].parse::<usize>().map_err(|_| malformed(format!("bad integer {:?}", &row[i])));
        let (id, horizon) = (num(0)?, num(1)?);
        let gt = split_plan(&row[3], path)?;
        let pred = split_plan(&row[4], path)?;
        match out.last_mut() {
            Some(last) if last.instance_id == id => last.pred.push(pred),
            _ => out.push(PlanRecord {
                instance_id: id,
                horizon,
                gt,
                pred: vec![pred],
            }),
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
