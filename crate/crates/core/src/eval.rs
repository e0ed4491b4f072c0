//! Error metrics, model ranking, ablation runs and error histograms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::OptimConfig;
use crate::prednet::{train_prednet, InputGroup, PredNetArch, PredNetError, TrainRow};
use crate::volume::Volume;
use crate::volumenet::psnr_from_mse;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("no values")]
    Empty,
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("RMSE table is incomplete: {0}")]
    IncompleteTable(String),
    #[error(transparent)]
    PredNet(#[from] PredNetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const PSNR_PEAK: f64 = 2.0;
pub const HIST_BINS: usize = 32;

fn errors(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).collect())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let e = errors(pred, truth)?;
    Ok((e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt())
}

pub fn mean_err(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let e = errors(pred, truth)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Population standard deviation of the signed errors.
pub fn std_err(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let e = errors(pred, truth)?;
    let n = e.len() as f64;
    let m = e.iter().sum::<f64>() / n;
    Ok((e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// `10 log10(peak² / mse)`; identical volumes give `+inf`.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(EvalError::DimsMismatch(a.dims(), b.dims()));
    }
    let mse = a.values().iter().zip(b.values()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// RMSE of each model (rows) in each scenario (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    pub models: Vec<String>,
    pub scenarios: Vec<String>,
    pub rmse: Vec<Vec<f64>>,
}

impl RmseTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for sc in &self.scenarios {
            s.push(',');
            s.push_str(sc);
        }
        s.push('\n');
        for (m, row) in self.models.iter().zip(&self.rmse) {
            s.push_str(m);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdEntry {
    pub model: String,
    pub mrd: f64,
    pub rank: usize,
}

/// Mean relative deviation from the per-scenario best RMSE; sorted
/// ascending, ties keep table order.
pub fn mrd(table: &RmseTable) -> Result<Vec<MrdEntry>> {
    if table.models.is_empty() || table.scenarios.is_empty() || table.rmse.len() != table.models.len() {
        return Err(EvalError::IncompleteTable("model rows".into()));
    }
    let k = table.scenarios.len();
    for (m, row) in table.models.iter().zip(&table.rmse) {
        if row.len() != k || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EvalError::IncompleteTable(format!("row {m}")));
        }
    }
    let best: Vec<f64> = (0..k).map(|j| table.rmse.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min)).collect();
    let mut entries: Vec<MrdEntry> = table
        .models
        .iter()
        .zip(&table.rmse)
        .map(|(m, row)| {
            let rd: f64 = row
                .iter()
                .zip(&best)
                .map(|(&r, &b)| if b > 0.0 { (r - b) / b } else if r > 0.0 { f64::INFINITY } else { 0.0 })
                .sum();
            MrdEntry { model: m.clone(), mrd: rd / k as f64, rank: 0 }
        })
        .collect();
    entries.sort_by(|a, b| a.mrd.total_cmp(&b.mrd));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub dropped: Vec<InputGroup>,
    pub rmse: f64,
    pub std_err: f64,
}

/// Retrains the predictor once per drop set (inputs zeroed) and reports
/// held-out RMSE on `test`.
pub fn run_ablation(
    train: &[TrainRow],
    val: &[TrainRow],
    test: &[TrainRow],
    arch: PredNetArch,
    cfg: &OptimConfig,
    seed: u64,
    drops: &[Vec<InputGroup>],
) -> Result<Vec<AblationResult>> {
    let truth: Vec<f64> = test.iter().map(|r| r.y).collect();
    let xs: Vec<Vec<f32>> = test.iter().map(|r| r.x.clone()).collect();
    drops
        .iter()
        .map(|drop| {
            let net = train_prednet(train, val, arch, drop, cfg, seed, &mut |_| {})?;
            let pred = net.predict_rows(&xs)?;
            Ok(AblationResult { dropped: net.dropped.clone(), rmse: rmse(&pred, &truth)?, std_err: std_err(&pred, &truth)? })
        })
        .collect()
}

/// Squared-error histogram over 32 log-spaced bins plus a separate count
/// of exact zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zero: usize,
    pub n: usize,
}

pub fn error_distribution(pred: &[f64], truth: &[f64]) -> Result<ErrorHistogram> {
    let sq: Vec<f64> = errors(pred, truth)?.iter().map(|e| e * e).collect();
    let zero = sq.iter().filter(|&&v| v == 0.0).count();
    let pos: Vec<f64> = sq.iter().copied().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        return Ok(ErrorHistogram { edges: Vec::new(), counts: Vec::new(), zero, n: sq.len() });
    }
    let mut lo = pos.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let mut hi = pos.iter().copied().fold(0.0, f64::max).log10();
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let w = (hi - lo) / HIST_BINS as f64;
    let edges: Vec<f64> = (0..=HIST_BINS).map(|i| 10f64.powf(lo + w * i as f64)).collect();
    let mut counts = vec![0; HIST_BINS];
    for v in pos {
        let b = (((v.log10() - lo) / w).floor() as isize).clamp(0, HIST_BINS as isize - 1) as usize;
        counts[b] += 1;
    }
    Ok(ErrorHistogram { edges, counts, zero, n: sq.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ValueRange;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, -4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        let t = [1.0, 5.0, 9.0];
        let p: Vec<f64> = t.iter().map(|x| x + 2.5).collect();
        assert!((rmse(&p, &t).unwrap() - 2.5).abs() < 1e-12);
        assert!(std_err(&p, &t).unwrap() < 1e-12);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn psnr_examples() {
        let a = Volume::constant([4, 4, 4], 0.0, ValueRange::SignedUnit).unwrap();
        let b = Volume::constant([4, 4, 4], 0.02, ValueRange::SignedUnit).unwrap();
        assert!(psnr(&a, &a, PSNR_PEAK).unwrap().is_infinite());
        assert!((psnr(&a, &b, PSNR_PEAK).unwrap() - 40.0).abs() < 1e-4);
    }

    #[test]
    fn mrd_tie_and_order() {
        let t = RmseTable {
            models: vec!["a".into(), "b".into()],
            scenarios: vec!["x".into(), "y".into()],
            rmse: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        let r = mrd(&t).unwrap();
        assert_eq!(r[0].model, "a");
        assert_eq!(r[0].mrd, 0.5);
        assert_eq!(r[1].mrd, 0.5);
        let single = RmseTable { models: vec!["m".into()], scenarios: vec!["s".into()], rmse: vec![vec![3.0]] };
        assert_eq!(mrd(&single).unwrap()[0].mrd, 0.0);
        let bad = RmseTable { models: vec!["m".into()], scenarios: vec!["s".into(), "t".into()], rmse: vec![vec![3.0]] };
        assert!(matches!(mrd(&bad), Err(EvalError::IncompleteTable(_))));
        assert!(t.to_csv().starts_with("model,x,y\na,1,2\n"));
    }

    #[test]
    fn histogram_examples() {
        let h = error_distribution(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((h.zero, h.counts.len()), (2, 0));
        let h = error_distribution(&[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let b = h.counts.iter().position(|&c| c == 3).unwrap();
        assert!(h.edges[b] <= 9.0 && 9.0 < h.edges[b + 1]);
        let h = error_distribution(&[0.0, 1.0, 10.0, 100.0], &[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>() + h.zero, 4);
    }
}
