//! Endpoint error and bad-pixel rates over valid (and optionally masked) pixels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the absolute (`> τ`) and relative (`≥ pct·gt`) conditions combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BadRule {
    #[default]
    Or,
    And,
}

impl fmt::Display for BadRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BadRule::Or => "or",
            BadRule::And => "and",
        })
    }
}

impl FromStr for BadRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(BadRule::Or),
            "and" => Ok(BadRule::And),
            _ => Err(Error::config(format!("unknown bad-pixel rule {s:?} (expected or|and)"))),
        }
    }
}

pub const DEFAULT_PCT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe: f64,
    pub bad1: f64,
    pub bad3: f64,
    #[serde(rename = "pixels")]
    pub evaluated_pixels: usize,
    pub rule: BadRule,
}

/// Pairwise summation; the result does not depend on how work is split.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 16 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `(|err|, gt)` for every pixel valid in `gt` and selected by `mask`.
fn evaluated<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    if !pred.same_dims(gt) {
        return Err(Error::config(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.values().len() {
            return Err(Error::config("mask size differs from ground truth"));
        }
    }
    let px: Vec<(f64, f64)> = (0..gt.values().len())
        .filter(|&i| gt.valid()[i] && mask.is_none_or(|m| m[i]))
        .map(|i| {
            let g = gt.values()[i].as_f64();
            ((pred.values()[i].as_f64() - g).abs(), g)
        })
        .collect();
    if px.is_empty() {
        return Err(Error::domain("no pixels to evaluate"));
    }
    Ok(px)
}

pub fn epe<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>, mask: Option<&[bool]>) -> Result<f64> {
    let px = evaluated(pred, gt, mask)?;
    let errs: Vec<f64> = px.iter().map(|p| p.0).collect();
    Ok(pairwise_sum(&errs) / px.len() as f64)
}

fn is_bad(err: f64, gt: f64, tau: f64, pct: f64, rule: BadRule) -> bool {
    let abs = err > tau;
    let rel = err >= pct * gt;
    match rule {
        BadRule::Or => abs || rel,
        BadRule::And => abs && rel,
    }
}

fn bad_of(px: &[(f64, f64)], tau: f64, pct: f64, rule: BadRule) -> f64 {
    let n = px.iter().filter(|&&(e, g)| is_bad(e, g, tau, pct, rule)).count();
    n as f64 / px.len() as f64
}

pub fn bad_ratio<T: Real>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
    mask: Option<&[bool]>,
    tau: f64,
    pct: f64,
    rule: BadRule,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("bad-pixel threshold must be positive"));
    }
    Ok(bad_of(&evaluated(pred, gt, mask)?, tau, pct, rule))
}

/// EPE, bad-1 and bad-3 in one pass.
pub fn evaluate<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>, mask: Option<&[bool]>, rule: BadRule) -> Result<MetricReport> {
    let px = evaluated(pred, gt, mask)?;
    let errs: Vec<f64> = px.iter().map(|p| p.0).collect();
    Ok(MetricReport {
        epe: pairwise_sum(&errs) / px.len() as f64,
        bad1: bad_of(&px, 1.0, DEFAULT_PCT, rule),
        bad3: bad_of(&px, 3.0, DEFAULT_PCT, rule),
        evaluated_pixels: px.len(),
        rule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> DisparityMap<f64> {
        DisparityMap::dense(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn epe_examples() {
        let gt = map(&[10.0, 5.0]);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
        let pred = map(&[13.5, 5.0]);
        assert_eq!(epe(&pred, &gt, None).unwrap(), 1.75);
        assert_eq!(epe(&pred, &gt, Some(&[false, true])).unwrap(), 0.0);
        assert!(matches!(epe(&pred, &gt, Some(&[false, false])), Err(Error::Domain(_))));
    }

    #[test]
    fn bad_examples() {
        let gt = map(&[53.5, 20.0]);
        let pred = map(&[50.0, 20.0]);
        for rule in [BadRule::Or, BadRule::And] {
            assert_eq!(bad_ratio(&pred, &gt, None, 3.0, 0.05, rule).unwrap(), 0.5);
        }
        let gt = map(&[100.0]);
        let pred = map(&[104.0]);
        assert_eq!(bad_ratio(&pred, &gt, None, 3.0, 0.05, BadRule::Or).unwrap(), 1.0);
        assert_eq!(bad_ratio(&pred, &gt, None, 3.0, 0.05, BadRule::And).unwrap(), 0.0);
        assert_eq!(bad_ratio(&gt, &gt, None, 3.0, 0.05, BadRule::Or).unwrap(), 0.0);
        assert!(bad_ratio(&gt, &gt, None, 0.0, 0.05, BadRule::Or).is_err());
    }

    #[test]
    fn invalid_gt_excluded() {
        let gt = DisparityMap::new(2, 1, vec![1.0, 2.0], vec![false, true]).unwrap();
        let pred = map(&[9.0, 2.5]);
        let r = evaluate(&pred, &gt, None, BadRule::Or).unwrap();
        assert_eq!(r.evaluated_pixels, 1);
        assert_eq!(r.epe, 0.5);
        assert_eq!(r.bad1, 1.0);
        assert_eq!(r.bad3, 1.0);
    }

    #[test]
    fn report_json_names() {
        let r = MetricReport {
            epe: 1.75,
            bad1: 0.5,
            bad3: 0.5,
            evaluated_pixels: 2,
            rule: BadRule::And,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"epe":1.75,"bad1":0.5,"bad3":0.5,"pixels":2,"rule":"and"}"#);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("or".parse::<BadRule>().unwrap(), BadRule::Or);
        assert_eq!("and".parse::<BadRule>().unwrap(), BadRule::And);
        assert!("xor".parse::<BadRule>().is_err());
    }

    #[test]
    fn pairwise_matches_naive() {
        let x: Vec<f64> = (0..1000).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&x), x.iter().sum::<f64>());
    }
}
