//! Agreement metrics for continuous valence traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniformly sampled scalar trace starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSeries {
    /// Seconds between consecutive values.
    pub period: f64,
    pub values: Vec<f64>,
}

impl RatingSeries {
    pub fn new(period: f64, values: Vec<f64>) -> Self {
        RatingSeries { period, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        i as f64 * self.period
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population (1/N) variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Data(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Data(format!("series too short ({} values)", x.len())));
    }
    Ok(())
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Concordance correlation coefficient with population moments.
///
/// Two constant series score 1 when their means coincide and 0 otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    let (cov, vx, vy) = (cov / n, vx / n, vy / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(1.0);
    }
    if vx == 0.0 && vy == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * cov / denom)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EweOptions {
    /// Replace negative observer weights by zero.
    pub clamp_negative: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ewe {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    /// The weights summed to zero and the unweighted mean was returned.
    pub fallback: bool,
}

fn unweighted_mean(ratings: &[&[f64]]) -> Vec<f64> {
    let n = ratings[0].len();
    (0..n)
        .map(|t| ratings.iter().map(|r| r[t]).sum::<f64>() / ratings.len() as f64)
        .collect()
}

/// Evaluator weighted estimator: observers weighted by their correlation with
/// the unweighted mean trace.
pub fn ewe(ratings: &[&[f64]], opts: EweOptions) -> Result<Ewe> {
    let first = ratings.first().ok_or_else(|| Error::Data("EWE needs at least one observer".into()))?;
    if ratings.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Data("EWE observers have different lengths".into()));
    }
    if first.is_empty() {
        return Err(Error::Data("EWE observers are empty".into()));
    }
    let avg = unweighted_mean(ratings);
    let weights: Vec<f64> = ratings
        .iter()
        .map(|r| {
            let w = if r.len() < 2 { 1.0 } else { pearson(r, &avg)? };
            Ok(if opts.clamp_negative { w.max(0.0) } else { w })
        })
        .collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    if total.abs() < 1e-12 {
        return Ok(Ewe {
            values: avg,
            weights,
            fallback: true,
        });
    }
    // Identical weights normalize to 1/n exactly.
    if weights.iter().all(|w| w.to_bits() == weights[0].to_bits()) {
        return Ok(Ewe {
            values: avg,
            weights,
            fallback: false,
        });
    }
    let values = (0..first.len())
        .map(|t| ratings.iter().zip(&weights).map(|(r, w)| w * r[t]).sum::<f64>() / total)
        .collect();
    Ok(Ewe {
        values,
        weights,
        fallback: false,
    })
}

/// Mean over observers of CCC(observer, EWE of the remaining observers).
pub fn human_benchmark(ratings: &[&[f64]], opts: EweOptions) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(Error::Data(format!(
            "human benchmark needs at least 2 observers, got {}",
            ratings.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..ratings.len() {
        let others: Vec<&[f64]> = ratings
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(_, r)| *r)
            .collect();
        let gold = ewe(&others, opts)?;
        total += ccc(ratings[j], &gold.values)?;
    }
    Ok(total / ratings.len() as f64)
}

/// Windows with the largest absolute change from the previous window.
///
/// Returns `(window index, signed delta)` sorted by decreasing magnitude;
/// ties keep the earlier window first.
pub fn top_changes(pred: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::Config("top_changes: k must be positive".into()));
    }
    if pred.len() < 2 {
        return Err(Error::Data("top_changes needs at least 2 windows".into()));
    }
    let mut deltas: Vec<(usize, f64)> = pred.windows(2).enumerate().map(|(i, w)| (i + 1, w[1] - w[0])).collect();
    deltas.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    deltas.truncate(k);
    Ok(deltas)
}

/// Per-clip CCC values for one split, with their mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub model: String,
    pub modalities: String,
    pub clip_ids: Vec<String>,
    pub ccc: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `ccc`.
    pub std: f64,
    /// Leave-one-out human benchmark per clip, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<Vec<f64>>,
    #[serde(default)]
    pub notes: Vec<String>,
    /// Effective configuration that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(split: &str, model: &str, modalities: &str, clip_ids: Vec<String>, ccc: Vec<f64>) -> Result<Self> {
        if ccc.is_empty() {
            return Err(Error::Data(format!("split {split} has no clips")));
        }
        Ok(EvalReport {
            split: split.to_string(),
            model: model.to_string(),
            modalities: modalities.to_string(),
            mean: mean(&ccc),
            std: std_dev(&ccc),
            clip_ids,
            ccc,
            human: None,
            notes: Vec::new(),
            config: serde_json::Value::Null,
        })
    }

    pub fn human_summary(&self) -> Option<(f64, f64)> {
        self.human.as_ref().filter(|h| !h.is_empty()).map(|h| (mean(h), std_dev(h)))
    }

    /// Plain-text table: one `clip_id,ccc[,human]` row per clip, then mean and std.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# split: {}\n", self.split));
        out.push_str(&format!("# model: {} {}\n", self.model, self.modalities));
        for note in &self.notes {
            out.push_str(&format!("# note: {note}\n"));
        }
        if !self.config.is_null() {
            out.push_str(&format!("# config: {}\n", self.config));
        }
        let human = self.human.as_ref();
        out.push_str(if human.is_some() { "clip_id,ccc,human\n" } else { "clip_id,ccc\n" });
        for (i, (id, c)) in self.clip_ids.iter().zip(&self.ccc).enumerate() {
            match human {
                Some(h) => out.push_str(&format!("{id},{c},{}\n", h[i])),
                None => out.push_str(&format!("{id},{c}\n")),
            }
        }
        match self.human_summary() {
            Some((hm, hs)) => {
                out.push_str(&format!("mean,{},{hm}\n", self.mean));
                out.push_str(&format!("std,{},{hs}\n", self.std));
            }
            None => {
                out.push_str(&format!("mean,{}\n", self.mean));
                out.push_str(&format!("std,{}\n", self.std));
            }
        }
        out
    }
}
