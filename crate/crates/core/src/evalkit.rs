//! Robustness measurements: accuracy, fooling rates, transfer matrices,
//! tFR order statistics, worst-case accuracy, and the CSV report format.
//!
//! All rates are exact integer-count ratios in f64, so the complement
//! identity `fooling_rate(δ=0) + accuracy = 1` holds bit-exactly and
//! results are invariant to dataset ordering.

use crate::error::{Error, Result};
use crate::styshapes::{DatasetBundle, Split};
use crate::uap::{apply_perturbation, Perturbation};
use crate::zoo::ModelHandle;

/// Fraction of argmax predictions equal to labels on a split.
pub fn accuracy(model: &ModelHandle, data: &DatasetBundle, split: Split) -> Result<f64> {
    let ix = data.split_indices(split);
    if ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "accuracy",
            split: format!("{split:?}"),
        });
    }
    let preds = model.predict(&data.batch(&ix))?;
    Ok(count_hits(&preds, data, &ix) as f64 / ix.len() as f64)
}

/// Fraction of inputs misclassified (against ground truth) once the
/// perturbation is applied. The zero perturbation gives exactly the
/// clean error.
pub fn fooling_rate(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    delta: &Perturbation,
) -> Result<f64> {
    let ix = data.split_indices(split);
    if ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "fooling_rate",
            split: format!("{split:?}"),
        });
    }
    let adv = apply_perturbation(&data.batch(&ix), &delta.delta)?;
    let preds = model.predict(&adv)?;
    let hits = count_hits(&preds, data, &ix);
    Ok((ix.len() - hits) as f64 / ix.len() as f64)
}

/// Fraction of perturbed inputs classified as `target`, counting inputs
/// whose true label already is the target.
pub fn targeted_fooling_rate(
    model: &ModelHandle,
    data: &DatasetBundle,
    split: Split,
    delta: &Perturbation,
    target: usize,
) -> Result<f64> {
    if target >= model.arch().classes {
        return Err(Error::invalid(format!(
            "targeted_fooling_rate: class {target} out of range [0, {})",
            model.arch().classes
        )));
    }
    let ix = data.split_indices(split);
    if ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "targeted_fooling_rate",
            split: format!("{split:?}"),
        });
    }
    let adv = apply_perturbation(&data.batch(&ix), &delta.delta)?;
    let preds = model.predict(&adv)?;
    let hits = preds.iter().filter(|&&p| p == target).count();
    Ok(hits as f64 / ix.len() as f64)
}

/// Grid of fooling rates: one row per perturbation source, one column
/// per evaluated model, all at a single ε.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub epsilon: f32,
    /// Row labels: source model ids of the perturbations.
    pub sources: Vec<String>,
    /// Column labels: evaluated model ids.
    pub evaluated: Vec<String>,
    /// rates[row][col].
    pub rates: Vec<Vec<f64>>,
}

impl TransferMatrix {
    /// Index of the white-box cell in a row, when the source model also
    /// appears among the evaluated models.
    pub fn white_box_column(&self, row: usize) -> Option<usize> {
        self.evaluated.iter().position(|m| *m == self.sources[row])
    }
}

/// Evaluate every perturbation against every model. All perturbations
/// must carry the requested ε.
pub fn transfer_matrix(
    models: &[&ModelHandle],
    uaps: &[&Perturbation],
    data: &DatasetBundle,
    split: Split,
    epsilon: f32,
) -> Result<TransferMatrix> {
    if models.is_empty() || uaps.is_empty() {
        return Err(Error::invalid("transfer_matrix: models and uaps must be non-empty"));
    }
    for u in uaps {
        if u.epsilon != epsilon {
            return Err(Error::invalid(format!(
                "transfer_matrix: perturbation from {}/{} has eps {}, requested {}",
                u.source.arch, u.source.regime, u.epsilon, epsilon
            )));
        }
    }
    let mut rates = Vec::with_capacity(uaps.len());
    for u in uaps {
        let mut row = Vec::with_capacity(models.len());
        for m in models {
            row.push(fooling_rate(m, data, split, u)?);
        }
        rates.push(row);
    }
    Ok(TransferMatrix {
        epsilon,
        sources: uaps
            .iter()
            .map(|u| format!("{}/{}", u.source.arch, u.source.regime))
            .collect(),
        evaluated: models.iter().map(|m| m.id()).collect(),
        rates,
    })
}

/// Order statistics over per-class targeted fooling rates.
#[derive(Debug, Clone, PartialEq)]
pub struct TfrDistribution {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// Deciles q10..q90, linearly interpolated over the sorted sample.
    pub deciles: [f64; 9],
}

/// Summarize a targeted sweep's tFRs.
pub fn tfr_distribution(tfrs: &[f64]) -> Result<TfrDistribution> {
    if tfrs.is_empty() {
        return Err(Error::invalid("tfr_distribution: empty input"));
    }
    let mut sorted = tfrs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("rates are finite"));
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    let mut deciles = [0.0; 9];
    for (i, d) in deciles.iter_mut().enumerate() {
        *d = q((i + 1) as f64 / 10.0);
    }
    Ok(TfrDistribution {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        median: q(0.5),
        deciles,
    })
}

/// Minimum accuracy over a pool of same-ε perturbations, with the argmin
/// perturbation id (ties break toward the earlier pool entry).
pub fn worst_case_accuracy(
    model: &ModelHandle,
    uaps: &[&Perturbation],
    data: &DatasetBundle,
    split: Split,
) -> Result<(f64, String)> {
    if uaps.is_empty() {
        return Err(Error::invalid("worst_case_accuracy: empty perturbation pool"));
    }
    let eps = uaps[0].epsilon;
    if let Some(u) = uaps.iter().find(|u| u.epsilon != eps) {
        return Err(Error::invalid(format!(
            "worst_case_accuracy: mixed epsilons in pool ({} vs {eps})",
            u.epsilon
        )));
    }
    let ix = data.split_indices(split);
    if ix.is_empty() {
        return Err(Error::EmptySplit {
            op: "worst_case_accuracy",
            split: format!("{split:?}"),
        });
    }
    let images = data.batch(&ix);
    let mut worst: Option<(f64, String)> = None;
    for u in uaps {
        let adv = apply_perturbation(&images, &u.delta)?;
        let preds = model.predict(&adv)?;
        let acc = count_hits(&preds, data, &ix) as f64 / ix.len() as f64;
        if worst.as_ref().is_none_or(|(best, _)| acc < *best) {
            worst = Some((acc, u.id()));
        }
    }
    Ok(worst.expect("pool is non-empty"))
}

fn count_hits(preds: &[usize], data: &DatasetBundle, ix: &[usize]) -> usize {
    preds
        .iter()
        .zip(ix)
        .filter(|&(&p, &i)| p == data.label(i) as usize)
        .count()
}

// ── CSV reporting ───────────────────────────────────────────────────

pub const CSV_HEADER: &str =
    "uap_id,source_model,source_regime,eval_model,eval_regime,epsilon,mode,target,metric,value,n";

/// One measurement row of the report schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub uap_id: String,
    pub source_model: String,
    pub source_regime: String,
    pub eval_model: String,
    pub eval_regime: String,
    pub epsilon: f32,
    pub mode: String,
    pub target: Option<u16>,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl ReportRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{}",
            self.uap_id,
            self.source_model,
            self.source_regime,
            self.eval_model,
            self.eval_regime,
            trim_float(self.epsilon),
            self.mode,
            self.target.map_or_else(|| "-".to_string(), |t| t.to_string()),
            self.metric,
            self.value,
            self.n
        )
    }
}

/// ε formatted without trailing zeros (10 not 10.0), so report keys are
/// stable text.
fn trim_float(v: f32) -> String {
    if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Measurement collection serializable as CSV.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport::default()
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Rows whose metric matches.
    pub fn metric_rows<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }
}

/// Parse a report back from CSV text (used by downstream checks).
pub fn parse_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::invalid(format!(
                "report: unexpected header {other:?}"
            )))
        }
    }
    let mut report = EvalReport::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::invalid(format!(
                "report: line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        report.push(ReportRow {
            uap_id: fields[0].into(),
            source_model: fields[1].into(),
            source_regime: fields[2].into(),
            eval_model: fields[3].into(),
            eval_regime: fields[4].into(),
            epsilon: fields[5]
                .parse()
                .map_err(|_| Error::invalid(format!("report: bad epsilon {:?}", fields[5])))?,
            mode: fields[6].into(),
            target: match fields[7] {
                "-" => None,
                t => Some(
                    t.parse()
                        .map_err(|_| Error::invalid(format!("report: bad target {t:?}")))?,
                ),
            },
            metric: fields[8].into(),
            value: fields[9]
                .parse()
                .map_err(|_| Error::invalid(format!("report: bad value {:?}", fields[9])))?,
            n: fields[10]
                .parse()
                .map_err(|_| Error::invalid(format!("report: bad n {:?}", fields[10])))?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tfr_distribution_order_statistics() {
        let flat = tfr_distribution(&[0.5; 7]).unwrap();
        assert_eq!((flat.min, flat.median, flat.max), (0.5, 0.5, 0.5));

        let steps: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let d = tfr_distribution(&steps).unwrap();
        assert!((d.median - 0.55).abs() < 1e-12);
        assert_eq!(d.min, 0.1);
        assert_eq!(d.max, 1.0);
        assert!(tfr_distribution(&[]).is_err());
    }

    #[test]
    fn deciles_match_naive_sort_oracle() {
        // Oracle: sort the sample and interpolate at p(n-1) directly.
        let oracle = |values: &[f64], p: f64| -> f64 {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = p * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        let mut state = 0x243f6a8885a308d3u64;
        for round in 0..25 {
            let n = 1 + (round % 13);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            let d = tfr_distribution(&values).unwrap();
            for (i, &dec) in d.deciles.iter().enumerate() {
                let expect = oracle(&values, (i + 1) as f64 / 10.0);
                assert!((dec - expect).abs() < 1e-12, "n={n} decile {i}");
            }
            assert_eq!(d.median, oracle(&values, 0.5));
        }
    }

    #[test]
    fn csv_roundtrip_and_format() {
        let mut report = EvalReport::new();
        report.push(ReportRow {
            uap_id: "abc123".into(),
            source_model: "convnet-M".into(),
            source_regime: "SIN+IN".into(),
            eval_model: "convnet-S".into(),
            eval_regime: "IN".into(),
            epsilon: 10.0,
            mode: "untargeted".into(),
            target: None,
            metric: "fooling_rate".into(),
            value: 0.5,
            n: 600,
        });
        report.push(ReportRow {
            uap_id: "def".into(),
            source_model: "convnet-M".into(),
            source_regime: "IN".into(),
            eval_model: "ensemble:soft".into(),
            eval_regime: "-".into(),
            epsilon: 2.5,
            mode: "targeted".into(),
            target: Some(7),
            metric: "tfr".into(),
            value: 1.0 / 3.0,
            n: 100,
        });
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "abc123,convnet-M,SIN+IN,convnet-S,IN,10,untargeted,-,fooling_rate,0.500000,600"
        );
        assert_eq!(
            lines.next().unwrap(),
            "def,convnet-M,IN,ensemble:soft,-,2.5,targeted,7,tfr,0.333333,100"
        );
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[1].target, Some(7));
        assert!(parse_csv("bogus\n1,2,3\n").is_err());
    }
}
