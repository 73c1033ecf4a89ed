use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{QAItem, QType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTypeAccuracy {
    pub qtype: QType,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub overall: f64,
    pub binary: f64,
    pub binary_count: usize,
    pub open: f64,
    pub open_count: usize,
    pub per_qtype: Vec<QTypeAccuracy>,
    /// Share of paraphrase groups whose members all get the same prediction.
    pub consistency: f64,
    /// Share of predictions inside the template's legal answer set.
    pub validity: f64,
    /// Mean cross-entropy of the stored answers, when logits were available.
    pub loss: Option<f64>,
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

impl MetricsReport {
    pub fn qtype(&self, q: QType) -> &QTypeAccuracy {
        self.per_qtype.iter().find(|r| r.qtype == q).expect("every qtype is reported")
    }
}

/// Scores predicted answer ids against the stored answers.
pub fn score_predictions(items: &[QAItem], predictions: &[usize]) -> Result<MetricsReport> {
    if items.len() != predictions.len() {
        return Err(Error::Invalid(format!("{} predictions for {} items", predictions.len(), items.len())));
    }
    if items.is_empty() {
        return Err(Error::Empty { op: "evaluation" });
    }
    let (mut hits, mut bin_hits, mut bin_n, mut valid) = (0, 0, 0, 0);
    let mut per: BTreeMap<QType, (usize, usize)> = QType::ALL.iter().map(|&q| (q, (0, 0))).collect();
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (q, &p) in items.iter().zip(predictions) {
        let ok = p == q.answer;
        hits += ok as usize;
        if q.binary {
            bin_n += 1;
            bin_hits += ok as usize;
        }
        valid += q.valid_answers.contains(&p) as usize;
        let e = per.get_mut(&q.qtype).expect("all qtypes present");
        e.0 += 1;
        e.1 += ok as usize;
        groups.entry(q.paraphrase_group).or_default().push(p);
    }
    let n = items.len();
    let open_n = n - bin_n;
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    let agree = multi.iter().filter(|g| g.iter().all(|&p| p == g[0])).count();
    Ok(MetricsReport {
        count: n,
        overall: rate(hits, n),
        binary: rate(bin_hits, bin_n),
        binary_count: bin_n,
        open: rate(hits - bin_hits, open_n),
        open_count: open_n,
        per_qtype: per.into_iter().map(|(qtype, (c, h))| QTypeAccuracy { qtype, count: c, accuracy: rate(h, c) }).collect(),
        consistency: if multi.is_empty() { 1.0 } else { rate(agree, multi.len()) },
        validity: rate(valid, n),
        loss: None,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}
