//! Corpus BLEU and the continual-learning aggregates over a score matrix.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// For n ≥ 2, a zero match count becomes `(0 + 1) / (total + 1)`.
    AddOneOnZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
    pub lowercase: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: Smoothing::AddOneOnZero,
            lowercase: false,
        }
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Whitespace-tokenized corpus BLEU on a 0–100 scale.
pub fn corpus_bleu(hypotheses: &[String], references: &[String], cfg: &BleuConfig) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        ));
    }
    if hypotheses.is_empty() {
        return contract("BLEU needs at least one sentence pair");
    }
    if cfg.max_order == 0 {
        return contract("BLEU order must be at least 1");
    }
    let norm = |s: &str| if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
    let hyps: Vec<String> = hypotheses.iter().map(|s| norm(s)).collect();
    let refs: Vec<String> = references.iter().map(|s| norm(s)).collect();

    let mut matches = vec![0usize; cfg.max_order];
    let mut totals = vec![0usize; cfg.max_order];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(&refs) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=cfg.max_order {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ht.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..cfg.max_order {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if n >= 1 && cfg.smoothing == Smoothing::AddOneOnZero {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * (log_sum / cfg.max_order as f64).exp()).clamp(0.0, 100.0))
}

/// `b[i][j]`: score on task `j` after finishing task `i`, defined for `j ≤ i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    n: usize,
    cells: Vec<Vec<Option<f64>>>,
}

impl MetricsMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![vec![None; n]; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::new(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() < i + 1 {
                return contract(format!("row {i} has {} entries, needs {}", row.len(), i + 1));
            }
            for (j, &v) in row.iter().take(i + 1).enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n || j > i {
            return Err(Error::Index(format!("cell ({i}, {j}) outside the lower triangle of {}", self.n)));
        }
        if !(0.0..=100.0).contains(&v) {
            return contract(format!("score {v} outside [0, 100]"));
        }
        self.cells[i][j] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        (0..self.n).all(|i| (0..=i).all(|j| self.cells[i][j].is_some()))
    }

    fn last_row(&self) -> Result<Vec<f64>> {
        if self.n == 0 {
            return contract("empty metrics matrix");
        }
        self.cells[self.n - 1]
            .iter()
            .map(|c| c.ok_or_else(|| Error::Contract("final row is incomplete".into())))
            .collect()
    }

    /// Rows are after-task `i`, columns task `j`; cells above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for j in 0..self.n {
            let _ = write!(s, ",task_{j}");
        }
        s.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Contract("empty CSV".into()))?;
        let n = header.split(',').count() - 1;
        let mut m = Self::new(n);
        for (i, line) in lines.enumerate() {
            for (j, cell) in line.split(',').skip(1).enumerate() {
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad cell '{cell}' at row {i}")))?;
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn average_bleu(m: &MetricsMatrix) -> Result<f64> {
    let row = m.last_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetVariant {
    /// Best earlier score taken over rows `0..N-1` (the final row excluded).
    #[default]
    Printed,
    /// Best score taken over every row, the final one included.
    AllRows,
}

/// Mean over tasks `t < N-1` of `max_k b[k][t] − b[N-1][t]`.
pub fn forgetting(m: &MetricsMatrix, variant: ForgetVariant) -> Result<f64> {
    let n = m.n();
    if n < 2 {
        return contract("forgetting needs at least two tasks");
    }
    if !m.is_complete() {
        return contract("metrics matrix is incomplete");
    }
    let last = m.last_row()?;
    let rows_end = match variant {
        ForgetVariant::Printed => n - 1,
        ForgetVariant::AllRows => n,
    };
    let mut total = 0.0;
    for t in 0..n - 1 {
        let best = (t..rows_end)
            .filter_map(|k| m.get(k, t))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - last[t];
    }
    Ok(total / (n - 1) as f64)
}
