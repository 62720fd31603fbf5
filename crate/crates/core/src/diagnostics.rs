//! Key-drift analysis: PCA of fixed queries and pool keys per stage, and
//! nearest-centroid statistics for the keys.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::tensor::cosine_similarity;

const JACOBI_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n × n`).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Up to three unit vectors, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `n × 3`; coordinates for missing components are zero.
    pub projections: Vec<[f64; 3]>,
    /// Fewer than three components carry variance.
    pub degenerate: bool,
}

impl Pca {
    pub fn project(&self, point: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, comp) in self.components.iter().enumerate() {
            out[c] = point
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((x, m), w)| (x - m) * w)
                .sum();
        }
        out
    }
}

/// Top three principal components of `n` points in `d` dimensions (row-major).
///
/// Each component's largest-magnitude entry is made positive.
pub fn pca_top3(points: &[f64], d: usize) -> Result<Pca> {
    if d < 3 || points.len() % d != 0 {
        return shape_err("pca_top3", format!("{} values with d = {d}", points.len()));
    }
    let n = points.len() / d;
    if n < 4 {
        return contract(format!("PCA needs at least 4 points, got {n}"));
    }
    let mut mean = vec![0.0; d];
    for row in points.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in points.chunks(d) {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let top = vals[order[0]].max(0.0);
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &c in order.iter().take(3) {
        if top == 0.0 || vals[c] <= 1e-10 * top {
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|r| vecs[r * d + c]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(vals[c]);
    }
    let mut pca = Pca {
        mean,
        degenerate: components.len() < 3,
        components,
        eigenvalues,
        projections: Vec::new(),
    };
    pca.projections = points.chunks(d).map(|p| pca.project(p)).collect();
    Ok(pca)
}

/// Keys at one stage of a run, with the fixed queries they are compared to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSnapshot {
    pub stage: String,
    pub d: usize,
    /// `M × d`, an owned copy.
    pub keys: Vec<f64>,
    /// Per key, the tasks it is assigned to (empty without an assignment).
    pub key_tasks: Vec<Vec<usize>>,
    /// `Q × d`, identical across every snapshot of a run.
    pub queries: Vec<f64>,
    pub query_tasks: Vec<usize>,
    pub pca: Pca,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaBasis {
    /// Refit on each stage's queries and keys.
    #[default]
    PerStage,
    /// Reuse the basis fitted on the first snapshot.
    Fixed,
}

pub fn snapshot_keys(
    stage: impl Into<String>,
    keys: &[f64],
    key_tasks: Vec<Vec<usize>>,
    queries: &[f64],
    query_tasks: &[usize],
    d: usize,
    basis: Option<&Pca>,
) -> Result<DriftSnapshot> {
    if keys.len() % d != 0 || queries.len() % d != 0 || queries.len() / d != query_tasks.len() {
        return shape_err("snapshot_keys", "key/query matrices do not match d or labels");
    }
    let mut all = queries.to_vec();
    all.extend_from_slice(keys);
    let pca = match basis {
        Some(b) => {
            let mut p = b.clone();
            p.projections = all.chunks(d).map(|x| b.project(x)).collect();
            p
        }
        None => pca_top3(&all, d)?,
    };
    Ok(DriftSnapshot {
        stage: stage.into(),
        d,
        keys: keys.to_vec(),
        key_tasks,
        queries: queries.to_vec(),
        query_tasks: query_tasks.to_vec(),
        pca,
    })
}

impl DriftSnapshot {
    pub fn n_keys(&self) -> usize {
        self.keys.len() / self.d
    }

    /// Mean query per task, in task order `0..n_tasks`.
    pub fn centroids(&self, n_tasks: usize) -> Vec<Vec<f64>> {
        let d = self.d;
        let mut sums = vec![vec![0.0; d]; n_tasks];
        let mut counts = vec![0usize; n_tasks];
        for (q, &t) in self.queries.chunks(d).zip(&self.query_tasks) {
            if t < n_tasks {
                sums[t].iter_mut().zip(q).for_each(|(s, x)| *s += x);
                counts[t] += 1;
            }
        }
        for (s, c) in sums.iter_mut().zip(counts) {
            if c > 0 {
                s.iter_mut().for_each(|x| *x /= c as f64);
            }
        }
        sums
    }

    /// Cosine-nearest task centroid of each key; ties go to the lower task.
    pub fn nearest_tasks(&self, n_tasks: usize) -> Vec<usize> {
        let cents = self.centroids(n_tasks);
        self.keys
            .chunks(self.d)
            .map(|k| {
                let mut best = (0, f64::NEG_INFINITY);
                for (t, c) in cents.iter().enumerate() {
                    let s = cosine_similarity(k, c).expect("same width");
                    if s > best.1 {
                        best = (t, s);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Points CSV: `point_type,task_label,pc1,pc2,pc3`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_type,task_label,pc1,pc2,pc3\n");
        let nq = self.query_tasks.len();
        for (i, p) in self.pca.projections.iter().enumerate() {
            let (kind, label) = if i < nq {
                ("query", self.query_tasks[i].to_string())
            } else {
                let tasks = &self.key_tasks[i - nq];
                let label = if tasks.is_empty() {
                    "-".to_string()
                } else {
                    tasks.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
                };
                ("key", label)
            };
            let _ = writeln!(s, "{kind},{label},{:.6},{:.6},{:.6}", p[0], p[1], p[2]);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub stage: String,
    pub task: usize,
    /// Share of keys whose nearest query centroid is this task's.
    pub fraction_nearest: f64,
    /// Mean `‖k − k_prev‖` over the keys belonging to this task: its exclusive
    /// keys when an assignment exists, else the keys nearest its centroid at
    /// the previous stage. Zero at the first stage.
    pub mean_displacement: f64,
}

pub fn drift_stats(snapshots: &[DriftSnapshot], n_tasks: usize) -> Result<Vec<DriftRow>> {
    if snapshots.len() < 2 {
        return contract("drift statistics need at least two snapshots");
    }
    let mut rows = Vec::new();
    let mut prev: Option<&DriftSnapshot> = None;
    for snap in snapshots {
        let d = snap.d;
        let m = snap.n_keys();
        let nearest = snap.nearest_tasks(n_tasks);
        let members: Vec<Vec<usize>> = match prev {
            Some(p) => {
                let has_assignment = p.key_tasks.iter().any(|t| !t.is_empty());
                let prev_nearest = p.nearest_tasks(n_tasks);
                (0..n_tasks)
                    .map(|t| {
                        (0..m)
                            .filter(|&i| {
                                if has_assignment {
                                    p.key_tasks[i] == [t]
                                } else {
                                    prev_nearest[i] == t
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
            None => vec![Vec::new(); n_tasks],
        };
        for t in 0..n_tasks {
            let fraction = nearest.iter().filter(|&&n| n == t).count() as f64 / m as f64;
            let disp = match prev {
                Some(p) if !members[t].is_empty() => {
                    members[t]
                        .iter()
                        .map(|&i| {
                            let (a, b) = (&snap.keys[i * d..(i + 1) * d], &p.keys[i * d..(i + 1) * d]);
                            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                        })
                        .sum::<f64>()
                        / members[t].len() as f64
                }
                _ => 0.0,
            };
            rows.push(DriftRow {
                stage: snap.stage.clone(),
                task: t,
                fraction_nearest: fraction,
                mean_displacement: disp,
            });
        }
        prev = Some(snap);
    }
    Ok(rows)
}

pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut s = String::from("stage,task,fraction_nearest,mean_displacement\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.stage, r.task, r.fraction_nearest, r.mean_displacement);
    }
    s
}
