//! Deterministic generators for four code-like tasks with distinct input and
//! output formats.
//!
//! | kind        | input                              | target                      |
//! |-------------|------------------------------------|-----------------------------|
//! | gen_like    | `set x to a plus b`                | `x = a + b ;`               |
//! | trans_like  | `var x = a + b ;`                  | `let x := a add b .`        |
//! | summ_like   | `fn calc ( a , b ) { ret a * b }`  | `calc returns the product`  |
//! | refine_like | `x = a ++ b ;`                     | `x = a + b ;`               |

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, TaskData, TaskStream};
use crate::error::{contract, Result};

pub const DEFAULT_IDENTIFIERS: [&str; 10] = ["a", "b", "c", "d", "i", "j", "k", "n", "x", "y"];

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

struct OpForms {
    word: &'static str,
    symbol: &'static str,
    noun: &'static str,
    corrupt: &'static str,
}

const OPS: [OpForms; 4] = [
    OpForms { word: "plus", symbol: "+", noun: "sum", corrupt: "++" },
    OpForms { word: "minus", symbol: "-", noun: "difference", corrupt: "--" },
    OpForms { word: "times", symbol: "*", noun: "product", corrupt: "**" },
    OpForms { word: "over", symbol: "/", noun: "quotient", corrupt: "//" },
];

const FUNCTION_NAMES: [&str; 8] = ["calc", "mix", "get", "run", "eval", "comb", "make", "find"];

/// Token rewrite table from the `var` dialect to the `let` dialect.
const DIALECT_RULES: [(&str, &str); 7] = [
    ("var", "let"),
    ("=", ":="),
    ("+", "add"),
    ("-", "sub"),
    ("*", "mul"),
    ("/", "div"),
    (";", "."),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GenLike,
    TransLike,
    SummLike,
    RefineLike,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::GenLike,
        SyntheticKind::TransLike,
        SyntheticKind::SummLike,
        SyntheticKind::RefineLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::GenLike => "gen_like",
            SyntheticKind::TransLike => "trans_like",
            SyntheticKind::SummLike => "summ_like",
            SyntheticKind::RefineLike => "refine_like",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: SyntheticKind,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
    /// Variable names the generator draws from.
    pub identifiers: Vec<String>,
}

impl SyntheticTaskSpec {
    pub fn new(kind: SyntheticKind, sizes: (usize, usize, usize), seed: u64) -> Self {
        Self {
            kind,
            train: sizes.0,
            validation: sizes.1,
            test: sizes.2,
            seed,
            identifiers: DEFAULT_IDENTIFIERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Applies the `var`→`let` dialect rules token by token.
pub fn rewrite_dialect(code: &str) -> String {
    code.split(' ')
        .map(|tok| {
            DIALECT_RULES
                .iter()
                .find(|(from, _)| *from == tok)
                .map_or(tok, |(_, to)| to)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn enumerate(kind: SyntheticKind, ids: &[String]) -> Vec<(String, String)> {
    let operands: Vec<&str> = ids.iter().map(String::as_str).chain(DIGITS).collect();
    let mut out = Vec::new();
    match kind {
        SyntheticKind::GenLike => {
            for op in &OPS {
                for a in &operands {
                    for b in &operands {
                        for t in ids {
                            out.push((
                                format!("set {t} to {a} {} {b}", op.word),
                                format!("{t} = {a} {} {b} ;", op.symbol),
                            ));
                        }
                        out.push((
                            format!("return {a} {} {b}", op.word),
                            format!("return {a} {} {b} ;", op.symbol),
                        ));
                    }
                }
            }
        }
        SyntheticKind::TransLike => {
            for op in &OPS {
                for a in &operands {
                    for b in &operands {
                        for t in ids {
                            let src = format!("var {t} = {a} {} {b} ;", op.symbol);
                            let dst = rewrite_dialect(&src);
                            out.push((src, dst));
                        }
                    }
                }
            }
        }
        SyntheticKind::SummLike => {
            for name in FUNCTION_NAMES {
                for op in &OPS {
                    for p in ids {
                        for q in ids.iter().filter(|q| *q != p) {
                            out.push((
                                format!("fn {name} ( {p} , {q} ) {{ ret {p} {} {q} }}", op.symbol),
                                format!("{name} returns the {}", op.noun),
                            ));
                        }
                    }
                }
            }
        }
        SyntheticKind::RefineLike => {
            for op in &OPS {
                for a in &operands {
                    for b in &operands {
                        for t in ids {
                            let clean = format!("{t} = {a} {} {b} ;", op.symbol);
                            for broken in [
                                format!("{t} == {a} {} {b} ;", op.symbol),
                                format!("{t} = {a} {} {b} ;", op.corrupt),
                                format!("{t} = {a} {} {b} ,", op.symbol),
                            ] {
                                out.push((broken, clean.clone()));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Draws disjoint train/validation/test splits for one synthetic task.
///
/// Candidates are enumerated exhaustively, shuffled with the spec's seed and
/// cut into consecutive blocks, so no input appears in two splits.
pub fn synth_task(spec: &SyntheticTaskSpec, task_id: usize) -> Result<TaskData> {
    if spec.train == 0 || spec.validation == 0 || spec.test == 0 {
        return contract("synthetic split sizes must be positive");
    }
    if spec.identifiers.len() < 2 {
        return contract("need at least two identifiers");
    }
    let mut pool = enumerate(spec.kind, &spec.identifiers);
    let need = spec.train + spec.validation + spec.test;
    if need > pool.len() {
        return contract(format!(
            "{} can produce {} distinct examples, {need} requested",
            spec.kind.name(),
            pool.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    let mut it = pool.into_iter().map(|(i, t)| Example {
        input: i,
        target: t,
        task: task_id,
    });
    let train = it.by_ref().take(spec.train).collect();
    let validation = it.by_ref().take(spec.validation).collect();
    let test = it.by_ref().take(spec.test).collect();
    Ok(TaskData {
        id: task_id,
        name: spec.kind.name().to_string(),
        train,
        validation,
        test,
    })
}

/// The four-task stream gen → trans → summ → refine.
pub fn synth4(sizes: (usize, usize, usize), seed: u64) -> Result<TaskStream> {
    let tasks = SyntheticKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let task_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64 + 1);
            synth_task(&SyntheticTaskSpec::new(kind, sizes, task_seed), i)
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(tasks)
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use super::*;

    fn spec(kind: SyntheticKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec::new(kind, (512, 64, 64), 11)
    }

    #[test]
    fn refine_differs_in_exactly_one_token() {
        let t = synth_task(&spec(SyntheticKind::RefineLike), 3).unwrap();
        for e in t.all() {
            let a: Vec<&str> = e.input.split(' ').collect();
            let b: Vec<&str> = e.target.split(' ').collect();
            assert_eq!(a.len(), b.len());
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1, "{e:?}");
        }
    }

    #[test]
    fn trans_target_is_rule_rewrite_of_input() {
        // Oracle: an independent copy of the rewrite table.
        let rules: HashMap<&str, &str> = [
            ("var", "let"),
            ("=", ":="),
            ("+", "add"),
            ("-", "sub"),
            ("*", "mul"),
            ("/", "div"),
            (";", "."),
        ]
        .into_iter()
        .collect();
        let t = synth_task(&spec(SyntheticKind::TransLike), 1).unwrap();
        for e in t.all() {
            let want: Vec<&str> = e
                .input
                .split(' ')
                .map(|tok| *rules.get(tok).unwrap_or(&tok))
                .collect();
            assert_eq!(e.target, want.join(" "));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in SyntheticKind::ALL {
            assert_eq!(synth_task(&spec(kind), 0).unwrap(), synth_task(&spec(kind), 0).unwrap());
        }
    }

    #[test]
    fn splits_are_disjoint() {
        for kind in SyntheticKind::ALL {
            let t = synth_task(&spec(kind), 0).unwrap();
            let tr: HashSet<&str> = t.train.iter().map(|e| e.input.as_str()).collect();
            let va: HashSet<&str> = t.validation.iter().map(|e| e.input.as_str()).collect();
            let te: HashSet<&str> = t.test.iter().map(|e| e.input.as_str()).collect();
            assert_eq!(tr.len(), 512);
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        }
    }

    #[test]
    fn zero_size_is_rejected() {
        let mut s = spec(SyntheticKind::GenLike);
        s.validation = 0;
        assert!(synth_task(&s, 0).is_err());
    }

    #[test]
    fn lengths_stay_within_desk_caps() {
        let stream = synth4((512, 64, 64), 3).unwrap();
        for e in stream.tasks.iter().flat_map(|t| t.all()) {
            assert!(e.input.chars().count() <= 64 && e.target.chars().count() <= 64);
        }
    }

    /// Nearest-centroid classifier on whitespace-token frequencies.
    #[test]
    fn tasks_are_distribution_distinct() {
        let stream = synth4((512, 64, 64), 5).unwrap();
        let mut vocab: Vec<String> = stream
            .tasks
            .iter()
            .flat_map(|t| t.train.iter())
            .flat_map(|e| e.input.split(' ').map(str::to_string))
            .collect();
        vocab.sort();
        vocab.dedup();
        let idx: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let feat = |s: &str| {
            let mut v = vec![0.0; vocab.len()];
            for tok in s.split(' ') {
                if let Some(&i) = idx.get(tok) {
                    v[i] += 1.0;
                }
            }
            v
        };
        let centroids: Vec<Vec<f64>> = stream
            .tasks
            .iter()
            .map(|t| {
                let mut c = vec![0.0; vocab.len()];
                for e in &t.train {
                    for (a, b) in c.iter_mut().zip(feat(&e.input)) {
                        *a += b / t.train.len() as f64;
                    }
                }
                c
            })
            .collect();
        let (mut right, mut total) = (0, 0);
        for t in &stream.tasks {
            for e in &t.test {
                let f = feat(&e.input);
                let best = (0..centroids.len())
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                right += usize::from(best == t.id);
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 > 0.9, "{right}/{total}");
    }
}
