use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Example, TaskData, TaskStream};
use crate::error::{contract, Error, Result};

/// Reads one example per line from objects with string fields `input` and `target`.
///
/// Blank lines are skipped; other fields (such as `task`) are ignored.
pub fn load_jsonl(path: &Path, task: usize) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let field = |name: &str| {
            v.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| parse_err(format!("missing string field \"{name}\"")))
        };
        let (input, target) = (field("input")?, field("target")?);
        let ex = Example::new(input, target, task).map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return contract(format!("{} contains no examples", path.display()));
    }
    Ok(out)
}

/// Loads `train.jsonl`, `validation.jsonl` and `test.jsonl` from one task directory.
pub fn load_task_dir(dir: &Path, task: usize) -> Result<TaskData> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("task{task}"));
    Ok(TaskData {
        id: task,
        name,
        train: load_jsonl(&dir.join("train.jsonl"), task)?,
        validation: load_jsonl(&dir.join("validation.jsonl"), task)?,
        test: load_jsonl(&dir.join("test.jsonl"), task)?,
    })
}

/// Every subdirectory of `root` is one task, taken in name order.
pub fn load_task_stream(root: &Path) -> Result<TaskStream> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let tasks = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| load_task_dir(d, i))
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(tasks)
}
