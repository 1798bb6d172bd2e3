//! Composable string tasks, toy dataset generation and JSONL I/O.
//!
//! A composed task applies its members left to right:
//! `compose([t1, t2], x) == t2(t1(x))`. The built-in tasks are small
//! deterministic analogs of the main/auxiliary task families: truncation
//! stands in for summarization, a Caesar shift for translation, case and
//! letter remapping for tone adjustment, and reversal for a fixed-rule reply.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Main,
    Auxiliary,
}

#[derive(Clone, Copy)]
pub struct TaskSpec {
    pub name: &'static str,
    pub role: TaskRole,
    pub transform: fn(&str) -> String,
}

impl fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSpec")
            .field("name", &self.name)
            .field("role", &self.role)
            .finish()
    }
}

impl PartialEq for TaskSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl TaskSpec {
    pub fn apply(&self, x: &str) -> String {
        (self.transform)(x)
    }
}

/// First `⌈n/2⌉` characters.
pub fn first_half(x: &str) -> String {
    let n = x.chars().count();
    x.chars().take(n.div_ceil(2)).collect()
}

/// Shift letters forward by one, wrapping `z → a`; case preserved, other characters untouched.
pub fn caesar1(x: &str) -> String {
    x.chars()
        .map(|c| match c {
            'a'..='z' => (b'a' + (c as u8 - b'a' + 1) % 26) as char,
            'A'..='Z' => (b'A' + (c as u8 - b'A' + 1) % 26) as char,
            _ => c,
        })
        .collect()
}

pub fn uppercase(x: &str) -> String {
    x.to_ascii_uppercase()
}

pub fn reverse(x: &str) -> String {
    x.chars().rev().collect()
}

const REMAP_KEY: &[u8; 26] = b"qwertyuiopasdfghjklzxcvbnm";

/// Substitution cipher keyed by keyboard order (`a → q`, `b → w`, …).
pub fn remap(x: &str) -> String {
    x.chars()
        .map(|c| match c {
            'a'..='z' => REMAP_KEY[(c as u8 - b'a') as usize] as char,
            _ => c,
        })
        .collect()
}

/// Inverse of [`remap`].
pub fn unremap(x: &str) -> String {
    x.chars()
        .map(|c| match c {
            'a'..='z' => {
                let pos = REMAP_KEY.iter().position(|&k| k == c as u8).expect("key is a permutation");
                (b'a' + pos as u8) as char
            }
            _ => c,
        })
        .collect()
}

pub fn builtin_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "first_half",
            role: TaskRole::Main,
            transform: first_half,
        },
        TaskSpec {
            name: "reverse",
            role: TaskRole::Main,
            transform: reverse,
        },
        TaskSpec {
            name: "caesar1",
            role: TaskRole::Auxiliary,
            transform: caesar1,
        },
        TaskSpec {
            name: "uppercase",
            role: TaskRole::Auxiliary,
            transform: uppercase,
        },
        TaskSpec {
            name: "remap",
            role: TaskRole::Auxiliary,
            transform: remap,
        },
        TaskSpec {
            name: "unremap",
            role: TaskRole::Auxiliary,
            transform: unremap,
        },
    ]
}

pub fn task_by_name(name: &str) -> Result<TaskSpec> {
    builtin_tasks()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| {
            let known: Vec<_> = builtin_tasks().iter().map(|t| t.name).collect();
            Error::invalid(format!("unknown task `{name}` (known: {})", known.join(", ")))
        })
}

/// An ordered chain of tasks; order matters.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedTask {
    pub tasks: Vec<TaskSpec>,
}

impl ComposedTask {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("a composed task needs at least one task"));
        }
        Ok(Self { tasks })
    }

    pub fn single(task: TaskSpec) -> Self {
        Self { tasks: vec![task] }
    }

    pub fn from_names(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|n| task_by_name(n)).collect::<Result<_>>()?)
    }

    /// Task names joined with `+`, e.g. `first_half+caesar1`.
    pub fn label(&self) -> String {
        self.tasks.iter().map(|t| t.name).collect::<Vec<_>>().join("+")
    }

    pub fn apply(&self, x: &str) -> String {
        compose(self, x)
    }
}

pub fn compose(task: &ComposedTask, x: &str) -> String {
    task.tasks.iter().fold(x.to_string(), |acc, t| t.apply(&acc))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
    pub task: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First `n` examples (all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            split: self.split,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    /// Seeded random subset of at most `n` examples.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.examples.len()).collect();
        SeededRng::new(seed).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        Dataset {
            split: self.split,
            examples: idx.into_iter().map(|i| self.examples[i].clone()).collect(),
        }
    }

    /// Concatenation of several datasets, e.g. for calibration shared across tasks.
    pub fn concat(parts: &[&Dataset]) -> Dataset {
        Dataset {
            split: parts.first().map_or(Split::Train, |d| d.split),
            examples: parts.iter().flat_map(|d| d.examples.iter().cloned()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Shape of the random inputs: letters and single inner spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputStyle {
    pub min_len: usize,
    pub max_len: usize,
    pub space_prob: f64,
    /// Chance that a letter is uppercase. The task alphabet is lowercase, so
    /// this is 0 except for pretraining data.
    #[serde(default)]
    pub upper_prob: f64,
}

impl Default for InputStyle {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 10,
            space_prob: 0.15,
            upper_prob: 0.0,
        }
    }
}

fn random_input(rng: &mut SeededRng, style: &InputStyle) -> String {
    let len = style.min_len + rng.below(style.max_len - style.min_len + 1);
    let mut s = String::with_capacity(len);
    let mut prev_space = true;
    for i in 0..len {
        let edge = i == 0 || i + 1 == len;
        if !edge && !prev_space && rng.bernoulli(style.space_prob) {
            s.push(' ');
            prev_space = true;
        } else {
            let base = if style.upper_prob > 0.0 && rng.bernoulli(style.upper_prob) { b'A' } else { b'a' };
            s.push((base + rng.below(26) as u8) as char);
            prev_space = false;
        }
    }
    s
}

pub fn gen_dataset(task: &ComposedTask, n: usize, seed: u64, ratios: [f64; 3]) -> Result<DatasetSplits> {
    gen_dataset_with(task, n, seed, ratios, &InputStyle::default())
}

/// Deterministic in `(task, n, seed, ratios, style)`. Inputs are unique, so splits are disjoint.
pub fn gen_dataset_with(
    task: &ComposedTask,
    n: usize,
    seed: u64,
    ratios: [f64; 3],
    style: &InputStyle,
) -> Result<DatasetSplits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split ratios must be in [0, 1] and sum to 1"));
    }
    if style.min_len == 0 || style.min_len > style.max_len {
        return Err(Error::invalid("input lengths must satisfy 0 < min_len <= max_len"));
    }
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);
    for (count, ratio, name) in [(n_train, ratios[0], "train"), (n_val, ratios[1], "validation"), (n_test, ratios[2], "test")] {
        if ratio > 0.0 && count == 0 {
            return Err(Error::invalid(format!("n = {n} leaves the {name} split empty")));
        }
    }

    let mut rng = SeededRng::new(seed);
    let mut seen = HashSet::new();
    let mut inputs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while inputs.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::invalid("input space too small for the requested number of unique examples"));
        }
        let x = random_input(&mut rng, style);
        if seen.insert(x.clone()) {
            inputs.push(x);
        }
    }
    let label = task.label();
    let make = |split: Split, xs: &[String]| Dataset {
        split,
        examples: xs
            .iter()
            .map(|x| Example {
                input: x.clone(),
                output: compose(task, x),
                task: label.clone(),
            })
            .collect(),
    };
    Ok(DatasetSplits {
        train: make(Split::Train, &inputs[..n_train]),
        validation: make(Split::Validation, &inputs[n_train..n_train + n_val]),
        test: make(Split::Test, &inputs[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub records: usize,
    pub blank_lines_skipped: usize,
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in &dataset.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one `{"input","output","task"}` object per line. Blank lines are skipped and counted.
pub fn load_jsonl(path: &Path, split: Split) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            report.blank_lines_skipped += 1;
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        examples.push(ex);
    }
    if report.blank_lines_skipped > 0 {
        log::warn!("{}: skipped {} blank lines", path.display(), report.blank_lines_skipped);
    }
    report.records = examples.len();
    Ok((Dataset { split, examples }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compose_examples() {
        let fh = task_by_name("first_half").unwrap();
        let c1 = task_by_name("caesar1").unwrap();
        assert_eq!(compose(&ComposedTask::single(fh), "abcd"), "ab");
        let both = ComposedTask::new(vec![fh, c1]).unwrap();
        assert_eq!(compose(&both, "abcd"), "bc");
        assert_eq!(both.label(), "first_half+caesar1");

        let rev = task_by_name("reverse").unwrap();
        let a = ComposedTask::new(vec![fh, rev]).unwrap();
        let b = ComposedTask::new(vec![rev, fh]).unwrap();
        assert_eq!(compose(&a, "abcd"), "ba");
        assert_eq!(compose(&b, "abcd"), "dc");
    }

    #[test]
    fn builtin_rules() {
        assert_eq!(caesar1("z"), "a");
        assert_eq!(caesar1("Az y"), "Ba z");
        assert_eq!(first_half("abcde"), "abc");
        assert_eq!(first_half(""), "");
        let tasks = builtin_tasks();
        assert!(tasks.iter().filter(|t| t.role == TaskRole::Main).count() >= 2);
        assert!(tasks.iter().filter(|t| t.role == TaskRole::Auxiliary).count() >= 2);
        for s in ["hello world", "abcdefghijklmnopqrstuvwxyz", "q z"] {
            assert_eq!(unremap(&remap(s)), s);
            assert_eq!(remap(&unremap(s)), s);
        }
        assert!(task_by_name("nope").is_err());
        assert!(ComposedTask::new(vec![]).is_err());
    }

    #[test]
    fn dataset_generation() {
        let task = ComposedTask::from_names(&["first_half", "caesar1"]).unwrap();
        let a = gen_dataset(&task, 1000, 3, [0.8, 0.1, 0.1]).unwrap();
        let b = gen_dataset(&task, 1000, 3, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (800, 100, 100));
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            for ex in &a.get(split).examples {
                assert_eq!(ex.output, compose(&task, &ex.input));
                assert!(seen.insert(ex.input.clone()), "input in two splits");
                assert!(ex.input.chars().all(|c| c.is_ascii_lowercase() || c == ' '));
            }
        }
        assert!(gen_dataset(&task, 3, 0, [0.8, 0.1, 0.1]).is_err());
        assert!(gen_dataset(&task, 10, 0, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let task = ComposedTask::from_names(&["uppercase"]).unwrap();
        let d = gen_dataset(&task, 30, 1, [1.0, 0.0, 0.0]).unwrap().train;
        let p = dir.path().join("d.jsonl");
        save_jsonl(&d, &p).unwrap();
        let (back, rep) = load_jsonl(&p, Split::Train).unwrap();
        assert_eq!(back, d);
        assert_eq!(rep.blank_lines_skipped, 0);

        let q = dir.path().join("blank.jsonl");
        std::fs::write(
            &q,
            "{\"input\":\"a\",\"output\":\"A\",\"task\":\"t\"}\n\n{\"input\":\"b\",\"output\":\"B\",\"task\":\"t\"}\n\n{\"input\":\"c\",\"output\":\"C\",\"task\":\"t\"}\n",
        )
        .unwrap();
        let (three, rep) = load_jsonl(&q, Split::Test).unwrap();
        assert_eq!(three.len(), 3);
        assert_eq!(rep.blank_lines_skipped, 2);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"input\":\"a\",\"output\":\"A\",\"task\":\"t\"}\n{oops\n").unwrap();
        match load_jsonl(&bad, Split::Train) {
            Err(Error::Jsonl { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn grouping_is_associative(x in "[a-z ]{0,16}") {
            let t = ComposedTask::from_names(&["first_half", "caesar1"]).unwrap();
            let all = ComposedTask::from_names(&["first_half", "caesar1", "uppercase"]).unwrap();
            let then = task_by_name("uppercase").unwrap().apply(&compose(&t, &x));
            prop_assert_eq!(then, compose(&all, &x));
        }

        #[test]
        fn generation_is_pure(seed in 0u64..50) {
            let t = ComposedTask::from_names(&["reverse"]).unwrap();
            prop_assert_eq!(
                gen_dataset(&t, 20, seed, [0.5, 0.25, 0.25]).unwrap(),
                gen_dataset(&t, 20, seed, [0.5, 0.25, 0.25]).unwrap()
            );
        }
    }
}
