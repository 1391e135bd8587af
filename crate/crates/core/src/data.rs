//! Synthetic task streams.
//!
//! Task `t` draws tokens from its own vocabulary band. Each of its classes
//! owns a distinct subset ("signature") of the band; a sequence of class
//! `c` emits signature tokens with probability `1 − difficulty` and
//! uniform band tokens otherwise. Labels are global ids so that one shared
//! head covers the union of classes.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Bookkeeping only; never given to the model.
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub classes: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub seed: u64,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    /// Training examples per class; validation and test get a quarter each.
    pub samples_per_class: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Probability that a position ignores the class signature, in `[0, 1]`.
    pub difficulty: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            seed: 7,
            n_tasks: 4,
            classes_per_task: 4,
            samples_per_class: 128,
            seq_len: 16,
            vocab_size: 64,
            difficulty: 0.3,
        }
    }
}

impl StreamSpec {
    pub fn band_width(&self) -> usize {
        self.vocab_size / self.n_tasks.max(1)
    }

    pub fn held_out_per_class(&self) -> usize {
        (self.samples_per_class / 4).max(1)
    }
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

pub fn generate_task_stream(spec: &StreamSpec) -> Result<TaskStream> {
    if spec.n_tasks == 0 {
        return Err(Error::Config("a stream needs at least one task".into()));
    }
    if spec.classes_per_task < 2 {
        return Err(Error::Config("each task needs at least two classes".into()));
    }
    if spec.samples_per_class == 0 || spec.seq_len == 0 {
        return Err(Error::Config("samples_per_class and seq_len must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.difficulty) {
        return Err(Error::Config(format!("difficulty {} outside [0, 1]", spec.difficulty)));
    }
    let width = spec.band_width();
    if width < 2 {
        return Err(Error::Config(format!(
            "vocabulary of {} cannot give {} tasks a band of at least two tokens",
            spec.vocab_size, spec.n_tasks
        )));
    }
    let sig_len = width / 2;
    if n_choose_k(width, sig_len) < spec.classes_per_task as u128 {
        return Err(Error::Config(format!(
            "a band of {width} tokens cannot hold {} distinct class signatures",
            spec.classes_per_task
        )));
    }

    let held_out = spec.held_out_per_class();
    let per_class = spec.samples_per_class + 2 * held_out;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let mut rng = stream_rng(spec.seed, Stream::Data, t as u64);
        let band: Vec<usize> = (t * width..(t + 1) * width).collect();

        let mut signatures: Vec<Vec<usize>> = Vec::with_capacity(spec.classes_per_task);
        while signatures.len() < spec.classes_per_task {
            let mut sig: Vec<usize> = band.choose_multiple(&mut rng, sig_len).copied().collect();
            sig.sort_unstable();
            if !signatures.contains(&sig) {
                signatures.push(sig);
            }
        }

        let class0 = t * spec.classes_per_task;
        let mut seen = HashSet::new();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for (c, sig) in signatures.iter().enumerate() {
            let label = class0 + c;
            let mut made = 0;
            let mut attempts = 0usize;
            while made < per_class {
                attempts += 1;
                if attempts > per_class * 1000 {
                    return Err(Error::Config(format!(
                        "task {t} cannot produce {per_class} distinct sequences per class"
                    )));
                }
                let tokens: Vec<usize> = (0..spec.seq_len)
                    .map(|_| {
                        if rng.random::<f64>() < spec.difficulty {
                            band[rng.random_range(0..width)]
                        } else {
                            sig[rng.random_range(0..sig.len())]
                        }
                    })
                    .collect();
                if !seen.insert(tokens.clone()) {
                    continue;
                }
                let ex = Example {
                    tokens,
                    label,
                    task_id: t,
                };
                if made < spec.samples_per_class {
                    train.push(ex);
                } else if made < spec.samples_per_class + held_out {
                    validation.push(ex);
                } else {
                    test.push(ex);
                }
                made += 1;
            }
        }
        train.shuffle(&mut rng);
        tasks.push(Task {
            id: t,
            train,
            validation,
            test,
            classes: class0..class0 + spec.classes_per_task,
        });
    }
    Ok(TaskStream {
        tasks,
        vocab_size: spec.vocab_size,
        seq_len: spec.seq_len,
        num_classes: spec.n_tasks * spec.classes_per_task,
    })
}
