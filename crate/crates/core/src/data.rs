//! Synthetic datasets: a byte-level Markov corpus with planted copy patterns
//! and a keyword-counting sequence classification task.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng;

/// 64 printable symbols.
pub const ALPHABET: &[u8; 64] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";
/// Opens a copy pattern: marker, 4-symbol key; a later recall marker repeats the key.
pub const MARKER: u8 = b'#';
pub const RECALL: u8 = b'@';
pub const KEY_LEN: usize = 4;

/// Keywords of the classification rule.
pub const KEYWORD_A: u8 = b'x';
pub const KEYWORD_B: u8 = b'q';
pub const NUM_CLASSES: usize = 6;
pub const CLASSIFY_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ByteLm,
    ToyClassify,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte_lm" => Ok(Task::ByteLm),
            "toy_classify" => Ok(Task::ToyClassify),
            _ => Err(Error::input(format!(
                "unknown task `{s}` (byte_lm | toy_classify)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dataset {
    Lm {
        train: Vec<u8>,
        val: Vec<u8>,
    },
    Classify {
        train: Vec<Example>,
        val: Vec<Example>,
    },
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Lm { .. } => Task::ByteLm,
            Dataset::Classify { .. } => Task::ToyClassify,
        }
    }

    /// Hex SHA-256 over the serialized splits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Dataset::Lm { train, val } => {
                h.update(b"lm");
                h.update((train.len() as u64).to_le_bytes());
                h.update(train);
                h.update(val);
            }
            Dataset::Classify { train, val } => {
                h.update(b"cls");
                h.update(to_jsonl(train).as_bytes());
                h.update(b"|");
                h.update(to_jsonl(val).as_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Planted rule: `2·min(#A, 2) + min(#B, 1)`.
pub fn classify_label(text: &[u8]) -> usize {
    let a = text.iter().filter(|&&c| c == KEYWORD_A).count();
    let b = text.iter().filter(|&&c| c == KEYWORD_B).count();
    2 * a.min(2) + b.min(1)
}

fn in_val(seed: u64, index: usize) -> bool {
    rng::splitmix64(seed ^ rng::splitmix64(index as u64 + 1)) % 10 == 0
}

/// Order-2 Markov text with marker-triggered copy patterns, in `size` bytes of
/// 256-byte documents split train/val by hashed document index.
pub fn gen_byte_lm(size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::input("dataset size must be > 0"));
    }
    let mut r = rng::stream(seed, "byte-lm");
    let k = ALPHABET.len();
    // Each symbol owns 6 candidate successors; each two-symbol context
    // favours 4 of its last symbol's candidates. Order-1 statistics thus
    // carry most of the signal and order-2 refines it.
    let cands: Vec<[u8; 6]> = (0..k)
        .map(|_| std::array::from_fn(|_| ALPHABET[r.random_range(0..k)]))
        .collect();
    let table: Vec<[(u8, f64); 4]> = (0..k * k)
        .map(|ctx| {
            let mut w = [0.0; 4];
            w.iter_mut().for_each(|x| *x = r.random::<f64>() + 0.05);
            let s: f64 = w.iter().sum();
            let own = &cands[ctx % k];
            std::array::from_fn(|i| (own[r.random_range(0..6)], w[i] / s))
        })
        .collect();
    let index = |c: u8| ALPHABET.iter().position(|&a| a == c).unwrap_or(0);
    let doc_len = 256;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut produced = 0;
    let mut doc_id = 0;
    while produced < size {
        let len = doc_len.min(size - produced);
        let mut doc: Vec<u8> = vec![
            ALPHABET[r.random_range(0..k)],
            ALPHABET[r.random_range(0..k)],
        ];
        let mut key: Option<[u8; KEY_LEN]> = None;
        while doc.len() < len {
            let roll = r.random::<f64>();
            if roll < 0.02 {
                let kk: [u8; KEY_LEN] = std::array::from_fn(|_| ALPHABET[r.random_range(0..k)]);
                doc.push(MARKER);
                doc.extend_from_slice(&kk);
                key = Some(kk);
            } else if roll < 0.04 && key.is_some() {
                doc.push(RECALL);
                doc.extend_from_slice(&key.unwrap());
            } else {
                let (a, b) = (doc[doc.len() - 2], doc[doc.len() - 1]);
                let ctx = &table[index(a) * k + index(b)];
                let mut u = r.random::<f64>();
                let mut next = ctx[3].0;
                for &(c, p) in ctx {
                    if u < p {
                        next = c;
                        break;
                    }
                    u -= p;
                }
                doc.push(next);
            }
        }
        doc.truncate(len);
        produced += doc.len();
        if in_val(seed, doc_id) {
            val.extend_from_slice(&doc);
        } else {
            train.extend_from_slice(&doc);
        }
        doc_id += 1;
    }
    if val.is_empty() {
        // Guarantee a non-empty validation split on tiny corpora.
        let cut = train.len() - train.len() / 10;
        val = train.split_off(cut.max(1).min(train.len()));
    }
    Ok(Dataset::Lm { train, val })
}

/// `size` labelled sequences of length [`CLASSIFY_LEN`], classes balanced in expectation.
pub fn gen_toy_classify(size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::input("dataset size must be > 0"));
    }
    let mut r = rng::stream(seed, "toy-classify");
    let filler: Vec<u8> = ALPHABET
        .iter()
        .copied()
        .filter(|&c| c != KEYWORD_A && c != KEYWORD_B)
        .collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..size {
        let class = r.random_range(0..NUM_CLASSES);
        let n_a = match class / 2 {
            0 => 0,
            1 => 1,
            _ => r.random_range(2..=4),
        };
        let n_b = if class % 2 == 1 {
            r.random_range(1..=3)
        } else {
            0
        };
        let mut text: Vec<u8> = (0..CLASSIFY_LEN)
            .map(|_| filler[r.random_range(0..filler.len())])
            .collect();
        let mut pos: Vec<usize> = (0..CLASSIFY_LEN).collect();
        pos.shuffle(&mut r);
        for (j, &p) in pos.iter().take(n_a + n_b).enumerate() {
            text[p] = if j < n_a { KEYWORD_A } else { KEYWORD_B };
        }
        debug_assert_eq!(classify_label(&text), class);
        let ex = Example {
            text: String::from_utf8(text).expect("ascii"),
            label: class,
        };
        if in_val(seed, i) {
            val.push(ex)
        } else {
            train.push(ex)
        }
    }
    if val.is_empty() && train.len() > 1 {
        val.push(train.pop().unwrap());
    }
    Ok(Dataset::Classify { train, val })
}

pub fn gen_dataset(task: Task, size: usize, seed: u64) -> Result<Dataset> {
    match task {
        Task::ByteLm => gen_byte_lm(size, seed),
        Task::ToyClassify => gen_toy_classify(size, seed),
    }
}

fn to_jsonl(xs: &[Example]) -> String {
    xs.iter()
        .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
        .collect()
}

fn from_jsonl(path: &Path) -> Result<Vec<Example>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Files written for a dataset.
pub fn dataset_paths(dir: &Path, task: Task) -> (PathBuf, PathBuf) {
    match task {
        Task::ByteLm => (dir.join("train.txt"), dir.join("val.txt")),
        Task::ToyClassify => (dir.join("train.jsonl"), dir.join("val.jsonl")),
    }
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tp, vp) = dataset_paths(dir, data.task());
    let (t, v): (Vec<u8>, Vec<u8>) = match data {
        Dataset::Lm { train, val } => (train.clone(), val.clone()),
        Dataset::Classify { train, val } => {
            (to_jsonl(train).into_bytes(), to_jsonl(val).into_bytes())
        }
    };
    fs::write(&tp, t).map_err(|e| Error::io(&tp, e))?;
    fs::write(&vp, v).map_err(|e| Error::io(&vp, e))
}

pub fn load_dataset(dir: &Path, task: Task) -> Result<Dataset> {
    let (tp, vp) = dataset_paths(dir, task);
    Ok(match task {
        Task::ByteLm => Dataset::Lm {
            train: fs::read(&tp).map_err(|e| Error::io(&tp, e))?,
            val: fs::read(&vp).map_err(|e| Error::io(&vp, e))?,
        },
        Task::ToyClassify => Dataset::Classify {
            train: from_jsonl(&tp)?,
            val: from_jsonl(&vp)?,
        },
    })
}

/// Random LM windows: ids `w[0..seq]`, targets `w[1..seq+1]`.
pub fn lm_batch(text: &[u8], batch: usize, seq: usize, r: &mut rng::Rng) -> Result<TokenBatch> {
    if text.len() < seq + 1 {
        return Err(Error::input(format!(
            "corpus of {} bytes shorter than window {}",
            text.len(),
            seq + 1
        )));
    }
    let mut ids = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let s = r.random_range(0..=text.len() - seq - 1);
        ids.extend(text[s..s + seq].iter().map(|&b| b as usize));
        targets.extend(text[s + 1..s + seq + 1].iter().map(|&b| b as usize));
    }
    TokenBatch::new(batch, seq, ids, targets)
}

/// Consecutive non-overlapping windows, at most `max_batches` batches.
pub fn lm_eval_batches(
    text: &[u8],
    batch: usize,
    seq: usize,
    max_batches: usize,
) -> Result<Vec<TokenBatch>> {
    let windows = text.len().saturating_sub(1) / seq;
    if windows == 0 {
        return Err(Error::input("validation corpus shorter than one window"));
    }
    let mut out = Vec::new();
    let mut w = 0;
    while w < windows && out.len() < max_batches {
        let n = batch.min(windows - w);
        let mut ids = Vec::with_capacity(n * seq);
        let mut targets = Vec::with_capacity(n * seq);
        for j in 0..n {
            let s = (w + j) * seq;
            ids.extend(text[s..s + seq].iter().map(|&b| b as usize));
            targets.extend(text[s + 1..s + seq + 1].iter().map(|&b| b as usize));
        }
        out.push(TokenBatch::new(n, seq, ids, targets)?);
        w += n;
    }
    Ok(out)
}

pub fn classify_batch(examples: &[&Example]) -> Result<TokenBatch> {
    let seq = examples.first().map_or(0, |e| e.text.len());
    if examples.iter().any(|e| e.text.len() != seq) {
        return Err(Error::input(
            "classification examples must share one length",
        ));
    }
    let ids = examples
        .iter()
        .flat_map(|e| e.text.bytes().map(|b| b as usize))
        .collect();
    let targets = examples.iter().map(|e| e.label).collect();
    TokenBatch::new(examples.len(), seq, ids, targets)
}

pub fn classify_eval_batches(examples: &[Example], batch: usize) -> Result<Vec<TokenBatch>> {
    examples
        .chunks(batch.max(1))
        .map(|c| classify_batch(&c.iter().collect::<Vec<_>>()))
        .collect()
}
