//! Synthetic prompt/answer tasks with binary verifiable rewards.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TokenId, Vocabulary};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModSum,
    Reverse,
    Sort,
}

impl TaskKind {
    /// Inclusive difficulty bounds.
    pub fn difficulty_range(self) -> (usize, usize) {
        match self {
            TaskKind::ModSum => (2, 8),
            TaskKind::Reverse | TaskKind::Sort => (2, 10),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ModSum => "mod_sum",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mod_sum" | "modsum" => Ok(TaskKind::ModSum),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub difficulty: usize,
    pub vocab: Vocabulary,
    digits: [TokenId; 10],
}

impl TaskSpec {
    pub fn new(kind: TaskKind, difficulty: usize, vocab: Vocabulary) -> Result<Self> {
        let (lo, hi) = kind.difficulty_range();
        if !(lo..=hi).contains(&difficulty) {
            return Err(Error::Config(format!(
                "{kind} difficulty must be in {lo}..={hi}, got {difficulty}"
            )));
        }
        let mut digits = [0; 10];
        for (d, slot) in digits.iter_mut().enumerate() {
            *slot = vocab
                .digit(d as u8)
                .ok_or_else(|| Error::Config(format!("vocabulary lacks digit {d}")))?;
        }
        Ok(TaskSpec {
            kind,
            difficulty,
            vocab,
            digits,
        })
    }

    fn digit_value(&self, tok: TokenId) -> Option<usize> {
        self.digits.iter().position(|&t| t == tok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Builds `BOS operands... SEP` and the canonical answer.
pub fn instance_from_operands(spec: &TaskSpec, operands: &[u8]) -> Instance {
    let v = &spec.vocab;
    let mut prompt = Vec::with_capacity(operands.len() + 2);
    prompt.push(v.bos);
    prompt.extend(operands.iter().map(|&d| spec.digits[d as usize]));
    prompt.push(v.sep);
    let answer_digits: Vec<u8> = match spec.kind {
        TaskKind::ModSum => vec![(operands.iter().map(|&d| d as u32).sum::<u32>() % 10) as u8],
        TaskKind::Reverse => operands.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut s = operands.to_vec();
            s.sort_unstable();
            s
        }
    };
    let answer = answer_digits.iter().map(|&d| spec.digits[d as usize]).collect();
    Instance { prompt, answer }
}

pub fn generate_instance(spec: &TaskSpec, rng: &mut Rng) -> Instance {
    let operands: Vec<u8> = (0..spec.difficulty).map(|_| rng.gen_range(0..10u8)).collect();
    instance_from_operands(spec, &operands)
}

/// Operands encoded in a prompt produced by [`instance_from_operands`].
pub fn prompt_operands(spec: &TaskSpec, prompt: &[TokenId]) -> Option<Vec<u8>> {
    let inner = prompt.strip_prefix(&[spec.vocab.bos])?.strip_suffix(&[spec.vocab.sep])?;
    inner
        .iter()
        .map(|&t| spec.digit_value(t).map(|d| d as u8))
        .collect()
}

/// True iff `response`, cut at its first EOS and with PAD removed, equals `answer`.
pub fn is_equivalent(vocab: &Vocabulary, answer: &[TokenId], response: &[TokenId]) -> bool {
    let body = match response.iter().position(|&t| t == vocab.eos) {
        Some(i) => &response[..i],
        None => response,
    };
    let mut kept = body.iter().filter(|&&t| t != vocab.pad);
    let mut expected = answer.iter();
    loop {
        match (kept.next(), expected.next()) {
            (None, None) => return true,
            (Some(a), Some(b)) if a == b => continue,
            _ => return false,
        }
    }
}

pub fn reward(vocab: &Vocabulary, answer: &[TokenId], response: &[TokenId]) -> f64 {
    if is_equivalent(vocab, answer, response) {
        1.0
    } else {
        0.0
    }
}

/// Writes one instance per line: prompt symbols, a tab, answer symbols.
pub fn write_eval_set(path: &Path, vocab: &Vocabulary, instances: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        writeln!(w, "{}\t{}", vocab.decode(&inst.prompt), vocab.decode(&inst.answer))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_eval_set(path: &Path, vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (prompt, answer) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("{}:{}: expected a tab separator", path.display(), lineno + 1))
        })?;
        out.push(Instance {
            prompt: vocab.encode(prompt)?,
            answer: vocab.encode(answer)?,
        });
    }
    Ok(out)
}
