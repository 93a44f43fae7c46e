//! External caption scorers. A scorer is a command that reads one
//! `candidate<TAB>ref1<TAB>ref2...` line per pair on stdin and writes one
//! decimal score per line on stdout.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalScorer {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerRegistry {
    scorers: BTreeMap<String, ExternalScorer>,
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

/// One protocol line per pair; tabs and newlines inside fields become spaces.
pub fn encode_pairs(candidates: &[String], references: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (c, refs) in candidates.iter().zip(references) {
        out.push_str(&clean(c));
        for r in refs {
            out.push('\t');
            out.push_str(&clean(r));
        }
        out.push('\n');
    }
    out
}

/// Parses exactly `expected` finite decimal lines.
pub fn decode_scores(name: &str, stdout: &str, expected: usize) -> Result<Vec<f64>> {
    let lines: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != expected {
        return Err(Error::Scorer {
            name: name.into(),
            detail: format!("expected {expected} score lines, got {}", lines.len()),
        });
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| match l.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::Scorer {
                name: name.into(),
                detail: format!("line {}: `{l}` is not a finite decimal", i + 1),
            }),
        })
        .collect()
}

impl ScorerRegistry {
    pub fn register_scorer(&mut self, name: impl Into<String>, scorer: ExternalScorer) {
        self.scorers.insert(name.into(), scorer);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.scorers.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.scorers.keys().map(String::as_str)
    }

    /// Runs the named scorer over all pairs.
    pub fn score(&self, name: &str, candidates: &[String], references: &[Vec<String>]) -> Result<Vec<f64>> {
        let scorer = self.scorers.get(name).ok_or_else(|| Error::Scorer {
            name: name.into(),
            detail: "not registered".into(),
        })?;
        let fail = |detail: String| Error::Scorer {
            name: name.into(),
            detail,
        };
        let mut child = Command::new(&scorer.program)
            .args(&scorer.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("cannot start `{}`: {e}", scorer.program)))?;
        let input = encode_pairs(candidates, references);
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        // a scorer may legitimately exit before reading everything
        let _ = writer.join();
        if !output.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let stdout = String::from_utf8(output.stdout).map_err(|_| fail("output is not UTF-8".into()))?;
        decode_scores(name, &stdout, candidates.len())
    }
}
