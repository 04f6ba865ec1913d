//! Class bank text files: a `C K` line, then `K` lines of `name v1 … vC`.

use crate::error::{Error, Result};
use crate::eval::ClassBank;
use crate::numerics::{Mat, Rng};

const WHAT: &str = "class bank";

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: WHAT,
        line,
        msg: msg.into(),
    }
}

pub fn parse(text: &str) -> Result<ClassBank> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (n0, first) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    let head: Vec<&str> = first.split_whitespace().collect();
    let [c, k] = head.as_slice() else {
        return Err(err(n0 + 1, "expected `C K`"));
    };
    let c: usize = c.parse().map_err(|_| err(n0 + 1, format!("bad width `{c}`")))?;
    let k: usize = k.parse().map_err(|_| err(n0 + 1, format!("bad class count `{k}`")))?;
    if c == 0 || k == 0 {
        return Err(err(n0 + 1, "width and class count must be positive"));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let n = idx + 1;
        if names.len() == k {
            return Err(err(n, format!("more than the declared {k} classes")));
        }
        let mut fields = line.split_whitespace();
        let name = fields.next().ok_or_else(|| err(n, "missing class name"))?;
        let row: Vec<f32> = fields
            .map(|f| f.parse::<f32>().map_err(|_| err(n, format!("bad number `{f}`"))))
            .collect::<Result<_>>()?;
        if row.len() != c {
            return Err(err(n, format!("expected {c} values, got {}", row.len())));
        }
        names.push(name.to_string());
        values.extend(row);
    }
    if names.len() != k {
        return Err(err(text.lines().count(), format!("declared {k} classes, found {}", names.len())));
    }
    ClassBank::new(names, Mat::from_vec(k, c, values))
}

pub fn format(bank: &ClassBank) -> String {
    let mut out = format!("{} {}\n", bank.dim(), bank.len());
    for (i, name) in bank.names().iter().enumerate() {
        out.push_str(name);
        for v in bank.embedding(i) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Seeded random unit embeddings for the given class names.
pub fn random(names: Vec<String>, dim: usize, seed: u64) -> Result<ClassBank> {
    let mut rng = Rng::new(seed);
    let k = names.len();
    let data = (0..k * dim).map(|_| rng.normal() as f32).collect();
    ClassBank::new(names, Mat::from_vec(k, dim, data))
}
