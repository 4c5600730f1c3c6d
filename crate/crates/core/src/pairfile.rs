//! Text format for per-patch pair features. The layout is line oriented:
//!
//! ```text
//! pairs <n_pairs> <P> <F>
//! <label> <id_a> <id_b>        one record header per pair; label is 1, -1, or ?
//! <F floats>                   P rows for face A
//! ...
//! <F floats>                   P rows for face B
//! ...
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a file survives
//! a write/read cycle bit for bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::pipeline::FacePair;

pub fn write_pairs<W: Write>(out: &mut W, pairs: &[FacePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::contract("refusing to write an empty pair file"));
    }
    let p = pairs[0].n_patches();
    let f = pairs[0].feat_dim();
    for pair in pairs {
        pair.validate()?;
        if pair.n_patches() != p || pair.feat_dim() != f {
            return Err(Error::contract("pairs disagree on patch layout"));
        }
    }
    let mut buf = String::new();
    writeln!(buf, "pairs {} {} {}", pairs.len(), p, f).expect("string write");
    for pair in pairs {
        match pair.label {
            Some(l) => writeln!(buf, "{} {} {}", l as i64, pair.id_a, pair.id_b),
            None => writeln!(buf, "? {} {}", pair.id_a, pair.id_b),
        }
        .expect("string write");
        for mat in [&pair.feats_a, &pair.feats_b] {
            for i in 0..p {
                for j in 0..f {
                    if j > 0 {
                        buf.push(' ');
                    }
                    write!(buf, "{}", mat[(i, j)]).expect("string write");
                }
                buf.push('\n');
            }
        }
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn save_pairs<P: AsRef<Path>>(path: P, pairs: &[FacePair]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    write_pairs(&mut file, pairs)?;
    file.flush()?;
    Ok(())
}

struct Lines<R> {
    reader: R,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        let mut line = String::new();
        loop {
            line.clear();
            let read = self.reader.read_line(&mut line)?;
            if read == 0 {
                return Err(Error::format(format!(
                    "unexpected end of file after line {}",
                    self.number
                )));
            }
            self.number += 1;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                return Ok(trimmed.to_string());
            }
        }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::format(format!("line {}: {}", self.number, msg))
    }
}

pub fn read_pairs<R: Read>(input: R) -> Result<Vec<FacePair>> {
    let mut lines = Lines { reader: BufReader::new(input), number: 0 };

    let header = lines.next_line()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("pairs") {
        return Err(lines.fail("expected header starting with 'pairs'"));
    }
    let mut dims = [0usize; 3];
    for (k, name) in ["pair count", "patch count", "feature dimension"].iter().enumerate() {
        dims[k] = parts
            .next()
            .ok_or_else(|| lines.fail(format!("missing {name}")))?
            .parse::<usize>()
            .map_err(|_| lines.fail(format!("unreadable {name}")))?;
    }
    if parts.next().is_some() {
        return Err(lines.fail("trailing tokens in header"));
    }
    let (n, p, f) = (dims[0], dims[1], dims[2]);
    if n == 0 || p == 0 || f == 0 {
        return Err(lines.fail("header dimensions must be positive"));
    }

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let record = lines.next_line()?;
        let mut parts = record.split_whitespace();
        let label = match parts.next() {
            Some("?") => None,
            Some("1") => Some(1.0),
            Some("-1") => Some(-1.0),
            other => {
                return Err(lines.fail(format!(
                    "pair label must be 1, -1, or ?, found {:?}",
                    other.unwrap_or("")
                )))
            }
        };
        let mut ids = [0u64; 2];
        for (k, name) in ["first identity", "second identity"].iter().enumerate() {
            ids[k] = parts
                .next()
                .ok_or_else(|| lines.fail(format!("missing {name}")))?
                .parse::<u64>()
                .map_err(|_| lines.fail(format!("unreadable {name}")))?;
        }
        if parts.next().is_some() {
            return Err(lines.fail("trailing tokens in pair record"));
        }

        let read_block = |lines: &mut Lines<BufReader<R>>| -> Result<DMatrix<f64>> {
            let mut mat = DMatrix::zeros(p, f);
            for i in 0..p {
                let row = lines.next_line()?;
                let values: Vec<&str> = row.split_whitespace().collect();
                if values.len() != f {
                    return Err(
                        lines.fail(format!("expected {f} values, found {}", values.len()))
                    );
                }
                for (j, v) in values.iter().enumerate() {
                    mat[(i, j)] = v
                        .parse::<f64>()
                        .map_err(|_| lines.fail(format!("unreadable float {v:?}")))?;
                }
            }
            Ok(mat)
        };
        let feats_a = read_block(&mut lines)?;
        let feats_b = read_block(&mut lines)?;
        pairs.push(FacePair { feats_a, feats_b, label, id_a: ids[0], id_b: ids[1] });
    }
    Ok(pairs)
}

pub fn load_pairs<P: AsRef<Path>>(path: P) -> Result<Vec<FacePair>> {
    read_pairs(File::open(path)?)
}
