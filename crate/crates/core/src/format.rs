//! Plain-text serialization of model parameters.
//!
//! ```text
//! densehmm 1 hmm
//! vocab 3 a b c
//! matrix A 2 2
//! 9.0000000000000002e-1 1.0000000000000001e-1
//! ...
//! vector pi 2
//! 5.0e-1 5.0e-1
//! ```
//!
//! The header names the kind (`hmm` or `reps`). The `vocab` line is
//! optional. Values are written with 17 significant digits, so a write/read
//! cycle is lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::corpus::Vocabulary;
use crate::dense::DenseReps;
use crate::hmm::HmmParams;
use crate::stochastic::{ProbVector, StochasticMatrix};
use crate::{Error, Result};

const MAGIC: &str = "densehmm";
const VERSION: u32 = 1;

fn push_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

fn push_vector(out: &mut String, name: &str, v: &Array1<f64>) {
    writeln!(out, "vector {name} {}", v.len()).unwrap();
    let line: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    writeln!(out, "{}", line.join(" ")).unwrap();
}

fn header(kind: &str, vocab: Option<&Vocabulary>) -> String {
    let mut out = format!("{MAGIC} {VERSION} {kind}\n");
    if let Some(v) = vocab {
        writeln!(out, "vocab {} {}", v.len(), v.symbols().join(" ")).unwrap();
        if let Some(r) = v.residual_symbol() {
            writeln!(out, "residual {r}").unwrap();
        }
    }
    out
}

pub fn hmm_to_string(params: &HmmParams, vocab: Option<&Vocabulary>) -> String {
    let mut out = header("hmm", vocab);
    push_matrix(&mut out, "A", params.a());
    push_matrix(&mut out, "B", params.b());
    push_vector(&mut out, "pi", params.pi());
    out
}

pub fn reps_to_string(reps: &DenseReps, vocab: Option<&Vocabulary>) -> String {
    let mut out = header("reps", vocab);
    push_matrix(&mut out, "U", &reps.u);
    push_matrix(&mut out, "Z", &reps.z);
    push_matrix(&mut out, "W", &reps.w);
    push_matrix(&mut out, "V", &reps.v);
    push_vector(&mut out, "z_start", &reps.z_start);
    out
}

/// A parsed parameter file.
#[derive(Debug, Clone)]
pub enum ModelFile {
    Hmm { params: HmmParams, vocab: Option<Vocabulary> },
    Reps { reps: DenseReps, vocab: Option<Vocabulary> },
}

impl ModelFile {
    pub fn vocab(&self) -> Option<&Vocabulary> {
        match self {
            ModelFile::Hmm { vocab, .. } | ModelFile::Reps { vocab, .. } => vocab.as_ref(),
        }
    }

    /// The HMM defined by the file; reps are materialized.
    pub fn to_params(&self) -> Result<HmmParams> {
        match self {
            ModelFile::Hmm { params, .. } => Ok(params.clone()),
            ModelFile::Reps { reps, .. } => crate::dense::materialize(reps),
        }
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.by_ref().map(|(k, l)| (k + 1, l.trim())).find(|(_, l)| !l.is_empty())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_usize(line: usize, tok: Option<&str>) -> Result<usize> {
    tok.ok_or_else(|| parse_err(line, "missing size"))?.parse().map_err(|e| parse_err(line, format!("bad size: {e}")))
}

fn parse_row(line: usize, text: &str, len: usize) -> Result<Vec<f64>> {
    let row = text
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(line, format!("bad number: {e}")))?;
    if row.len() != len {
        return Err(parse_err(line, format!("expected {len} values, found {}", row.len())));
    }
    Ok(row)
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    let (k, head) = lines.next().ok_or_else(|| parse_err(1, "empty model file"))?;
    let toks: Vec<&str> = head.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != MAGIC {
        return Err(parse_err(k, format!("expected header `{MAGIC} {VERSION} <kind>`")));
    }
    if toks[1] != VERSION.to_string() {
        return Err(parse_err(k, format!("unsupported version {}", toks[1])));
    }
    let kind = toks[2];

    let mut vocab = None;
    let mut matrices: HashMap<String, Array2<f64>> = HashMap::new();
    let mut vectors: HashMap<String, Array1<f64>> = HashMap::new();
    while let Some((k, line)) = lines.next() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("vocab") => {
                let m = parse_usize(k, toks.next())?;
                let symbols: Vec<&str> = toks.collect();
                if symbols.len() != m {
                    return Err(parse_err(k, format!("vocab declares {m} symbols, lists {}", symbols.len())));
                }
                vocab = Some(Vocabulary::from_symbols(symbols)?);
            }
            Some("residual") => {
                let s = toks.next().ok_or_else(|| parse_err(k, "missing residual symbol"))?;
                vocab.as_mut().ok_or_else(|| parse_err(k, "residual before vocab"))?.set_residual(s)?;
            }
            Some("matrix") => {
                let name = toks.next().ok_or_else(|| parse_err(k, "missing name"))?.to_string();
                let r = parse_usize(k, toks.next())?;
                let c = parse_usize(k, toks.next())?;
                let mut flat = Vec::with_capacity(r * c);
                for _ in 0..r {
                    let (k, row) = lines.next().ok_or_else(|| parse_err(k, format!("matrix {name} truncated")))?;
                    flat.extend(parse_row(k, row, c)?);
                }
                matrices.insert(name, Array2::from_shape_vec((r, c), flat).expect("r·c values"));
            }
            Some("vector") => {
                let name = toks.next().ok_or_else(|| parse_err(k, "missing name"))?.to_string();
                let len = parse_usize(k, toks.next())?;
                let (k, row) = lines.next().ok_or_else(|| parse_err(k, format!("vector {name} truncated")))?;
                vectors.insert(name, Array1::from(parse_row(k, row, len)?));
            }
            Some(other) => return Err(parse_err(k, format!("unknown section {other:?}"))),
            None => unreachable!("blank lines are skipped"),
        }
    }

    let take_m = |name: &str, m: &mut HashMap<String, Array2<f64>>| {
        m.remove(name).ok_or_else(|| parse_err(0, format!("missing matrix {name}")))
    };
    let model = match kind {
        "hmm" => {
            let a = StochasticMatrix::new(take_m("A", &mut matrices)?)?;
            let b = StochasticMatrix::new(take_m("B", &mut matrices)?)?;
            let pi = ProbVector::new(vectors.remove("pi").ok_or_else(|| parse_err(0, "missing vector pi"))?)?;
            ModelFile::Hmm { params: HmmParams::new(a, b, pi)?, vocab }
        }
        "reps" => {
            let reps = DenseReps::new(
                take_m("U", &mut matrices)?,
                take_m("Z", &mut matrices)?,
                take_m("W", &mut matrices)?,
                take_m("V", &mut matrices)?,
                vectors.remove("z_start").ok_or_else(|| parse_err(0, "missing vector z_start"))?,
            )?;
            ModelFile::Reps { reps, vocab }
        }
        other => return Err(parse_err(k, format!("unknown model kind {other:?}"))),
    };
    if let Some(v) = model.vocab() {
        let m = match &model {
            ModelFile::Hmm { params, .. } => params.n_symbols(),
            ModelFile::Reps { reps, .. } => reps.n_symbols(),
        };
        if v.len() != m {
            return Err(Error::Shape(format!("vocab has {} symbols, model {m}", v.len())));
        }
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_model(&text)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::init_reps;
    use crate::hmm::tests::random_params;

    #[test]
    fn hmm_round_trip_is_lossless() {
        let p = random_params(3, 4, 9);
        let vocab = Vocabulary::from_symbols(["a", "b", "c", "<rare>"]).unwrap();
        let text = hmm_to_string(&p, Some(&vocab));
        match parse_model(&text).unwrap() {
            ModelFile::Hmm { params, vocab: Some(v) } => {
                assert_eq!(params, p);
                assert_eq!(v.symbols(), vocab.symbols());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reps_round_trip_is_lossless() {
        let reps = init_reps(2, 3, 4, &mut crate::seeded_rng(1)).unwrap();
        let text = reps_to_string(&reps, None);
        match parse_model(&text).unwrap() {
            ModelFile::Reps { reps: r, vocab: None } => assert_eq!(r, reps),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(reps_to_string(&reps, None), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_model("").is_err());
        assert!(parse_model("densehmm 2 hmm\n").is_err());
        assert!(parse_model("densehmm 1 hmm\nmatrix A 1 1\n").is_err());
        assert!(parse_model("densehmm 1 hmm\nmatrix A 1 1\n1 2\n").is_err());
        assert!(parse_model("densehmm 1 hmm\nmatrix A 1 1\n1\nmatrix B 1 1\n1\n").is_err());
        // rows not stochastic
        let bad = "densehmm 1 hmm\nmatrix A 1 1\n0.5\nmatrix B 1 1\n1\nvector pi 1\n1\n";
        assert!(matches!(parse_model(bad), Err(Error::NotStochastic { .. })));
    }
}
