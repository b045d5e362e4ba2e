//! On-disk formats.
//!
//! Embeddings use a small binary container:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"SVEMBF32"
//! 8       4     dim    u32 little-endian
//! 12      8     count  u64 little-endian
//! 20      4*count*dim   row-major f32 little-endian
//! ```
//!
//! Utterance ids live in a text sidecar `<path>.ids`, one per line, in row
//! order. Trials, scores and labels are UTF-8 TSV with `\n` line endings;
//! lines starting with `#` are comments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{EmbeddingSet, LabelSet, ScoreSet, TrialList, UtteranceId};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SVEMBF32";
const HEADER_LEN: usize = 20;

/// Sidecar path holding the ids of an embedding container.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Encode a row-major `f32` matrix with the container header.
pub fn encode_matrix(dim: usize, rows: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != dim * rows {
        return Err(Error::DimensionMismatch {
            expected: dim * rows,
            got: data.len(),
        });
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Decode a container into `(dim, rows, data)`.
pub fn decode_matrix(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::MalformedHeader("zero dimension".into()));
    }
    let rows = usize::try_from(rows).map_err(|_| Error::MalformedHeader("row count overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("size overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, rows, data))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_file(path, &encode_matrix(set.dim(), set.len(), set.data())?)?;
    let mut ids = String::new();
    for id in set.ids() {
        ids.push_str(id.as_str());
        ids.push('\n');
    }
    write_file(&ids_path(path), ids.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let (dim, rows, data) = decode_matrix(&read_file(path)?)?;
    let ids_file = ids_path(path);
    let ids = read_text(&ids_file)?
        .lines()
        .map(UtteranceId::new)
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: ids.len(),
        });
    }
    EmbeddingSet::new(ids, dim, data)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_label_token(token: &str, line: usize) -> Result<bool> {
    match token {
        "target" | "1" => Ok(true),
        "nontarget" | "0" => Ok(false),
        _ => Err(Error::UnknownLabel {
            line,
            token: token.to_string(),
        }),
    }
}

/// Parse a trial list: 2 columns (`enroll\ttest`) or 3 (`...\tlabel`) on
/// every line. Mixing labeled and unlabeled lines is an error.
pub fn parse_trials(text: &str) -> Result<TrialList> {
    let mut pairs = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut labeled: Option<bool> = None;
    for (line, content) in content_lines(text) {
        let cols: Vec<&str> = content.split('\t').collect();
        if cols.len() != 2 && cols.len() != 3 {
            return Err(Error::ColumnCount {
                line,
                expected: "2 or 3",
                got: cols.len(),
            });
        }
        let has_label = cols.len() == 3;
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(Error::ColumnCount {
                line,
                expected: if has_label { "2" } else { "3" },
                got: cols.len(),
            });
        }
        let enroll = UtteranceId::new(cols[0]).map_err(|_| Error::Parse {
            line,
            msg: "empty enroll id".into(),
        })?;
        let test = UtteranceId::new(cols[1]).map_err(|_| Error::Parse {
            line,
            msg: "empty test id".into(),
        })?;
        if has_label {
            labels.push(parse_label_token(cols[2], line)?);
        }
        pairs.push((enroll, test));
    }
    TrialList::new(pairs, labeled.unwrap_or(false).then_some(labels))
}

pub fn format_trials(trials: &TrialList) -> String {
    let mut out = String::new();
    for (i, (e, t)) in trials.pairs().iter().enumerate() {
        out.push_str(e.as_str());
        out.push('\t');
        out.push_str(t.as_str());
        if let Some(l) = trials.labels() {
            out.push('\t');
            out.push_str(if l[i] { "target" } else { "nontarget" });
        }
        out.push('\n');
    }
    out
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    parse_trials(&read_text(path)?)
}

pub fn write_trials(trials: &TrialList, path: &Path) -> Result<()> {
    write_file(path, format_trials(trials).as_bytes())
}

/// Scores TSV `enroll\ttest\tscore`. `f64` Display prints the shortest
/// decimal that parses back to the identical value. `header` lines are
/// emitted first, each prefixed with `# `.
pub fn format_scores(scores: &ScoreSet, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for ((e, t), s) in scores.trials().pairs().iter().zip(scores.scores()) {
        out.push_str(&format!("{e}\t{t}\t{s}\n"));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for (line, content) in content_lines(text) {
        let cols: Vec<&str> = content.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::ColumnCount {
                line,
                expected: "3",
                got: cols.len(),
            });
        }
        let parse_id = |s: &str| {
            UtteranceId::new(s).map_err(|_| Error::Parse {
                line,
                msg: format!("invalid id {s:?}"),
            })
        };
        let score: f64 = cols[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad score `{}`", cols[2]),
        })?;
        pairs.push((parse_id(cols[0])?, parse_id(cols[1])?));
        scores.push(score);
    }
    ScoreSet::new(TrialList::new(pairs, None)?, scores)
}

pub fn write_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    write_scores_with_header(scores, &[], path)
}

pub fn write_scores_with_header(scores: &ScoreSet, header: &[String], path: &Path) -> Result<()> {
    write_file(path, format_scores(scores, header).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    parse_scores(&read_text(path)?)
}

/// Labels TSV `utterance\tlabel[\tweight]`. The cluster count is stored in
/// a `# clusters = K` comment when written by this crate; otherwise it is
/// inferred as `max label + 1`.
pub fn format_labels(labels: &LabelSet) -> String {
    let mut out = format!("# clusters = {}\n", labels.n_clusters());
    for (i, id) in labels.ids().iter().enumerate() {
        out.push_str(&format!("{id}\t{}", labels.labels()[i]));
        if let Some(w) = labels.weights() {
            out.push_str(&format!("\t{}", w[i]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str) -> Result<LabelSet> {
    let mut declared = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# clusters = ") {
            declared = Some(rest.trim().parse::<usize>().map_err(|_| Error::Parse {
                line: 0,
                msg: "bad cluster count comment".into(),
            })?);
        }
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let mut weighted: Option<bool> = None;
    for (line, content) in content_lines(text) {
        let cols: Vec<&str> = content.split('\t').collect();
        if cols.len() != 2 && cols.len() != 3 {
            return Err(Error::ColumnCount {
                line,
                expected: "2 or 3",
                got: cols.len(),
            });
        }
        if *weighted.get_or_insert(cols.len() == 3) != (cols.len() == 3) {
            return Err(Error::Parse {
                line,
                msg: "weight column present on some lines only".into(),
            });
        }
        ids.push(UtteranceId::new(cols[0]).map_err(|_| Error::Parse {
            line,
            msg: "invalid id".into(),
        })?);
        labels.push(cols[1].parse::<usize>().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label `{}`", cols[1]),
        })?);
        if cols.len() == 3 {
            weights.push(cols[2].parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad weight `{}`", cols[2]),
            })?);
        }
    }
    let n = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabelSet::new(ids, labels, n, weighted.unwrap_or(false).then_some(weights))
}

pub fn write_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    write_file(path, format_labels(labels).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<LabelSet> {
    parse_labels(&read_text(path)?)
}

/// Write any text file, mapping errors to [`Error::Io`].
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    read_text(path)
}
