use std::fmt::Write as _;
use std::path::Path;

use super::VectorTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads `<identifier>\t<v1> <v2> ... <vd>` records. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_embeddings<S: Scalar>(path: impl AsRef<Path>) -> Result<VectorTable<S>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

pub(crate) fn parse_embeddings<S: Scalar>(text: &str, origin: &Path) -> Result<VectorTable<S>> {
    let mut table: Option<VectorTable<S>> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(origin, lineno, "expected `<identifier><TAB><values>`"))?;
        if id.is_empty() {
            return Err(Error::parse(origin, lineno, "empty identifier"));
        }
        let values = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map(S::from_f64_lossy)
                    .map_err(|_| Error::parse(origin, lineno, format!("unparseable number `{tok}`")))
            })
            .collect::<Result<Vec<S>>>()?;
        if values.is_empty() {
            return Err(Error::parse(origin, lineno, "record has no values"));
        }
        let t = table.get_or_insert_with(|| VectorTable::new(values.len()));
        if values.len() != t.dim() {
            return Err(Error::parse(
                origin,
                lineno,
                format!("dimension {} differs from {}", values.len(), t.dim()),
            ));
        }
        if t.get(id).is_some() {
            return Err(Error::parse(origin, lineno, format!("duplicate identifier `{id}`")));
        }
        t.insert(id, values)
            .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
    }
    table.ok_or_else(|| Error::Data(format!("{}: no embedding records", origin.display())))
}

/// One record line with 17 significant digits per value.
pub(crate) fn format_record<S: Scalar>(out: &mut String, id: &str, v: &[S]) {
    out.push_str(id);
    out.push('\t');
    for (j, x) in v.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:.16e}", x.to_f64_lossless());
    }
    out.push('\n');
}

pub(crate) fn embeddings_to_text<S: Scalar>(table: &VectorTable<S>) -> String {
    let mut out = String::new();
    for (id, v) in table.iter() {
        format_record(&mut out, id, v);
    }
    out
}

pub fn save_embeddings<S: Scalar>(table: &VectorTable<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, embeddings_to_text(table)).map_err(|e| Error::io(path, e))
}
