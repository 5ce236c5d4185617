//! Raw interaction records and TSV ingestion.

use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Source => "S",
            Domain::Target => "T",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "S" | "source" | "Source" => Some(Domain::Source),
            "T" | "target" | "Target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    pub domain: Domain,
}

/// Parse outcome: the records plus non-fatal warnings (e.g. empty input).
#[derive(Debug, Default)]
pub struct Parsed {
    pub records: Vec<InteractionRecord>,
    pub warnings: Vec<String>,
}

/// Parse `user<TAB>item<TAB>timestamp<TAB>domain` lines. Malformed lines
/// are hard errors carrying the 1-based line number.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Parsed> {
    parse_lines(reader, None)
}

/// Parse the two-file variant: `user<TAB>item<TAB>timestamp` with the
/// domain implied by the file.
pub fn parse_domain_file<R: BufRead>(reader: R, domain: Domain) -> Result<Parsed> {
    parse_lines(reader, Some(domain))
}

fn parse_lines<R: BufRead>(reader: R, implied: Option<Domain>) -> Result<Parsed> {
    let want_fields = if implied.is_some() { 3 } else { 4 };
    let mut out = Parsed::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != want_fields {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} tab-separated fields, got {}", want_fields, fields.len()),
            });
        }
        let timestamp: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("timestamp `{}` is not an integer", fields[2]),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse { line: lineno, msg: "negative timestamp".into() });
        }
        let domain = match implied {
            Some(d) => d,
            None => Domain::parse(fields[3]).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("unknown domain label `{}`", fields[3]),
            })?,
        };
        out.records.push(InteractionRecord {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
            domain,
        });
    }
    if out.records.is_empty() {
        out.warnings.push("input contained no interaction records".into());
    }
    Ok(out)
}
