use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Catalog, Interaction, InteractionLog, StoreMeta};
use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: &str = "user_id\tstore_id\tunix_time_s\tlocation_id";
pub const CATALOG_HEADER: &str = "store_id\tbrand_id\tcuisine_id\tstore_location_id";

fn read_rows<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let lines: Vec<&str> = text.split('\n').collect();
    let first = lines[0].trim_end_matches('\r');
    if first != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", header.replace('\t', "<TAB>")),
        });
    }
    let last = lines.len() - 1;
    let mut rows = Vec::new();
    for (i, raw) in lines.iter().enumerate().skip(1) {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            // The terminating newline leaves one empty piece at the end.
            if i == last {
                continue;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty row".into(),
            });
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(k) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("field {} is empty", k + 1),
            });
        }
        rows.push((line_no, fields));
    }
    Ok(rows)
}

/// Parse an interactions TSV. Rows may appear in any order; exact duplicate
/// rows are kept.
pub fn parse_interactions(path: impl AsRef<Path>, tz_offset_minutes: i32) -> Result<InteractionLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = read_rows(path, &text, INTERACTIONS_HEADER)?;
    let mut interactions = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        let time: i64 = f[2].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unix_time_s `{}` is not an integer", f[2]),
        })?;
        if time <= 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("unix_time_s must be positive, got {time}"),
            });
        }
        interactions.push(Interaction {
            user_id: f[0].to_string(),
            store_id: f[1].to_string(),
            time,
            location_id: f[3].to_string(),
        });
    }
    InteractionLog::from_interactions(interactions, tz_offset_minutes)
}

pub fn parse_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = read_rows(path, &text, CATALOG_HEADER)?;
    let stores = rows
        .into_iter()
        .map(|(_, f)| StoreMeta {
            store_id: f[0].to_string(),
            brand_id: f[1].to_string(),
            cuisine_id: f[2].to_string(),
            store_location_id: f[3].to_string(),
        })
        .collect();
    Catalog::new(stores)
}

pub fn write_interactions(path: impl AsRef<Path>, log: &InteractionLog) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "{INTERACTIONS_HEADER}")?;
        for x in log.interactions() {
            writeln!(w, "{}\t{}\t{}\t{}", x.user_id, x.store_id, x.time, x.location_id)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn write_catalog(path: impl AsRef<Path>, catalog: &Catalog) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "{CATALOG_HEADER}")?;
        for s in catalog.stores() {
            writeln!(w, "{}\t{}\t{}\t{}", s.store_id, s.brand_id, s.cuisine_id, s.store_location_id)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}
