//! Extended-XYZ reading and writing.
//!
//! One record per molecule:
//!   line 1: integer atom count N
//!   line 2: space-separated `key=value` properties, plus optional
//!           `unit:key=value` unit declarations
//!   lines 3..N+2: `Symbol x y z` or `Symbol x y z fx fy fz`
//!
//! Floats are written in shortest round-trip form, so a write/read cycle
//! preserves every numeric field exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::elements::{atomic_number, symbol};
use super::molecule::Molecule;

struct RawRecord<'a> {
    /// 1-based line number of the count line.
    start_line: usize,
    lines: Vec<&'a str>,
}

fn split_records<'a>(text: &'a str, path: Option<&PathBuf>) -> Result<Vec<RawRecord<'a>>> {
    let mut records = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let n: usize = line.trim().parse().map_err(|_| {
            Error::parse(
                path,
                lineno,
                format!("expected atom count, found {line:?}"),
            )
        })?;
        if n == 0 {
            return Err(Error::parse(path, lineno, "atom count must be positive"));
        }
        let mut rec = Vec::with_capacity(n + 2);
        rec.push(line);
        for k in 0..n + 1 {
            match lines.next() {
                Some((_, l)) => rec.push(l),
                None => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("record truncated: expected {} more lines", n + 1 - k),
                    ))
                }
            }
        }
        records.push(RawRecord {
            start_line: lineno,
            lines: rec,
        });
    }
    Ok(records)
}

fn parse_record(rec: &RawRecord<'_>, path: Option<&PathBuf>) -> Result<Molecule> {
    let n: usize = rec.lines[0].trim().parse().expect("checked by split");
    let mut properties = BTreeMap::new();
    let mut units = BTreeMap::new();
    let prop_line = rec.start_line + 1;
    for tok in rec.lines[1].split_whitespace() {
        let (key, value) = tok.split_once('=').ok_or_else(|| {
            Error::parse(path, prop_line, format!("expected key=value, found {tok:?}"))
        })?;
        if let Some(prop) = key.strip_prefix("unit:") {
            units.insert(prop.to_string(), value.to_string());
        } else {
            let v: f64 = value.parse().map_err(|_| {
                Error::parse(
                    path,
                    prop_line,
                    format!("property {key} has non-numeric value {value:?}"),
                )
            })?;
            properties.insert(key.to_string(), v);
        }
    }

    let mut atomic_numbers = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut forces: Option<Vec<[f64; 3]>> = None;
    for (i, line) in rec.lines[2..].iter().enumerate() {
        let lineno = rec.start_line + 2 + i;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 && cols.len() != 7 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 or 7 columns, found {}", cols.len()),
            ));
        }
        let z = atomic_number(cols[0]).ok_or_else(|| {
            Error::parse(path, lineno, format!("unknown element symbol {:?}", cols[0]))
        })?;
        let mut xyz = [0.0f64; 3];
        for (k, c) in cols[1..4].iter().enumerate() {
            xyz[k] = c.parse().map_err(|_| {
                Error::parse(path, lineno, format!("bad coordinate {c:?}"))
            })?;
        }
        if cols.len() == 7 {
            let mut f = [0.0f64; 3];
            for (k, c) in cols[4..7].iter().enumerate() {
                f[k] = c.parse().map_err(|_| {
                    Error::parse(path, lineno, format!("bad force component {c:?}"))
                })?;
            }
            forces.get_or_insert_with(Vec::new).push(f);
        } else if forces.is_some() {
            return Err(Error::parse(
                path,
                lineno,
                "record mixes lines with and without force columns",
            ));
        }
        atomic_numbers.push(z);
        positions.push(xyz);
    }
    if let Some(f) = &forces {
        if f.len() != n {
            return Err(Error::parse(
                path,
                rec.start_line,
                "record mixes lines with and without force columns",
            ));
        }
    }
    let mut mol = Molecule::new(atomic_numbers, positions)
        .map_err(|e| Error::parse(path, rec.start_line, e.to_string()))?;
    mol.properties = properties;
    mol.units = units;
    mol.forces = forces;
    Ok(mol)
}

/// Worker-thread bound: `GEOFORMER_THREADS` if set, else 1.
fn worker_threads() -> usize {
    std::env::var("GEOFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

/// Parse extended-XYZ text. Record order is preserved regardless of how
/// parsing is fanned out across threads.
pub fn parse_extxyz(text: &str, path: Option<&PathBuf>) -> Result<Vec<Molecule>> {
    let records = split_records(text, path)?;
    let threads = worker_threads().min(records.len().max(1));
    if threads <= 1 || records.len() < 64 {
        return records.iter().map(|r| parse_record(r, path)).collect();
    }
    let chunk = records.len().div_ceil(threads);
    let mut results: Vec<Result<Molecule>> = Vec::with_capacity(records.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|recs| scope.spawn(move || recs.iter().map(|r| parse_record(r, path)).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            results.extend(h.join().expect("parser thread panicked"));
        }
    });
    results.into_iter().collect()
}

pub fn load_extxyz(path: impl AsRef<Path>) -> Result<Vec<Molecule>> {
    let path = path.as_ref().to_path_buf();
    let text = std::fs::read_to_string(&path)?;
    let mols = parse_extxyz(&text, Some(&path))?;
    if mols.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no molecules",
            path.display()
        )));
    }
    Ok(mols)
}

pub fn format_extxyz(molecules: &[Molecule]) -> String {
    let mut out = String::new();
    for m in molecules {
        out.push_str(&format!("{}\n", m.len()));
        let mut fields: Vec<String> = m
            .properties
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        fields.extend(m.units.iter().map(|(k, v)| format!("unit:{k}={v}")));
        out.push_str(&fields.join(" "));
        out.push('\n');
        for (i, p) in m.positions.iter().enumerate() {
            let sym = symbol(m.atomic_numbers[i]).expect("validated atomic number");
            match &m.forces {
                Some(f) => out.push_str(&format!(
                    "{sym} {} {} {} {} {} {}\n",
                    p[0], p[1], p[2], f[i][0], f[i][1], f[i][2]
                )),
                None => out.push_str(&format!("{sym} {} {} {}\n", p[0], p[1], p[2])),
            }
        }
    }
    out
}

pub fn write_extxyz(path: impl AsRef<Path>, molecules: &[Molecule]) -> Result<()> {
    std::fs::write(path, format_extxyz(molecules))?;
    Ok(())
}
