//! Record file formats.
//!
//! Text (`.ecg.txt`):
//!
//! ```text
//! ECGTXT 1
//! leads = 8
//! fs = 500
//! samples = 5000
//! patient_id = 17
//! age = 63.5
//! sex = female
//! timestamp = 102345
//! ---
//! <8 whitespace-separated values per row, one row per sample>
//! ```
//!
//! Binary (`.ecg.bin`), little endian: 8-byte magic `ECGBIN\0\0`, `u32`
//! version, `u32` lead count (16 bytes so far), then `u64` samples, `f64` fs,
//! `u64` patient id, `f64` age, `u8` sex (0 male, 1 female), `i64` timestamp,
//! then `leads * samples` `f64` values, lead-major.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{PatientMeta, RawEcg, Sex, N_LEADS};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const TEXT_MAGIC: &str = "ECGTXT";
pub const BINARY_MAGIC: &[u8; 8] = b"ECGBIN\0\0";
pub const FORMAT_VERSION: u32 = 1;

fn sex_str(s: Sex) -> &'static str {
    match s {
        Sex::Male => "male",
        Sex::Female => "female",
    }
}

pub fn write_text<W: Write>(ecg: &RawEcg, w: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{TEXT_MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "leads = {}", ecg.leads().len())?;
    writeln!(w, "fs = {}", ecg.fs())?;
    writeln!(w, "samples = {}", ecg.len())?;
    writeln!(w, "patient_id = {}", ecg.meta.patient_id)?;
    writeln!(w, "age = {}", ecg.meta.age)?;
    writeln!(w, "sex = {}", sex_str(ecg.meta.sex))?;
    writeln!(w, "timestamp = {}", ecg.meta.timestamp)?;
    writeln!(w, "---")?;
    let mut row = String::new();
    for i in 0..ecg.len() {
        row.clear();
        for (j, lead) in ecg.leads().iter().enumerate() {
            if j > 0 {
                row.push(' ');
            }
            row.push_str(&lead[i].to_string());
        }
        writeln!(w, "{row}")?;
    }
    w.flush()
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::format("text record", format!("expected `key = value`, got `{line}`")))?;
    if k.trim() != key {
        return Err(Error::format("text record", format!("expected key `{key}`, got `{}`", k.trim())));
    }
    Ok(v.trim())
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format("text record", format!("cannot parse {what} from `{s}`")))
}

pub fn read_text<R: Read>(r: R) -> Result<RawEcg> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |what: &str| -> Result<String> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::format("text record", e.to_string())),
            None => Err(Error::format("text record", format!("unexpected end of file before {what}"))),
        }
    };
    let magic = next("magic")?;
    let mut parts = magic.split_whitespace();
    if parts.next() != Some(TEXT_MAGIC) {
        return Err(Error::format("text record", "missing ECGTXT magic"));
    }
    let version: u32 = parse("version", parts.next().unwrap_or(""))?;
    if version != FORMAT_VERSION {
        return Err(Error::format("text record", format!("unsupported version {version}")));
    }
    let n_leads: usize = parse("leads", header_value(&next("leads")?, "leads")?)?;
    let fs: f64 = parse("fs", header_value(&next("fs")?, "fs")?)?;
    let n: usize = parse("samples", header_value(&next("samples")?, "samples")?)?;
    let patient_id = parse("patient_id", header_value(&next("patient_id")?, "patient_id")?)?;
    let age = parse("age", header_value(&next("age")?, "age")?)?;
    let sex = match header_value(&next("sex")?, "sex")? {
        "male" => Sex::Male,
        "female" => Sex::Female,
        other => return Err(Error::format("text record", format!("unknown sex `{other}`"))),
    };
    let timestamp = parse("timestamp", header_value(&next("timestamp")?, "timestamp")?)?;
    if next("separator")?.trim() != "---" {
        return Err(Error::format("text record", "missing `---` separator"));
    }
    let mut leads = vec![Vec::with_capacity(n); n_leads];
    for i in 0..n {
        let line = next("sample rows")?;
        let mut count = 0;
        for (j, tok) in line.split_whitespace().enumerate() {
            if j >= n_leads {
                return Err(Error::format("text record", format!("row {i} has more than {n_leads} columns")));
            }
            leads[j].push(parse("sample", tok)?);
            count += 1;
        }
        if count != n_leads {
            return Err(Error::format("text record", format!("row {i} has {count} columns")));
        }
    }
    let meta = PatientMeta {
        patient_id,
        age,
        sex,
        timestamp,
    };
    RawEcg::new(leads, fs, meta)
}

pub fn write_binary<W: Write>(ecg: &RawEcg, w: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(BINARY_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(ecg.leads().len() as u32)?;
    w.write_u64::<LittleEndian>(ecg.len() as u64)?;
    w.write_f64::<LittleEndian>(ecg.fs())?;
    w.write_u64::<LittleEndian>(ecg.meta.patient_id)?;
    w.write_f64::<LittleEndian>(ecg.meta.age)?;
    w.write_u8(match ecg.meta.sex {
        Sex::Male => 0,
        Sex::Female => 1,
    })?;
    w.write_i64::<LittleEndian>(ecg.meta.timestamp)?;
    for lead in ecg.leads() {
        for &v in lead {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()
}

pub fn read_binary<R: Read>(r: R) -> Result<RawEcg> {
    let mut r = BufReader::new(r);
    let bad = |e: std::io::Error| Error::format("binary record", e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::format("binary record", "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != FORMAT_VERSION {
        return Err(Error::format("binary record", format!("unsupported version {version}")));
    }
    let n_leads = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    if n_leads != N_LEADS {
        return Err(Error::InvalidSignal(format!("expected {N_LEADS} leads, got {n_leads}")));
    }
    let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    if n > 1 << 28 {
        return Err(Error::format("binary record", format!("implausible sample count {n}")));
    }
    let fs = r.read_f64::<LittleEndian>().map_err(bad)?;
    let patient_id = r.read_u64::<LittleEndian>().map_err(bad)?;
    let age = r.read_f64::<LittleEndian>().map_err(bad)?;
    let sex = match r.read_u8().map_err(bad)? {
        0 => Sex::Male,
        1 => Sex::Female,
        b => return Err(Error::format("binary record", format!("bad sex code {b}"))),
    };
    let timestamp = r.read_i64::<LittleEndian>().map_err(bad)?;
    let mut leads = Vec::with_capacity(n_leads);
    for _ in 0..n_leads {
        let mut lead = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut lead).map_err(bad)?;
        leads.push(lead);
    }
    let meta = PatientMeta {
        patient_id,
        age,
        sex,
        timestamp,
    };
    RawEcg::new(leads, fs, meta)
}

/// Writes a record, choosing the format from the extension (`.txt` is
/// text, anything else binary).
pub fn save(ecg: &RawEcg, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let res = if is_text(path) {
        write_text(ecg, &mut buf)
    } else {
        write_binary(ecg, &mut buf)
    };
    res.map_err(|e| Error::io(path, e))?;
    atomic_write(path, &buf)
}

pub fn load(path: &Path) -> Result<RawEcg> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if is_text(path) {
        read_text(f)
    } else {
        read_binary(f)
    }
}

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt")
}
