//! Sample file formats.
//!
//! CSV: header `subject_id,role,attr_sex,attr_age,attr_skin,v0..v{d-1}` with
//! role one of `reference`, `probe`, `probe_unenrolled`; unknown attributes
//! are empty fields.
//!
//! Binary: magic `MIDX`, u32 version, u32 d, u64 record count, then
//! fixed-size records (u64 id, u8 role, 3 x u8 attributes, d coordinates),
//! all little-endian. Version 1 stores coordinates as f32, version 2 as f64.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::sample::{Attributes, Gallery, Probe, SampleVector, Subject, SubjectId, UNKNOWN_ATTRIBUTE};

pub const SAMPLE_MAGIC: &[u8; 4] = b"MIDX";

/// Coordinate width of the binary format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_version(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            other => Err(format_err(format!("unsupported format version {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Csv,
    Binary(Precision),
}

impl SampleFormat {
    /// `.csv` selects CSV; anything else the lossless binary encoding.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SampleFormat::Csv,
            _ => SampleFormat::Binary(Precision::F64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Reference,
    Probe,
    ProbeUnenrolled,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Reference => 0,
            Role::Probe => 1,
            Role::ProbeUnenrolled => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Role::Reference),
            1 => Ok(Role::Probe),
            2 => Ok(Role::ProbeUnenrolled),
            other => Err(format_err(format!("unknown role code {other}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Role::Reference => "reference",
            Role::Probe => "probe",
            Role::ProbeUnenrolled => "probe_unenrolled",
        }
    }

    fn from_name(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Role::Reference),
            "probe" => Ok(Role::Probe),
            "probe_unenrolled" => Ok(Role::ProbeUnenrolled),
            other => Err(format_err(format!("unknown role {other:?}"))),
        }
    }
}

struct Record {
    id: u64,
    role: Role,
    attributes: Attributes,
    values: Vec<f64>,
}

fn records_of(gallery: &Gallery) -> Vec<Record> {
    let mut unenrolled_attrs = HashMap::new();
    for u in gallery.unenrolled() {
        unenrolled_attrs.insert(u.id, u.attributes);
    }
    let mut out = Vec::with_capacity(gallery.len() + gallery.probes().len());
    for (s, r) in gallery.subjects().iter().zip(gallery.references()) {
        out.push(Record {
            id: s.id.0 as u64,
            role: Role::Reference,
            attributes: s.attributes,
            values: r.values().to_vec(),
        });
    }
    for p in gallery.probes() {
        let (role, attributes) = if p.enrolled {
            (Role::Probe, *gallery.attributes(p.owner))
        } else {
            (Role::ProbeUnenrolled, unenrolled_attrs[&p.owner])
        };
        out.push(Record { id: p.owner.0 as u64, role, attributes, values: p.sample.values().to_vec() });
    }
    out
}

fn gallery_from_records(records: Vec<Record>) -> Result<Gallery> {
    let mut refs: Vec<(u64, Attributes, Vec<f64>)> = Vec::new();
    let mut probes_raw = Vec::new();
    for r in records {
        match r.role {
            Role::Reference => refs.push((r.id, r.attributes, r.values)),
            _ => probes_raw.push(r),
        }
    }
    refs.sort_by_key(|(id, _, _)| *id);
    for (pos, (id, _, _)) in refs.iter().enumerate() {
        if pos > 0 && refs[pos - 1].0 == *id {
            return Err(format_err(format!("duplicate subject id {id}")));
        }
        if *id != pos as u64 {
            return Err(format_err(format!(
                "reference ids must be dense 0..N-1; found {id} at position {pos}"
            )));
        }
    }
    let n = refs.len() as u64;
    let mut subjects = Vec::with_capacity(refs.len());
    let mut references = Vec::with_capacity(refs.len());
    for (id, attributes, values) in refs {
        subjects.push(Subject { id: SubjectId(id as u32), attributes });
        references.push(SampleVector::new(values).map_err(|e| format_err(e.to_string()))?);
    }
    let mut unenrolled: Vec<Subject> = Vec::new();
    let mut unenrolled_index: HashMap<u64, usize> = HashMap::new();
    let mut probes = Vec::with_capacity(probes_raw.len());
    for r in probes_raw {
        let enrolled = r.role == Role::Probe;
        if enrolled && r.id >= n {
            return Err(format_err(format!("probe owner {} has no reference", r.id)));
        }
        if !enrolled {
            if r.id < n {
                return Err(format_err(format!("unenrolled probe owner {} has a reference", r.id)));
            }
            if r.id > u32::MAX as u64 {
                return Err(format_err(format!("subject id {} out of range", r.id)));
            }
            match unenrolled_index.get(&r.id) {
                Some(&i) if unenrolled[i].attributes != r.attributes => {
                    return Err(format_err(format!("inconsistent attributes for subject {}", r.id)));
                }
                Some(_) => {}
                None => {
                    unenrolled_index.insert(r.id, unenrolled.len());
                    unenrolled.push(Subject { id: SubjectId(r.id as u32), attributes: r.attributes });
                }
            }
        }
        probes.push(Probe {
            owner: SubjectId(r.id as u32),
            enrolled,
            sample: SampleVector::new(r.values).map_err(|e| format_err(e.to_string()))?,
        });
    }
    Gallery::new(subjects, references, unenrolled, probes).map_err(|e| match e {
        Error::Io(_) => e,
        other => format_err(other.to_string()),
    })
}

pub fn save_samples(gallery: &Gallery, path: &Path, format: SampleFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        SampleFormat::Csv => write_csv(gallery, &mut w)?,
        SampleFormat::Binary(p) => write_binary(gallery, &mut w, p)?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path, format: SampleFormat) -> Result<Gallery> {
    let file = File::open(path)?;
    match format {
        SampleFormat::Csv => read_csv(BufReader::new(file)),
        SampleFormat::Binary(_) => read_binary(BufReader::new(file)),
    }
}

fn attr_field(code: u8) -> String {
    if code == UNKNOWN_ATTRIBUTE {
        String::new()
    } else {
        code.to_string()
    }
}

pub fn write_csv<W: Write>(gallery: &Gallery, w: &mut W) -> Result<()> {
    write!(w, "subject_id,role,attr_sex,attr_age,attr_skin")?;
    for i in 0..gallery.dim() {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for r in records_of(gallery) {
        write!(
            w,
            "{},{},{},{},{}",
            r.id,
            r.role.name(),
            attr_field(r.attributes.sex),
            attr_field(r.attributes.age_bin),
            attr_field(r.attributes.skin_tone)
        )?;
        for v in &r.values {
            // `{:?}` prints the shortest representation that round-trips.
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Gallery> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| format_err("empty file"))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let fixed = ["subject_id", "role", "attr_sex", "attr_age", "attr_skin"];
    if cols.len() <= fixed.len() || cols[..fixed.len()] != fixed {
        return Err(format_err("malformed header"));
    }
    let dim = cols.len() - fixed.len();
    for (i, c) in cols[fixed.len()..].iter().enumerate() {
        if *c != format!("v{i}") {
            return Err(format_err(format!("malformed header column {c:?}")));
        }
    }
    let parse_attr = |s: &str, line: usize| -> Result<u8> {
        if s.is_empty() {
            Ok(UNKNOWN_ATTRIBUTE)
        } else {
            s.parse().map_err(|_| format_err(format!("line {line}: bad attribute {s:?}")))
        }
    };
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::DimensionMismatch { expected: dim, actual: fields.len().saturating_sub(fixed.len()) });
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|_| format_err(format!("line {lineno}: bad subject id {:?}", fields[0])))?;
        let role = Role::from_name(fields[1])?;
        let attributes = Attributes {
            sex: parse_attr(fields[2], lineno)?,
            age_bin: parse_attr(fields[3], lineno)?,
            skin_tone: parse_attr(fields[4], lineno)?,
        };
        attributes.validate().map_err(|e| format_err(format!("line {lineno}: {e}")))?;
        let values = fields[fixed.len()..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| format_err(format!("line {lineno}: bad value {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(Record { id, role, attributes, values });
    }
    gallery_from_records(records)
}

pub fn write_binary<W: Write>(gallery: &Gallery, w: &mut W, precision: Precision) -> Result<()> {
    let records = records_of(gallery);
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&precision.version().to_le_bytes())?;
    w.write_all(&(gallery.dim() as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.id.to_le_bytes())?;
        w.write_all(&[r.role.code(), r.attributes.sex, r.attributes.age_bin, r.attributes.skin_tone])?;
        write_values(w, &r.values, precision)?;
    }
    Ok(())
}

pub(crate) fn write_values<W: Write>(w: &mut W, values: &[f64], precision: Precision) -> Result<()> {
    for v in values {
        match precision {
            Precision::F32 => w.write_all(&(*v as f32).to_le_bytes())?,
            Precision::F64 => w.write_all(&v.to_le_bytes())?,
        }
    }
    Ok(())
}

pub(crate) fn read_values<R: Read>(r: &mut R, dim: usize, precision: Precision) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; dim * precision.width()];
    read_exact(r, &mut buf)?;
    Ok(match precision {
        Precision::F32 => buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("unexpected end of file"),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Gallery> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != SAMPLE_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let precision = Precision::from_version(read_u32(&mut r)?)?;
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(format_err("dimension must be positive"));
    }
    let count = read_u64(&mut r)?;
    let mut records = Vec::new();
    for i in 0..count {
        let id = read_u64(&mut r).map_err(|_| {
            format_err(format!("header declares {count} records but file ends after {i}"))
        })?;
        let mut meta = [0u8; 4];
        read_exact(&mut r, &mut meta)?;
        let values = read_values(&mut r, dim, precision)?;
        let attributes = Attributes { sex: meta[1], age_bin: meta[2], skin_tone: meta[3] };
        attributes.validate().map_err(|e| format_err(e.to_string()))?;
        records.push(Record { id, role: Role::from_code(meta[0])?, attributes, values });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err(format!("trailing data after {count} records")));
    }
    gallery_from_records(records)
}
