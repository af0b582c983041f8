// Line-oriented dataset text format.
//
//   line 0:  hmp-dataset v1;T=<int>;df=<int>;ddem=<int>;C=<int>;G=<int>;M=<int>
//   line k:  demographics=<0/1 csv>;risk=<0|1>;admissions=[{...} {...}]
//   admission: {icd=<idx csv>;drugs=<idx csv>;note=<token csv>;readmit=<0|1>;stays=[{...} ...]}
//   stay:      {labels=arf:<0|1>,shock:<0|1>,mort:<0|1>;rows=<v,v,..|v,v,..|...>}
//
// Reals are written with Rust's shortest round-trip formatting, so a
// save/load cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{multi_hot, AdmissionRecord, Dataset, Dims, PatientRecord, StayLabels, StayRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "hmp-dataset v1";

fn bit(b: bool) -> char {
    if b {
        '1'
    } else {
        '0'
    }
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>, sep: &str) -> String {
    let mut out = String::new();
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        write!(out, "{x}").expect("string write");
    }
    out
}

fn header(d: &Dims) -> String {
    format!(
        "{MAGIC};T={};df={};ddem={};C={};G={};M={}",
        d.t, d.d_f, d.d_dem, d.n_icd, d.n_drug, d.max_stays
    )
}

fn write_patient(out: &mut String, p: &PatientRecord) {
    write!(
        out,
        "demographics={};risk={};admissions=[",
        join(p.demographics.data().iter().map(|&v| v as u8), ","),
        bit(p.risk)
    )
    .expect("string write");
    for (ai, a) in p.admissions.iter().enumerate() {
        if ai > 0 {
            out.push(' ');
        }
        write!(
            out,
            "{{icd={};drugs={};note={};readmit={};stays=[",
            join(Dataset::active(&a.icd), ","),
            join(Dataset::active(&a.drugs), ","),
            join(&a.note_tokens, ","),
            bit(a.readmit)
        )
        .expect("string write");
        for (si, s) in a.stays.iter().enumerate() {
            if si > 0 {
                out.push(' ');
            }
            let cols = s.features.shape()[1];
            let rows = join(s.features.data().chunks(cols).map(|r| join(r, ",")), "|");
            write!(
                out,
                "{{labels=arf:{},shock:{},mort:{};rows={rows}}}",
                bit(s.labels.arf),
                bit(s.labels.shock),
                bit(s.labels.mortality)
            )
            .expect("string write");
        }
        out.push_str("]}");
    }
    out.push(']');
}

/// Serializes to the text format: header line plus one line per patient.
pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = header(&ds.dims);
    out.push('\n');
    for p in &ds.patients {
        write_patient(&mut out, p);
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.line, format!("{} (column {})", msg.into(), self.pos + 1))
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.s[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            let found: String = self.s[self.pos..].chars().take(12).collect();
            Err(self.err(format!("expected `{lit}`, found `{found}`")))
        }
    }

    fn peek(&self) -> Option<char> {
        self.s[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while self.peek() == Some(' ') {
            self.pos += 1;
        }
    }

    /// Consumes up to (not including) the first char in `stops`.
    fn until(&mut self, stops: &[char]) -> Result<&'a str> {
        let rest = &self.s[self.pos..];
        match rest.find(|c| stops.contains(&c)) {
            Some(i) => {
                self.pos += i;
                Ok(&rest[..i])
            }
            None => Err(self.err(format!("unterminated field, expected one of {stops:?}"))),
        }
    }

    fn bit(&mut self) -> Result<bool> {
        match self.peek() {
            Some('0') => {
                self.pos += 1;
                Ok(false)
            }
            Some('1') => {
                self.pos += 1;
                Ok(true)
            }
            _ => Err(self.err("expected 0 or 1")),
        }
    }

    fn csv<T: std::str::FromStr>(&self, field: &str, what: &str) -> Result<Vec<T>> {
        if field.is_empty() {
            return Ok(Vec::new());
        }
        field
            .split(',')
            .map(|t| t.parse().map_err(|_| self.err(format!("bad {what} `{t}`"))))
            .collect()
    }
}

fn parse_header(line: &str) -> Result<Dims> {
    let bad = |m: String| Error::format(0, m);
    let mut parts = line.split(';');
    if parts.next() != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let mut vals = [0usize; 6];
    for (slot, key) in vals.iter_mut().zip(["T", "df", "ddem", "C", "G", "M"]) {
        let kv = parts.next().ok_or_else(|| bad(format!("header lacks {key}")))?;
        let v = kv
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| bad(format!("expected `{key}=`, found `{kv}`")))?;
        *slot = v.parse().map_err(|_| bad(format!("bad {key} value `{v}`")))?;
        if *slot == 0 {
            return Err(bad(format!("{key} must be positive")));
        }
    }
    Ok(Dims {
        t: vals[0],
        d_f: vals[1],
        d_dem: vals[2],
        n_icd: vals[3],
        n_drug: vals[4],
        max_stays: vals[5],
    })
}

fn parse_stay(c: &mut Cursor, d: &Dims) -> Result<StayRecord> {
    c.expect("{labels=arf:")?;
    let arf = c.bit()?;
    c.expect(",shock:")?;
    let shock = c.bit()?;
    c.expect(",mort:")?;
    let mortality = c.bit()?;
    c.expect(";rows=")?;
    let body = c.until(&['}'])?;
    let rows: Vec<&str> = body.split('|').collect();
    if rows.len() != d.t {
        return Err(c.err(format!("stay has {} rows, header says T={}", rows.len(), d.t)));
    }
    let mut data = Vec::with_capacity(d.t * d.d_f);
    for r in rows {
        let vals: Vec<f64> = c.csv(r, "real")?;
        if vals.len() != d.d_f {
            return Err(c.err(format!("row has {} values, header says df={}", vals.len(), d.d_f)));
        }
        data.extend(vals);
    }
    c.expect("}")?;
    let features = Tensor::matrix(d.t, d.d_f, data).map_err(|e| c.err(e.to_string()))?;
    Ok(StayRecord {
        features,
        labels: StayLabels {
            arf,
            shock,
            mortality,
        },
    })
}

fn codes(c: &Cursor, field: &str, n: usize, what: &str) -> Result<Tensor> {
    let idx: Vec<usize> = c.csv(field, what)?;
    multi_hot(n, &idx).map_err(|e| c.err(format!("{what}: {e}")))
}

fn parse_admission(c: &mut Cursor, d: &Dims) -> Result<AdmissionRecord> {
    c.expect("{icd=")?;
    let icd = c.until(&[';'])?;
    let icd = codes(c, icd, d.n_icd, "icd code")?;
    c.expect(";drugs=")?;
    let drugs = c.until(&[';'])?;
    let drugs = codes(c, drugs, d.n_drug, "drug code")?;
    c.expect(";note=")?;
    let note = c.until(&[';'])?;
    let note_tokens: Vec<u32> = c.csv(note, "note token")?;
    c.expect(";readmit=")?;
    let readmit = c.bit()?;
    c.expect(";stays=[")?;
    let mut stays = Vec::new();
    loop {
        c.skip_ws();
        if c.peek() == Some(']') {
            break;
        }
        stays.push(parse_stay(c, d)?);
    }
    c.expect("]}")?;
    if stays.is_empty() || stays.len() > d.max_stays {
        return Err(c.err(format!("admission has {} stays, expected 1..={}", stays.len(), d.max_stays)));
    }
    Ok(AdmissionRecord {
        stays,
        icd,
        drugs,
        note_tokens,
        readmit,
    })
}

fn parse_patient(line: &str, lineno: usize, d: &Dims) -> Result<PatientRecord> {
    let mut c = Cursor {
        s: line,
        pos: 0,
        line: lineno,
    };
    c.expect("demographics=")?;
    let dem = c.until(&[';'])?;
    let dem: Vec<f64> = c.csv(dem, "demographic bit")?;
    if dem.len() != d.d_dem || dem.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(c.err(format!("demographics must be {} values in {{0,1}}", d.d_dem)));
    }
    c.expect(";risk=")?;
    let risk = c.bit()?;
    c.expect(";admissions=[")?;
    let mut admissions = Vec::new();
    loop {
        c.skip_ws();
        if c.peek() == Some(']') {
            break;
        }
        admissions.push(parse_admission(&mut c, d)?);
    }
    c.expect("]")?;
    if c.pos != line.len() {
        return Err(c.err("trailing characters"));
    }
    if admissions.is_empty() {
        return Err(c.err("patient has no admissions"));
    }
    Ok(PatientRecord {
        demographics: Tensor::vector(dem).map_err(|e| c.err(e.to_string()))?,
        admissions,
        risk,
    })
}

/// Parses the text format. Line numbers in errors count the header as line 0.
/// A completely empty input parses to an empty dataset with desk dims.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let Some(head) = lines.next() else {
        return Ok(Dataset::empty(Dims::default()));
    };
    let dims = parse_header(head)?;
    let patients = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_patient(l, i + 1, &dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { dims, patients })
}
