//! Long-format CSV datasets.
//!
//! Header: `subject_id,y,x1..xp,z1..zu[,offset]`. Rows of one subject must
//! be contiguous. A dataset holds every available covariate column; a
//! [`GlmmModel`] is built from a chosen subset of them.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Family, GlmmModel, Prior, Subject, DEFAULT_TAU0};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub y: Vec<f64>,
    /// `n_i × (all x columns)`.
    pub x: DMatrix<f64>,
    /// `n_i × (all z columns)`.
    pub z: DMatrix<f64>,
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_x: usize,
    pub n_z: usize,
    pub has_offset: bool,
    pub subjects: Vec<SubjectRecord>,
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize, bool)> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "subject_id" || cols[1] != "y" {
        return Err(Error::InvalidInput(
            "CSV header must start with subject_id,y and contain x1.. and z1.. columns".into(),
        ));
    }
    let mut idx = 2;
    let mut n_x = 0;
    while idx < cols.len() && cols[idx] == format!("x{}", n_x + 1) {
        n_x += 1;
        idx += 1;
    }
    let mut n_z = 0;
    while idx < cols.len() && cols[idx] == format!("z{}", n_z + 1) {
        n_z += 1;
        idx += 1;
    }
    let has_offset = idx < cols.len() && cols[idx] == "offset";
    if has_offset {
        idx += 1;
    }
    if n_x == 0 || n_z == 0 || idx != cols.len() {
        return Err(Error::InvalidInput(format!(
            "unexpected CSV header '{}'; expected subject_id,y,x1..xp,z1..zu[,offset]",
            cols.join(",")
        )));
    }
    Ok((n_x, n_z, has_offset))
}

fn parse_f64(s: &str, line: u64, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse {col} value '{s}'")))
}

impl Dataset {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let (n_x, n_z, has_offset) = parse_header(rdr.headers()?)?;
        let mut subjects: Vec<SubjectRecord> = Vec::new();
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut current: Option<(String, Vec<f64>, Vec<f64>)> = None;

        let flush = |cur: &mut Option<(String, Vec<f64>, Vec<f64>)>,
                     rows: &mut Vec<(Vec<f64>, Vec<f64>)>,
                     out: &mut Vec<SubjectRecord>| {
            if let Some((id, y, off)) = cur.take() {
                let n = y.len();
                let x = DMatrix::from_fn(n, n_x, |r, c| rows[r].0[c]);
                let z = DMatrix::from_fn(n, n_z, |r, c| rows[r].1[c]);
                out.push(SubjectRecord {
                    id,
                    y,
                    x,
                    z,
                    offset: has_offset.then_some(off),
                });
                rows.clear();
            }
        };

        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k as u64 + 2;
            if rec.len() != 2 + n_x + n_z + usize::from(has_offset) {
                return Err(Error::InvalidInput(format!("line {line}: wrong number of fields")));
            }
            let id = rec[0].trim().to_string();
            let is_new = current.as_ref().is_none_or(|(cid, _, _)| *cid != id);
            if is_new {
                flush(&mut current, &mut rows, &mut subjects);
                if !seen.insert(id.clone()) {
                    return Err(Error::InvalidInput(format!(
                        "line {line}: rows for subject '{id}' are not contiguous"
                    )));
                }
                current = Some((id, Vec::new(), Vec::new()));
            }
            let (_, y, off) = current.as_mut().expect("current subject");
            y.push(parse_f64(&rec[1], line, "y")?);
            let xs = (0..n_x)
                .map(|c| parse_f64(&rec[2 + c], line, "x"))
                .collect::<Result<Vec<_>>>()?;
            let zs = (0..n_z)
                .map(|c| parse_f64(&rec[2 + n_x + c], line, "z"))
                .collect::<Result<Vec<_>>>()?;
            if has_offset {
                off.push(parse_f64(&rec[2 + n_x + n_z], line, "offset")?);
            }
            rows.push((xs, zs));
        }
        flush(&mut current, &mut rows, &mut subjects);
        if subjects.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(Self {
            n_x,
            n_z,
            has_offset,
            subjects,
        })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "y".to_string()];
        header.extend((1..=self.n_x).map(|k| format!("x{k}")));
        header.extend((1..=self.n_z).map(|k| format!("z{k}")));
        if self.has_offset {
            header.push("offset".into());
        }
        w.write_record(&header)?;
        for s in &self.subjects {
            for j in 0..s.y.len() {
                let mut row = vec![s.id.clone(), s.y[j].to_string()];
                row.extend((0..self.n_x).map(|c| s.x[(j, c)].to_string()));
                row.extend((0..self.n_z).map(|c| s.z[(j, c)].to_string()));
                if let Some(off) = &s.offset {
                    row.push(off[j].to_string());
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn m(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Model using the given 0-based x and z column indices.
    pub fn model(
        &self,
        family: Family,
        fixed_cols: &[usize],
        random_cols: &[usize],
        prior: Option<Prior>,
    ) -> Result<GlmmModel> {
        if let Some(&c) = fixed_cols.iter().find(|&&c| c >= self.n_x) {
            return Err(Error::InvalidInput(format!("fixed column {c} out of range")));
        }
        if let Some(&c) = random_cols.iter().find(|&&c| c >= self.n_z) {
            return Err(Error::InvalidInput(format!("random column {c} out of range")));
        }
        let (p, u) = (fixed_cols.len(), random_cols.len());
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let n = s.y.len();
                Subject {
                    id: s.id.clone(),
                    y: DVector::from_column_slice(&s.y),
                    x: DMatrix::from_fn(n, p, |r, c| s.x[(r, fixed_cols[c])]),
                    z: DMatrix::from_fn(n, u, |r, c| s.z[(r, random_cols[c])]),
                    offset: s
                        .offset
                        .as_ref()
                        .map_or_else(|| DVector::zeros(n), |o| DVector::from_column_slice(o)),
                }
            })
            .collect();
        let prior = prior.unwrap_or_else(|| Prior::default_for(p, u, DEFAULT_TAU0));
        GlmmModel::new(family, p, u, subjects, prior)
    }

    /// Model using every x and z column.
    pub fn full_model(&self, family: Family) -> Result<GlmmModel> {
        let fixed: Vec<usize> = (0..self.n_x).collect();
        let random: Vec<usize> = (0..self.n_z).collect();
        self.model(family, &fixed, &random, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "subject_id,y,x1,x2,z1\n\
                       a,1,1,0.5,1\n\
                       a,0,1,1,1\n\
                       b,1,1,0.25,1\n";

    #[test]
    fn parses_and_groups_subjects() {
        let d = Dataset::read_csv(CSV.as_bytes()).unwrap();
        assert_eq!((d.n_x, d.n_z, d.has_offset), (2, 1, false));
        assert_eq!(d.m(), 2);
        assert_eq!(d.subjects[0].y, vec![1.0, 0.0]);
        assert_eq!(d.subjects[0].x[(1, 1)], 1.0);
        let model = d.model(Family::Bernoulli, &[0, 1], &[0], None).unwrap();
        assert_eq!((model.p(), model.u(), model.m()), (2, 1, 2));
    }

    #[test]
    fn non_contiguous_subject_is_an_error() {
        let csv = "subject_id,y,x1,z1\na,1,1,1\nb,0,1,1\na,1,1,1\n";
        let err = Dataset::read_csv(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("not contiguous"));
    }

    #[test]
    fn offsets_are_read() {
        let csv = "subject_id,y,x1,z1,offset\na,3,1,1,0.693\n";
        let d = Dataset::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(d.subjects[0].offset.as_deref(), Some(&[0.693][..]));
        let model = d.full_model(Family::Poisson).unwrap();
        assert_eq!(model.subjects()[0].offset[0], 0.693);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(Dataset::read_csv("id,y,x1,z1\na,1,1,1\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("subject_id,y,x2,z1\na,1,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn write_then_read_is_identity() {
        let d = Dataset::read_csv(CSV.as_bytes()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), CSV);
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), d);
    }
}
