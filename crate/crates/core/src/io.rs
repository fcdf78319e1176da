//! CSV exchange formats: long-format observations `id,s1,…,sd,t,y`,
//! per-location covariates `id,x1,…,xp`, and queries `id,s1,…,sd,t`.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::data::{build_covariates, STDataset};
use crate::error::{Error, Result};

/// Column positions of the coordinate fields `s1, s2, …` in a header.
fn coordinate_columns(header: &csv::StringRecord) -> Result<Vec<usize>> {
    let mut cols = Vec::new();
    for k in 1.. {
        match header.iter().position(|h| h.trim() == format!("s{k}")) {
            Some(c) => cols.push(c),
            None => break,
        }
    }
    if cols.is_empty() {
        return Err(Error::invalid("header has no coordinate column s1"));
    }
    Ok(cols)
}

fn column(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::invalid(format!("header has no `{name}` column")))
}

fn number(record: &csv::StringRecord, col: usize, line: u64) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("line {line}: non-finite value `{raw}`")));
    }
    Ok(v)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Reads long-format observations. Locations are grouped by `id` in order
/// of first appearance; every id must cover the same time grid exactly once
/// per time. Covariates are built from the coordinates.
pub fn read_long_csv<R: Read>(reader: R) -> Result<STDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let id_col = column(&header, "id")?;
    let t_col = column(&header, "t")?;
    let y_col = column(&header, "y")?;
    let s_cols = coordinate_columns(&header)?;

    let mut order: Vec<String> = Vec::new();
    let mut coords: HashMap<String, Vec<f64>> = HashMap::new();
    let mut values: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::invalid(format!("line {line}: empty id")));
        }
        let s: Vec<f64> = s_cols.iter().map(|&c| number(&record, c, line)).collect::<Result<_>>()?;
        let t = number(&record, t_col, line)?;
        let y = number(&record, y_col, line)?;
        match coords.get(&id) {
            Some(prev) if *prev != s => {
                return Err(Error::invalid(format!("line {line}: id `{id}` changes its coordinates")));
            }
            Some(_) => {}
            None => {
                order.push(id.clone());
                coords.insert(id.clone(), s);
            }
        }
        values.entry(id).or_default().push((t, y));
    }
    if order.is_empty() {
        return Err(Error::invalid("no observations"));
    }

    let mut grid: Option<Vec<f64>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for id in &order {
        let mut series = values.remove(id).expect("every id has values");
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        if series.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("id `{id}` has a repeated time")));
        }
        let times: Vec<f64> = series.iter().map(|p| p.0).collect();
        match &grid {
            None => grid = Some(times),
            Some(g) if *g != times => {
                return Err(Error::invalid(format!("id `{id}` does not share the common time grid")));
            }
            Some(_) => {}
        }
        rows.push(series.into_iter().map(|p| p.1).collect());
    }
    let times = DVector::from_vec(grid.expect("at least one id"));
    let d = s_cols.len();
    let n = order.len();
    let locations = DMatrix::from_fn(n, d, |i, j| coords[&order[i]][j]);
    let y = DMatrix::from_fn(n, times.len(), |i, t| rows[i][t]);
    let x = build_covariates(&locations)?;
    STDataset::new(Some(order), locations, times, y, x)
}

/// Reads per-location covariates `id,x1,…,xp` and orders them like `ids`.
pub fn read_covariates_csv<R: Read>(reader: R, ids: &[String]) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let id_col = column(&header, "id")?;
    let mut x_cols = Vec::new();
    for k in 1.. {
        match header.iter().position(|h| h == format!("x{k}")) {
            Some(c) => x_cols.push(c),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::invalid("covariate header has no column x1"));
    }
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let id = record.get(id_col).unwrap_or("").to_string();
        let vals: Vec<f64> = x_cols.iter().map(|&c| number(&record, c, line)).collect::<Result<_>>()?;
        if rows.insert(id.clone(), vals).is_some() {
            return Err(Error::invalid(format!("line {line}: covariates for `{id}` given twice")));
        }
    }
    let p = x_cols.len();
    let mut x = DMatrix::zeros(ids.len(), p);
    for (i, id) in ids.iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no covariates for id `{id}`")))?;
        for j in 0..p {
            x[(i, j)] = row[j];
        }
    }
    Ok(x)
}

/// One prediction request.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub location: Vec<f64>,
    pub t: f64,
}

pub fn read_queries_csv<R: Read>(reader: R) -> Result<Vec<Query>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let id_col = column(&header, "id")?;
    let t_col = column(&header, "t")?;
    let s_cols = coordinate_columns(&header)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        out.push(Query {
            id: record.get(id_col).unwrap_or("").to_string(),
            location: s_cols.iter().map(|&c| number(&record, c, line)).collect::<Result<_>>()?,
            t: number(&record, t_col, line)?,
        });
    }
    Ok(out)
}

fn coordinate_header(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("s{k}")).collect()
}

/// Writes a dataset in long format, locations in order, times ascending.
pub fn write_long_csv<W: Write>(data: &STDataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let d = data.locations().ncols();
    let mut header = vec!["id".to_string()];
    header.extend(coordinate_header(d));
    header.extend(["t".to_string(), "y".to_string()]);
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        for (t, &time) in data.times().iter().enumerate() {
            let mut row = vec![data.ids()[i].clone()];
            row.extend((0..d).map(|j| data.locations()[(i, j)].to_string()));
            row.push(time.to_string());
            row.push(data.y()[(i, t)].to_string());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `id,x1,…,xp` for every location.
pub fn write_covariates_csv<W: Write>(ids: &[String], x: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((1..=x.ncols()).map(|k| format!("x{k}")));
    wtr.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(x.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes queries with their predictions as `id,s1,…,sd,t,z`.
pub fn write_predictions_csv<W: Write>(queries: &[Query], z: &[f64], out: W) -> Result<()> {
    if queries.len() != z.len() {
        return Err(Error::invalid("one prediction per query is required"));
    }
    let d = queries.first().map_or(0, |q| q.location.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(coordinate_header(d));
    header.extend(["t".to_string(), "z".to_string()]);
    wtr.write_record(&header)?;
    for (q, v) in queries.iter().zip(z) {
        let mut row = vec![q.id.clone()];
        row.extend(q.location.iter().map(|c| c.to_string()));
        row.push(q.t.to_string());
        row.push(v.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
