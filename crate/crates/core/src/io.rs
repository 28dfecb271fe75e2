//! CSV and JSON reading and writing.
//!
//! Dataset CSV: one row per task with `respondent_id`, `task_id`, train
//! attributes suffixed `1`/`2` (`crowd1`, `wt1`, ...), context attributes by
//! name, `rank1..rank3` holding `T1`/`T2`/`OO`, then one column per
//! covariate. Empty covariate cells are missing values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{AltLabel, Alternative, ChoiceSituation, PanelDataset, RankingObservation, Respondent};
use crate::design::Block;
use crate::error::{Error, Result};
use crate::schema::Schema;

const RANK_COLUMNS: [&str; 3] = ["rank1", "rank2", "rank3"];

fn situation_columns(schema: &Schema) -> Vec<String> {
    let mut cols = Vec::new();
    for suffix in ["1", "2"] {
        cols.extend(schema.alternative_attributes().map(|a| format!("{}{suffix}", a.name)));
    }
    cols.extend(schema.context_attributes().map(|a| a.name.clone()));
    cols
}

fn situation_values(schema: &Schema, s: &ChoiceSituation) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for label in [AltLabel::Train1, AltLabel::Train2] {
        for a in schema.alternative_attributes() {
            let v = s
                .value(label, &a.name)
                .ok_or_else(|| Error::Data(format!("situation `{}` lacks `{}` for {label}", s.id, a.name)))?;
            out.push(v.to_string());
        }
    }
    for a in schema.context_attributes() {
        let v = s
            .context
            .get(&a.name)
            .ok_or_else(|| Error::Data(format!("situation `{}` lacks `{}`", s.id, a.name)))?;
        out.push(v.to_string());
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(writer: W, dataset: &PanelDataset, schema: &Schema) -> Result<()> {
    let covariates: Vec<String> = dataset.covariate_names().into_iter().collect();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["respondent_id".to_string(), "task_id".to_string()];
    header.extend(situation_columns(schema));
    header.extend(RANK_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(covariates.iter().cloned());
    w.write_record(&header)?;
    for r in &dataset.respondents {
        for obs in &r.observations {
            let mut row = vec![r.id.clone(), obs.situation.id.clone()];
            row.extend(situation_values(schema, &obs.situation)?);
            if obs.ranking.len() != 3 {
                return Err(Error::Data(format!("respondent `{}`: ranking must list 3 alternatives", r.id)));
            }
            row.extend(obs.ranking.iter().map(|l| l.code().to_string()));
            row.extend(
                covariates
                    .iter()
                    .map(|c| r.covariates.get(c).map_or(String::new(), f64::to_string)),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_number(cell: &str, column: &str, line: u64) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}, column `{column}`: `{cell}` is not a number")))
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    };
    let id_col = col("respondent_id")?;
    let task_col = col("task_id")?;
    let alt_attrs: Vec<String> = schema.alternative_attributes().map(|a| a.name.clone()).collect();
    let t1: Vec<usize> = alt_attrs.iter().map(|a| col(&format!("{a}1"))).collect::<Result<_>>()?;
    let t2: Vec<usize> = alt_attrs.iter().map(|a| col(&format!("{a}2"))).collect::<Result<_>>()?;
    let ctx_attrs: Vec<String> = schema.context_attributes().map(|a| a.name.clone()).collect();
    let ctx: Vec<usize> = ctx_attrs.iter().map(|a| col(a)).collect::<Result<_>>()?;
    let ranks: Vec<usize> = RANK_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let known: BTreeSet<usize> = [id_col, task_col]
        .into_iter()
        .chain(t1.iter().copied())
        .chain(t2.iter().copied())
        .chain(ctx.iter().copied())
        .chain(ranks.iter().copied())
        .collect();
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !known.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut respondents: Vec<Respondent> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize| parse_number(cell(i), &headers[i], line);
        let train = |label, cols: &[usize]| -> Result<Alternative> {
            Ok(Alternative {
                label,
                attribute_values: alt_attrs
                    .iter()
                    .zip(cols)
                    .map(|(a, &i)| Ok((a.clone(), number(i)?)))
                    .collect::<Result<_>>()?,
            })
        };
        let situation = ChoiceSituation {
            id: cell(task_col).to_string(),
            train1: train(AltLabel::Train1, &t1)?,
            train2: train(AltLabel::Train2, &t2)?,
            context: ctx_attrs
                .iter()
                .zip(&ctx)
                .map(|(a, &i)| Ok((a.clone(), number(i)?)))
                .collect::<Result<_>>()?,
        };
        let ranking = ranks
            .iter()
            .map(|&i| AltLabel::from_code(cell(i)).map_err(|e| Error::Data(format!("line {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut covariates = BTreeMap::new();
        for (i, name) in &covariate_cols {
            if !cell(*i).is_empty() {
                covariates.insert(name.clone(), parse_number(cell(*i), name, line)?);
            }
        }
        let id = cell(id_col).to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("line {line}: empty respondent_id")));
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            respondents.push(Respondent {
                id: id.clone(),
                covariates: covariates.clone(),
                observations: vec![],
            });
            respondents.len() - 1
        });
        if respondents[slot].covariates != covariates {
            return Err(Error::Data(format!(
                "line {line}: covariates of respondent `{id}` differ between rows"
            )));
        }
        respondents[slot].observations.push(RankingObservation { situation, ranking });
    }
    Ok(PanelDataset { respondents })
}

pub fn read_dataset_file(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelDataset> {
    read_dataset(BufReader::new(File::open(path)?), schema)
}

pub fn write_dataset_file(path: impl AsRef<Path>, dataset: &PanelDataset, schema: &Schema) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), dataset, schema)
}

pub fn write_design<W: Write>(writer: W, blocks: &[Block], schema: &Schema) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["block_id".to_string(), "task_id".to_string()];
    header.extend(situation_columns(schema));
    w.write_record(&header)?;
    for b in blocks {
        for s in &b.situations {
            let mut row = vec![b.id.to_string(), s.id.clone()];
            row.extend(situation_values(schema, s)?);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a table of already-formatted cells.
pub fn write_table<W: Write>(writer: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
