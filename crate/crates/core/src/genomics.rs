//! Gene-expression ingestion, missing-value filtering and per-gene normalization.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale floor applied to constant genes.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Raw expression matrix, subjects in rows and genes in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneTable {
    subject_ids: Vec<String>,
    gene_names: Vec<String>,
    /// Row-major, `None` for missing cells.
    values: Vec<Option<f64>>,
}

impl GeneTable {
    pub fn new(subject_ids: Vec<String>, gene_names: Vec<String>, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != subject_ids.len() * gene_names.len() {
            return Err(Error::Schema(format!(
                "{} cells for {} subjects x {} genes",
                values.len(),
                subject_ids.len(),
                gene_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for g in &gene_names {
            if !seen.insert(g.as_str()) {
                return Err(Error::Schema(format!("duplicate gene name {g:?}")));
            }
        }
        let mut seen = HashSet::new();
        for s in &subject_ids {
            if !seen.insert(s.as_str()) {
                return Err(Error::Schema(format!("duplicate subject id {s:?}")));
            }
        }
        Ok(Self { subject_ids, gene_names, values })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.gene_names.len() + col]
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let d = self.gene_names.len();
        &self.values[row * d..(row + 1) * d]
    }

    pub fn row_of(&self, subject_id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == subject_id)
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(Option::is_none)
    }

    /// Writes the table in the comma-delimited layout read by [`load_gene_table`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let header = std::iter::once("subject_id").chain(self.gene_names.iter().map(String::as_str));
        w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
        for (r, sid) in self.subject_ids.iter().enumerate() {
            let mut rec = vec![sid.clone()];
            rec.extend(self.row(r).iter().map(|v| match v {
                Some(x) => format!("{x:?}"),
                None => "NaN".to_string(),
            }));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A complete, finite expression profile for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneVector {
    pub subject_id: String,
    pub values: Vec<f64>,
}

impl GeneVector {
    pub fn new(subject_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("gene vector entry {i} is not finite")));
        }
        Ok(Self { subject_id: subject_id.into(), values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn parse_cell(cell: &str, line: usize, col: usize) -> Result<Option<f64>> {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let v: f64 = t
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("column {}: {t:?} is not a number", col + 1) })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("column {}: non-finite value {t:?}", col + 1) });
    }
    Ok(Some(v))
}

/// Parses a comma-delimited gene table: header `subject_id,<gene>...`, one subject per row.
/// Empty cells and `NaN` are missing.
pub fn parse_gene_table<R: Read>(reader: R) -> Result<GeneTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(Error::EmptyTable("no header row".into())),
    };
    if header.len() < 2 {
        return Err(Error::Schema("header needs subject_id plus at least one gene".into()));
    }
    let gene_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for g in &gene_names {
        if !seen.insert(g.as_str()) {
            return Err(Error::Schema(format!("duplicate gene name {g:?}")));
        }
    }
    let mut subject_ids = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        subject_ids.push(rec[0].trim().to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            values.push(parse_cell(cell, line, j + 1)?);
        }
    }
    GeneTable::new(subject_ids, gene_names, values)
}

pub fn load_gene_table(path: &Path) -> Result<GeneTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_gene_table(std::io::BufReader::new(f))
}

/// Drops every gene column with at least one missing cell, keeping survivor order.
pub fn clean_genes(table: &GeneTable) -> Result<GeneTable> {
    let (n, d) = (table.n_subjects(), table.n_genes());
    let keep: Vec<usize> = (0..d).filter(|&j| (0..n).all(|i| table.get(i, j).is_some())).collect();
    if keep.is_empty() {
        return Err(Error::EmptyTable(format!("all {d} gene columns contain missing values")));
    }
    let gene_names = keep.iter().map(|&j| table.gene_names[j].clone()).collect();
    let mut values = Vec::with_capacity(n * keep.len());
    for i in 0..n {
        values.extend(keep.iter().map(|&j| table.get(i, j)));
    }
    GeneTable::new(table.subject_ids.clone(), gene_names, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScheme {
    Zscore,
    #[default]
    Log1pZscore,
    Minmax,
}

impl std::str::FromStr for NormalizationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::Zscore),
            "log1p-zscore" => Ok(Self::Log1pZscore),
            "minmax" => Ok(Self::Minmax),
            other => Err(Error::Config(format!("unknown normalization scheme {other:?}"))),
        }
    }
}

/// Per-gene `(location, scale)` fitted on a clean table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub scheme: NormalizationScheme,
    pub per_gene_stats: Vec<(f64, f64)>,
}

fn pre_transform(scheme: NormalizationScheme, v: f64) -> Result<f64> {
    match scheme {
        NormalizationScheme::Log1pZscore => {
            if v <= -1.0 {
                return Err(Error::Domain(format!("log1p undefined for {v}")));
            }
            Ok(v.ln_1p())
        }
        _ => Ok(v),
    }
}

pub fn fit_normalizer(table: &GeneTable, scheme: NormalizationScheme) -> Result<NormalizationSpec> {
    let (n, d) = (table.n_subjects(), table.n_genes());
    if n == 0 || d == 0 {
        return Err(Error::EmptyTable("cannot fit a normalizer on an empty table".into()));
    }
    let mut stats = Vec::with_capacity(d);
    for j in 0..d {
        let mut col = Vec::with_capacity(n);
        for i in 0..n {
            let v = table
                .get(i, j)
                .ok_or_else(|| Error::Domain(format!("gene {:?} has missing values; clean first", table.gene_names[j])))?;
            col.push(pre_transform(scheme, v)?);
        }
        let stat = match scheme {
            NormalizationScheme::Zscore | NormalizationScheme::Log1pZscore => {
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt().max(SCALE_FLOOR))
            }
            NormalizationScheme::Minmax => {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, (hi - lo).max(SCALE_FLOOR))
            }
        };
        stats.push(stat);
    }
    Ok(NormalizationSpec { scheme, per_gene_stats: stats })
}

pub fn apply_normalizer(spec: &NormalizationSpec, subject_id: &str, values: &[f64]) -> Result<GeneVector> {
    if values.len() != spec.per_gene_stats.len() {
        return Err(Error::Dimension { expected: spec.per_gene_stats.len(), got: values.len() });
    }
    let out = values
        .iter()
        .zip(&spec.per_gene_stats)
        .map(|(&v, &(loc, scale))| Ok((pre_transform(spec.scheme, v)? - loc) / scale))
        .collect::<Result<Vec<_>>>()?;
    GeneVector::new(subject_id, out)
}

/// Normalizes every row of a clean table.
pub fn normalize_table(table: &GeneTable, spec: &NormalizationSpec) -> Result<Vec<GeneVector>> {
    (0..table.n_subjects())
        .map(|i| {
            let row: Vec<f64> = table
                .row(i)
                .iter()
                .map(|v| v.ok_or_else(|| Error::Domain("table has missing values; clean first".into())))
                .collect::<Result<_>>()?;
            apply_normalizer(spec, &table.subject_ids[i], &row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[&[Option<f64>]]) -> GeneTable {
        let d = rows[0].len();
        GeneTable::new(
            (0..rows.len()).map(|i| format!("s{i}")).collect(),
            (0..d).map(|j| format!("g{j}")).collect(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_well_formed_table() {
        let src = "subject_id,A,B,C,D\nR01,1,2,3,4\nR02,5,,7,8\nR03,9,10,NaN,12\n";
        let t = parse_gene_table(src.as_bytes()).unwrap();
        assert_eq!((t.n_subjects(), t.n_genes()), (3, 4));
        assert_eq!(t.get(1, 1), None);
        assert_eq!(t.get(2, 2), None);
        assert_eq!(t.get(2, 3), Some(12.0));
        assert_eq!(t.subject_ids()[0], "R01");
    }

    #[test]
    fn wrong_arity_names_line() {
        let src = "subject_id,A,B\nR01,1,2\nR02,1\n";
        match parse_gene_table(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_gene_is_schema_error() {
        let src = "subject_id,A,A\nR01,1,2\n";
        assert!(matches!(parse_gene_table(src.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn garbage_cell_is_parse_error() {
        let src = "subject_id,A\nR01,abc\n";
        assert!(matches!(parse_gene_table(src.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn many_subjects_round_trip_through_csv() {
        let n = 130;
        let t = GeneTable::new(
            (0..n).map(|i| format!("R{i:03}")).collect(),
            vec!["a".into(), "b".into()],
            (0..2 * n).map(|v| if v % 17 == 0 { None } else { Some(v as f64 * 0.5) }).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("genes.csv");
        t.write_csv(&p).unwrap();
        let back = load_gene_table(&p).unwrap();
        assert_eq!(back.n_subjects(), 130);
        assert_eq!(back, t);
    }

    #[test]
    fn clean_drops_column_with_single_missing_cell() {
        let t = table(&[&[Some(1.0), Some(2.0), Some(3.0)], &[Some(4.0), None, Some(6.0)]]);
        let c = clean_genes(&t).unwrap();
        assert_eq!(c.gene_names(), &["g0".to_string(), "g2".to_string()]);
        assert_eq!(c.n_subjects(), 2);
        assert_eq!(c.get(1, 1), Some(6.0));
    }

    #[test]
    fn clean_is_identity_without_missing() {
        let t = table(&[&[Some(1.0), Some(2.0)], &[Some(3.0), Some(4.0)]]);
        assert_eq!(clean_genes(&t).unwrap(), t);
    }

    #[test]
    fn clean_all_missing_is_error() {
        let t = table(&[&[None, Some(1.0)], &[Some(2.0), None]]);
        assert!(matches!(clean_genes(&t), Err(Error::EmptyTable(_))));
    }

    #[test]
    fn zscore_two_values() {
        let t = table(&[&[Some(1.0)], &[Some(3.0)]]);
        let spec = fit_normalizer(&t, NormalizationScheme::Zscore).unwrap();
        assert_eq!(spec.per_gene_stats, vec![(2.0, 1.0)]);
        assert_eq!(apply_normalizer(&spec, "s0", &[1.0]).unwrap().values, vec![-1.0]);
        assert_eq!(apply_normalizer(&spec, "s1", &[3.0]).unwrap().values, vec![1.0]);
    }

    #[test]
    fn constant_gene_uses_floor() {
        let t = table(&[&[Some(5.0)], &[Some(5.0)], &[Some(5.0)]]);
        let spec = fit_normalizer(&t, NormalizationScheme::Zscore).unwrap();
        assert_eq!(spec.per_gene_stats[0].1, SCALE_FLOOR);
        let rows = normalize_table(&t, &spec).unwrap();
        assert!(rows.iter().all(|r| r.values == vec![0.0]));
    }

    #[test]
    fn mismatched_length_is_dimension_error() {
        let t = table(&[&[Some(1.0), Some(2.0)], &[Some(3.0), Some(5.0)]]);
        let spec = fit_normalizer(&t, NormalizationScheme::Zscore).unwrap();
        assert!(matches!(
            apply_normalizer(&spec, "x", &[1.0]),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn log1p_rejects_values_at_or_below_minus_one() {
        let t = table(&[&[Some(-1.0)], &[Some(3.0)]]);
        assert!(matches!(fit_normalizer(&t, NormalizationScheme::Log1pZscore), Err(Error::Domain(_))));
    }

    #[test]
    fn minmax_maps_to_unit_interval() {
        let t = table(&[&[Some(2.0)], &[Some(4.0)], &[Some(3.0)]]);
        let spec = fit_normalizer(&t, NormalizationScheme::Minmax).unwrap();
        let v: Vec<f64> = normalize_table(&t, &spec).unwrap().iter().map(|g| g.values[0]).collect();
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }

    fn arb_table() -> impl Strategy<Value = GeneTable> {
        (1usize..6, 1usize..8).prop_flat_map(|(n, d)| {
            proptest::collection::vec(proptest::option::weighted(0.85, -50.0f64..50.0), n * d).prop_map(move |vals| {
                GeneTable::new(
                    (0..n).map(|i| format!("s{i}")).collect(),
                    (0..d).map(|j| format!("g{j}")).collect(),
                    vals,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn clean_is_idempotent_and_matches_brute_force(t in arb_table()) {
            let dropped: HashSet<String> = (0..t.n_genes())
                .filter(|&j| (0..t.n_subjects()).any(|i| t.get(i, j).is_none()))
                .map(|j| t.gene_names()[j].clone())
                .collect();
            match clean_genes(&t) {
                Ok(c) => {
                    let kept: HashSet<String> = c.gene_names().iter().cloned().collect();
                    let all: HashSet<String> = t.gene_names().iter().cloned().collect();
                    prop_assert_eq!(all.difference(&kept).cloned().collect::<HashSet<_>>(), dropped);
                    prop_assert!(!c.has_missing());
                    prop_assert_eq!(clean_genes(&c).unwrap(), c);
                }
                Err(_) => prop_assert_eq!(dropped.len(), t.n_genes()),
            }
        }

        #[test]
        fn zscore_fit_set_is_standardized(
            vals in proptest::collection::vec(-100.0f64..100.0, 12),
        ) {
            let t = GeneTable::new(
                (0..4).map(|i| format!("s{i}")).collect(),
                (0..3).map(|j| format!("g{j}")).collect(),
                vals.into_iter().map(Some).collect(),
            ).unwrap();
            let spec = fit_normalizer(&t, NormalizationScheme::Zscore).unwrap();
            let rows = normalize_table(&t, &spec).unwrap();
            for j in 0..3 {
                let col: Vec<f64> = rows.iter().map(|r| r.values[j]).collect();
                let mean = col.iter().sum::<f64>() / 4.0;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
                prop_assert!(mean.abs() < 1e-6);
                if spec.per_gene_stats[j].1 > 1e-6 {
                    prop_assert!((sd - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
