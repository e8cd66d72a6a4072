//! Descriptor database and exhaustive cosine retrieval. Rows are unit
//! vectors so the inner product is the cosine similarity; results are
//! sorted descending with ties broken by ascending image id.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::aggregate::Descriptor;
use crate::binio;
use crate::error::{Error, Result};
use crate::eval::RankedList;

const DB_MAGIC: &[u8; 8] = b"IRDESCV1";
const UNIT_TOL: f64 = 1e-5;

/// Immutable n x d matrix of unit-normalized descriptors with row-aligned
/// unique image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    pub dim: usize,
    pub ids: Vec<String>,
    rows: Vec<f64>,
}

impl DescriptorDB {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Assemble a database, preserving insertion order. Duplicate ids, mixed
/// dimensions and non-unit rows are rejected.
pub fn build_db(entries: &[(String, Descriptor)]) -> Result<DescriptorDB> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("empty descriptor set".into()));
    }
    let dim = entries[0].1.dim();
    let mut ids = Vec::with_capacity(entries.len());
    let mut rows = Vec::with_capacity(entries.len() * dim);
    let mut seen = std::collections::BTreeSet::new();
    for (id, d) in entries {
        if d.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor for '{id}' has dim {}, expected {dim}",
                d.dim()
            )));
        }
        if (d.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Degenerate(format!(
                "descriptor for '{id}' is not unit norm"
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate id '{id}'")));
        }
        ids.push(id.clone());
        rows.extend_from_slice(&d.values);
    }
    Ok(DescriptorDB { dim, ids, rows })
}

/// Exhaustive scan: score every row against the query and sort.
/// `k = None` returns the full ranking.
pub fn query(db: &DescriptorDB, q: &Descriptor, k: Option<usize>) -> Result<RankedList> {
    query_named(db, q, k, "query")
}

/// As [`query`] but with an explicit query id for the ranked list.
pub fn query_named(
    db: &DescriptorDB,
    q: &Descriptor,
    k: Option<usize>,
    query_id: &str,
) -> Result<RankedList> {
    if q.dim() != db.dim {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs db dim {}",
            q.dim(),
            db.dim
        )));
    }
    if (q.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Degenerate("query descriptor is not unit norm".into()));
    }
    let mut scored: Vec<(String, f64)> = (0..db.len())
        .map(|i| {
            let s: f64 = db.row(i).iter().zip(&q.values).map(|(a, b)| a * b).sum();
            (db.ids[i].clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    if let Some(k) = k {
        scored.truncate(k);
    }
    RankedList::new(query_id.to_string(), scored)
}

/// Format ranked results as TSV: `query_id<TAB>rank<TAB>image_id<TAB>score`
/// with 1-based ranks and 6-decimal scores.
pub fn format_ranked_tsv(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (rank, (id, score)) in list.entries.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                list.query_id,
                rank + 1,
                id,
                score
            ));
        }
    }
    out
}

impl DescriptorDB {
    /// Write the `IRDESCV1` binary format plus a row-aligned id manifest
    /// at `<path>.ids`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(DB_MAGIC).map_err(|e| Error::io(path, e))?;
        binio::write_u32(&mut w, self.len() as u32, path)?;
        binio::write_u32(&mut w, self.dim as u32, path)?;
        binio::write_f32_slice(&mut w, &self.rows, path)?;
        w.flush().map_err(|e| Error::io(path, e))?;

        let ids_path = sidecar_path(path);
        let mut text = String::new();
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&ids_path, text).map_err(|e| Error::io(&ids_path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binio::expect_magic(&mut r, DB_MAGIC, path)?;
        let n = binio::read_u32(&mut r, path)? as usize;
        let dim = binio::read_u32(&mut r, path)? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::malformed(path, "empty database"));
        }
        let mut rows = binio::read_f32_vec(&mut r, n * dim, path)?;

        let ids_path = sidecar_path(path);
        let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != n {
            return Err(Error::malformed(
                &ids_path,
                format!("{} ids for {} rows", ids.len(), n),
            ));
        }
        // f32 narrowing can nudge norms; renormalize rows on load
        for i in 0..n {
            let row = &mut rows[i * dim..(i + 1) * dim];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::malformed(path, format!("zero row {i}")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(DescriptorDB { dim, ids, rows })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".ids");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whiten::l2_normalize;

    fn unit(vals: &[f64]) -> Descriptor {
        l2_normalize(&Descriptor::raw(vals.to_vec())).unwrap()
    }

    fn sample_db() -> DescriptorDB {
        build_db(&[
            ("x".into(), unit(&[1.0, 0.0])),
            ("y".into(), unit(&[0.0, 1.0])),
            ("z".into(), unit(&[0.6, 0.8])),
        ])
        .unwrap()
    }

    #[test]
    fn build_db_validates() {
        assert!(build_db(&[]).is_err());
        assert!(build_db(&[
            ("a".into(), unit(&[1.0, 0.0])),
            ("a".into(), unit(&[0.0, 1.0])),
        ])
        .is_err());
        assert!(build_db(&[
            ("a".into(), unit(&[1.0, 0.0])),
            ("b".into(), unit(&[0.0, 1.0, 0.0])),
        ])
        .is_err());
        assert!(build_db(&[("a".into(), Descriptor::raw(vec![2.0, 0.0]))]).is_err());
        assert_eq!(build_db(&[("a".into(), unit(&[1.0, 1.0]))]).unwrap().len(), 1);
    }

    #[test]
    fn query_orders_by_score() {
        let db = sample_db();
        let r = query(&db, &unit(&[1.0, 0.0]), None).unwrap();
        let ids: Vec<&str> = r.entries.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["x", "z", "y"]);
        assert!((r.entries[0].1 - 1.0).abs() < 1e-6);
        assert!((r.entries[1].1 - 0.6).abs() < 1e-6);
        assert!(r.entries[2].1.abs() < 1e-6);
    }

    #[test]
    fn query_tie_breaks_by_id() {
        let db = build_db(&[
            ("beta".into(), unit(&[1.0, 0.0])),
            ("alpha".into(), unit(&[1.0, 0.0])),
        ])
        .unwrap();
        let r = query(&db, &unit(&[0.0, 1.0]), None).unwrap();
        assert_eq!(r.entries[0].0, "alpha");
    }

    #[test]
    fn query_truncates_to_k() {
        let db = sample_db();
        let r = query(&db, &unit(&[1.0, 0.0]), Some(2)).unwrap();
        assert_eq!(r.entries.len(), 2);
    }

    #[test]
    fn query_validates_input() {
        let db = sample_db();
        assert!(query(&db, &unit(&[1.0, 0.0, 0.0]), None).is_err());
        assert!(query(&db, &Descriptor::raw(vec![0.5, 0.0]), None).is_err());
    }

    #[test]
    fn db_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.db");
        let db = sample_db();
        db.write(&path).unwrap();
        let back = DescriptorDB::read(&path).unwrap();
        assert_eq!(back.ids, db.ids);
        assert_eq!(back.dim, db.dim);
        for i in 0..db.len() {
            for (a, b) in back.row(i).iter().zip(db.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ranked_tsv_format() {
        let db = sample_db();
        let r = query_named(&db, &unit(&[1.0, 0.0]), Some(1), "q7").unwrap();
        assert_eq!(format_ranked_tsv(&[r]), "q7\t1\tx\t1.000000\n");
    }
}
