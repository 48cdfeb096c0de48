//! Dataset directory format.
//!
//! ```text
//! schema.json            {"node_types", "target_type", "edge_types", "num_classes", "feature_dims"}
//! features_<type>.csv    id,f0,f1,...
//! edges_<etype>.csv      src,dst
//! hom_edges.csv          src,dst   (one row per undirected pair)
//! labels.csv             id,label  (-1 = unlabeled)
//! split.json             {"train": [...], "test": [...]}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EdgeType, GraphParts, HetGraph, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Schema {
    node_types: Vec<String>,
    target_type: String,
    edge_types: Vec<EdgeType>,
    num_classes: usize,
    feature_dims: BTreeMap<String, usize>,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingFile(p))
    }
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a headed CSV. Returns data rows as `(line_number, fields)`.
fn read_csv(path: &Path, expected_header: &[String]) -> Result<Vec<(usize, Vec<String>)>> {
    let name = file_name(path);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(&name, 1, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::format(&name, 1, e.to_string()))?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header {
        return Err(Error::format(
            &name,
            1,
            format!("dimension mismatch: header {:?}, expected {:?}", got, expected_header),
        ));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::format(&name, line, e.to_string()))?;
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(file: &str, line: usize, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::format(file, line, format!("cannot parse {s:?}")))
}

fn read_features(path: &Path, dim: usize) -> Result<Array2<f64>> {
    let name = file_name(path);
    let mut header = vec!["id".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    let rows = read_csv(path, &header)?;
    let mut m = Array2::zeros((rows.len(), dim));
    for (r, (line, fields)) in rows.iter().enumerate() {
        let id: usize = parse(&name, *line, &fields[0])?;
        if id != r {
            return Err(Error::format(&name, *line, format!("ids must be dense from 0, expected {r}, got {id}")));
        }
        for k in 0..dim {
            m[[r, k]] = parse(&name, *line, &fields[k + 1])?;
        }
    }
    Ok(m)
}

fn read_edges(path: &Path, n_src: usize, n_dst: usize) -> Result<Vec<(usize, usize)>> {
    let name = file_name(path);
    let rows = read_csv(path, &["src".into(), "dst".into()])?;
    rows.iter()
        .map(|(line, f)| {
            let a: usize = parse(&name, *line, &f[0])?;
            let b: usize = parse(&name, *line, &f[1])?;
            if a >= n_src || b >= n_dst {
                return Err(Error::format(
                    &name,
                    *line,
                    format!("dangling edge {a}->{b} (node counts {n_src}, {n_dst})"),
                ));
            }
            Ok((a, b))
        })
        .collect()
}

/// Loads and validates a dataset directory.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<HetGraph> {
    let dir = dir.as_ref();
    let schema_path = require(dir, "schema.json")?;
    let schema: Schema = serde_json::from_str(&read_string(&schema_path)?)
        .map_err(|e| Error::format("schema.json", e.line(), e.to_string()))?;

    let mut features = Vec::with_capacity(schema.node_types.len());
    for t in &schema.node_types {
        let dim = *schema
            .feature_dims
            .get(t)
            .ok_or_else(|| Error::format("schema.json", 0, format!("no feature_dims entry for {t:?}")))?;
        features.push(read_features(&require(dir, &format!("features_{t}.csv"))?, dim)?);
    }
    let count = |t: &str| -> Result<usize> {
        schema
            .node_types
            .iter()
            .position(|x| x == t)
            .map(|k| features[k].nrows())
            .ok_or_else(|| Error::format("schema.json", 0, format!("unknown node type {t:?}")))
    };

    let mut edges = Vec::with_capacity(schema.edge_types.len());
    for et in &schema.edge_types {
        let path = require(dir, &format!("edges_{}.csv", et.name))?;
        edges.push(read_edges(&path, count(&et.src)?, count(&et.dst)?)?);
    }

    let n = count(&schema.target_type)?;
    let hom_edges = read_edges(&require(dir, "hom_edges.csv")?, n, n)?;

    let labels_path = require(dir, "labels.csv")?;
    let rows = read_csv(&labels_path, &["id".into(), "label".into()])?;
    if rows.len() != n {
        return Err(Error::format("labels.csv", rows.len() + 1, format!("expected {n} rows, got {}", rows.len())));
    }
    let mut labels = Vec::with_capacity(n);
    for (r, (line, f)) in rows.iter().enumerate() {
        let id: usize = parse("labels.csv", *line, &f[0])?;
        if id != r {
            return Err(Error::format("labels.csv", *line, format!("ids must be dense from 0, expected {r}")));
        }
        let l: i64 = parse("labels.csv", *line, &f[1])?;
        labels.push(match l {
            -1 => None,
            l if l >= 0 && (l as usize) < schema.num_classes => Some(l as usize),
            l => {
                return Err(Error::format(
                    "labels.csv",
                    *line,
                    format!("label out of range: {l} (num_classes = {})", schema.num_classes),
                ))
            }
        });
    }

    let split_path = require(dir, "split.json")?;
    let split: Split = serde_json::from_str(&read_string(&split_path)?)
        .map_err(|e| Error::format("split.json", e.line(), e.to_string()))?;

    HetGraph::new(GraphParts {
        node_types: schema.node_types,
        target_type: schema.target_type,
        num_classes: schema.num_classes,
        features,
        edge_types: schema.edge_types,
        edges,
        hom_edges,
        labels,
        split,
    })
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn edges_csv(edges: &[(usize, usize)]) -> String {
    let mut s = String::from("src,dst\n");
    for (a, b) in edges {
        writeln!(s, "{a},{b}").unwrap();
    }
    s
}

/// Writes `graph` in the dataset directory format, creating `dir` if needed.
pub fn save_graph(graph: &HetGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let schema = Schema {
        node_types: graph.node_types().to_vec(),
        target_type: graph.target_type().to_owned(),
        edge_types: graph.edge_types().to_vec(),
        num_classes: graph.num_classes(),
        feature_dims: graph
            .node_types()
            .iter()
            .zip(graph.all_features())
            .map(|(t, f)| (t.clone(), f.ncols()))
            .collect(),
    };
    write(dir.join("schema.json"), &(serde_json::to_string_pretty(&schema)? + "\n"))?;

    for (t, f) in graph.node_types().iter().zip(graph.all_features()) {
        let mut s = String::from("id");
        for k in 0..f.ncols() {
            write!(s, ",f{k}").unwrap();
        }
        s.push('\n');
        for (i, row) in f.rows().into_iter().enumerate() {
            write!(s, "{i}").unwrap();
            for x in row {
                // shortest representation that parses back to the same bits
                write!(s, ",{x:?}").unwrap();
            }
            s.push('\n');
        }
        write(dir.join(format!("features_{t}.csv")), &s)?;
    }

    for (k, et) in graph.edge_types().iter().enumerate() {
        write(dir.join(format!("edges_{}.csv", et.name)), &edges_csv(graph.edges(k)))?;
    }
    write(dir.join("hom_edges.csv"), &edges_csv(graph.hom_edges()))?;

    let mut s = String::from("id,label\n");
    for (i, l) in graph.labels().iter().enumerate() {
        writeln!(s, "{i},{}", l.map_or(-1, |l| l as i64)).unwrap();
    }
    write(dir.join("labels.csv"), &s)?;

    write(dir.join("split.json"), &(serde_json::to_string(graph.split())? + "\n"))
}
