//! Directory dataset format.
//!
//! ```text
//! edges.tsv     src<TAB>dst<TAB>weight     0-based ids, weight optional (1.0)
//! features.csv  id,f_0,...,f_{d-1}
//! labels.csv    id,label                   unlisted nodes are unlabeled
//! train.txt     one training node id per line
//! ```
//!
//! `features.csv` and `labels.csv` may start with a header row. Labels are
//! read as classes when every value is a non-negative integer, and as
//! regression targets otherwise or when the header names the column `target`.
//! Blank lines and lines starting with `#` are ignored everywhere.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataGraph, Labels};

pub const EDGES: &str = "edges.tsv";
pub const FEATURES: &str = "features.csv";
pub const LABELS: &str = "labels.csv";
pub const TRAIN: &str = "train.txt";

/// Counts printed by `load-check`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub nodes: usize,
    pub edges: usize,
    pub train: usize,
    pub classes: usize,
    pub features: usize,
}

impl DatasetSummary {
    pub fn of(graph: &DataGraph) -> Self {
        DatasetSummary {
            nodes: graph.n(),
            edges: graph.undirected_edge_count(),
            train: graph.train_mask().len(),
            classes: if graph.labels.is_classification() {
                graph.labels.output_dim()
            } else {
                0
            },
            features: graph.feature_dim(),
        }
    }
}

/// Published counts of the citation benchmarks, for checking exports.
pub const KNOWN_DATASETS: [(&str, DatasetSummary); 3] = [
    (
        "citeseer",
        DatasetSummary {
            nodes: 2110,
            edges: 3668,
            train: 120,
            classes: 6,
            features: 3703,
        },
    ),
    (
        "cora",
        DatasetSummary {
            nodes: 2810,
            edges: 7981,
            train: 140,
            classes: 7,
            features: 2879,
        },
    ),
    (
        "pubmed",
        DatasetSummary {
            nodes: 19717,
            edges: 44324,
            train: 60,
            classes: 3,
            features: 500,
        },
    ),
];

impl DatasetSummary {
    /// Name of the known benchmark with exactly these counts.
    pub fn identify(&self) -> Option<&'static str> {
        KNOWN_DATASETS.iter().find(|(_, s)| s == self).map(|(n, _)| *n)
    }

    /// Errors unless the counts equal those of the named benchmark.
    pub fn expect(&self, name: &str) -> Result<()> {
        let Some((_, known)) = KNOWN_DATASETS.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)) else {
            let names: Vec<&str> = KNOWN_DATASETS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!("unknown dataset {name:?}; known: {}", names.join(", "))));
        };
        if known != self {
            return Err(Error::Config(format!("{name} should have {known}, found {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "nodes={} edges={} train={} classes={} features={}",
            self.nodes, self.edges, self.train, self.classes, self.features
        )
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `(1-based line number, trimmed content)` of meaningful lines.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Ctx<'a> {
    path: &'a Path,
    line: usize,
}

impl Ctx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn id(&self, field: &str, n: Option<usize>) -> Result<usize> {
        let id: usize = field
            .trim()
            .parse()
            .map_err(|_| self.err(format!("expected a node id, found {field:?}")))?;
        if let Some(n) = n {
            if id >= n {
                return Err(self.err(format!("node id {id} out of range for {n} nodes")));
            }
        }
        Ok(id)
    }

    fn float(&self, field: &str) -> Result<f64> {
        let v: f64 = field
            .trim()
            .parse()
            .map_err(|_| self.err(format!("expected a number, found {field:?}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite value {field:?}")));
        }
        Ok(v)
    }
}

fn is_header(first_field: &str) -> bool {
    first_field.trim().parse::<usize>().is_err()
}

fn parse_features(path: &Path) -> Result<DMatrix<f64>> {
    let text = read(path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (idx, (line, content)) in lines(&text).enumerate() {
        let ctx = Ctx { path, line };
        let fields: Vec<&str> = content.split(',').collect();
        if idx == 0 && is_header(fields[0]) {
            continue;
        }
        let id = ctx.id(fields[0], None)?;
        let values = fields[1..].iter().map(|f| ctx.float(f)).collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(ctx.err(format!("expected {w} feature values, found {}", values.len())))
            }
            _ => {}
        }
        rows.push((id, values));
    }
    let n = rows.len();
    let d = width.unwrap_or(0);
    let mut seen = vec![false; n];
    let mut x = DMatrix::zeros(n, d);
    for (id, values) in rows {
        if id >= n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("node id {id} out of range; ids must be 0..{n} with one row each"),
            });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("node {id} has more than one feature row"),
            });
        }
        for (c, v) in values.into_iter().enumerate() {
            x[(id, c)] = v;
        }
    }
    Ok(x)
}

fn parse_labels(path: &Path, n: usize) -> Result<Labels> {
    let text = read(path)?;
    let mut entries: Vec<(usize, usize, &str)> = Vec::new();
    let mut regression = false;
    for (idx, (line, content)) in lines(&text).enumerate() {
        let ctx = Ctx { path, line };
        let fields: Vec<&str> = content.split(',').collect();
        if idx == 0 && is_header(fields[0]) {
            regression = fields.get(1).is_some_and(|h| h.trim().eq_ignore_ascii_case("target"));
            continue;
        }
        if fields.len() != 2 {
            return Err(ctx.err(format!("expected `id,label`, found {} fields", fields.len())));
        }
        let id = ctx.id(fields[0], Some(n))?;
        let value = fields[1].trim();
        ctx.float(value)?;
        if value.parse::<usize>().is_err() {
            regression = true;
        }
        entries.push((line, id, value));
    }
    let mut seen = vec![false; n];
    for &(line, id, _) in &entries {
        if std::mem::replace(&mut seen[id], true) {
            return Err(Ctx { path, line }.err(format!("node {id} labeled twice")));
        }
    }
    Ok(if regression {
        let mut t = vec![None; n];
        for (_, id, v) in entries {
            t[id] = Some(v.parse().expect("validated above"));
        }
        Labels::Targets(t)
    } else {
        let mut c = vec![None; n];
        for (_, id, v) in entries {
            c[id] = Some(v.parse().expect("validated above"));
        }
        Labels::Classes(c)
    })
}

fn parse_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize, f64)>> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line, content) in lines(&text) {
        let ctx = Ctx { path, line };
        let fields: Vec<&str> = content.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(ctx.err(format!(
                "expected `src<TAB>dst[<TAB>weight]`, found {} fields",
                fields.len()
            )));
        }
        let src = ctx.id(fields[0], Some(n))?;
        let dst = ctx.id(fields[1], Some(n))?;
        let w = match fields.get(2) {
            Some(f) => ctx.float(f)?,
            None => 1.0,
        };
        if w < 0.0 {
            return Err(ctx.err(format!("negative edge weight {w}")));
        }
        edges.push((src, dst, w));
    }
    Ok(edges)
}

fn parse_train(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = read(path)?;
    lines(&text)
        .map(|(line, content)| Ctx { path, line }.id(content, Some(n)))
        .collect()
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing {name}")),
        ));
    }
    Ok(path)
}

/// Reads a dataset directory into a validated graph (no shift attached yet).
pub fn load_dataset(dir: &Path) -> Result<DataGraph> {
    let features = parse_features(&require(dir, FEATURES)?)?;
    let n = features.nrows();
    let labels = parse_labels(&require(dir, LABELS)?, n)?;
    let edges = parse_edges(&require(dir, EDGES)?, n)?;
    let train = parse_train(&require(dir, TRAIN)?, n)?;
    DataGraph::new(n, &edges, features, labels, train)
}

/// Writes `graph` in the directory format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_dataset(graph: &DataGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for (i, j, w) in graph.directed_edges() {
        if i <= j {
            writeln!(edges, "{i}\t{j}\t{w:?}").unwrap();
        }
    }
    let mut features = String::from("id");
    for c in 0..graph.feature_dim() {
        write!(features, ",f{c}").unwrap();
    }
    features.push('\n');
    for (i, row) in graph.features.row_iter().enumerate() {
        write!(features, "{i}").unwrap();
        for v in row.iter() {
            write!(features, ",{v:?}").unwrap();
        }
        features.push('\n');
    }
    let mut labels = String::new();
    match &graph.labels {
        Labels::Classes(c) => {
            labels.push_str("id,label\n");
            for (i, y) in c.iter().enumerate() {
                if let Some(y) = y {
                    writeln!(labels, "{i},{y}").unwrap();
                }
            }
        }
        Labels::Targets(t) => {
            labels.push_str("id,target\n");
            for (i, y) in t.iter().enumerate() {
                if let Some(y) = y {
                    writeln!(labels, "{i},{y:?}").unwrap();
                }
            }
        }
    }
    let train: String = graph.train_mask().iter().map(|i| format!("{i}\n")).collect();
    for (name, body) in [(EDGES, edges), (FEATURES, features), (LABELS, labels), (TRAIN, train)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
