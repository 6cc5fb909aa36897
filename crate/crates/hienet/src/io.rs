//! File formats: code lists, tree JSON, JSONL datasets, CSV matrices and
//! edge lists, prediction and metric tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hienet_core::graph::CoocGraph;
use hienet_core::metrics::EvalResult;
use hienet_core::progressive::PmTrace;
use hienet_core::synth::{LabeledDoc, Planted};
use hienet_core::tensor::Tensor;
use hienet_core::trainer::EpochLog;
use hienet_core::tree::CodeTree;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, parse_err, Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

// ---- code lists ----

/// TAB-separated `code<TAB>description` lines.
pub fn parse_codes(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (code, desc) = line.split_once('\t').unwrap_or((line, ""));
        let code = code.trim();
        if code.is_empty() {
            return Err(parse_err(origin, i + 1, "empty code"));
        }
        out.push((code.to_string(), desc.trim().to_string()));
    }
    Ok(out)
}

pub fn read_codes(path: &Path) -> Result<Vec<(String, String)>> {
    parse_codes(&read_text(path)?, path)
}

pub fn format_codes(codes: &[(String, String)]) -> String {
    codes.iter().map(|(c, d)| format!("{c}\t{d}\n")).collect()
}

// ---- tree JSON ----

#[derive(Debug, Serialize, Deserialize)]
struct NodeJson {
    code: String,
    description: String,
    depth: usize,
    child_index: usize,
    children: Vec<NodeJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeJson {
    max_branching: usize,
    max_depth: usize,
    children: Vec<NodeJson>,
}

fn node_json(tree: &CodeTree, idx: usize) -> NodeJson {
    let n = tree.node(idx);
    NodeJson {
        code: n.id.as_str().to_string(),
        description: n.description.join(" "),
        depth: n.depth,
        child_index: n.child_index,
        children: n.children.iter().map(|&c| node_json(tree, c)).collect(),
    }
}

pub fn tree_to_json(tree: &CodeTree) -> Result<String> {
    let root = tree.node(tree.root());
    let t = TreeJson {
        max_branching: tree.max_branching(),
        max_depth: tree.max_depth(),
        children: root.children.iter().map(|&c| node_json(tree, c)).collect(),
    };
    Ok(serde_json::to_string_pretty(&t)? + "\n")
}

fn flatten(nodes: &[NodeJson], depth: usize, out: &mut Vec<(String, String, usize, usize)>) {
    for n in nodes {
        out.push((n.code.clone(), n.description.clone(), n.depth, n.child_index));
        flatten(&n.children, depth + 1, out);
    }
}

/// Rebuilds the tree and checks the recorded depths and child indices.
pub fn tree_from_json(text: &str) -> Result<CodeTree> {
    let t: TreeJson = serde_json::from_str(text)?;
    let mut flat = Vec::new();
    flatten(&t.children, 1, &mut flat);
    let recs: Vec<(String, String)> = flat.iter().map(|(c, d, _, _)| (c.clone(), d.clone())).collect();
    let tree = CodeTree::build(&recs)?;
    for (code, _, depth, ci) in &flat {
        let n = tree.node(tree.index_of(code)?);
        if n.depth != *depth || n.child_index != *ci {
            return Err(Error::Config(format!("tree record for `{code}` disagrees with the prefix rule")));
        }
    }
    Ok(tree)
}

pub fn read_tree(path: &Path) -> Result<CodeTree> {
    tree_from_json(&read_text(path)?).map_err(|e| match e {
        Error::Json(j) => parse_err(path, j.line(), j.to_string()),
        e => e,
    })
}

pub fn write_tree(path: &Path, tree: &CodeTree) -> Result<()> {
    write_text(path, &tree_to_json(tree)?)
}

// ---- datasets ----

#[derive(Debug, Serialize, Deserialize)]
struct DocJson {
    doc_id: Value,
    tokens: Vec<usize>,
    labels: Vec<String>,
}

pub fn parse_dataset(text: &str, origin: &Path) -> Result<Vec<LabeledDoc>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: DocJson = serde_json::from_str(line).map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
        let doc_id = match d.doc_id {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            other => return Err(parse_err(origin, i + 1, format!("doc_id must be a string or number, got {other}"))),
        };
        out.push(LabeledDoc {
            doc_id,
            tokens: d.tokens,
            labels: d.labels,
        });
    }
    Ok(out)
}

pub fn format_dataset(docs: &[LabeledDoc]) -> Result<String> {
    let mut s = String::new();
    for d in docs {
        let j = DocJson {
            doc_id: Value::String(d.doc_id.clone()),
            tokens: d.tokens.clone(),
            labels: d.labels.clone(),
        };
        s.push_str(&serde_json::to_string(&j)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledDoc>> {
    parse_dataset(&read_text(path)?, path)
}

pub fn write_dataset(path: &Path, docs: &[LabeledDoc]) -> Result<()> {
    write_text(path, &format_dataset(docs)?)
}

#[derive(Debug, Serialize)]
struct PlantedJson<'a> {
    cliques: &'a [Vec<String>],
    signatures: &'a std::collections::BTreeMap<String, Vec<usize>>,
    extra_edges: Vec<(&'a str, &'a str)>,
    noise_start: usize,
}

pub fn planted_to_json(p: &Planted) -> Result<String> {
    let j = PlantedJson {
        cliques: &p.cliques,
        signatures: &p.signatures,
        extra_edges: p.extra_edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect(),
        noise_start: p.noise_start,
    };
    Ok(serde_json::to_string_pretty(&j)? + "\n")
}

// ---- CSV ----

fn csv_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn num<T: std::str::FromStr>(s: &str, origin: &Path, line: usize) -> Result<T> {
    s.parse().map_err(|_| parse_err(origin, line, format!("bad number `{s}`")))
}

/// `i,j,weight` lines with a header.
pub fn format_edges(g: &CoocGraph) -> String {
    let mut s = String::from("i,j,weight\n");
    for (i, j, w) in g.edges() {
        let _ = writeln!(s, "{i},{j},{w}");
    }
    s
}

pub fn parse_edges(text: &str, origin: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('i')) {
            continue;
        }
        let f = csv_fields(line);
        if f.len() != 3 {
            return Err(parse_err(origin, i + 1, "expected i,j,weight"));
        }
        out.push((num(f[0], origin, i + 1)?, num(f[1], origin, i + 1)?, num(f[2], origin, i + 1)?));
    }
    Ok(out)
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    parse_edges(&read_text(path)?, path)
}

/// Headerless rows of numbers.
pub fn format_matrix(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(ToString::to_string).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str, origin: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = csv_fields(line).into_iter().map(|f| num(f, origin, i + 1)).collect::<Result<Vec<f64>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(parse_err(origin, i + 1, "ragged row"));
        }
        rows.push(row);
    }
    Ok(Tensor::from_rows(&rows)?)
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    parse_matrix(&read_text(path)?, path)
}

/// `code,depth,v0..` for every code; `rows` are label rows.
pub fn format_code_rows(tree: &CodeTree, rows: &Tensor, with_depth: bool) -> String {
    let mut s = String::from("code");
    if with_depth {
        s.push_str(",depth");
    }
    for c in 0..rows.cols() {
        let _ = write!(s, ",v{c}");
    }
    s.push('\n');
    for l in 0..rows.rows() {
        s.push_str(tree.label_code(l).as_str());
        if with_depth {
            let _ = write!(s, ",{}", tree.node(l + 1).depth);
        }
        for v in rows.row(l) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

// ---- predictions and metrics ----

#[derive(Debug, Serialize)]
struct Ranked<'a> {
    code: &'a str,
    prob: f64,
    rank: usize,
}

#[derive(Debug, Serialize)]
struct StepJson<'a> {
    round: usize,
    code: &'a str,
    prob: f64,
    correct: Option<bool>,
    affected: Vec<&'a str>,
}

pub fn trace_json(tree: &CodeTree, trace: &PmTrace) -> Value {
    let steps: Vec<StepJson> = trace
        .steps
        .iter()
        .map(|s| StepJson {
            round: s.round,
            code: tree.label_code(s.code).as_str(),
            prob: s.prob,
            correct: s.correct,
            affected: s.affected.iter().map(|&a| tree.label_code(a).as_str()).collect(),
        })
        .collect();
    serde_json::to_value(steps).unwrap_or(Value::Null)
}

/// One JSON line per document, codes sorted by rank (1 = best). `top`
/// limits the listed codes.
pub fn format_predictions(
    tree: &CodeTree,
    doc_ids: &[String],
    probs: &[Vec<f64>],
    traces: Option<&[Option<PmTrace>]>,
    top: Option<usize>,
) -> Result<String> {
    let mut s = String::new();
    for (d, (id, p)) in doc_ids.iter().zip(probs).enumerate() {
        let order = hienet_core::metrics::top_k(p, top.unwrap_or(p.len()));
        let ranked: Vec<Ranked> = order
            .iter()
            .enumerate()
            .map(|(r, &l)| Ranked {
                code: tree.label_code(l).as_str(),
                prob: p[l],
                rank: r + 1,
            })
            .collect();
        let mut obj = serde_json::json!({ "doc_id": id, "predictions": ranked });
        if let Some(tr) = traces.and_then(|t| t[d].as_ref()) {
            obj["trace"] = trace_json(tree, tr);
        }
        s.push_str(&serde_json::to_string(&obj)?);
        s.push('\n');
    }
    Ok(s)
}

/// Metric columns in the order of the results tables.
pub fn metric_header(r: &EvalResult) -> String {
    let mut h = String::from("jaccard_top20,jaccard_top30,macro_auc,micro_auc,macro_f1,micro_f1");
    for (n, _) in &r.p_at_n {
        let _ = write!(h, ",p_at_{n}");
    }
    h.push_str(",jaccard_skipped");
    h
}

pub fn metric_values(r: &EvalResult) -> String {
    let mut s = format!(
        "{},{},{},{},{},{}",
        r.jaccard_top20, r.jaccard_top30, r.macro_auc, r.micro_auc, r.macro_f1, r.micro_f1
    );
    for (_, v) in &r.p_at_n {
        let _ = write!(s, ",{v}");
    }
    let _ = write!(s, ",{}", r.jaccard_skipped);
    s
}

/// A table whose first column is `key` and whose rows are labelled results.
pub fn format_metric_table<K: std::fmt::Display>(key: &str, rows: &[(K, EvalResult)]) -> String {
    let Some((_, first)) = rows.first() else {
        return format!("{key}\n");
    };
    let mut s = format!("{key},{}\n", metric_header(first));
    for (k, r) in rows {
        let _ = writeln!(s, "{k},{}", metric_values(r));
    }
    s
}

pub fn format_epoch_log(log: &[EpochLog]) -> String {
    let Some(first) = log.first() else {
        return String::from("epoch,train_loss,improved\n");
    };
    let mut s = format!("epoch,train_loss,{},improved\n", metric_header(&first.val));
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, metric_values(&e.val), e.improved);
    }
    s
}
