//! Shared-attribute transaction graph.
//!
//! Rows that agree on a rule's complete, fully-non-missing key tuple form
//! a group; small groups become cliques, medium groups a nearest-in-time
//! kNN chain, huge groups nothing (a shared value that common carries no
//! signal). The result is canonicalized, optionally component-pruned, and
//! stored symmetric in CSR form.

use crate::error::{Error, Result};
use crate::ingest::{ColumnData, RawTable};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

fn default_max_group_size() -> usize {
    100
}
fn default_clique_max() -> usize {
    10
}
fn default_time_knn() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeKeyRule {
    pub name: String,
    pub key_columns: Vec<String>,
    #[serde(default = "default_max_group_size")]
    pub max_group_size: usize,
    #[serde(default = "default_clique_max")]
    pub clique_max: usize,
    #[serde(default = "default_time_knn")]
    pub time_knn: usize,
}

impl EdgeKeyRule {
    pub fn new(name: &str, key_columns: &[&str]) -> Self {
        EdgeKeyRule {
            name: name.to_string(),
            key_columns: key_columns.iter().map(|s| s.to_string()).collect(),
            max_group_size: default_max_group_size(),
            clique_max: default_clique_max(),
            time_knn: default_time_knn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_columns.is_empty() {
            return Err(Error::ConfigError(format!(
                "edge rule {:?} has no key columns",
                self.name
            )));
        }
        if self.clique_max > self.max_group_size {
            return Err(Error::ConfigError(format!(
                "edge rule {:?}: clique_max {} exceeds max_group_size {}",
                self.name, self.clique_max, self.max_group_size
            )));
        }
        Ok(())
    }
}

/// The four shared-attribute families: card, address, device, email.
pub fn default_rules() -> Vec<EdgeKeyRule> {
    vec![
        EdgeKeyRule::new(
            "shared_card",
            &["card1", "card2", "card3", "card4", "card5", "card6"],
        ),
        EdgeKeyRule::new("shared_address", &["addr1", "addr2"]),
        EdgeKeyRule::new("shared_device", &["DeviceInfo"]),
        EdgeKeyRule::new("shared_email", &["P_emaildomain"]),
    ]
}

/// Symmetric adjacency in CSR form; `edge_count()` counts directed
/// entries (twice the undirected edge count).
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionGraph {
    pub n_nodes: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl TransactionGraph {
    pub fn edge_count(&self) -> usize {
        self.col_idx.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Enforce every structural invariant; called on every construction
    /// and load.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if self.row_ptr.len() != n + 1 || self.row_ptr[0] != 0 {
            return Err(Error::SchemaViolation(format!(
                "row_ptr must have {} entries starting at 0",
                n + 1
            )));
        }
        if self.row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::SchemaViolation("row_ptr not nondecreasing".into()));
        }
        if self.row_ptr[n] != self.col_idx.len() {
            return Err(Error::SchemaViolation(format!(
                "row_ptr[n] = {} but col_idx has {} entries",
                self.row_ptr[n],
                self.col_idx.len()
            )));
        }
        for i in 0..n {
            let row = self.neighbors(i);
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::SchemaViolation(format!(
                        "row {i} not strictly ascending"
                    )));
                }
            }
            for &j in row {
                if j >= n {
                    return Err(Error::IndexError {
                        what: "col_idx entry",
                        index: j,
                        bound: n,
                    });
                }
                if j == i {
                    return Err(Error::SchemaViolation(format!("self-loop at node {i}")));
                }
                if self.neighbors(j).binary_search(&i).is_err() {
                    return Err(Error::SchemaViolation(format!(
                        "asymmetric edge {i} -> {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of connected components (isolated nodes count as their own).
    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.n_nodes);
        for i in 0..self.n_nodes {
            for &j in self.neighbors(i) {
                uf.union(i, j);
            }
        }
        (0..self.n_nodes).filter(|&i| uf.find(i) == i).count()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Canonical text for one key cell; `None` excludes the row from the rule.
/// Numerics key on their exact bit pattern, not a formatted rounding.
fn key_part(data: &ColumnData, row: usize) -> Option<String> {
    match data {
        ColumnData::Categorical(v) => v[row].clone(),
        ColumnData::Numeric(v) | ColumnData::Time(v) => {
            v[row].map(|x| format!("{:016x}", x.to_bits()))
        }
        ColumnData::Identifier(v) => Some(v[row].to_string()),
        ColumnData::Label(v) => v[row].map(|x| x.to_string()),
    }
}

/// Raw undirected edges over all rules; duplicates and orientation are
/// cleaned up by [`dedup_canonicalize`].
pub fn build_edges(table: &RawTable, rules: &[EdgeKeyRule]) -> Result<Vec<(usize, usize)>> {
    let times: Vec<f64> = match table.times() {
        Some(t) => t.iter().map(|c| c.unwrap_or(0.0)).collect(),
        None => vec![0.0; table.n_rows],
    };
    let ids = table.ids();
    let mut edges = Vec::new();
    for rule in rules {
        rule.validate()?;
        let mut key_cols = Vec::with_capacity(rule.key_columns.len());
        for name in &rule.key_columns {
            let (_, data) = table.column(name).ok_or_else(|| {
                Error::ConfigError(format!(
                    "edge rule {:?} references unknown column {:?}",
                    rule.name, name
                ))
            })?;
            key_cols.push(data);
        }
        // BTreeMap: deterministic group order independent of row order.
        let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        'rows: for row in 0..table.n_rows {
            let mut key = Vec::with_capacity(key_cols.len());
            for col in &key_cols {
                match key_part(col, row) {
                    Some(part) => key.push(part),
                    None => continue 'rows,
                }
            }
            groups.entry(key).or_default().push(row);
        }
        for members in groups.values() {
            let size = members.len();
            if size < 2 || size > rule.max_group_size {
                continue;
            }
            if size <= rule.clique_max {
                for (a, &i) in members.iter().enumerate() {
                    for &j in &members[a + 1..] {
                        edges.push((i, j));
                    }
                }
            } else {
                // Medium group: each member connects to its time_knn
                // nearest fellow members in time, ties by identifier.
                for &i in members {
                    let mut others: Vec<usize> =
                        members.iter().copied().filter(|&j| j != i).collect();
                    others.sort_by(|&a, &b| {
                        let da = (times[a] - times[i]).abs();
                        let db = (times[b] - times[i]).abs();
                        da.total_cmp(&db).then(ids[a].cmp(&ids[b]))
                    });
                    for &j in others.iter().take(rule.time_knn) {
                        edges.push((i, j));
                    }
                }
            }
        }
    }
    Ok(edges)
}

/// Self-loops dropped, each pair once as (min, max), sorted.
pub fn dedup_canonicalize(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut canon: Vec<(usize, usize)> = edges
        .iter()
        .filter(|&&(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    canon.sort_unstable();
    canon.dedup();
    canon
}

/// Remove all edges inside connected components smaller than
/// `min_component_size`. Nodes are never removed; the default size 1
/// disables pruning entirely.
pub fn prune_components(
    edges: &[(usize, usize)],
    n_nodes: usize,
    min_component_size: usize,
) -> Vec<(usize, usize)> {
    if min_component_size <= 1 {
        return edges.to_vec();
    }
    let mut uf = UnionFind::new(n_nodes);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    edges
        .iter()
        .copied()
        .filter(|&(a, _)| {
            let root = uf.find(a);
            uf.size[root] >= min_component_size
        })
        .collect()
}

/// Materialize both directions as CSR with sorted rows.
pub fn to_csr(edges: &[(usize, usize)], n_nodes: usize) -> Result<TransactionGraph> {
    for &(a, b) in edges {
        for e in [a, b] {
            if e >= n_nodes {
                return Err(Error::IndexError {
                    what: "edge endpoint",
                    index: e,
                    bound: n_nodes,
                });
            }
        }
    }
    let mut degree = vec![0usize; n_nodes];
    for &(a, b) in edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut row_ptr = vec![0usize; n_nodes + 1];
    for i in 0..n_nodes {
        row_ptr[i + 1] = row_ptr[i] + degree[i];
    }
    let mut col_idx = vec![0usize; row_ptr[n_nodes]];
    let mut cursor = row_ptr.clone();
    for &(a, b) in edges {
        col_idx[cursor[a]] = b;
        cursor[a] += 1;
        col_idx[cursor[b]] = a;
        cursor[b] += 1;
    }
    for i in 0..n_nodes {
        col_idx[row_ptr[i]..row_ptr[i + 1]].sort_unstable();
    }
    Ok(TransactionGraph {
        n_nodes,
        row_ptr,
        col_idx,
    })
}

/// Full pipeline: group -> canonicalize -> prune -> CSR, with invariants
/// checked before returning.
pub fn build_graph(
    table: &RawTable,
    rules: &[EdgeKeyRule],
    min_component_size: usize,
) -> Result<TransactionGraph> {
    let raw = build_edges(table, rules)?;
    let canon = dedup_canonicalize(&raw);
    let pruned = prune_components(&canon, table.n_rows, min_component_size);
    let graph = to_csr(&pruned, table.n_rows)?;
    graph.validate()?;
    Ok(graph)
}

/// Keep only edges whose two endpoints are both marked; preserves node
/// count and symmetry. Used for strict-time training passes.
pub fn restrict_to(graph: &TransactionGraph, keep: &[bool]) -> TransactionGraph {
    assert_eq!(keep.len(), graph.n_nodes);
    let mut edges = Vec::new();
    for i in 0..graph.n_nodes {
        if !keep[i] {
            continue;
        }
        for &j in graph.neighbors(i) {
            if j > i && keep[j] {
                edges.push((i, j));
            }
        }
    }
    to_csr(&edges, graph.n_nodes).expect("endpoints already validated")
}

const GRAPH_MAGIC: &[u8; 6] = b"RGCSR1";

/// Binary CSR dump: magic, then n_nodes, edge_count, row_ptr, col_idx as
/// little-endian u64.
pub fn save_graph(path: &Path, graph: &TransactionGraph) -> Result<()> {
    let mut buf = Vec::with_capacity(
        6 + 16 + 8 * (graph.row_ptr.len() + graph.col_idx.len()),
    );
    buf.extend_from_slice(GRAPH_MAGIC);
    buf.extend_from_slice(&(graph.n_nodes as u64).to_le_bytes());
    buf.extend_from_slice(&(graph.edge_count() as u64).to_le_bytes());
    for &v in &graph.row_ptr {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &v in &graph.col_idx {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<TransactionGraph> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    let take = |offset: &mut usize, n: usize| -> Result<&[u8]> {
        let end = *offset + n;
        if end > bytes.len() {
            return Err(Error::format(path, "truncated graph file"));
        }
        let s = &bytes[*offset..end];
        *offset = end;
        Ok(s)
    };
    if take(&mut offset, 6)? != GRAPH_MAGIC {
        return Err(Error::format(path, "bad magic; not a graph dump"));
    }
    let read_u64 = |offset: &mut usize| -> Result<u64> {
        let s = take(offset, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };
    let n_nodes = read_u64(&mut offset)? as usize;
    let edge_count = read_u64(&mut offset)? as usize;
    let mut row_ptr = Vec::with_capacity(n_nodes + 1);
    for _ in 0..n_nodes + 1 {
        row_ptr.push(read_u64(&mut offset)? as usize);
    }
    let mut col_idx = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        col_idx.push(read_u64(&mut offset)? as usize);
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after graph data"));
    }
    let graph = TransactionGraph {
        n_nodes,
        row_ptr,
        col_idx,
    };
    graph
        .validate()
        .map_err(|e| Error::format(path, format!("invalid graph: {e}")))?;
    Ok(graph)
}

/// Human-readable summary: sizes, degree histogram, components.
pub fn graph_summary(graph: &TransactionGraph) -> String {
    use std::fmt::Write as _;
    let n = graph.n_nodes;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        *hist.entry(graph.degree(i)).or_insert(0) += 1;
    }
    let isolated = hist.get(&0).copied().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "nodes: {n}");
    let _ = writeln!(out, "undirected edges: {}", graph.edge_count() / 2);
    let _ = writeln!(out, "components: {}", graph.component_count());
    let _ = writeln!(out, "isolated nodes: {isolated}");
    let _ = writeln!(out, "degree histogram:");
    for (deg, count) in &hist {
        let _ = writeln!(out, "  {deg}: {count}");
    }
    out
}
