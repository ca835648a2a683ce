//! Random-graph generators for the autoencoding experiments.
//!
//! Graphs are plain symmetric 0/1 adjacency matrices with no
//! self-loops. Datasets serialize as JSON lines, one adjacency (list
//! of rows) per line.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use std::io::{BufRead, Write};
use std::path::Path;

/// An undirected graph as a flat row-major 0/1 adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainGraph {
    m: usize,
    adj: Vec<u8>,
}

impl PlainGraph {
    pub fn from_adjacency(rows: Vec<Vec<u8>>) -> Result<Self> {
        let m = rows.len();
        let mut adj = Vec::with_capacity(m * m);
        for row in &rows {
            if row.len() != m {
                return Err(Error::contract("adjacency matrix must be square"));
            }
            adj.extend_from_slice(row);
        }
        let g = Self { m, adj };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(m: usize) -> Self {
        Self {
            m,
            adj: vec![0; m * m],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.m
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.m + j] == 1
    }

    pub fn set_edge(&mut self, i: usize, j: usize) {
        debug_assert_ne!(i, j);
        self.adj[i * self.m + j] = 1;
        self.adj[j * self.m + i] = 1;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.m).filter(|&j| self.has_edge(i, j)).count()
    }

    pub fn num_undirected_edges(&self) -> usize {
        let ones: usize = self.adj.iter().map(|&v| v as usize).sum();
        ones / 2
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        (0..self.m)
            .map(|i| self.adj[i * self.m..(i + 1) * self.m].to_vec())
            .collect()
    }

    /// Row-major flattened adjacency as floats (targets for decoding).
    pub fn flat_f64(&self) -> Vec<f64> {
        self.adj.iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.m {
            if self.adj[i * self.m + i] != 0 {
                return Err(Error::Contract(format!("self-loop at node {i}")));
            }
            for j in 0..self.m {
                let v = self.adj[i * self.m + j];
                if v > 1 {
                    return Err(Error::contract("adjacency entries must be 0/1"));
                }
                if v != self.adj[j * self.m + i] {
                    return Err(Error::Contract(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drop isolated nodes, shrinking the graph.
    pub fn without_isolated_nodes(&self) -> Self {
        let keep: Vec<usize> = (0..self.m).filter(|&i| self.degree(i) > 0).collect();
        let mut out = PlainGraph::empty(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                if a < b && self.has_edge(i, j) {
                    out.set_edge(a, b);
                }
            }
        }
        out
    }
}

/// Erdős–Rényi graphs: node count uniform over `m_range` (inclusive),
/// each undirected edge present independently with probability `p_e`,
/// isolated nodes removed afterwards.
pub fn erdos_renyi(
    m_range: (usize, usize),
    p_e: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<PlainGraph>> {
    if !(0.0..=1.0).contains(&p_e) {
        return Err(Error::contract("edge probability must lie in [0, 1]"));
    }
    if m_range.0 > m_range.1 {
        return Err(Error::contract("empty node-count range"));
    }
    let mut rng = substream(seed, "erdos-renyi");
    let mut graphs = Vec::with_capacity(count);
    for _ in 0..count {
        let m = rng.gen_range(m_range.0..=m_range.1);
        let mut g = PlainGraph::empty(m);
        for i in 0..m {
            for j in i + 1..m {
                if rng.gen_bool(p_e) {
                    g.set_edge(i, j);
                }
            }
        }
        graphs.push(g.without_isolated_nodes());
    }
    Ok(graphs)
}

/// The M-cycle: edges (i, i+1 mod M).
pub fn cycle_graph(m: usize) -> Result<PlainGraph> {
    if m < 3 {
        return Err(Error::contract("cycle graph needs at least 3 nodes"));
    }
    let mut g = PlainGraph::empty(m);
    for i in 0..m {
        g.set_edge(i, (i + 1) % m);
    }
    Ok(g)
}

/// Two-community graph: half the nodes per block, within-block edges
/// with probability `p_in`, cross-block with `p_out`.
pub fn two_block(m: usize, p_in: f64, p_out: f64, seed: u64) -> Result<PlainGraph> {
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::contract("need 0 <= p_out <= p_in <= 1"));
    }
    let mut rng = substream(seed, "two-block");
    let half = m / 2;
    let mut g = PlainGraph::empty(m);
    for i in 0..m {
        for j in i + 1..m {
            let same_block = (i < half) == (j < half);
            let p = if same_block { p_in } else { p_out };
            if rng.gen_bool(p) {
                g.set_edge(i, j);
            }
        }
    }
    Ok(g)
}

pub fn write_dataset(graphs: &[PlainGraph], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for g in graphs {
        serde_json::to_writer(&mut w, &g.adjacency_rows())?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PlainGraph>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut graphs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rows: Vec<Vec<u8>> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record: idx,
            msg: e.to_string(),
        })?;
        graphs.push(PlainGraph::from_adjacency(rows).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            record: idx,
            msg: e.to_string(),
        })?);
    }
    Ok(graphs)
}
