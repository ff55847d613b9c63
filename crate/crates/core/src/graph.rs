//! Binary DAG representations shared by every other module.
//!
//! Nodes are 0-based internally. An entry `(i, j)` of an adjacency matrix
//! means the edge `i -> j`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Square binary adjacency matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdjMatrix {
    d: usize,
    bits: Vec<bool>,
}

impl AdjMatrix {
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            bits: vec![false; d * d],
        }
    }

    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(d);
        for &(i, j) in edges {
            if i >= d || j >= d {
                return Err(Error::OutOfRange(format!("edge {i}->{j} on {d} nodes")));
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop on node {i}")));
            }
            a.bits[i * d + j] = true;
        }
        Ok(a)
    }

    /// Sets or clears edge `i -> j`. Panics on a diagonal entry.
    pub fn set_edge(&mut self, i: usize, j: usize, present: bool) {
        assert!(i != j, "self-loop on node {i}");
        self.bits[i * self.d + j] = present;
    }

    /// Builds a matrix from a predicate; the diagonal is always cleared.
    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; d * d];
        for i in 0..d {
            for j in 0..d {
                bits[i * d + j] = i != j && f(i, j);
            }
        }
        Self { d, bits }
    }

    /// Complete DAG in which every lower-indexed node points to every higher one.
    pub fn full_upper(d: usize) -> Self {
        Self::from_fn(d, |i, j| i < j)
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j]
    }

    pub fn n_edges(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let d = self.d;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / d, k % d))
    }

    pub fn parents(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&i| self.has_edge(i, j))
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&j| self.has_edge(i, j))
    }

    /// Column `j` as a 0/1 mask over the node set (the parent indicator of `j`).
    pub fn column_mask(&self, j: usize) -> Vec<f64> {
        (0..self.d)
            .map(|i| if self.has_edge(i, j) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn or(&self, other: &AdjMatrix) -> Result<AdjMatrix> {
        check_dims(self.d, other.d)?;
        Ok(AdjMatrix {
            d: self.d,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    pub fn is_acyclic(&self) -> bool {
        self.kahn().is_some()
    }

    /// Kahn's algorithm, always releasing the smallest ready node first.
    fn kahn(&self) -> Option<Vec<usize>> {
        let d = self.d;
        let mut indeg: Vec<usize> = (0..d).map(|j| self.parents(j).count()).collect();
        let mut ready: BTreeSet<usize> = (0..d).filter(|&j| indeg[j] == 0).collect();
        let mut order = Vec::with_capacity(d);
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            order.push(v);
            for c in self.children(v) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == d).then_some(order)
    }

    pub fn topological_order(&self) -> Result<Permutation> {
        let order = self.kahn().ok_or(Error::Cycle)?;
        Permutation::from_order(order)
    }

    /// Nodes reachable from `i` by a directed path of length at least one.
    pub fn descendants(&self, i: usize) -> Vec<bool> {
        let mut seen = vec![false; self.d];
        let mut stack: Vec<usize> = self.children(i).collect();
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend(self.children(v).filter(|&c| !seen[c]));
            }
        }
        seen
    }

    pub fn has_path(&self, i: usize, j: usize) -> bool {
        self.descendants(i)[j]
    }

    /// Row-major 0/1 string, used by the posterior sample file format.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(d: usize, s: &str) -> Result<Self> {
        if s.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: s.len(),
            });
        }
        let mut bits = Vec::with_capacity(d * d);
        for (k, ch) in s.chars().enumerate() {
            let b = match ch {
                '0' => false,
                '1' => true,
                other => {
                    return Err(Error::InvalidParameter(format!("bad adjacency symbol {other:?}")))
                }
            };
            if b && k / d == k % d {
                return Err(Error::InvalidParameter("nonzero diagonal".into()));
            }
            bits.push(b);
        }
        Ok(Self { d, bits })
    }
}

/// Bijection from nodes to positions: `pos[i]` is the position of node `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    pos: Vec<usize>,
}

impl Permutation {
    pub fn identity(d: usize) -> Self {
        Self {
            pos: (0..d).collect(),
        }
    }

    pub fn from_positions(pos: Vec<usize>) -> Result<Self> {
        let d = pos.len();
        let mut seen = vec![false; d];
        for &p in &pos {
            if p >= d || seen[p] {
                return Err(Error::InvalidParameter(format!("{pos:?} is not a bijection")));
            }
            seen[p] = true;
        }
        Ok(Self { pos })
    }

    /// Builds the permutation from the list of nodes sorted by position.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let d = order.len();
        let mut pos = vec![usize::MAX; d];
        for (k, &node) in order.iter().enumerate() {
            if node >= d || pos[node] != usize::MAX {
                return Err(Error::InvalidParameter(format!(
                    "{order:?} is not a bijection"
                )));
            }
            pos[node] = k;
        }
        Ok(Self { pos })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.pos.len()
    }

    #[inline]
    pub fn position(&self, node: usize) -> usize {
        self.pos[node]
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    /// Nodes listed from first to last position.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.d()];
        for (node, &p) in self.pos.iter().enumerate() {
            order[p] = node;
        }
        order
    }

    /// Dense matrix with entry `(i, j) = 1` iff node `i` sits at position `j`.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let d = self.d();
        (0..d)
            .map(|i| (0..d).map(|j| u8::from(self.pos[i] == j)).collect())
            .collect()
    }

    /// True when every edge of `a` points from an earlier to a later position.
    pub fn is_consistent_with(&self, a: &AdjMatrix) -> bool {
        a.d() == self.d() && a.edges().all(|(i, j)| self.pos[i] < self.pos[j])
    }
}

/// Strictly upper-triangular binary matrix over positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UpperTri {
    d: usize,
    bits: Vec<bool>,
}

impl UpperTri {
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            bits: vec![false; d * d],
        }
    }

    pub fn full(d: usize) -> Self {
        Self::from_fn(d, |_, _| true)
    }

    /// `f` is only consulted for `k < l`.
    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; d * d];
        for k in 0..d {
            for l in (k + 1)..d {
                bits[k * d + l] = f(k, l);
            }
        }
        Self { d, bits }
    }

    pub fn from_entries(d: usize, entries: &[(usize, usize)]) -> Result<Self> {
        let mut u = Self::empty(d);
        for &(k, l) in entries {
            if k >= l || l >= d {
                return Err(Error::InvalidParameter(format!(
                    "({k}, {l}) is not a strict upper-triangular slot for d = {d}"
                )));
            }
            u.bits[k * d + l] = true;
        }
        Ok(u)
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> bool {
        self.bits[k * self.d + l]
    }
}

/// Returns `A` with `A[i][j] = U[pos(i)][pos(j)]`; always acyclic.
pub fn compose(u: &UpperTri, p: &Permutation) -> Result<AdjMatrix> {
    check_dims(u.d(), p.d())?;
    Ok(AdjMatrix::from_fn(u.d(), |i, j| {
        let (pi, pj) = (p.position(i), p.position(j));
        pi < pj && u.get(pi, pj)
    }))
}

/// Mean and variance graphs sharing a topological ordering.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DagPair {
    mean: AdjMatrix,
    variance: AdjMatrix,
    shared_order: Permutation,
}

impl DagPair {
    /// Validates the pair; fails if the union graph has a cycle.
    pub fn new(mean: AdjMatrix, variance: AdjMatrix) -> Result<Self> {
        let shared_order = mean.or(&variance)?.topological_order()?;
        Ok(Self {
            mean,
            variance,
            shared_order,
        })
    }

    pub fn from_shared(u_mean: &UpperTri, u_var: &UpperTri, p: &Permutation) -> Result<Self> {
        Ok(Self {
            mean: compose(u_mean, p)?,
            variance: compose(u_var, p)?,
            shared_order: p.clone(),
        })
    }

    /// A single-graph model where the same parents drive both moments.
    pub fn identical(a: AdjMatrix) -> Result<Self> {
        Self::new(a.clone(), a)
    }

    pub fn d(&self) -> usize {
        self.mean.d()
    }

    pub fn mean(&self) -> &AdjMatrix {
        &self.mean
    }

    pub fn variance(&self) -> &AdjMatrix {
        &self.variance
    }

    pub fn shared_order(&self) -> &Permutation {
        &self.shared_order
    }

    pub fn union(&self) -> AdjMatrix {
        self.mean
            .or(&self.variance)
            .expect("pair members have equal size")
    }

    pub fn slot(&self, slot: GraphSlot) -> AdjMatrix {
        match slot {
            GraphSlot::Mean => self.mean.clone(),
            GraphSlot::Variance => self.variance.clone(),
            GraphSlot::Union => self.union(),
        }
    }
}

/// Which graph of a pair a query or metric refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphSlot {
    Mean,
    Variance,
    Union,
}

impl GraphSlot {
    pub fn name(self) -> &'static str {
        match self {
            GraphSlot::Mean => "mean",
            GraphSlot::Variance => "variance",
            GraphSlot::Union => "union",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GraphSlot::Mean),
            "variance" => Ok(GraphSlot::Variance),
            "union" => Ok(GraphSlot::Union),
            other => Err(Error::InvalidParameter(format!("unknown graph slot {other:?}"))),
        }
    }
}

pub fn union(g: &DagPair) -> AdjMatrix {
    g.union()
}

pub const MAX_ENUMERATION_NODES: usize = 4;

/// All labeled DAGs on `d` nodes, ordered by their off-diagonal bitmask.
pub fn enumerate_dags(d: usize) -> Result<Vec<AdjMatrix>> {
    if d == 0 || d > MAX_ENUMERATION_NODES {
        return Err(Error::OutOfRange(format!(
            "DAG enumeration supports 1..={MAX_ENUMERATION_NODES} nodes, got {d}"
        )));
    }
    let slots: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << slots.len()) {
        let edges: Vec<(usize, usize)> = slots
            .iter()
            .enumerate()
            .filter(|(k, _)| mask & (1 << k) != 0)
            .map(|(_, &e)| e)
            .collect();
        let a = AdjMatrix::from_edges(d, &edges)?;
        if a.is_acyclic() {
            out.push(a);
        }
    }
    Ok(out)
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

// Edge-list text format.

pub fn write_edge_list(names: &[String], a: &AdjMatrix) -> String {
    let mut out = format!("# nodes: {}\n", names.join(","));
    write_edges(&mut out, names, a);
    out
}

fn write_edges(out: &mut String, names: &[String], a: &AdjMatrix) {
    for (i, j) in a.edges() {
        let _ = writeln!(out, "{} -> {}", names[i], names[j]);
    }
}

pub fn write_pair(names: &[String], g: &DagPair) -> String {
    let mut out = format!("# nodes: {}\n[mean]\n", names.join(","));
    write_edges(&mut out, names, g.mean());
    out.push_str("[variance]\n");
    write_edges(&mut out, names, g.variance());
    out
}

fn parse_header(line: &str, lineno: usize) -> Result<Vec<String>> {
    let rest = line
        .strip_prefix("# nodes:")
        .ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `# nodes: <names>` header".into(),
        })?;
    let names: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::Parse {
            line: lineno,
            msg: "empty node name".into(),
        });
    }
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::Parse {
            line: lineno,
            msg: "duplicate node name".into(),
        });
    }
    Ok(names)
}

fn parse_edge_line(line: &str, lineno: usize, names: &[String]) -> Result<(usize, usize)> {
    let (src, dst) = line.split_once("->").ok_or_else(|| Error::Parse {
        line: lineno,
        msg: format!("expected `SRC -> DST`, got {line:?}"),
    })?;
    let lookup = |s: &str| {
        names
            .iter()
            .position(|n| n == s.trim())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("unknown node {:?}", s.trim()),
            })
    };
    Ok((lookup(src)?, lookup(dst)?))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn parse_edge_list(text: &str) -> Result<(Vec<String>, AdjMatrix)> {
    let mut lines = content_lines(text);
    let (n0, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty edge list".into(),
    })?;
    let names = parse_header(first, n0)?;
    let mut edges = Vec::new();
    for (n, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        edges.push(parse_edge_line(line, n, &names)?);
    }
    let a = AdjMatrix::from_edges(names.len(), &edges)?;
    Ok((names, a))
}

pub fn parse_pair(text: &str) -> Result<(Vec<String>, DagPair)> {
    let mut lines = content_lines(text);
    let (n0, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty pair file".into(),
    })?;
    let names = parse_header(first, n0)?;
    let mut mean = Vec::new();
    let mut variance = Vec::new();
    let mut section: Option<GraphSlot> = None;
    for (n, line) in lines {
        match line {
            "[mean]" => section = Some(GraphSlot::Mean),
            "[variance]" => section = Some(GraphSlot::Variance),
            l if l.starts_with('#') => {}
            l => {
                let e = parse_edge_line(l, n, &names)?;
                match section {
                    Some(GraphSlot::Mean) => mean.push(e),
                    Some(GraphSlot::Variance) => variance.push(e),
                    _ => {
                        return Err(Error::Parse {
                            line: n,
                            msg: "edge outside a [mean] or [variance] section".into(),
                        })
                    }
                }
            }
        }
    }
    let d = names.len();
    let pair = DagPair::new(
        AdjMatrix::from_edges(d, &mean)?,
        AdjMatrix::from_edges(d, &variance)?,
    )?;
    Ok((names, pair))
}
