//! Communication graphs and time-varying topologies.
//!
//! Vertices are robots indexed `0..n`. A directed edge `(i, j)` means robot
//! `i` can send to robot `j`; an undirected edge carries messages both ways
//! and is stored once with `i < j`. Neighbor lists are always sorted in
//! ascending index so that every reduction over neighbors runs in the same
//! order on every call.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mix::{unit_uniform, Fingerprint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directedness {
    Undirected,
    Directed,
}

impl fmt::Display for Directedness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directedness::Undirected => f.write_str("undirected"),
            Directedness::Directed => f.write_str("directed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    directedness: Directedness,
    edges: BTreeSet<(usize, usize)>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new<I>(n: usize, directedness: Directedness, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n == 0 {
            return Err(Error::InvalidParameter("graph needs at least one vertex".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) has an endpoint outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop at vertex {i}")));
            }
            match directedness {
                Directedness::Directed => set.insert((i, j)),
                Directedness::Undirected => set.insert((i.min(j), i.max(j))),
            };
        }
        Ok(Self::from_set(n, directedness, set))
    }

    fn from_set(n: usize, directedness: Directedness, edges: BTreeSet<(usize, usize)>) -> Self {
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(i, j) in &edges {
            out_adj[i].push(j);
            in_adj[j].push(i);
            if directedness == Directedness::Undirected {
                out_adj[j].push(i);
                in_adj[i].push(j);
            }
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
        }
        Self {
            n,
            directedness,
            edges,
            out_adj,
            in_adj,
        }
    }

    pub fn empty(n: usize, directedness: Directedness) -> Result<Self> {
        Self::new(n, directedness, std::iter::empty())
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(
            n,
            Directedness::Undirected,
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))),
        )
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, Directedness::Undirected, (1..n).map(|i| (i - 1, i)))
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges = if n < 3 {
            (1..n).map(|i| (i - 1, i)).collect::<Vec<_>>()
        } else {
            (0..n).map(|i| (i, (i + 1) % n)).collect()
        };
        Self::new(n, Directedness::Undirected, edges)
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn directedness(&self) -> Directedness {
        self.directedness
    }

    pub fn is_directed(&self) -> bool {
        self.directedness == Directedness::Directed
    }

    /// Stored edges; undirected edges appear once as `(min, max)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Every sender/receiver pair, i.e. undirected edges expanded both ways.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_adj
            .iter()
            .enumerate()
            .flat_map(|(i, outs)| outs.iter().map(move |&j| (i, j)))
    }

    pub fn arc_count(&self) -> usize {
        self.out_adj.iter().map(Vec::len).sum()
    }

    /// Can `i` send to `j`?
    pub fn has_arc(&self, i: usize, j: usize) -> bool {
        self.out_adj.get(i).is_some_and(|o| o.binary_search(&j).is_ok())
    }

    /// Neighbors of `i` in an undirected graph; in-neighbors for directed ones.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    /// Vertices that can send to `i`.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    /// Vertices `i` can send to.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_adj[i]
    }

    /// The same vertex set with every edge made bidirectional.
    pub fn underlying_undirected(&self) -> Graph {
        let set = self.edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        Graph::from_set(self.n, Directedness::Undirected, set)
    }

    /// Keeps only arcs that exist in both directions, as an undirected graph.
    pub fn mutual_subgraph(&self) -> Graph {
        if !self.is_directed() {
            return self.clone();
        }
        let set = self
            .edges
            .iter()
            .filter(|&&(i, j)| i < j && self.edges.contains(&(j, i)))
            .copied()
            .collect();
        Graph::from_set(self.n, Directedness::Undirected, set)
    }

    /// Edge union of graphs over the same vertex set. The result is directed
    /// if any input is.
    pub fn union<'a, I>(graphs: I) -> Result<Graph>
    where
        I: IntoIterator<Item = &'a Graph>,
    {
        let mut iter = graphs.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Contract("union of zero graphs".into()))?;
        let n = first.n;
        let parts: Vec<&Graph> = iter.collect();
        if parts.iter().any(|g| g.n != n) {
            return Err(Error::Contract("union over differing vertex sets".into()));
        }
        let directedness = if parts.iter().any(|g| g.is_directed()) {
            Directedness::Directed
        } else {
            Directedness::Undirected
        };
        let arcs: Vec<(usize, usize)> = match directedness {
            Directedness::Undirected => parts.iter().flat_map(|g| g.edges()).collect(),
            Directedness::Directed => parts.iter().flat_map(|g| g.arcs()).collect(),
        };
        Graph::new(n, directedness, arcs)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new(0x0067_7261_7068);
        fp.word(self.n as u64).word(self.is_directed() as u64);
        for &(i, j) in &self.edges {
            fp.word(i as u64).word(j as u64);
        }
        fp.finish()
    }

    fn reachable_from(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            let next = if forward { &self.out_adj[v] } else { &self.in_adj[v] };
            for &w in next {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Connected for undirected graphs, strongly connected for directed ones.
    pub fn is_fully_connected(&self) -> bool {
        self.reachable_from(0, true).iter().all(|&s| s)
            && (!self.is_directed() || self.reachable_from(0, false).iter().all(|&s| s))
    }

    /// Connected components of the underlying undirected graph, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let und = self.underlying_undirected();
        let mut assigned = vec![false; self.n];
        let mut out = Vec::new();
        for v in 0..self.n {
            if assigned[v] {
                continue;
            }
            let seen = und.reachable_from(v, true);
            let comp: Vec<usize> = (0..self.n).filter(|&w| seen[w]).collect();
            for &w in &comp {
                assigned[w] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Serializes to the edge-list text format: a header line
    /// `n <count> <directed|undirected>` followed by one `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n {} {}\n", self.n, self.directedness);
        for &(i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(no, l)| (no + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (no, header) = lines.next().ok_or_else(|| Error::Parse("edge list is empty".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (n, directedness) = match fields.as_slice() {
            ["n", count, kind] => {
                let n = count
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {no}: vertex count: {e}")))?;
                let d = match *kind {
                    "directed" => Directedness::Directed,
                    "undirected" => Directedness::Undirected,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {no}: expected `directed` or `undirected`, got `{other}`"
                        )))
                    }
                };
                (n, d)
            }
            _ => {
                return Err(Error::Parse(format!(
                    "line {no}: expected header `n <count> <directed|undirected>`"
                )))
            }
        };
        let mut edges = Vec::new();
        for (no, line) in lines {
            let pair: Vec<&str> = line.split_whitespace().collect();
            let [a, b] = pair.as_slice() else {
                return Err(Error::Parse(format!("line {no}: expected `i j`")));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("line {no}: {e}")));
            edges.push((parse(a)?, parse(b)?));
        }
        Graph::new(n, directedness, edges)
    }
}

impl FromStr for Graph {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Graph::from_edge_list(s)
    }
}

pub fn is_connected(g: &Graph) -> Result<bool> {
    if g.is_directed() {
        return Err(Error::Contract(
            "is_connected expects an undirected graph; use is_strongly_connected or is_weakly_connected".into(),
        ));
    }
    Ok(g.is_fully_connected())
}

pub fn is_strongly_connected(g: &Graph) -> Result<bool> {
    if !g.is_directed() {
        return Err(Error::Contract("is_strongly_connected expects a directed graph".into()));
    }
    Ok(g.is_fully_connected())
}

pub fn is_weakly_connected(g: &Graph) -> Result<bool> {
    if !g.is_directed() {
        return Err(Error::Contract("is_weakly_connected expects a directed graph".into()));
    }
    Ok(g.underlying_undirected().is_fully_connected())
}

/// How edges of the base graph fail from one iteration to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyModel {
    Static,
    /// Each undirected edge disappears (both directions) with probability `p`.
    UndirectedDrop {
        p: f64,
    },
    /// Each direction of each edge disappears independently with probability `p`.
    DirectedDrop {
        p: f64,
    },
}

impl TopologyModel {
    pub fn drop_probability(&self) -> f64 {
        match *self {
            TopologyModel::Static => 0.0,
            TopologyModel::UndirectedDrop { p } | TopologyModel::DirectedDrop { p } => p,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        !matches!(self, TopologyModel::Static)
    }

    pub fn is_directed_drop(&self) -> bool {
        matches!(self, TopologyModel::DirectedDrop { .. })
    }
}

/// Anything that yields a communication graph per iteration.
pub trait Topology {
    fn n_vertices(&self) -> usize;
    fn sample(&self, k: u64) -> Graph;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySequence {
    pub base: Graph,
    pub model: TopologyModel,
    pub seed: u64,
    pub window_b: usize,
}

impl TopologySequence {
    pub fn new(base: Graph, model: TopologyModel, seed: u64, window_b: usize) -> Result<Self> {
        let p = model.drop_probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("drop probability {p} outside [0, 1]")));
        }
        if window_b == 0 {
            return Err(Error::InvalidParameter("connectivity window must be >= 1".into()));
        }
        Ok(Self {
            base,
            model,
            seed,
            window_b,
        })
    }

    pub fn fixed(base: Graph) -> Self {
        Self {
            base,
            model: TopologyModel::Static,
            seed: 0,
            window_b: 1,
        }
    }

    fn survives(&self, k: u64, i: usize, j: usize, p: f64) -> bool {
        unit_uniform(&[self.seed, k, i as u64, j as u64]) >= p
    }

    /// The graph in effect at iteration `k`. A pure function of
    /// `(base, model, seed, k)`.
    pub fn sample_topology(&self, k: u64) -> Graph {
        match self.model {
            TopologyModel::Static => self.base.clone(),
            TopologyModel::UndirectedDrop { p } => {
                let kept: BTreeSet<_> = self.base.edges().filter(|&(i, j)| self.survives(k, i, j, p)).collect();
                Graph::from_set(self.base.n, self.base.directedness, kept)
            }
            TopologyModel::DirectedDrop { p } => {
                let kept: BTreeSet<_> = self.base.arcs().filter(|&(i, j)| self.survives(k, i, j, p)).collect();
                Graph::from_set(self.base.n, Directedness::Directed, kept)
            }
        }
    }

    pub fn is_b_connected(&self, k0: u64, b: usize) -> Result<bool> {
        is_b_connected(self, k0, b)
    }
}

impl Topology for TopologySequence {
    fn n_vertices(&self) -> usize {
        self.base.n
    }

    fn sample(&self, k: u64) -> Graph {
        self.sample_topology(k)
    }
}

/// Is the union of the graphs sampled at `k0..k0 + b` connected (strongly
/// connected when any sample is directed)?
pub fn is_b_connected<T: Topology + ?Sized>(topology: &T, k0: u64, b: usize) -> Result<bool> {
    if b == 0 {
        return Err(Error::InvalidParameter("window B must be >= 1".into()));
    }
    let samples: Vec<Graph> = (k0..k0 + b as u64).map(|k| topology.sample(k)).collect();
    Ok(Graph::union(&samples)?.is_fully_connected())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricGraphSpec {
    pub n_vertices: usize,
    pub radius: f64,
    pub seed: u64,
}

impl GeometricGraphSpec {
    /// Vertex positions in the unit square, deterministic in the seed.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_vertices)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }
}

/// Random geometric graph: vertices uniform in the unit square, an edge
/// wherever two vertices are within `radius` of each other.
pub fn generate_geometric(spec: &GeometricGraphSpec) -> Result<Graph> {
    if !(spec.radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "geometric radius must be positive, got {}",
            spec.radius
        )));
    }
    let pos = spec.positions();
    let mut edges = Vec::new();
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = (pos[i][0] - pos[j][0]).hypot(pos[i][1] - pos[j][1]);
            if d <= spec.radius {
                edges.push((i, j));
            }
        }
    }
    Graph::new(spec.n_vertices, Directedness::Undirected, edges)
}
