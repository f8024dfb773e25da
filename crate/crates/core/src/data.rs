//! Graph datasets: the TU text format, Local Degree Profile features and
//! stratified fold splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// An undirected, labelled graph with a node feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    /// Undirected edges as `(lo, hi)` pairs, sorted and unique.
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    label: usize,
}

impl Graph {
    /// Edges may be given in either orientation and repeated; they are
    /// normalised to sorted unique `(lo, hi)` pairs. Self-loops are rejected.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_features: Tensor,
        label: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Inconsistent("graph has no nodes".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Inconsistent(format!("edge ({a}, {b}) out of range for {num_nodes} nodes")));
            }
            if a == b {
                return Err(Error::Inconsistent(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        if node_features.shape().len() != 2 || node_features.shape()[0] != num_nodes {
            return Err(Error::Inconsistent(format!(
                "feature matrix of shape {:?} for {num_nodes} nodes",
                node_features.shape()
            )));
        }
        Ok(Self { num_nodes, edges: set.into_iter().collect(), node_features, label })
    }

    /// A graph whose features are its Local Degree Profile.
    pub fn with_ldp_features(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: usize,
    ) -> Result<Self> {
        let mut g = Self::new(num_nodes, edges, Tensor::zeros(vec![num_nodes, LDP_WIDTH]), label)?;
        g.node_features = local_degree_profile(g.num_nodes, &g.edges);
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.shape()[1]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Degree in `A` (self-loops are never counted).
    pub fn degrees(&self) -> Vec<usize> {
        degrees(self.num_nodes, &self.edges)
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_nodes);
        let c = self.feature_dim();
        let mut features = vec![0.0; self.num_nodes * c];
        for (old, &new) in perm.iter().enumerate() {
            features[new * c..(new + 1) * c].copy_from_slice(&self.node_features.data()[old * c..(old + 1) * c]);
        }
        Self::new(
            self.num_nodes,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
            Tensor::new(vec![self.num_nodes, c], features),
            self.label,
        )
        .expect("permutation preserves validity")
    }
}

fn degrees(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut deg = vec![0; num_nodes];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    deg
}

/// Number of columns produced by [`local_degree_profile`].
pub const LDP_WIDTH: usize = 5;

/// Per node: `[deg, min, max, mean, std]` of its neighbours' degrees, with the
/// population standard deviation. Isolated nodes get an all-zero row.
pub fn local_degree_profile(num_nodes: usize, edges: &[(usize, usize)]) -> Tensor {
    let deg = degrees(num_nodes, edges);
    let mut neighbours = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        neighbours[a].push(b);
        neighbours[b].push(a);
    }
    let mut out = Vec::with_capacity(num_nodes * LDP_WIDTH);
    for (v, nbrs) in neighbours.iter().enumerate() {
        if nbrs.is_empty() {
            out.extend([0.0; LDP_WIDTH]);
            continue;
        }
        let ds: Vec<f64> = nbrs.iter().map(|&u| deg[u] as f64).collect();
        let n = ds.len() as f64;
        let mean = ds.iter().sum::<f64>() / n;
        let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let min = ds.iter().copied().fold(f64::INFINITY, f64::min);
        let max = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([deg[v] as f64, min, max, mean, var.sqrt()]);
    }
    Tensor::new(vec![num_nodes, LDP_WIDTH], out)
}

/// A named collection of labelled graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Original label value of each class index.
    pub class_values: Vec<i64>,
    /// Original node label of each one-hot column, when features came from node labels.
    pub node_label_values: Option<Vec<i64>>,
}

impl Dataset {
    /// Assembles a dataset from graphs whose labels are already class indices.
    pub fn from_graphs(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let num_classes = graphs.iter().map(|g| g.label + 1).max().unwrap_or(0);
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        let ds = Self {
            name: name.into(),
            graphs,
            num_classes,
            feature_dim,
            class_values: (0..num_classes as i64).collect(),
            node_label_values: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::Inconsistent(format!("dataset {} has no graphs", self.name)));
        }
        if self.num_classes < 2 {
            return Err(Error::Inconsistent(format!(
                "dataset {} has {} class(es), need at least 2",
                self.name, self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Inconsistent("zero-width node features".into()));
        }
        for (i, g) in self.graphs.iter().enumerate() {
            if g.label >= self.num_classes {
                return Err(Error::Inconsistent(format!("graph {i} has label {}", g.label)));
            }
            if g.feature_dim() != self.feature_dim {
                return Err(Error::Inconsistent(format!(
                    "graph {i} has feature width {}, expected {}",
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    /// The graphs at `indices`, borrowed.
    pub fn subset<'a>(&'a self, indices: &[usize]) -> Vec<&'a Graph> {
        indices.iter().map(|&i| &self.graphs[i]).collect()
    }
}

fn tu_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Reads non-empty lines, each split on commas into integers.
fn read_int_rows(path: &Path) -> Result<Vec<(usize, Vec<i64>)>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: path.to_path_buf() })
        }
        Err(source) => return Err(Error::Io { path: path.to_path_buf(), source }),
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<i64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("expected an integer, found {:?}", tok.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((idx + 1, values));
    }
    Ok(rows)
}

fn single_column(path: &Path) -> Result<Vec<(usize, i64)>> {
    read_int_rows(path)?
        .into_iter()
        .map(|(line, vals)| match vals.as_slice() {
            [v] => Ok((line, *v)),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected one value, found {}", vals.len()),
            }),
        })
        .collect()
}

/// Loads a dataset in the TU text layout from `root/name/` (or `root/` when
/// the files sit there directly).
pub fn load_tu_dataset(root: impl AsRef<Path>, name: &str) -> Result<Dataset> {
    let root = root.as_ref();
    let nested = root.join(name);
    let dir = if tu_path(&nested, name, "A").exists() || !tu_path(root, name, "A").exists() {
        nested
    } else {
        root.to_path_buf()
    };

    let indicator_path = tu_path(&dir, name, "graph_indicator");
    let labels_path = tu_path(&dir, name, "graph_labels");
    let edges_path = tu_path(&dir, name, "A");
    for p in [&edges_path, &indicator_path, &labels_path] {
        if !p.exists() {
            return Err(Error::MissingFile { path: p.clone() });
        }
    }

    let graph_labels = single_column(&labels_path)?;
    let num_graphs = graph_labels.len();

    // Global node id (0-based) -> (graph, local index).
    let indicator = single_column(&indicator_path)?;
    let mut node_slot = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Inconsistent(format!(
                "{}:{line}: node refers to graph {gid} but {} lists {num_graphs} graphs",
                indicator_path.display(),
                labels_path.display()
            )));
        }
        let g = gid as usize - 1;
        node_slot.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Inconsistent(format!("graph {} has no nodes", g + 1)));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (line, vals) in read_int_rows(&edges_path)? {
        let parse_err = |message: String| Error::Parse { path: edges_path.clone(), line, message };
        let [a, b] = vals.as_slice() else {
            return Err(parse_err(format!("expected 2 node ids, found {}", vals.len())));
        };
        let lookup = |id: i64| {
            if id < 1 || id as usize > node_slot.len() {
                Err(parse_err(format!("node id {id} out of range 1..={}", node_slot.len())))
            } else {
                Ok(node_slot[id as usize - 1])
            }
        };
        let (ga, la) = lookup(*a)?;
        let (gb, lb) = lookup(*b)?;
        if ga != gb {
            return Err(parse_err(format!("edge ({a}, {b}) crosses graphs {} and {}", ga + 1, gb + 1)));
        }
        if la != lb {
            edges[ga].push((la, lb));
        }
    }

    let mut class_values: Vec<i64> = Vec::new();
    let mut class_of = HashMap::new();
    let labels: Vec<usize> = graph_labels
        .iter()
        .map(|&(_, v)| {
            *class_of.entry(v).or_insert_with(|| {
                class_values.push(v);
                class_values.len() - 1
            })
        })
        .collect();

    let node_labels_path = tu_path(&dir, name, "node_labels");
    let node_labels = if node_labels_path.exists() {
        let rows = single_column(&node_labels_path)?;
        if rows.len() != node_slot.len() {
            return Err(Error::Inconsistent(format!(
                "{} has {} lines for {} nodes",
                node_labels_path.display(),
                rows.len(),
                node_slot.len()
            )));
        }
        Some(rows.into_iter().map(|(_, v)| v).collect::<Vec<_>>())
    } else {
        None
    };

    let (features, node_label_values) = match &node_labels {
        Some(values) => {
            let distinct: BTreeMap<i64, usize> =
                values.iter().copied().collect::<BTreeSet<_>>().into_iter().enumerate().map(|(i, v)| (v, i)).collect();
            let width = distinct.len();
            let mut per_graph: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n * width]).collect();
            for (node, &(g, local)) in node_slot.iter().enumerate() {
                per_graph[g][local * width + distinct[&values[node]]] = 1.0;
            }
            let tensors =
                per_graph.into_iter().zip(&sizes).map(|(data, &n)| Some(Tensor::new(vec![n, width], data))).collect();
            (tensors, Some(distinct.into_keys().collect()))
        }
        None => (vec![None; num_graphs], None),
    };

    let graphs = edges
        .into_iter()
        .zip(features)
        .zip(labels)
        .zip(&sizes)
        .map(|(((e, f), label), &n)| match f {
            Some(f) => Graph::new(n, e, f, label),
            None => Graph::with_ldp_features(n, e, label),
        })
        .collect::<Result<Vec<_>>>()?;

    let feature_dim = graphs[0].feature_dim();
    let ds = Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_values.len(),
        feature_dim,
        class_values,
        node_label_values,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` into `dir` using the TU layout, so that [`load_tu_dataset`]
/// reproduces it. Edges are written in both directions.
pub fn write_tu_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path: path.clone(), source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let open = |suffix: &str| {
        let path = tu_path(dir, &ds.name, suffix);
        fs::File::create(&path).map(std::io::BufWriter::new).map(|f| (f, path.clone())).map_err(io(&path))
    };

    let (mut a, a_path) = open("A")?;
    let (mut ind, ind_path) = open("graph_indicator")?;
    let (mut gl, gl_path) = open("graph_labels")?;
    let mut nl = match &ds.node_label_values {
        Some(_) => Some(open("node_labels")?),
        None => None,
    };

    let mut offset = 0;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for &(u, v) in g.edges() {
            writeln!(a, "{}, {}", u + offset + 1, v + offset + 1).map_err(io(&a_path))?;
            writeln!(a, "{}, {}", v + offset + 1, u + offset + 1).map_err(io(&a_path))?;
        }
        for node in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1).map_err(io(&ind_path))?;
            if let (Some((f, path)), Some(values)) = (nl.as_mut(), &ds.node_label_values) {
                let c = g.feature_dim();
                let row = &g.node_features().data()[node * c..(node + 1) * c];
                let hot = crate::autodiff::argmax(row).1;
                writeln!(f, "{}", values[hot]).map_err(io(path))?;
            }
        }
        writeln!(gl, "{}", ds.class_values[g.label()]).map_err(io(&gl_path))?;
        offset += g.num_nodes();
    }
    for (mut f, path) in [(a, a_path), (ind, ind_path), (gl, gl_path)].into_iter().chain(nl) {
        f.flush().map_err(io(&path))?;
    }
    Ok(())
}

/// Disjoint index sets for one train/validate/test round.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// One outer repetition: a held-out test fold and an inner k-fold
/// partition of the remaining training pool into (train, validation) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repetition {
    pub test: Vec<usize>,
    pub inner: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Partitions `items` (indices into `labels`) into `k` folds, preserving
/// class proportions to within one instance per fold.
pub fn stratified_partition(
    items: &[usize],
    labels: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in items {
        by_class.entry(labels[i]).or_default().push(i);
    }
    if let Some((c, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Config(format!("class {c} has {} instances, fewer than the {k} folds", members.len())));
    }
    // Dealing the class-grouped sequence round-robin keeps every class, and
    // every fold size, balanced to within one.
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for members in by_class.values_mut() {
        members.shuffle(rng);
        for &i in members.iter() {
            folds[pos % k].push(i);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn complement(all: &[usize], exclude: &[usize]) -> Vec<usize> {
    let ex: BTreeSet<usize> = exclude.iter().copied().collect();
    all.iter().copied().filter(|i| !ex.contains(i)).collect()
}

/// The repeated nested protocol: `k` repetitions, each holding out one outer
/// stratified fold for testing and splitting the rest into `k` inner folds.
pub fn nested_cv_plan(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Repetition>> {
    let labels = ds.labels();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = stratified_partition(&all, &labels, k, &mut rng)?;
    outer
        .iter()
        .enumerate()
        .map(|(rep, test)| {
            let pool = complement(&all, test);
            let mut inner_rng =
                ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(rep as u64 + 1)));
            let inner = stratified_partition(&pool, &labels, k, &mut inner_rng)?;
            let pairs = inner.iter().map(|val| (complement(&pool, val), val.clone())).collect();
            Ok(Repetition { test: test.clone(), inner: pairs })
        })
        .collect()
}

/// One `(train, validation, test)` split per repetition of [`nested_cv_plan`],
/// using the first inner fold for validation.
pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Split>> {
    Ok(nested_cv_plan(ds, k, seed)?
        .into_iter()
        .map(|mut rep| {
            let (train, validation) = rep.inner.swap_remove(0);
            Split { train, validation, test: rep.test }
        })
        .collect())
}

/// Synthetic two-class set: complete graphs (class 0) versus paths (class 1),
/// sizes drawn uniformly from `min_nodes..=max_nodes`, with LDP features.
pub fn cliques_vs_paths(count: usize, min_nodes: usize, max_nodes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..count)
        .map(|i| {
            let n = rng.gen_range(min_nodes..=max_nodes);
            let label = i % 2;
            let edges: Vec<(usize, usize)> = if label == 0 {
                (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
            } else {
                (1..n).map(|b| (b - 1, b)).collect()
            };
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            Graph::with_ldp_features(n, edges.into_iter().map(|(a, b)| (perm[a], perm[b])), label)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_graphs("CLIQUES_VS_PATHS", graphs)
}
