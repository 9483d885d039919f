//! Category tree, leaf softmax and ancestor probability aggregation.
//!
//! The classifier only ever scores leaf categories. Probabilities for
//! internal nodes are recovered at inference time by summing the
//! probabilities of their descendant leaves, so ancestors never compete with
//! their own descendants inside one softmax.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy has no edges")]
    EmptyEdgeList,
    #[error("empty category name in edge {0}")]
    EmptyName(usize),
    #[error("edge {child} -> {parent} listed twice")]
    DuplicateEdge { child: String, parent: String },
    #[error("{node} has two parents: {first} and {second}")]
    MultipleParents {
        node: String,
        first: String,
        second: String,
    },
    #[error("cycle through {0}")]
    CycleDetected(String),
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("expected {expected} leaf values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no score for node {0}")]
    MissingScore(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("{0} is not a leaf category")]
    NotALeaf(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading taxonomy: {0}")]
    Io(String),
}

/// Rooted category tree with a canonical leaf order.
///
/// Node indices follow lexicographic name order, which makes every derived
/// ordering (leaves, children, descendant sets) independent of the order in
/// which edges were supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    leaf_order: Vec<usize>,
    leaf_pos: Vec<Option<usize>>,
    descendant_leaves: Vec<Vec<usize>>,
    depth: Vec<usize>,
}

impl Taxonomy {
    /// Builds and validates a tree from `(child, parent)` edges.
    pub fn build<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, TaxonomyError> {
        if edges.is_empty() {
            return Err(TaxonomyError::EmptyEdgeList);
        }
        let mut seen_edges = BTreeSet::new();
        let mut parent_of: BTreeMap<&str, &str> = BTreeMap::new();
        let mut all: BTreeSet<&str> = BTreeSet::new();
        for (i, (c, p)) in edges.iter().enumerate() {
            let (c, p) = (c.as_ref(), p.as_ref());
            if c.is_empty() || p.is_empty() {
                return Err(TaxonomyError::EmptyName(i));
            }
            if !seen_edges.insert((c, p)) {
                return Err(TaxonomyError::DuplicateEdge {
                    child: c.to_string(),
                    parent: p.to_string(),
                });
            }
            if let Some(prev) = parent_of.insert(c, p) {
                return Err(TaxonomyError::MultipleParents {
                    node: c.to_string(),
                    first: prev.to_string(),
                    second: p.to_string(),
                });
            }
            all.insert(c);
            all.insert(p);
        }

        let names: Vec<String> = all.iter().map(|s| s.to_string()).collect();
        let index: HashMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let n = names.len();
        let parent: Vec<Option<usize>> = names
            .iter()
            .map(|name| parent_of.get(name.as_str()).map(|p| index[*p]))
            .collect();

        // Single-parent links form a functional graph; walk each chain with
        // three-colour marking to find cycles.
        let mut state = vec![0u8; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = Some(start);
            while let Some(v) = cur {
                match state[v] {
                    2 => break,
                    1 => return Err(TaxonomyError::CycleDetected(names[v].clone())),
                    _ => {
                        state[v] = 1;
                        path.push(v);
                        cur = parent[v];
                    }
                }
            }
            for v in path {
                state[v] = 2;
            }
        }

        let roots: Vec<usize> = (0..n).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(TaxonomyError::MultipleRoots(
                roots.iter().map(|&r| names[r].clone()).collect(),
            ));
        }
        let root = roots[0];

        let mut children = vec![Vec::new(); n];
        for v in 0..n {
            if let Some(p) = parent[v] {
                children[p].push(v);
            }
        }
        let leaf_order: Vec<usize> = (0..n).filter(|&v| children[v].is_empty()).collect();
        let mut leaf_pos = vec![None; n];
        for (i, &v) in leaf_order.iter().enumerate() {
            leaf_pos[v] = Some(i);
        }

        let mut depth = vec![0usize; n];
        let mut descendant_leaves = vec![Vec::new(); n];
        for (li, &leaf) in leaf_order.iter().enumerate() {
            let mut cur = Some(leaf);
            while let Some(v) = cur {
                descendant_leaves[v].push(li);
                cur = parent[v];
            }
        }
        for v in 0..n {
            let mut d = 0;
            let mut cur = parent[v];
            while let Some(p) = cur {
                d += 1;
                cur = parent[p];
            }
            depth[v] = d;
        }

        Ok(Self {
            names,
            index,
            parent,
            children,
            root,
            leaf_order,
            leaf_pos,
            descendant_leaves,
            depth,
        })
    }

    /// Parses the `child<TAB>parent` text format. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim_end_matches(['\r', ' ']);
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (child, parent) = match (parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(p), None) => (c.trim(), p.trim()),
                _ => {
                    return Err(TaxonomyError::Parse {
                        line: i + 1,
                        msg: "expected `child<TAB>parent`".into(),
                    })
                }
            };
            if child.is_empty() || parent.is_empty() {
                return Err(TaxonomyError::Parse {
                    line: i + 1,
                    msg: "empty category name".into(),
                });
            }
            edges.push((child.to_string(), parent.to_string()));
        }
        Self::build(&edges)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| TaxonomyError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    /// Edges in canonical order, in the same text format `parse` accepts.
    pub fn to_text(&self) -> String {
        self.edges()
            .map(|(c, p)| format!("{c}\t{p}\n"))
            .collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        (0..self.names.len()).filter_map(move |v| {
            self.parent[v].map(|p| (self.names[v].as_str(), self.names[p].as_str()))
        })
    }

    /// A two-level tree with the same root whose leaves are `classes`.
    ///
    /// Used for the flat-classifier baseline, where ancestors are scored as
    /// ordinary softmax classes next to the leaves.
    pub fn flattened<S: AsRef<str>>(&self, classes: &[S]) -> Result<Self, TaxonomyError> {
        let root = self.root_name();
        let edges: Vec<(&str, &str)> = classes.iter().map(|c| (c.as_ref(), root)).collect();
        Self::build(&edges)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn root_name(&self) -> &str {
        &self.names[self.root]
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.leaf_pos[node].is_some()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_order.len()
    }

    /// Node indices of V_leaf in canonical order.
    pub fn leaf_nodes(&self) -> &[usize] {
        &self.leaf_order
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.leaf_order.iter().map(|&v| self.names[v].as_str()).collect()
    }

    pub fn leaf_name(&self, leaf: usize) -> &str {
        &self.names[self.leaf_order[leaf]]
    }

    pub fn leaf_position(&self, node: usize) -> Option<usize> {
        self.leaf_pos[node]
    }

    /// Leaf indices below `node` (the node itself when it is a leaf).
    pub fn descendant_leaves(&self, node: usize) -> &[usize] {
        &self.descendant_leaves[node]
    }

    /// Whether `node` equals `ancestor` or lies below it.
    pub fn is_within(&self, node: usize, ancestor: usize) -> bool {
        let mut cur = Some(node);
        while let Some(v) = cur {
            if v == ancestor {
                return true;
            }
            cur = self.parent[v];
        }
        false
    }

    pub fn leaf_index(&self, name: &str) -> Result<usize, TaxonomyError> {
        let node = self
            .node(name)
            .ok_or_else(|| TaxonomyError::UnknownCategory(name.to_string()))?;
        self.leaf_pos[node].ok_or_else(|| TaxonomyError::NotALeaf(name.to_string()))
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nodes={} leaves={} depth={} root={}",
            self.len(),
            self.num_leaves(),
            self.max_depth(),
            self.root_name()
        )
    }
}

/// Numerically stable softmax.
pub fn leaf_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Probabilities for every node of a taxonomy, indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProbabilities {
    probs: Vec<f64>,
}

impl CategoryProbabilities {
    pub fn node(&self, node: usize) -> f64 {
        self.probs[node]
    }

    pub fn get(&self, taxonomy: &Taxonomy, name: &str) -> Option<f64> {
        taxonomy.node(name).map(|v| self.probs[v])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Ancestor probabilities as sums over descendant leaves; leaves copied.
pub fn aggregate(
    taxonomy: &Taxonomy,
    leaf_probs: &[f64],
) -> Result<CategoryProbabilities, TaxonomyError> {
    if leaf_probs.len() != taxonomy.num_leaves() {
        return Err(TaxonomyError::LengthMismatch {
            expected: taxonomy.num_leaves(),
            got: leaf_probs.len(),
        });
    }
    let probs = (0..taxonomy.len())
        .map(|v| match taxonomy.leaf_position(v) {
            Some(li) => leaf_probs[li],
            None => taxonomy
                .descendant_leaves(v)
                .iter()
                .map(|&li| leaf_probs[li])
                .sum(),
        })
        .collect();
    Ok(CategoryProbabilities { probs })
}

/// Hierarchical softmax baseline: one softmax per sibling group, node
/// probability is the product of conditionals along the root path.
pub fn multisoftmax_baseline(
    taxonomy: &Taxonomy,
    node_scores: &HashMap<String, f64>,
) -> Result<CategoryProbabilities, TaxonomyError> {
    let n = taxonomy.len();
    let mut cond = vec![1.0; n];
    for v in 0..n {
        let kids = taxonomy.children(v);
        if kids.is_empty() {
            continue;
        }
        let scores = kids
            .iter()
            .map(|&k| {
                node_scores
                    .get(taxonomy.name(k))
                    .copied()
                    .ok_or_else(|| TaxonomyError::MissingScore(taxonomy.name(k).to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (&k, p) in kids.iter().zip(leaf_softmax(&scores)) {
            cond[k] = p;
        }
    }
    let mut probs = vec![0.0; n];
    // Parents precede children once nodes are sorted by depth.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| taxonomy.depth(v));
    for v in order {
        probs[v] = match taxonomy.parent(v) {
            Some(p) => probs[p] * cond[v],
            None => 1.0,
        };
    }
    Ok(CategoryProbabilities { probs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AncestorFilter {
    pub kept: Vec<usize>,
    pub filtered: usize,
    pub filtered_categories: BTreeSet<String>,
}

/// Keeps samples labelled with leaf categories; drops ancestor labels.
pub fn filter_ancestor_samples<S: AsRef<str>>(
    labels: &[S],
    taxonomy: &Taxonomy,
) -> Result<AncestorFilter, TaxonomyError> {
    let mut kept = Vec::with_capacity(labels.len());
    let mut filtered_categories = BTreeSet::new();
    for (i, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        let node = taxonomy
            .node(label)
            .ok_or_else(|| TaxonomyError::UnknownCategory(label.to_string()))?;
        if taxonomy.is_leaf(node) {
            kept.push(i);
        } else {
            filtered_categories.insert(label.to_string());
        }
    }
    Ok(AncestorFilter {
        filtered: labels.len() - kept.len(),
        kept,
        filtered_categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn animals() -> Taxonomy {
        Taxonomy::build(&[("cat", "animal"), ("dog", "animal")]).unwrap()
    }

    fn two_groups() -> Taxonomy {
        Taxonomy::build(&[
            ("animal", "root"),
            ("vehicle", "root"),
            ("cat", "animal"),
            ("dog", "animal"),
            ("car", "vehicle"),
        ])
        .unwrap()
    }

    #[test]
    fn builds_two_leaf_tree() {
        let t = animals();
        assert_eq!(t.root_name(), "animal");
        assert_eq!(t.leaf_names(), vec!["cat", "dog"]);
        assert_eq!(t.descendant_leaves(t.root()), &[0, 1]);
        assert_eq!(t.descendant_leaves(t.node("dog").unwrap()), &[1]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            Taxonomy::build(&[("a", "b"), ("b", "a")]),
            Err(TaxonomyError::CycleDetected(_))
        ));
        assert!(matches!(
            Taxonomy::build(&[("a", "a")]),
            Err(TaxonomyError::CycleDetected(_))
        ));
        assert!(matches!(
            Taxonomy::build(&[("cat", "animal"), ("cat", "pet")]),
            Err(TaxonomyError::MultipleParents { .. })
        ));
        assert_eq!(
            Taxonomy::build(&[("cat", "animal"), ("car", "vehicle")]),
            Err(TaxonomyError::MultipleRoots(vec![
                "animal".into(),
                "vehicle".into()
            ]))
        );
        assert!(matches!(
            Taxonomy::build(&[("cat", "animal"), ("cat", "animal")]),
            Err(TaxonomyError::DuplicateEdge { .. })
        ));
        let empty: [(&str, &str); 0] = [];
        assert_eq!(Taxonomy::build(&empty), Err(TaxonomyError::EmptyEdgeList));
        assert_eq!(
            Taxonomy::build(&[("", "animal")]),
            Err(TaxonomyError::EmptyName(0))
        );
    }

    #[test]
    fn cycle_beside_a_valid_tree_is_detected() {
        let r = Taxonomy::build(&[("cat", "animal"), ("x", "y"), ("y", "z"), ("z", "x")]);
        assert!(matches!(r, Err(TaxonomyError::CycleDetected(_))));
    }

    #[test]
    fn leaf_order_ignores_edge_order() {
        let a = Taxonomy::build(&[("b", "r"), ("a", "r"), ("c", "b")]).unwrap();
        let b = Taxonomy::build(&[("c", "b"), ("a", "r"), ("b", "r")]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.leaf_names(), vec!["a", "c"]);
    }

    #[test]
    fn parses_text_format() {
        let t = Taxonomy::parse("# shapes\ncat\tanimal\n\n dog\tanimal # trailing\n").unwrap();
        assert_eq!(t, animals());
        assert!(matches!(
            Taxonomy::parse("cat animal\n"),
            Err(TaxonomyError::Parse { line: 1, .. })
        ));
        assert_eq!(Taxonomy::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(leaf_softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = leaf_softmax(&[2f64.ln(), 0.0, 0.0]);
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = leaf_softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn aggregate_examples() {
        let t = animals();
        let p = aggregate(&t, &[0.5, 0.5]).unwrap();
        assert_eq!(p.get(&t, "animal"), Some(1.0));

        let t = two_groups();
        // leaf order: car, cat, dog
        let p = aggregate(&t, &[0.5, 0.2, 0.3]).unwrap();
        assert!((p.get(&t, "animal").unwrap() - 0.5).abs() < 1e-12);
        assert!((p.get(&t, "vehicle").unwrap() - 0.5).abs() < 1e-12);
        assert!((p.get(&t, "root").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(p.get(&t, "cat"), Some(0.2));

        let t = Taxonomy::build(&[("only", "root")]).unwrap();
        let p = aggregate(&t, &[1.0]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 1.0]);

        assert_eq!(
            aggregate(&animals(), &[1.0]),
            Err(TaxonomyError::LengthMismatch {
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn multisoftmax_examples() {
        let scores = |pairs: &[(&str, f64)]| -> HashMap<String, f64> {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        let t = Taxonomy::build(&[("a", "root"), ("b", "root")]).unwrap();
        let p = multisoftmax_baseline(&t, &scores(&[("a", 0.0), ("b", 0.0)])).unwrap();
        assert_eq!(p.get(&t, "a"), Some(0.5));
        assert_eq!(p.get(&t, "root"), Some(1.0));

        let t = Taxonomy::build(&[("x", "root"), ("y", "x")]).unwrap();
        let p = multisoftmax_baseline(&t, &scores(&[("x", -3.0), ("y", 7.0)])).unwrap();
        assert_eq!(p.get(&t, "x"), Some(1.0));
        assert_eq!(p.get(&t, "y"), Some(1.0));

        let t = Taxonomy::build(&[
            ("g1", "root"),
            ("g2", "root"),
            ("a", "g1"),
            ("b", "g1"),
            ("c", "g2"),
        ])
        .unwrap();
        let zero = scores(&[("g1", 0.0), ("g2", 0.0), ("a", 0.0), ("b", 0.0), ("c", 0.0)]);
        let p = multisoftmax_baseline(&t, &zero).unwrap();
        assert_eq!(p.get(&t, "a"), Some(0.25));
        assert_eq!(p.get(&t, "g1"), Some(0.5));
        assert_eq!(p.get(&t, "c"), Some(0.5));

        let mut missing = zero.clone();
        missing.remove("c");
        assert_eq!(
            multisoftmax_baseline(&t, &missing),
            Err(TaxonomyError::MissingScore("c".into()))
        );
    }

    #[test]
    fn filter_examples() {
        let t = animals();
        let f = filter_ancestor_samples(&["cat", "dog", "animal"], &t).unwrap();
        assert_eq!(f.kept, vec![0, 1]);
        assert_eq!(f.filtered, 1);
        assert_eq!(
            f.filtered_categories.into_iter().collect::<Vec<_>>(),
            vec!["animal".to_string()]
        );
        let f = filter_ancestor_samples(&["dog", "cat", "dog"], &t).unwrap();
        assert_eq!(f.filtered, 0);
        assert_eq!(
            filter_ancestor_samples(&["fish"], &t),
            Err(TaxonomyError::UnknownCategory("fish".into()))
        );
    }

    #[test]
    fn leaf_index_examples() {
        let t = animals();
        assert_eq!(t.leaf_index("cat"), Ok(0));
        assert_eq!(t.leaf_index("animal"), Err(TaxonomyError::NotALeaf("animal".into())));
        assert_eq!(
            t.leaf_index("fish"),
            Err(TaxonomyError::UnknownCategory("fish".into()))
        );
    }

    #[test]
    fn flattened_promotes_ancestors_to_classes() {
        let t = two_groups();
        let flat = t.flattened(&["car", "cat", "dog", "animal"]).unwrap();
        assert_eq!(flat.root_name(), "root");
        assert_eq!(flat.leaf_names(), vec!["animal", "car", "cat", "dog"]);
    }
}
