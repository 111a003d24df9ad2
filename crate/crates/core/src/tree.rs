//! Token-tree skeletons and topology-aware causal masks.
//!
//! A token tree holds every candidate continuation verified in one target
//! pass. Two shapes are supported: expansion trees, where each level
//! multiplies the branch count, and fork trees, where a fixed number of
//! independent chains grow one token per turn. The topology-aware causal
//! mask lets node `j` attend only to itself and its ancestors, so a single
//! masked forward is equivalent to evaluating every root-to-leaf path
//! separately.
//!
//! The full mask for the maximum depth is built once per session; early
//! stopping uses depth-truncated slices of it, which are index views and
//! never copies.

use crate::error::{Error, Result};

/// The branching skeleton of a token tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeShape {
    /// Level `l` multiplies the node count by `branching[l]`.
    Expansion { branching: Vec<usize> },
    /// `width` independent chains, each `depth` tokens long.
    Fork { width: usize, depth: usize },
}

/// Tree shape plus the target-initialization width.
///
/// `target_init_width = 0` means the whole tree is draft-generated;
/// `target_init_width >= 1` means the first level is sampled from the
/// target model and must match the first branching factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeConfig {
    pub shape: TreeShape,
    pub target_init_width: usize,
}

impl TreeConfig {
    pub fn new(shape: TreeShape, target_init_width: usize) -> Result<Self> {
        match &shape {
            TreeShape::Expansion { branching } => {
                if branching.is_empty() {
                    return Err(Error::Config("expansion branching must be nonempty".into()));
                }
                if branching.iter().any(|&k| k == 0) {
                    return Err(Error::Config("branching factors must be positive".into()));
                }
                if target_init_width >= 1 && branching[0] != target_init_width {
                    return Err(Error::Config(format!(
                        "target_init_width {} must equal first branching factor {}",
                        target_init_width, branching[0]
                    )));
                }
            }
            TreeShape::Fork { width, depth } => {
                if *width == 0 || *depth == 0 {
                    return Err(Error::Config("fork width and depth must be positive".into()));
                }
                if target_init_width >= 1 && *width != target_init_width {
                    return Err(Error::Config(format!(
                        "target_init_width {} must equal fork width {}",
                        target_init_width, width
                    )));
                }
            }
        }
        Ok(Self { shape, target_init_width })
    }

    pub fn expansion(branching: &[usize]) -> Result<Self> {
        Self::new(TreeShape::Expansion { branching: branching.to_vec() }, 0)
    }

    pub fn fork(width: usize, depth: usize) -> Result<Self> {
        Self::new(TreeShape::Fork { width, depth }, 0)
    }

    /// Parses the CLI form: comma-separated branching factors for expansion
    /// trees ("2,4,3,1,1"), or "fork:W=16,D=5" for fork trees. When
    /// `target_init` is set, the first level doubles as the number of
    /// target-initialized tokens.
    pub fn parse(s: &str, target_init: bool) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("cannot parse tree config {s:?}: {msg}"));
        if let Some(rest) = s.strip_prefix("fork:") {
            let mut width = None;
            let mut depth = None;
            for part in rest.split(',') {
                let (key, value) = part
                    .split_once('=')
                    .ok_or_else(|| bad("expected K=V pairs after fork:"))?;
                let value: usize =
                    value.trim().parse().map_err(|_| bad("W and D must be integers"))?;
                match key.trim() {
                    "W" | "w" => width = Some(value),
                    "D" | "d" => depth = Some(value),
                    other => return Err(bad(&format!("unknown key {other:?}"))),
                }
            }
            let width = width.ok_or_else(|| bad("missing W"))?;
            let depth = depth.ok_or_else(|| bad("missing D"))?;
            let init = if target_init { width } else { 0 };
            Self::new(TreeShape::Fork { width, depth }, init)
        } else {
            let branching: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad("expected integers")))
                .collect::<Result<_>>()?;
            if branching.is_empty() {
                return Err(bad("empty branching vector"));
            }
            let init = if target_init { branching[0] } else { 0 };
            Self::new(TreeShape::Expansion { branching }, init)
        }
    }

    /// Canonical display form, inverse of `parse`.
    pub fn display(&self) -> String {
        match &self.shape {
            TreeShape::Expansion { branching } => branching
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            TreeShape::Fork { width, depth } => format!("fork:W={width},D={depth}"),
        }
    }

    pub fn max_depth(&self) -> usize {
        match &self.shape {
            TreeShape::Expansion { branching } => branching.len(),
            TreeShape::Fork { depth, .. } => *depth,
        }
    }

    /// Number of draft-generated levels (total depth minus the
    /// target-initialized level, when present).
    pub fn draft_depth(&self) -> usize {
        if self.target_init_width >= 1 {
            self.max_depth() - 1
        } else {
            self.max_depth()
        }
    }
}

/// A flattened token tree in breadth-first topological order: all depth-1
/// nodes first, then depth-2, and so on. Parents always precede children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTree {
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    level_counts: Vec<usize>,
}

impl TokenTree {
    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    /// Depth of a node; roots have depth 1.
    pub fn depth(&self, node: usize) -> usize {
        self.depths[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn max_depth(&self) -> usize {
        self.level_counts.len()
    }

    /// Nodes per level, index 0 = depth 1.
    pub fn level_counts(&self) -> &[usize] {
        &self.level_counts
    }

    /// Number of nodes with depth <= `depth`. With breadth-first ordering
    /// these are exactly the first `prefix_node_count(depth)` indices.
    pub fn prefix_node_count(&self, depth: usize) -> usize {
        self.level_counts.iter().take(depth).sum()
    }

    /// Node indices on the root-to-`node` path, root first, `node` last.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.depths[node]);
        let mut cur = Some(node);
        while let Some(n) = cur {
            path.push(n);
            cur = self.parents[n];
        }
        path.reverse();
        path
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.children[n].is_empty()).collect()
    }

    /// Truncates to nodes with depth <= `depth`.
    pub fn truncated(&self, depth: usize) -> TokenTree {
        let keep = self.prefix_node_count(depth);
        TokenTree {
            parents: self.parents[..keep].to_vec(),
            depths: self.depths[..keep].to_vec(),
            children: self.children[..keep]
                .iter()
                .map(|cs| cs.iter().cloned().filter(|&c| c < keep).collect())
                .collect(),
            roots: self.roots.clone(),
            level_counts: self.level_counts[..depth.min(self.level_counts.len())].to_vec(),
        }
    }
}

/// Builds the tree skeleton for a config; tokens are assigned later by the
/// decoding engine.
pub fn build_tree_shape(config: &TreeConfig) -> TokenTree {
    match &config.shape {
        TreeShape::Expansion { branching } => {
            let mut parents = Vec::new();
            let mut depths = Vec::new();
            let mut level_counts = Vec::new();
            let mut prev_level: Vec<usize> = Vec::new();
            for (li, &k) in branching.iter().enumerate() {
                let mut level = Vec::new();
                if li == 0 {
                    for _ in 0..k {
                        level.push(parents.len());
                        parents.push(None);
                        depths.push(1);
                    }
                } else {
                    for &p in &prev_level {
                        for _ in 0..k {
                            level.push(parents.len());
                            parents.push(Some(p));
                            depths.push(li + 1);
                        }
                    }
                }
                level_counts.push(level.len());
                prev_level = level;
            }
            finish_tree(parents, depths, level_counts)
        }
        TreeShape::Fork { width, depth } => {
            let (w, d) = (*width, *depth);
            let mut parents = Vec::with_capacity(w * d);
            let mut depths = Vec::with_capacity(w * d);
            for level in 0..d {
                for chain in 0..w {
                    parents.push(if level == 0 { None } else { Some((level - 1) * w + chain) });
                    depths.push(level + 1);
                }
            }
            finish_tree(parents, depths, vec![w; d])
        }
    }
}

fn finish_tree(
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    level_counts: Vec<usize>,
) -> TokenTree {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    let mut roots = Vec::new();
    for (i, &p) in parents.iter().enumerate() {
        match p {
            Some(p) => children[p].push(i),
            None => roots.push(i),
        }
    }
    TokenTree { parents, depths, children, roots, level_counts }
}

/// Draft node count per target-initialized token: the subtree hanging off
/// one first-level node. For (2,4,3,1,1) this is 4 + 4*3 + 4*3*1 + 4*3*1*1 = 40.
pub fn draft_nodes_per_init_token(config: &TreeConfig) -> usize {
    match &config.shape {
        TreeShape::Expansion { branching } => {
            let mut total = 0;
            let mut level = 1;
            for &k in &branching[1..] {
                level *= k;
                total += level;
            }
            total
        }
        TreeShape::Fork { depth, .. } => depth - 1,
    }
}

/// Number of distinct root-to-leaf candidate sequences.
pub fn leaf_sequence_count(config: &TreeConfig) -> usize {
    match &config.shape {
        TreeShape::Expansion { branching } => branching.iter().product(),
        TreeShape::Fork { width, .. } => *width,
    }
}

/// The n-by-n ancestor-or-self reachability mask. `get(j, i)` is true iff
/// node `i` is node `j` or one of its ancestors; in topological order this
/// makes the matrix lower-triangular with an all-true diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyMask {
    n: usize,
    bits: Vec<bool>,
}

impl TopologyMask {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n + col]
    }

    /// Ancestor indices of `row` (including itself), ascending — with
    /// breadth-first node order this is the root-to-node path.
    pub fn ancestors(&self, row: usize) -> Vec<usize> {
        (0..self.n).filter(|&c| self.get(row, c)).collect()
    }
}

/// Read-only view of an attention mask: the full mask or a slice of it.
pub trait MaskView {
    fn dim(&self) -> usize;
    fn get(&self, row: usize, col: usize) -> bool;

    /// Ancestor indices of `row` (including itself), ascending.
    fn ancestors(&self, row: usize) -> Vec<usize> {
        (0..self.dim()).filter(|&c| self.get(row, c)).collect()
    }
}

impl MaskView for TopologyMask {
    fn dim(&self) -> usize {
        self.n
    }

    fn get(&self, row: usize, col: usize) -> bool {
        TopologyMask::get(self, row, col)
    }
}

impl<'a> MaskView for MaskSlice<'a> {
    fn dim(&self) -> usize {
        MaskSlice::dim(self)
    }

    fn get(&self, row: usize, col: usize) -> bool {
        MaskSlice::get(self, row, col)
    }
}

/// Builds the topology-aware causal mask for a tree.
pub fn build_topology_mask(tree: &TokenTree) -> TopologyMask {
    let n = tree.node_count();
    let mut bits = vec![false; n * n];
    for j in 0..n {
        bits[j * n + j] = true;
        let mut cur = tree.parent(j);
        while let Some(a) = cur {
            bits[j * n + a] = true;
            cur = tree.parent(a);
        }
    }
    TopologyMask { n, bits }
}

/// A depth-truncated view into a full mask: an index mapping, not a copy.
#[derive(Debug, Clone)]
pub struct MaskSlice<'a> {
    mask: &'a TopologyMask,
    active: Vec<usize>,
}

impl<'a> MaskSlice<'a> {
    pub fn dim(&self) -> usize {
        self.active.len()
    }

    /// Sorted indices into the parent mask.
    pub fn active_nodes(&self) -> &[usize] {
        &self.active
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask.get(self.active[row], self.active[col])
    }

    /// Materializes the slice; used for equivalence checks, not decoding.
    pub fn to_mask(&self) -> TopologyMask {
        let n = self.dim();
        let mut bits = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                bits[r * n + c] = self.get(r, c);
            }
        }
        TopologyMask { n, bits }
    }
}

/// Slices the full mask down to nodes with depth <= `active_depth`. Equal,
/// cell for cell, to building the mask of the depth-truncated tree.
pub fn slice_mask<'a>(
    full: &'a TopologyMask,
    active_depth: usize,
    tree: &TokenTree,
) -> Result<MaskSlice<'a>> {
    if active_depth == 0 {
        return Err(Error::InvalidArgument("active_depth must be >= 1".into()));
    }
    if active_depth > tree.max_depth() {
        return Err(Error::InvalidArgument(format!(
            "active_depth {active_depth} exceeds tree depth {}",
            tree.max_depth()
        )));
    }
    if full.dim() != tree.node_count() {
        return Err(Error::Config(format!(
            "mask dimension {} does not match tree node count {}",
            full.dim(),
            tree.node_count()
        )));
    }
    // Breadth-first order puts all depth <= d nodes in a contiguous prefix.
    let keep = tree.prefix_node_count(active_depth);
    Ok(MaskSlice { mask: full, active: (0..keep).collect() })
}

/// Position index per node: `prefix_len + depth - 1`. Siblings at the same
/// depth share a position.
pub fn position_indices(tree: &TokenTree, prefix_len: usize) -> Vec<usize> {
    (0..tree.node_count()).map(|n| prefix_len + tree.depth(n) - 1).collect()
}

/// Node and mask-cell counts for a shape, without building anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskGrowth {
    pub nodes: usize,
    pub mask_cells: usize,
}

/// Fork trees grow linearly in depth (W*D nodes); uniform expansion trees
/// grow geometrically (b + b^2 + ... + b^D).
pub fn mask_growth(shape: &TreeShape) -> MaskGrowth {
    let nodes = match shape {
        TreeShape::Fork { width, depth } => width * depth,
        TreeShape::Expansion { branching } => {
            let mut total = 0;
            let mut level = 1;
            for &k in branching {
                level *= k;
                total += level;
            }
            total
        }
    };
    MaskGrowth { nodes, mask_cells: nodes * nodes }
}
