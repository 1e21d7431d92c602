//! Discrete molecular multi-graph data model.
//!
//! Molecules are stored as fixed-size multi-graphs with explicit "ghost"
//! categories: node type 0 marks an absent atom and bond type 0 marks an
//! absent bond, so every molecule occupies the same tensor shape regardless
//! of its actual atom count.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of the ghost category in both node and bond encodings.
pub const GHOST: usize = 0;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {0} out of range (n_max = {1})")]
    NodeIndex(usize, usize),
    #[error("unknown atom symbol `{0}`")]
    UnknownSymbol(String),
    #[error("bond order {0} is not in the vocabulary")]
    UnknownBondOrder(u32),
    #[error("self-bond on node {0}")]
    SelfBond(usize),
    #[error("tensor shape mismatch: {0}")]
    Shape(String),
    #[error("tensor row/fiber at {0:?} is not one-hot")]
    NotOneHot(Vec<usize>),
    #[error("adjacency tensor is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("graph is not a valid molecule ({0})")]
    InvalidMolecule(ErrorClass),
}

/// Atom and bond vocabulary with valence capacities and bond orders.
///
/// Index 0 of both tables is the ghost category with capacity/order zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomVocabulary {
    symbols: Vec<String>,
    valence_capacity: Vec<u32>,
    bond_order: Vec<u32>,
}

impl AtomVocabulary {
    /// QM9 vocabulary: atoms C/N/O/F with capacities 4/3/2/1 and
    /// single/double/triple bonds.
    pub fn qm9() -> Self {
        Self {
            symbols: ["C", "N", "O", "F"].iter().map(|s| s.to_string()).collect(),
            valence_capacity: vec![0, 4, 3, 2, 1],
            bond_order: vec![0, 1, 2, 3],
        }
    }

    /// Number of real atom types.
    pub fn num_atom_types(&self) -> usize {
        self.symbols.len()
    }

    /// Number of real bond types.
    pub fn num_bond_types(&self) -> usize {
        self.bond_order.len() - 1
    }

    /// Valence capacity of a node type (0 = ghost).
    pub fn capacity(&self, node_type: usize) -> u32 {
        self.valence_capacity[node_type]
    }

    /// Bond order consumed by a bond type (0 = ghost).
    pub fn order(&self, bond_type: usize) -> u32 {
        self.bond_order[bond_type]
    }

    /// Symbol for a real node type (node_type >= 1).
    pub fn symbol(&self, node_type: usize) -> &str {
        &self.symbols[node_type - 1]
    }

    /// Node type for an atom symbol.
    pub fn node_type_of(&self, symbol: &str) -> Result<usize, GraphError> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i + 1)
            .ok_or_else(|| GraphError::UnknownSymbol(symbol.to_string()))
    }

    /// Bond type for a bond order.
    pub fn bond_type_of(&self, order: u32) -> Result<usize, GraphError> {
        self.bond_order
            .iter()
            .position(|&o| o == order)
            .ok_or(GraphError::UnknownBondOrder(order))
    }

    /// Capacity vector including the ghost entry, as reals.
    pub fn capacity_vector(&self) -> Vec<f64> {
        self.valence_capacity.iter().map(|&u| u as f64).collect()
    }

    /// Bond order vector including the ghost entry, as reals.
    pub fn order_vector(&self) -> Vec<f64> {
        self.bond_order.iter().map(|&b| b as f64).collect()
    }
}

/// A discrete molecular multi-graph over `n_max` node slots.
///
/// `types[i] == 0` marks slot `i` as a ghost node; `bonds[(i, j)] == 0`
/// marks the absence of a bond. The bond matrix is symmetric with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    n_max: usize,
    types: Vec<usize>,
    bonds: Array2<usize>,
}

/// JSON form: real atoms only, bonds listed once with i < j.
#[derive(Debug, Serialize, Deserialize)]
struct MoleculeJson {
    atoms: Vec<String>,
    bonds: Vec<(usize, usize, u32)>,
}

impl MolecularGraph {
    /// All-ghost graph with `n_max` slots.
    pub fn empty(n_max: usize) -> Self {
        Self {
            n_max,
            types: vec![GHOST; n_max],
            bonds: Array2::zeros((n_max, n_max)),
        }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Node type of slot `i` (0 = ghost).
    pub fn node_type(&self, i: usize) -> usize {
        self.types[i]
    }

    pub fn set_node_type(&mut self, i: usize, node_type: usize) {
        self.types[i] = node_type;
    }

    /// Bond type between slots `i` and `j` (0 = none).
    pub fn bond(&self, i: usize, j: usize) -> usize {
        self.bonds[(i, j)]
    }

    /// Sets a symmetric bond entry. Self-bonds are rejected.
    pub fn set_bond(&mut self, i: usize, j: usize, bond_type: usize) -> Result<(), GraphError> {
        if i == j {
            return Err(GraphError::SelfBond(i));
        }
        if i >= self.n_max || j >= self.n_max {
            return Err(GraphError::NodeIndex(i.max(j), self.n_max));
        }
        self.bonds[(i, j)] = bond_type;
        self.bonds[(j, i)] = bond_type;
        Ok(())
    }

    /// Slots holding real atoms.
    pub fn real_nodes(&self) -> Vec<usize> {
        (0..self.n_max).filter(|&i| self.types[i] != GHOST).collect()
    }

    pub fn num_real_nodes(&self) -> usize {
        self.types.iter().filter(|&&t| t != GHOST).count()
    }

    /// Sum of bond orders at slot `i`.
    pub fn valence_load(&self, i: usize, vocab: &AtomVocabulary) -> u32 {
        (0..self.n_max).map(|j| vocab.order(self.bonds[(i, j)])).sum()
    }

    /// Builds a graph from atom symbols and a bond list `(i, j, order)`.
    pub fn from_atoms_bonds(
        n_max: usize,
        atoms: &[&str],
        bonds: &[(usize, usize, u32)],
        vocab: &AtomVocabulary,
    ) -> Result<Self, GraphError> {
        if atoms.len() > n_max {
            return Err(GraphError::NodeIndex(atoms.len() - 1, n_max));
        }
        let mut g = Self::empty(n_max);
        for (i, sym) in atoms.iter().enumerate() {
            g.types[i] = vocab.node_type_of(sym)?;
        }
        for &(i, j, order) in bonds {
            if i >= atoms.len() || j >= atoms.len() {
                return Err(GraphError::NodeIndex(i.max(j), atoms.len()));
            }
            let k = vocab.bond_type_of(order)?;
            g.set_bond(i, j, k)?;
        }
        Ok(g)
    }

    /// One-hot node matrix of shape `(n_max, d + 1)`, column 0 = ghost.
    pub fn node_onehot(&self, vocab: &AtomVocabulary) -> Array2<f64> {
        let d = vocab.num_atom_types();
        let mut x = Array2::zeros((self.n_max, d + 1));
        for i in 0..self.n_max {
            x[(i, self.types[i])] = 1.0;
        }
        x
    }

    /// One-hot adjacency tensor of shape `(n_max, n_max, m + 1)`,
    /// channel 0 = ghost. Diagonal fibers carry ghost edges.
    pub fn adjacency_onehot(&self, vocab: &AtomVocabulary) -> Array3<f64> {
        let m = vocab.num_bond_types();
        let mut a = Array3::zeros((self.n_max, self.n_max, m + 1));
        for i in 0..self.n_max {
            for j in 0..self.n_max {
                let k = if i == j { GHOST } else { self.bonds[(i, j)] };
                a[(i, j, k)] = 1.0;
            }
        }
        a
    }

    /// Rebuilds a graph from one-hot tensors, checking the encoding
    /// invariants (one-hot rows/fibers, symmetry, ghost diagonal).
    pub fn from_onehot(
        x: &Array2<f64>,
        a: &Array3<f64>,
        vocab: &AtomVocabulary,
    ) -> Result<Self, GraphError> {
        let n = x.nrows();
        let d = vocab.num_atom_types();
        let m = vocab.num_bond_types();
        if x.ncols() != d + 1 {
            return Err(GraphError::Shape(format!(
                "node matrix has {} columns, expected {}",
                x.ncols(),
                d + 1
            )));
        }
        if a.shape() != [n, n, m + 1] {
            return Err(GraphError::Shape(format!(
                "adjacency shape {:?}, expected {:?}",
                a.shape(),
                [n, n, m + 1]
            )));
        }
        let onehot_index = |row: &[f64], at: &[usize]| -> Result<usize, GraphError> {
            let mut idx = None;
            for (k, &v) in row.iter().enumerate() {
                if (v - 1.0).abs() < 1e-9 {
                    if idx.is_some() {
                        return Err(GraphError::NotOneHot(at.to_vec()));
                    }
                    idx = Some(k);
                } else if v.abs() > 1e-9 {
                    return Err(GraphError::NotOneHot(at.to_vec()));
                }
            }
            idx.ok_or_else(|| GraphError::NotOneHot(at.to_vec()))
        };
        let mut g = Self::empty(n);
        for i in 0..n {
            let row: Vec<f64> = x.row(i).to_vec();
            g.types[i] = onehot_index(&row, &[i])?;
        }
        for i in 0..n {
            for j in 0..n {
                let fiber: Vec<f64> = (0..=m).map(|k| a[(i, j, k)]).collect();
                let k = onehot_index(&fiber, &[i, j])?;
                if i == j {
                    if k != GHOST {
                        return Err(GraphError::NotSymmetric(i, i));
                    }
                    continue;
                }
                if g.bonds[(j, i)] != 0 && g.bonds[(j, i)] != k {
                    return Err(GraphError::NotSymmetric(i, j));
                }
                g.bonds[(i, j)] = k;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if g.bonds[(i, j)] != g.bonds[(j, i)] {
                    return Err(GraphError::NotSymmetric(i, j));
                }
            }
        }
        Ok(g)
    }

    /// Serializes to the `{atoms, bonds}` JSON object. Real atoms are
    /// reindexed densely; bonds are listed once with i < j.
    pub fn to_json(&self, vocab: &AtomVocabulary) -> String {
        let real = self.real_nodes();
        let mut slot_to_dense = vec![usize::MAX; self.n_max];
        for (dense, &slot) in real.iter().enumerate() {
            slot_to_dense[slot] = dense;
        }
        let atoms = real.iter().map(|&i| vocab.symbol(self.types[i]).to_string()).collect();
        let mut bonds = Vec::new();
        for (a, &i) in real.iter().enumerate() {
            for &j in &real[a + 1..] {
                let k = self.bonds[(i, j)];
                if k != GHOST {
                    bonds.push((slot_to_dense[i], slot_to_dense[j], vocab.order(k)));
                }
            }
        }
        serde_json::to_string(&MoleculeJson { atoms, bonds }).expect("serializable")
    }

    /// Parses the `{atoms, bonds}` JSON object into a graph with at least
    /// `n_max` slots.
    pub fn from_json(text: &str, n_max: usize, vocab: &AtomVocabulary) -> Result<Self, GraphError> {
        let mj: MoleculeJson =
            serde_json::from_str(text).map_err(|e| GraphError::Shape(e.to_string()))?;
        let atoms: Vec<&str> = mj.atoms.iter().map(|s| s.as_str()).collect();
        Self::from_atoms_bonds(n_max.max(atoms.len()), &atoms, &mj.bonds, vocab)
    }

    /// Returns a copy with node slots permuted: slot `i` of the result holds
    /// what slot `perm[i]` held in `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut g = Self::empty(self.n_max);
        for i in 0..self.n_max {
            g.types[i] = self.types[perm[i]];
            for j in 0..self.n_max {
                g.bonds[(i, j)] = self.bonds[(perm[i], perm[j])];
            }
        }
        g
    }
}

/// Mutually exclusive error taxonomy for generated graphs.
///
/// When several defects coexist the highest-priority class is reported:
/// ghost-node bond, then valency, then split graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Valid,
    SplitGraph,
    Valency,
    GhostNodeBond,
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorClass::Valid => "valid",
            ErrorClass::SplitGraph => "split_graph",
            ErrorClass::Valency => "valency",
            ErrorClass::GhostNodeBond => "ghost_node_bond",
        };
        f.write_str(s)
    }
}

/// Outcome of a validity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub is_valid: bool,
    pub error_class: ErrorClass,
    pub component_count: usize,
    pub offending_nodes: Vec<usize>,
    /// Individual defect flags; several can be set even though
    /// `error_class` reports only the highest-priority one.
    pub has_ghost_node_bond: bool,
    pub has_valency_error: bool,
    pub is_split: bool,
}

/// Checks chemical validity: one connected component over real atoms, all
/// valence loads within capacity, and no bond touching a ghost node.
pub fn validate(graph: &MolecularGraph, vocab: &AtomVocabulary) -> ValidityReport {
    let n = graph.n_max();
    let mut ghost_bond_nodes = Vec::new();
    let mut overloaded = Vec::new();
    for i in 0..n {
        let mut load = 0u32;
        for j in 0..n {
            let k = graph.bond(i, j);
            if k != GHOST {
                load += vocab.order(k);
                if graph.node_type(i) == GHOST || graph.node_type(j) == GHOST {
                    if !ghost_bond_nodes.contains(&i) {
                        ghost_bond_nodes.push(i);
                    }
                }
            }
        }
        if graph.node_type(i) != GHOST && load > vocab.capacity(graph.node_type(i)) {
            overloaded.push(i);
        }
    }

    // Connected components over real nodes, following bonds between real
    // nodes only.
    let real = graph.real_nodes();
    let mut component = vec![usize::MAX; n];
    let mut component_count = 0;
    for &start in &real {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = component_count;
        while let Some(i) = stack.pop() {
            for &j in &real {
                if component[j] == usize::MAX && graph.bond(i, j) != GHOST {
                    component[j] = component_count;
                    stack.push(j);
                }
            }
        }
        component_count += 1;
    }

    let has_ghost_node_bond = !ghost_bond_nodes.is_empty();
    let has_valency_error = !overloaded.is_empty();
    let is_split = component_count != 1;
    let (error_class, offending_nodes) = if has_ghost_node_bond {
        (ErrorClass::GhostNodeBond, ghost_bond_nodes)
    } else if has_valency_error {
        (ErrorClass::Valency, overloaded)
    } else if is_split {
        (ErrorClass::SplitGraph, Vec::new())
    } else {
        (ErrorClass::Valid, Vec::new())
    };
    ValidityReport {
        is_valid: error_class == ErrorClass::Valid,
        error_class,
        component_count,
        offending_nodes,
        has_ghost_node_bond,
        has_valency_error,
        is_split,
    }
}

/// Saturating smoother `s(x) = sigmoid(steepness * (x - 1/2))`.
pub fn smooth_count(x: f64, steepness: f64) -> f64 {
    1.0 / (1.0 + (-steepness * (x - 0.5)).exp())
}

/// Raw path-count matrix: `I + sum_{p=1}^{n_active-1} S^p`, where `S`
/// collapses all real edge channels of the adjacency tensor.
///
/// Accepts both discrete one-hot and relaxed simplex-valued tensors.
pub fn path_count_raw(adjacency: &ArrayView3<f64>, n_active: usize) -> Array2<f64> {
    let n = adjacency.shape()[0];
    let channels = adjacency.shape()[2];
    let mut collapsed = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 1..channels {
                s += adjacency[(i, j, k)];
            }
            collapsed[(i, j)] = s;
        }
    }
    let mut total = Array2::eye(n);
    let mut power = Array2::eye(n);
    for _ in 1..n_active.max(1) {
        power = power.dot(&collapsed);
        total += &power;
    }
    total
}

/// Smoothed path-count matrix in (0, 1); see [`path_count_raw`].
pub fn path_count(adjacency: &ArrayView3<f64>, n_active: usize, steepness: f64) -> Array2<f64> {
    assert!(steepness > 0.0, "smoothing steepness must be positive");
    path_count_raw(adjacency, n_active).mapv(|x| smooth_count(x, steepness))
}

/// Canonical identity string: identical for isomorphic labeled multi-graphs,
/// distinct otherwise. Implemented as the canonical form written by the
/// SMILES writer, so it is stable across runs and processes.
pub fn canonical_key(graph: &MolecularGraph, vocab: &AtomVocabulary) -> Result<String, GraphError> {
    let report = validate(graph, vocab);
    if !report.is_valid {
        return Err(GraphError::InvalidMolecule(report.error_class));
    }
    Ok(crate::smiles::write_smiles(graph, vocab).expect("valid graph is writable"))
}
