//! SMILES-subset reader and canonical writer.
//!
//! The grammar covers what QM9-class molecules need and nothing more:
//! atoms C/N/O/F (aromatic c/n/o), neutral bracket atoms with an explicit
//! hydrogen count, bonds `-`/`=`/`#`, branches, and single-digit ring
//! closures. Charges, isotopes, stereo marks, and other elements are
//! rejected. Aromatic ring notation is kekulized to alternating single and
//! double bonds by an exact matching search.

use crate::molgraph::{validate, AtomVocabulary, ErrorClass, MolecularGraph, GHOST};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SmilesError {
    #[error("unsupported SMILES feature at position {position}: {what}")]
    UnsupportedFeature { position: usize, what: String },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("valence overflow on atom {atom}: load {load} exceeds capacity {capacity}")]
    Valence { atom: usize, load: u32, capacity: u32 },
    #[error("explicit hydrogen count on atom {atom} is inconsistent with its bonds")]
    HydrogenCount { atom: usize },
    #[error("no valid kekulization of the aromatic system")]
    Kekulization,
    #[error("graph is not a valid molecule ({0})")]
    InvalidGraph(ErrorClass),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BondSpec {
    Order(usize),
    Aromatic,
}

#[derive(Debug, Clone)]
struct ParsedAtom {
    node_type: usize,
    aromatic: bool,
    explicit_h: Option<u32>,
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    vocab: &'a AtomVocabulary,
    atoms: Vec<ParsedAtom>,
    bonds: Vec<(usize, usize, BondSpec)>,
}

impl<'a> Parser<'a> {
    fn unsupported(&self, what: impl Into<String>) -> SmilesError {
        SmilesError::UnsupportedFeature {
            position: self.pos,
            what: what.into(),
        }
    }

    fn atom_from_char(&self, c: char) -> Option<(usize, bool)> {
        let (symbol, aromatic) = match c {
            'C' => ("C", false),
            'N' => ("N", false),
            'O' => ("O", false),
            'F' => ("F", false),
            'c' => ("C", true),
            'n' => ("N", true),
            'o' => ("O", true),
            _ => return None,
        };
        self.vocab.node_type_of(symbol).ok().map(|t| (t, aromatic))
    }

    /// Parses a bracket atom body such as `C`, `nH`, `CH2`. The opening
    /// bracket has been consumed.
    fn parse_bracket(&mut self) -> Result<ParsedAtom, SmilesError> {
        let c = *self
            .chars
            .get(self.pos)
            .ok_or_else(|| SmilesError::Syntax("unterminated bracket atom".into()))?;
        if c.is_ascii_digit() {
            return Err(self.unsupported("isotope label"));
        }
        let (node_type, aromatic) = self
            .atom_from_char(c)
            .ok_or_else(|| self.unsupported(format!("element `{c}`")))?;
        self.pos += 1;
        let mut explicit_h = 0u32;
        while let Some(&c) = self.chars.get(self.pos) {
            match c {
                ']' => {
                    self.pos += 1;
                    return Ok(ParsedAtom {
                        node_type,
                        aromatic,
                        explicit_h: Some(explicit_h),
                    });
                }
                'H' => {
                    self.pos += 1;
                    if let Some(&d) = self.chars.get(self.pos) {
                        if d.is_ascii_digit() {
                            explicit_h = d.to_digit(10).unwrap();
                            self.pos += 1;
                            continue;
                        }
                    }
                    explicit_h = 1;
                }
                '+' | '-' => return Err(self.unsupported("formal charge")),
                '@' => return Err(self.unsupported("stereo mark")),
                _ => return Err(self.unsupported(format!("bracket token `{c}`"))),
            }
        }
        Err(SmilesError::Syntax("unterminated bracket atom".into()))
    }

    fn parse(mut self) -> Result<(Vec<ParsedAtom>, Vec<(usize, usize, BondSpec)>), SmilesError> {
        let mut prev_stack: Vec<usize> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending: Option<BondSpec> = None;
        // Open ring closures: digit -> (atom index, bond spec at open site).
        let mut rings: Vec<Option<(usize, Option<BondSpec>)>> = vec![None; 10];

        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            match c {
                '-' => {
                    self.pos += 1;
                    pending = Some(BondSpec::Order(1));
                }
                '=' => {
                    self.pos += 1;
                    pending = Some(BondSpec::Order(2));
                }
                '#' => {
                    self.pos += 1;
                    pending = Some(BondSpec::Order(3));
                }
                ':' => return Err(self.unsupported("explicit aromatic bond")),
                '/' | '\\' => return Err(self.unsupported("stereo bond")),
                '.' => return Err(self.unsupported("disconnected component separator")),
                '%' => return Err(self.unsupported("two-digit ring closure")),
                '(' => {
                    if pending.is_some() {
                        return Err(SmilesError::Syntax("bond symbol before `(`".into()));
                    }
                    let p = prev.ok_or_else(|| SmilesError::Syntax("`(` before any atom".into()))?;
                    prev_stack.push(p);
                    self.pos += 1;
                }
                ')' => {
                    if pending.is_some() {
                        return Err(SmilesError::Syntax("dangling bond before `)`".into()));
                    }
                    prev = Some(
                        prev_stack
                            .pop()
                            .ok_or_else(|| SmilesError::Syntax("unmatched `)`".into()))?,
                    );
                    self.pos += 1;
                }
                d if d.is_ascii_digit() => {
                    let idx = d.to_digit(10).unwrap() as usize;
                    let here =
                        prev.ok_or_else(|| SmilesError::Syntax("ring digit before any atom".into()))?;
                    match rings[idx].take() {
                        None => rings[idx] = Some((here, pending.take())),
                        Some((other, open_spec)) => {
                            if other == here {
                                return Err(SmilesError::Syntax("ring closure to itself".into()));
                            }
                            let close_spec = pending.take();
                            let spec = match (open_spec, close_spec) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(SmilesError::Syntax(
                                        "conflicting ring closure bonds".into(),
                                    ))
                                }
                                (Some(a), _) | (_, Some(a)) => a,
                                (None, None) => {
                                    if self.atoms[other].aromatic && self.atoms[here].aromatic {
                                        BondSpec::Aromatic
                                    } else {
                                        BondSpec::Order(1)
                                    }
                                }
                            };
                            self.push_bond(other, here, spec)?;
                        }
                    }
                    self.pos += 1;
                }
                '[' => {
                    self.pos += 1;
                    let atom = self.parse_bracket()?;
                    self.add_atom(atom, &mut prev, &mut pending)?;
                }
                c => {
                    if let Some((node_type, aromatic)) = self.atom_from_char(c) {
                        self.pos += 1;
                        self.add_atom(
                            ParsedAtom {
                                node_type,
                                aromatic,
                                explicit_h: None,
                            },
                            &mut prev,
                            &mut pending,
                        )?;
                    } else {
                        return Err(self.unsupported(format!("token `{c}`")));
                    }
                }
            }
        }
        if pending.is_some() {
            return Err(SmilesError::Syntax("dangling bond at end of input".into()));
        }
        if !prev_stack.is_empty() {
            return Err(SmilesError::Syntax("unmatched `(`".into()));
        }
        if rings.iter().any(|r| r.is_some()) {
            return Err(SmilesError::Syntax("unmatched ring closure digit".into()));
        }
        Ok((self.atoms, self.bonds))
    }

    fn add_atom(
        &mut self,
        atom: ParsedAtom,
        prev: &mut Option<usize>,
        pending: &mut Option<BondSpec>,
    ) -> Result<(), SmilesError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(p) = *prev {
            let spec = pending.take().unwrap_or({
                if self.atoms[p].aromatic && self.atoms[idx].aromatic {
                    BondSpec::Aromatic
                } else {
                    BondSpec::Order(1)
                }
            });
            self.push_bond(p, idx, spec)?;
        } else if pending.is_some() {
            return Err(SmilesError::Syntax("bond before first atom".into()));
        }
        *prev = Some(idx);
        Ok(())
    }

    fn push_bond(&mut self, i: usize, j: usize, spec: BondSpec) -> Result<(), SmilesError> {
        if self.bonds.iter().any(|&(a, b, _)| (a, b) == (i, j) || (a, b) == (j, i)) {
            return Err(SmilesError::Syntax(format!("duplicate bond between {i} and {j}")));
        }
        self.bonds.push((i, j, spec));
        Ok(())
    }
}

/// Assigns single/double orders to aromatic bonds so that every aromatic
/// atom ends up with an integer valence: aromatic carbons need exactly one
/// double bond, pyridine-type nitrogens need one, pyrrole-type nitrogens
/// (explicit H or three connections) and oxygens need none.
fn kekulize(
    atoms: &[ParsedAtom],
    bonds: &mut [(usize, usize, BondSpec)],
) -> Result<(), SmilesError> {
    let n = atoms.len();
    let mut degree = vec![0usize; n];
    let mut has_explicit_double = vec![false; n];
    for &(i, j, spec) in bonds.iter() {
        degree[i] += 1;
        degree[j] += 1;
        if let BondSpec::Order(o) = spec {
            if o >= 2 {
                has_explicit_double[i] = true;
                has_explicit_double[j] = true;
            }
        }
    }
    let mut needy = vec![false; n];
    for (i, atom) in atoms.iter().enumerate() {
        if !atom.aromatic {
            continue;
        }
        needy[i] = match atom.node_type {
            1 => !has_explicit_double[i],                            // carbon
            2 => atom.explicit_h.unwrap_or(0) == 0 && degree[i] < 3, // nitrogen
            _ => false,                                              // oxygen
        };
    }

    // Candidate double-bond sites: aromatic bonds between two needy atoms.
    let candidates: Vec<(usize, usize, usize)> = bonds
        .iter()
        .enumerate()
        .filter(|(_, &(_, _, s))| s == BondSpec::Aromatic)
        .map(|(e, &(i, j, _))| (e, i, j))
        .filter(|&(_, i, j)| needy[i] && needy[j])
        .collect();

    fn match_all(
        unmatched: &mut Vec<usize>,
        candidates: &[(usize, usize, usize)],
        chosen: &mut Vec<usize>,
    ) -> bool {
        let target = match unmatched.first() {
            None => return true,
            Some(&t) => t,
        };
        for &(e, i, j) in candidates {
            if (i == target || j == target) && unmatched.contains(&i) && unmatched.contains(&j) {
                let other = if i == target { j } else { i };
                unmatched.retain(|&v| v != target && v != other);
                chosen.push(e);
                if match_all(unmatched, candidates, chosen) {
                    return true;
                }
                chosen.pop();
                unmatched.push(target);
                unmatched.push(other);
                unmatched.sort_unstable();
            }
        }
        false
    }

    let mut unmatched: Vec<usize> = (0..n).filter(|&i| needy[i]).collect();
    let mut chosen = Vec::new();
    if !match_all(&mut unmatched, &candidates, &mut chosen) {
        return Err(SmilesError::Kekulization);
    }
    for &e in &chosen {
        bonds[e].2 = BondSpec::Order(2);
    }
    for bond in bonds.iter_mut() {
        if bond.2 == BondSpec::Aromatic {
            bond.2 = BondSpec::Order(1);
        }
    }
    Ok(())
}

/// Parses a SMILES string from the supported subset into a molecular graph
/// padded to at least 9 node slots.
pub fn parse_smiles(text: &str, vocab: &AtomVocabulary) -> Result<MolecularGraph, SmilesError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(SmilesError::Syntax("empty input".into()));
    }
    let parser = Parser {
        chars: trimmed.chars().collect(),
        pos: 0,
        vocab,
        atoms: Vec::new(),
        bonds: Vec::new(),
    };
    let (atoms, mut bonds) = parser.parse()?;
    kekulize(&atoms, &mut bonds)?;

    let n_max = atoms.len().max(9);
    let mut graph = MolecularGraph::empty(n_max);
    for (i, atom) in atoms.iter().enumerate() {
        graph.set_node_type(i, atom.node_type);
    }
    for &(i, j, spec) in &bonds {
        let order = match spec {
            BondSpec::Order(o) => o,
            BondSpec::Aromatic => unreachable!("kekulization resolves aromatic bonds"),
        };
        let k = vocab
            .bond_type_of(order as u32)
            .map_err(|_| SmilesError::Syntax(format!("bond order {order} outside vocabulary")))?;
        graph
            .set_bond(i, j, k)
            .map_err(|_| SmilesError::Syntax("self bond".into()))?;
    }

    // Valence accounting: implicit hydrogens are capacity minus load and
    // must be non-negative; an explicit bracket count must match exactly.
    for (i, atom) in atoms.iter().enumerate() {
        let load = graph.valence_load(i, vocab);
        let capacity = vocab.capacity(atom.node_type);
        if load > capacity {
            return Err(SmilesError::Valence {
                atom: i,
                load,
                capacity,
            });
        }
        if let Some(h) = atom.explicit_h {
            if capacity - load != h {
                return Err(SmilesError::HydrogenCount { atom: i });
            }
        }
    }
    Ok(graph)
}

const MIX_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stable 64-bit mixer (splitmix64 finalizer); used instead of the standard
/// library hasher so identities never change across runs or processes.
fn mix(state: u64, value: u64) -> u64 {
    let mut z = state ^ value.wrapping_mul(MIX_SEED);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dense view of the real atoms of a graph, used by the canonical writer.
struct Subgraph {
    types: Vec<usize>,
    bonds: Vec<Vec<usize>>, // bond type matrix, 0 = none
    neighbors: Vec<Vec<usize>>,
}

impl Subgraph {
    fn from_graph(graph: &MolecularGraph, vocab: &AtomVocabulary) -> Self {
        let real = graph.real_nodes();
        let n = real.len();
        let mut bonds = vec![vec![0usize; n]; n];
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let k = graph.bond(real[a], real[b]);
                    bonds[a][b] = k;
                    if k != GHOST {
                        neighbors[a].push(b);
                    }
                }
            }
        }
        let types = real.iter().map(|&i| graph.node_type(i)).collect();
        let _ = vocab;
        Self {
            types,
            bonds,
            neighbors,
        }
    }

    fn len(&self) -> usize {
        self.types.len()
    }

    fn initial_invariants(&self, vocab: &AtomVocabulary) -> Vec<u64> {
        (0..self.len())
            .map(|i| {
                let degree = self.neighbors[i].len() as u64;
                let load: u64 = self.neighbors[i]
                    .iter()
                    .map(|&j| vocab.order(self.bonds[i][j]) as u64)
                    .sum();
                mix(mix(mix(1, self.types[i] as u64), degree), load)
            })
            .collect()
    }

    /// Iterative neighborhood refinement; returns one invariant per atom.
    fn refine(&self, seed: &[u64]) -> Vec<u64> {
        let n = self.len();
        let mut inv = seed.to_vec();
        let mut classes = distinct(&inv);
        for _ in 0..n {
            let mut next = vec![0u64; n];
            for i in 0..n {
                let mut neigh: Vec<u64> = self.neighbors[i]
                    .iter()
                    .map(|&j| mix(self.bonds[i][j] as u64, inv[j]))
                    .collect();
                neigh.sort_unstable();
                let mut h = mix(0xabcd_ef01, inv[i]);
                for v in neigh {
                    h = mix(h, v);
                }
                next[i] = h;
            }
            let next_classes = distinct(&next);
            inv = next;
            if next_classes == classes {
                break;
            }
            classes = next_classes;
        }
        inv
    }

    /// Adjacency signature under a total order; lexicographic comparison of
    /// signatures picks the canonical labeling.
    fn signature(&self, order: &[usize]) -> Vec<u32> {
        let mut sig = Vec::with_capacity(order.len() * (order.len() + 3) / 2);
        for (p, &a) in order.iter().enumerate() {
            sig.push(self.types[a] as u32);
            for &b in order.iter().take(p) {
                sig.push(self.bonds[a][b] as u32);
            }
        }
        sig
    }

    /// Canonical atom order by individualization-refinement: repeatedly
    /// split the first non-singleton invariant class and keep the branch
    /// with the lexicographically smallest signature.
    fn canonical_order(&self, vocab: &AtomVocabulary) -> Vec<usize> {
        let seed = self.initial_invariants(vocab);
        let inv = self.refine(&seed);
        let mut best: Option<(Vec<u32>, Vec<usize>)> = None;
        self.branch(&inv, &mut best);
        best.expect("non-empty subgraph").1
    }

    fn branch(&self, inv: &[u64], best: &mut Option<(Vec<u32>, Vec<usize>)>) {
        let n = self.len();
        let mut by_inv: Vec<(u64, Vec<usize>)> = Vec::new();
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by_key(|&i| inv[i]);
        for i in sorted {
            match by_inv.last_mut() {
                Some((v, members)) if *v == inv[i] => members.push(i),
                _ => by_inv.push((inv[i], vec![i])),
            }
        }
        if let Some((_, members)) = by_inv.iter().find(|(_, m)| m.len() > 1) {
            for &target in members {
                let mut individualized = inv.to_vec();
                individualized[target] = mix(0x5eed_5eed, inv[target]);
                let refined = self.refine(&individualized);
                self.branch(&refined, best);
            }
            return;
        }
        let order: Vec<usize> = by_inv.into_iter().map(|(_, m)| m[0]).collect();
        let sig = self.signature(&order);
        match best {
            Some((best_sig, _)) if *best_sig <= sig => {}
            _ => *best = Some((sig, order)),
        }
    }
}

fn distinct(values: &[u64]) -> usize {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// DFS tree over the canonical order: children sorted by rank; edges to
/// already-visited non-parents become ring closures.
struct EmitPlan {
    children: Vec<Vec<usize>>,
    /// Ring partner lists per atom, in emission order.
    rings: Vec<Vec<usize>>,
    preorder: Vec<usize>,
}

fn plan_emission(sub: &Subgraph, rank: &[usize], root: usize) -> EmitPlan {
    let n = sub.len();
    let mut plan = EmitPlan {
        children: vec![Vec::new(); n],
        rings: vec![Vec::new(); n],
        preorder: vec![usize::MAX; n],
    };
    let mut counter = 0usize;
    let mut stack = vec![(root, usize::MAX)];
    // Recursive DFS expressed with an explicit stack; child order matters.
    fn visit(
        sub: &Subgraph,
        rank: &[usize],
        u: usize,
        parent: usize,
        counter: &mut usize,
        plan: &mut EmitPlan,
    ) {
        plan.preorder[u] = *counter;
        *counter += 1;
        let mut neigh = sub.neighbors[u].clone();
        neigh.sort_by_key(|&j| rank[j]);
        for j in neigh {
            if j == parent {
                continue;
            }
            if plan.preorder[j] == usize::MAX {
                plan.children[u].push(j);
                visit(sub, rank, j, u, counter, plan);
            } else if !plan.rings[j].contains(&u) {
                // Back edge: register at both endpoints.
                plan.rings[u].push(j);
                plan.rings[j].push(u);
            }
        }
    }
    while let Some((u, parent)) = stack.pop() {
        visit(sub, rank, u, parent, &mut counter, &mut plan);
    }
    plan
}

/// Writes the canonical SMILES of a valid molecular graph. Isomorphic
/// graphs produce identical strings; the output is always kekulized.
pub fn write_smiles(graph: &MolecularGraph, vocab: &AtomVocabulary) -> Result<String, SmilesError> {
    let report = validate(graph, vocab);
    if !report.is_valid {
        return Err(SmilesError::InvalidGraph(report.error_class));
    }
    let sub = Subgraph::from_graph(graph, vocab);
    let order = sub.canonical_order(vocab);
    let mut rank = vec![0usize; sub.len()];
    for (r, &a) in order.iter().enumerate() {
        rank[a] = r;
    }
    let root = order[0];
    let plan = plan_emission(&sub, &rank, root);

    let bond_symbol = |k: usize| -> &'static str {
        match vocab.order(k) {
            2 => "=",
            3 => "#",
            _ => "",
        }
    };

    // Digits 1..9 then 0, reused once a ring closes.
    let digit_pool: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 0];
    let mut digit_in_use = [false; 10];
    let mut open_digit: Vec<Vec<(usize, usize)>> = vec![Vec::new(); sub.len()]; // atom -> (partner, digit)
    let mut out = String::new();

    struct Emitter<'a> {
        sub: &'a Subgraph,
        plan: &'a EmitPlan,
        bond_symbol: &'a dyn Fn(usize) -> &'static str,
        digit_pool: [usize; 10],
    }

    impl<'a> Emitter<'a> {
        #[allow(clippy::too_many_arguments)]
        fn emit(
            &self,
            u: usize,
            bond_from: usize,
            out: &mut String,
            digit_in_use: &mut [bool; 10],
            open_digit: &mut Vec<Vec<(usize, usize)>>,
        ) -> Result<(), SmilesError> {
            out.push_str((self.bond_symbol)(bond_from));
            out.push_str(match self.sub.types[u] {
                1 => "C",
                2 => "N",
                3 => "O",
                _ => "F",
            });
            // Ring closures at this atom: closes first (partner emitted
            // earlier), then opens, each ordered by partner preorder.
            let mut partners = self.plan.rings[u].clone();
            partners.sort_by_key(|&v| self.plan.preorder[v]);
            for v in partners {
                if self.plan.preorder[v] < self.plan.preorder[u] {
                    // Close: the digit was allocated when v was emitted.
                    let idx = open_digit[v]
                        .iter()
                        .position(|&(p, _)| p == u)
                        .expect("ring opened at partner");
                    let (_, digit) = open_digit[v].remove(idx);
                    out.push_str(&digit.to_string());
                    digit_in_use[digit] = false;
                } else {
                    let digit = *self
                        .digit_pool
                        .iter()
                        .find(|&&d| !digit_in_use[d])
                        .ok_or_else(|| {
                            SmilesError::Syntax("too many simultaneously open rings".into())
                        })?;
                    digit_in_use[digit] = true;
                    open_digit[u].push((v, digit));
                    out.push_str((self.bond_symbol)(self.sub.bonds[u][v]));
                    out.push_str(&digit.to_string());
                }
            }
            let children = &self.plan.children[u];
            for (idx, &child) in children.iter().enumerate() {
                let last = idx == children.len() - 1;
                if !last {
                    out.push('(');
                }
                self.emit(child, self.sub.bonds[u][child], out, digit_in_use, open_digit)?;
                if !last {
                    out.push(')');
                }
            }
            Ok(())
        }
    }

    let emitter = Emitter {
        sub: &sub,
        plan: &plan,
        bond_symbol: &bond_symbol,
        digit_pool,
    };
    emitter.emit(root, GHOST, &mut out, &mut digit_in_use, &mut open_digit)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::validate;

    fn vocab() -> AtomVocabulary {
        AtomVocabulary::qm9()
    }

    #[test]
    fn single_atom() {
        let v = vocab();
        let g = parse_smiles("C", &v).unwrap();
        assert_eq!(g.num_real_nodes(), 1);
        assert_eq!(g.node_type(0), v.node_type_of("C").unwrap());
        assert_eq!(write_smiles(&g, &v).unwrap(), "C");
    }

    #[test]
    fn triple_bond_loads() {
        let v = vocab();
        let g = parse_smiles("C#N", &v).unwrap();
        assert_eq!(g.valence_load(0, &v), 3);
        assert_eq!(g.valence_load(1, &v), 3);
    }

    #[test]
    fn benzene_kekulizes_to_alternating_bonds() {
        let v = vocab();
        let g = parse_smiles("c1ccccc1", &v).unwrap();
        assert_eq!(g.num_real_nodes(), 6);
        let mut singles = 0;
        let mut doubles = 0;
        for i in 0..6 {
            // Every carbon must carry exactly one double bond: load 4 total
            // with two ring bonds and one implicit hydrogen slot spare.
            assert_eq!(g.valence_load(i, &v), 4 - 1, "carbon {i} load");
            for j in (i + 1)..6 {
                match v.order(g.bond(i, j)) {
                    0 => {}
                    1 => singles += 1,
                    2 => doubles += 1,
                    o => panic!("unexpected bond order {o}"),
                }
            }
        }
        assert_eq!((singles, doubles), (3, 3));
        let report = validate(&g, &v);
        assert!(report.is_valid, "{report:?}");
    }

    #[test]
    fn pyrrole_type_nitrogen_takes_no_double_bond() {
        let v = vocab();
        // Pyrrole: the [nH] nitrogen keeps single bonds, the four carbons
        // pair up into two double bonds.
        let g = parse_smiles("c1cc[nH]c1", &v).unwrap();
        assert!(validate(&g, &v).is_valid);
        let n_idx = (0..5).find(|&i| i < 9 && g.node_type(i) == 2).unwrap();
        assert_eq!(g.valence_load(n_idx, &v), 2);
    }

    #[test]
    fn furan_oxygen_takes_no_double_bond() {
        let v = vocab();
        let g = parse_smiles("c1ccoc1", &v).unwrap();
        assert!(validate(&g, &v).is_valid);
        let o_idx = (0..5).find(|&i| g.node_type(i) == 3).unwrap();
        assert_eq!(g.valence_load(o_idx, &v), 2);
    }

    #[test]
    fn rejects_out_of_subset_features() {
        let v = vocab();
        for text in ["[C+]", "[13C]", "C/C=C/C", "CS", "C.C", "C%11CC%11", "[C@H](N)C"] {
            let err = parse_smiles(text, &v).unwrap_err();
            assert!(
                matches!(err, SmilesError::UnsupportedFeature { .. }),
                "{text} gave {err:?}"
            );
        }
    }

    #[test]
    fn rejects_syntax_errors() {
        let v = vocab();
        for text in ["C1CC", "C(C", "CC)", "C=", "=C", "C11"] {
            let err = parse_smiles(text, &v).unwrap_err();
            assert!(matches!(err, SmilesError::Syntax(_)), "{text} gave {err:?}");
        }
    }

    #[test]
    fn rejects_valence_overflow() {
        let v = vocab();
        let err = parse_smiles("C(=O)(=O)=O", &v).unwrap_err();
        assert!(matches!(err, SmilesError::Valence { .. }), "{err:?}");
        // Fluorine with two bonds.
        let err = parse_smiles("C=FC", &v);
        assert!(err.is_err());
    }

    #[test]
    fn permuted_ethanol_writes_identically() {
        let v = vocab();
        let a = parse_smiles("CCO", &v).unwrap();
        let b = parse_smiles("OCC", &v).unwrap();
        let c = parse_smiles("C(O)C", &v).unwrap();
        let sa = write_smiles(&a, &v).unwrap();
        assert_eq!(sa, write_smiles(&b, &v).unwrap());
        assert_eq!(sa, write_smiles(&c, &v).unwrap());
    }

    #[test]
    fn ethanol_and_dimethyl_ether_differ() {
        let v = vocab();
        let ethanol = parse_smiles("CCO", &v).unwrap();
        let ether = parse_smiles("COC", &v).unwrap();
        assert_ne!(
            write_smiles(&ethanol, &v).unwrap(),
            write_smiles(&ether, &v).unwrap()
        );
    }

    #[test]
    fn round_trip_preserves_structure() {
        let v = vocab();
        for text in [
            "C", "CC", "CCO", "C#N", "C=C", "CC(C)C", "C1CC1", "c1ccccc1", "C1CCC1O",
            "N1C=CC=C1", "OC1CCOC1", "FC(F)(F)C#CC", "C1=CC2CC1C2",
        ] {
            let g = parse_smiles(text, &v).unwrap();
            let written = write_smiles(&g, &v).unwrap();
            let back = parse_smiles(&written, &v)
                .unwrap_or_else(|e| panic!("re-parse of `{written}` from `{text}`: {e}"));
            assert_eq!(
                write_smiles(&back, &v).unwrap(),
                written,
                "round trip of `{text}` via `{written}`"
            );
        }
    }

    #[test]
    fn canonical_form_is_stable_under_node_permutation() {
        use rand::prelude::*;
        let v = vocab();
        let g = parse_smiles("OC1CCOC1", &v).unwrap();
        let base = write_smiles(&g, &v).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..g.n_max()).collect();
            perm.shuffle(&mut rng);
            let permuted = g.permuted(&perm);
            assert_eq!(write_smiles(&permuted, &v).unwrap(), base);
        }
    }
}
