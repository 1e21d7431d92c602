//! Graph decoder: an MLP with latent skip connections produces edge and
//! node logits, which a Gumbel-softmax relaxation turns into near-discrete
//! simplex-valued tensors. Discretization to a molecular graph happens only
//! when molecules are emitted.

use crate::ad::{Tape, Var};
use crate::molgraph::{AtomVocabulary, MolecularGraph, GHOST};
use crate::nets::{Bound, NetConfig, Networks};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

/// Continuous relaxation of a molecular graph: every node row and edge
/// fiber lies on the probability simplex; the edge tensor is symmetric.
#[derive(Debug, Clone)]
pub struct RelaxedGraph {
    pub node_probs: Array2<f64>,
    pub edge_probs: Array3<f64>,
    pub temperature: f64,
}

impl RelaxedGraph {
    /// Checks the simplex and symmetry invariants to the stated tolerance.
    pub fn check_invariants(&self) -> Result<(), String> {
        let (n, d1) = self.node_probs.dim();
        for i in 0..n {
            let s: f64 = (0..d1).map(|k| self.node_probs[(i, k)]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(format!("node row {i} sums to {s}"));
            }
        }
        let (n1, n2, m1) = self.edge_probs.dim();
        if n1 != n2 {
            return Err("edge tensor is not square".into());
        }
        for i in 0..n1 {
            for j in 0..n1 {
                let s: f64 = (0..m1).map(|k| self.edge_probs[(i, j, k)]).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(format!("edge fiber ({i}, {j}) sums to {s}"));
                }
                for k in 0..m1 {
                    if (self.edge_probs[(i, j, k)] - self.edge_probs[(j, i, k)]).abs() > 1e-12 {
                        return Err(format!("edge tensor asymmetric at ({i}, {j}, {k})"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gumbel noise for one graph: the edge array is symmetric so that the
/// relaxed adjacency stays symmetric after the noisy softmax.
pub fn sample_gumbel_noise(
    config: &NetConfig,
    rng: &mut impl Rng,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let n = config.n_max;
    let (ec, nc) = (config.edge_channel_dim(), config.node_feature_dim());
    let mut gumbel = |rng: &mut dyn rand::RngCore| -> f64 {
        let u: f64 = rng.random_range(1e-12..1.0);
        -(-u.ln()).ln()
    };
    let mut edges = ArrayD::zeros(IxDyn(&[n, n, ec]));
    for i in 0..n {
        for j in i..n {
            for k in 0..ec {
                let g = gumbel(rng);
                edges[[i, j, k]] = g;
                edges[[j, i, k]] = g;
            }
        }
    }
    let mut nodes = ArrayD::zeros(IxDyn(&[n, nc]));
    for i in 0..n {
        for k in 0..nc {
            nodes[[i, k]] = gumbel(rng);
        }
    }
    (edges, nodes)
}

fn repeat_batch(noise: &ArrayD<f64>, batch: usize) -> ArrayD<f64> {
    let mut shape = vec![batch];
    shape.extend_from_slice(noise.shape());
    let expanded = noise.view().insert_axis(ndarray::Axis(0));
    expanded
        .broadcast(IxDyn(&shape))
        .expect("broadcast noise over batch")
        .to_owned()
}

/// Off-diagonal mask and diagonal ghost one-hot constants: the relaxed
/// adjacency keeps exact ghost fibers on the diagonal.
fn diagonal_constants(tape: &mut Tape, batch: usize, n: usize, channels: usize) -> (Var, Var) {
    let mut off = ArrayD::from_elem(IxDyn(&[batch, n, n, channels]), 1.0);
    let mut diag = ArrayD::zeros(IxDyn(&[batch, n, n, channels]));
    for b in 0..batch {
        for i in 0..n {
            for k in 0..channels {
                off[[b, i, i, k]] = 0.0;
            }
            diag[[b, i, i, GHOST]] = 1.0;
        }
    }
    (tape.constant(off), tape.constant(diag))
}

/// Differentiable decoder forward pass over a batch.
///
/// `z` and `noise` are (batch, latent_dim); the Gumbel tensors are
/// constants shaped like one graph's outputs and shared across the batch
/// call-by-call (training draws fresh noise per step and per sample by
/// batching them in). Returns relaxed (node, edge) tensors.
pub fn generate_batch(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    z: Var,
    noise: Var,
    gumbel_edges: Var,
    gumbel_nodes: Var,
    temperature: f64,
) -> (Var, Var) {
    assert!(temperature > 0.0, "temperature must be positive");
    let batch = tape.shape(z)[0];
    let n = config.n_max;
    let (ec, nc) = (config.edge_channel_dim(), config.node_feature_dim());
    let third = config.latent_dim / 3;

    let h3 = if config.generator_skip {
        let z1 = tape.slice_last(z, 0, third);
        let z2 = tape.slice_last(z, third, 2 * third);
        let z3 = tape.slice_last(z, 2 * third, 3 * third);
        let in1 = tape.concat_last(z1, noise);
        let h1 = tape.affine(in1, bound.var("gen.fc1.w"), bound.var("gen.fc1.b"));
        let h1 = tape.tanh(h1);
        let in2 = tape.concat_last(h1, z2);
        let h2 = tape.affine(in2, bound.var("gen.fc2.w"), bound.var("gen.fc2.b"));
        let h2 = tape.tanh(h2);
        let in3 = tape.concat_last(h2, z3);
        let h3 = tape.affine(in3, bound.var("gen.fc3.w"), bound.var("gen.fc3.b"));
        tape.tanh(h3)
    } else {
        let in1 = tape.concat_last(z, noise);
        let h1 = tape.affine(in1, bound.var("gen.fc1.w"), bound.var("gen.fc1.b"));
        let h1 = tape.tanh(h1);
        let h2 = tape.affine(h1, bound.var("gen.fc2.w"), bound.var("gen.fc2.b"));
        let h2 = tape.tanh(h2);
        let h3 = tape.affine(h2, bound.var("gen.fc3.w"), bound.var("gen.fc3.b"));
        tape.tanh(h3)
    };

    // Edge head: symmetrize logits across the node-pair axes, add Gumbel
    // noise, and softmax each fiber at the given temperature.
    let edge_logits = tape.affine(h3, bound.var("gen.edges.w"), bound.var("gen.edges.b"));
    let edge_logits = tape.reshape(edge_logits, &[batch, n, n, ec]);
    let transposed = tape.swap_axes(edge_logits, 1, 2);
    let summed = tape.add(edge_logits, transposed);
    let symmetric = tape.scale(summed, 0.5);
    let noisy = tape.add(symmetric, gumbel_edges);
    let scaled = tape.scale(noisy, 1.0 / temperature);
    let soft = tape.softmax_last(scaled);
    let (off, diag) = diagonal_constants(tape, batch, n, ec);
    let off_part = tape.mul(soft, off);
    let edges = tape.add(off_part, diag);

    let node_logits = tape.affine(h3, bound.var("gen.nodes.w"), bound.var("gen.nodes.b"));
    let node_logits = tape.reshape(node_logits, &[batch, n, nc]);
    let noisy = tape.add(node_logits, gumbel_nodes);
    let scaled = tape.scale(noisy, 1.0 / temperature);
    let nodes = tape.softmax_last(scaled);

    (nodes, edges)
}

/// Single-graph decode with explicit Gumbel noise.
pub fn generate(
    networks: &Networks,
    z: &Array1<f64>,
    noise: &Array1<f64>,
    gumbel_edges: &ArrayD<f64>,
    gumbel_nodes: &ArrayD<f64>,
    temperature: f64,
) -> RelaxedGraph {
    let config = &networks.config;
    let mut tape = Tape::new();
    let bound = networks.bind_const(&mut tape);
    let z = tape.constant(z.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let e = tape.constant(noise.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let ge = tape.constant(repeat_batch(gumbel_edges, 1));
    let gn = tape.constant(repeat_batch(gumbel_nodes, 1));
    let (nodes, edges) = generate_batch(&mut tape, &bound, config, z, e, ge, gn, temperature);
    let n = config.n_max;
    let node_probs =
        Array2::from_shape_fn((n, config.node_feature_dim()), |(i, k)| {
            tape.value(nodes)[[0, i, k]]
        });
    let edge_probs = Array3::from_shape_fn(
        (n, n, config.edge_channel_dim()),
        |(i, j, k)| tape.value(edges)[[0, i, j, k]],
    );
    RelaxedGraph {
        node_probs,
        edge_probs,
        temperature,
    }
}

/// Argmax over a simplex slice with ties broken toward the lowest index,
/// so the ghost category wins exact ties.
fn argmax_low(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Collapses a relaxed graph to a discrete molecular graph: per-row and
/// per-fiber argmax, diagonal forced to ghost.
pub fn discretize(relaxed: &RelaxedGraph, vocab: &AtomVocabulary) -> MolecularGraph {
    let n = relaxed.node_probs.nrows();
    let _ = vocab;
    let mut graph = MolecularGraph::empty(n);
    for i in 0..n {
        let t = argmax_low(relaxed.node_probs.row(i).iter().copied());
        graph.set_node_type(i, t);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let channels = relaxed.edge_probs.dim().2;
            let k = argmax_low((0..channels).map(|k| relaxed.edge_probs[(i, j, k)]));
            graph.set_bond(i, j, k).expect("off-diagonal bond");
        }
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{central_difference, max_relative_error};
    use crate::nets::{NetConfig, Networks};
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn zero_gumbel(config: &NetConfig) -> (ArrayD<f64>, ArrayD<f64>) {
        let n = config.n_max;
        (
            ArrayD::zeros(IxDyn(&[n, n, config.edge_channel_dim()])),
            ArrayD::zeros(IxDyn(&[n, config.node_feature_dim()])),
        )
    }

    fn randn_vec(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(len, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn fibers_lie_on_the_simplex_and_are_symmetric() {
        let nets = Networks::new(NetConfig::default(), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = randn_vec(96, &mut rng);
        let e = randn_vec(96, &mut rng);
        let (ge, gn) = sample_gumbel_noise(&nets.config, &mut rng);
        let rg = generate(&nets, &z, &e, &ge, &gn, 1.0);
        rg.check_invariants().unwrap();
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let nets = Networks::new(NetConfig::default(), 22);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = randn_vec(96, &mut rng);
        let e = randn_vec(96, &mut rng);
        let (ge, gn) = sample_gumbel_noise(&nets.config, &mut rng);
        let rg = generate(&nets, &z, &e, &ge, &gn, 0.01);
        for i in 0..9 {
            let max = rg.node_probs.row(i).iter().cloned().fold(0.0, f64::max);
            assert!(max >= 0.99, "node row {i} max {max}");
            for j in 0..9 {
                let max = (0..4).map(|k| rg.edge_probs[(i, j, k)]).fold(0.0, f64::max);
                assert!(max >= 0.99, "edge fiber ({i}, {j}) max {max}");
            }
        }
    }

    #[test]
    fn deterministic_given_fixed_inputs() {
        let nets = Networks::new(NetConfig::default(), 23);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn_vec(96, &mut rng);
        let e = randn_vec(96, &mut rng);
        let (ge, gn) = sample_gumbel_noise(&nets.config, &mut rng);
        let a = generate(&nets, &z, &e, &ge, &gn, 1.0);
        let b = generate(&nets, &z, &e, &ge, &gn, 1.0);
        assert_eq!(a.node_probs, b.node_probs);
        assert_eq!(a.edge_probs, b.edge_probs);
    }

    #[test]
    fn output_gradient_wrt_latent_matches_finite_differences() {
        let nets = Networks::new(NetConfig::default(), 24);
        let config = nets.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = randn_vec(96, &mut rng).into_dyn().into_shape_with_order(IxDyn(&[1, 96])).unwrap();
        let e0 = randn_vec(96, &mut rng);
        let (ge, gn) = sample_gumbel_noise(&config, &mut rng);

        let eval = |za: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let bound = nets.bind_const(&mut t);
            let z = t.constant(za.clone());
            let e = t.constant(e0.clone().insert_axis(ndarray::Axis(0)).into_dyn());
            let gev = t.constant(repeat_batch(&ge, 1));
            let gnv = t.constant(repeat_batch(&gn, 1));
            let (nodes, edges) = generate_batch(&mut t, &bound, &config, z, e, gev, gnv, 1.0);
            // Probe: a fixed linear functional of both outputs.
            let sn = t.sum_all(nodes);
            let se = t.sum_all(edges);
            let se2 = t.scale(se, 0.25);
            let mixed = t.add(sn, se2);
            // Make it nonlinear so the gradient is informative.
            let sq = t.square(mixed);
            t.scalar(sq)
        };

        let mut t = Tape::new();
        let bound = nets.bind_const(&mut t);
        let z = t.leaf(z0.clone());
        let e = t.constant(e0.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let gev = t.constant(repeat_batch(&ge, 1));
        let gnv = t.constant(repeat_batch(&gn, 1));
        let (nodes, edges) = generate_batch(&mut t, &bound, &config, z, e, gev, gnv, 1.0);
        let sn = t.sum_all(nodes);
        let se = t.sum_all(edges);
        let se2 = t.scale(se, 0.25);
        let mixed = t.add(sn, se2);
        let sq = t.square(mixed);
        let grads = t.grad(sq, &[z]);

        let coords: Vec<usize> = (0..96).step_by(7).collect();
        let numeric = central_difference(&eval, &z0, &coords, 1e-5);
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&c| t.value(grads[0]).as_slice().unwrap()[c])
            .collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn discretize_is_idempotent_on_one_hot() {
        let vocab = AtomVocabulary::qm9();
        let g = crate::smiles::parse_smiles("CC(=O)N", &vocab).unwrap();
        let rg = RelaxedGraph {
            node_probs: g.node_onehot(&vocab),
            edge_probs: g.adjacency_onehot(&vocab),
            temperature: 1.0,
        };
        let back = discretize(&rg, &vocab);
        assert_eq!(back, g);
    }

    #[test]
    fn exact_tie_resolves_to_ghost() {
        let vocab = AtomVocabulary::qm9();
        let mut node_probs = Array2::zeros((9, 5));
        for i in 0..9 {
            node_probs[(i, 0)] = 1.0;
        }
        let mut edge_probs = Array3::zeros((9, 9, 4));
        for i in 0..9 {
            for j in 0..9 {
                edge_probs[(i, j, 0)] = 1.0;
            }
        }
        // An exactly tied fiber between slots 0 and 1.
        edge_probs[(0, 1, 0)] = 0.5;
        edge_probs[(0, 1, 1)] = 0.5;
        edge_probs[(1, 0, 0)] = 0.5;
        edge_probs[(1, 0, 1)] = 0.5;
        node_probs[(0, 0)] = 0.5;
        node_probs[(0, 1)] = 0.5;
        let rg = RelaxedGraph {
            node_probs,
            edge_probs,
            temperature: 1.0,
        };
        let g = discretize(&rg, &vocab);
        assert_eq!(g.node_type(0), 0, "tied node row goes to ghost");
        assert_eq!(g.bond(0, 1), 0, "tied edge fiber goes to ghost");
    }

    #[test]
    fn zero_noise_low_temperature_matches_logit_argmax() {
        // With Gumbel noise zeroed, softmax preserves the logits' argmax at
        // any temperature, so discretization equals the analytic argmax.
        let nets = Networks::new(NetConfig::default(), 25);
        let vocab = AtomVocabulary::qm9();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ge0, gn0) = zero_gumbel(&nets.config);
        for _ in 0..100 {
            let z = randn_vec(96, &mut rng);
            let e = randn_vec(96, &mut rng);
            let sharp = generate(&nets, &z, &e, &ge0, &gn0, 0.01);
            let smooth = generate(&nets, &z, &e, &ge0, &gn0, 1.0);
            let a = discretize(&sharp, &vocab);
            let b = discretize(&smooth, &vocab);
            assert_eq!(a, b, "argmax must not depend on temperature");
        }
    }
}
