//! Shared differentiable backbone: message-passing layers for multi-graphs,
//! skip-concatenation, soft-attention graph pooling, and the network heads
//! (encoder plus joint, cycle, and unary discriminators).
//!
//! Parameters live in a name-keyed store; each training phase binds them
//! onto a fresh tape as differentiable leaves or constants.

use crate::ad::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint version {0} unsupported")]
    Version(u32),
}

/// Architecture and ablation switches. Defaults reproduce the reference
/// configuration; the boolean switches express the ablation table rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_max: usize,
    pub num_atom_types: usize,
    pub num_bond_types: usize,
    pub latent_dim: usize,
    pub gin_layers: usize,
    pub gin_hidden: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub noise_branch: usize,
    pub cycle_mlp: usize,
    pub generator_hidden: [usize; 3],
    /// Soft-attention gate in graph pooling.
    pub attention: bool,
    /// Feed all message-passing layers (plus raw node types) to pooling;
    /// when off, pooling sees only the last layer.
    pub gin_skip: bool,
    /// Re-inject latent slices into the generator MLP layers.
    pub generator_skip: bool,
    pub has_encoder: bool,
    pub has_joint: bool,
    pub has_cycle: bool,
    pub has_unary: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_max: 9,
            num_atom_types: 4,
            num_bond_types: 3,
            latent_dim: 96,
            gin_layers: 2,
            gin_hidden: 128,
            head_hidden: 128,
            head_out: 64,
            noise_branch: 256,
            cycle_mlp: 64,
            generator_hidden: [128, 256, 512],
            attention: true,
            gin_skip: true,
            generator_skip: true,
            has_encoder: true,
            has_joint: true,
            has_cycle: true,
            has_unary: true,
        }
    }
}

impl NetConfig {
    pub fn node_feature_dim(&self) -> usize {
        self.num_atom_types + 1
    }

    pub fn edge_channel_dim(&self) -> usize {
        self.num_bond_types + 1
    }

    /// Width of the concatenated per-node descriptor fed to pooling.
    pub fn pool_input_dim(&self) -> usize {
        if self.gin_skip {
            self.node_feature_dim() + self.gin_layers * self.gin_hidden
        } else {
            self.gin_hidden
        }
    }
}

/// Name-keyed parameter arrays. BTreeMap keeps every iteration order
/// deterministic, which seed-reproducibility depends on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.values.insert(name.into(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.values.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all arrays.
    pub fn parameter_count(&self) -> usize {
        self.values.values().map(|a| a.len()).sum()
    }

    /// Stable content hash, used to assert that optimizer steps touch only
    /// the parameters they should.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, value) in &self.values {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in value.iter() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Tape bindings for a parameter store: every parameter becomes a tape
/// node, differentiable or constant depending on the phase.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Names (in deterministic order) and vars of the differentiated subset.
    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn vars_of(&self, names: &[String]) -> Vec<Var> {
        names.iter().map(|n| self.var(n)).collect()
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.random_range(-bound..bound))
}

fn uniform_bias(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[len]), |_| rng.random_range(-bound..bound))
}

/// The full parameter set for the configured networks.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetConfig,
    pub params: ParamStore,
}

impl Networks {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();

        let mut add_affine = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize| {
            params.insert(format!("{name}.w"), uniform_fan_in(rng, rows, cols));
            params.insert(format!("{name}.b"), uniform_bias(rng, rows, cols));
        };

        let mut add_gin = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            for layer in 0..config.gin_layers {
                let in_dim = if layer == 0 {
                    config.node_feature_dim()
                } else {
                    config.gin_hidden
                };
                for k in 1..=config.num_bond_types {
                    add_affine(
                        params,
                        rng,
                        &format!("{prefix}.l{layer}.e{k}"),
                        in_dim,
                        config.gin_hidden,
                    );
                }
                params.insert(
                    format!("{prefix}.l{layer}.self_weight"),
                    ArrayD::zeros(IxDyn(&[1])),
                );
            }
            add_affine(params, rng, &format!("{prefix}.att.tf"), config.pool_input_dim(), config.gin_hidden);
            if config.attention {
                add_affine(params, rng, &format!("{prefix}.att.gate"), config.gin_hidden, config.gin_hidden);
            }
            add_affine(params, rng, &format!("{prefix}.head.fc1"), config.gin_hidden, config.head_hidden);
            add_affine(params, rng, &format!("{prefix}.head.fc2"), config.head_hidden, config.head_out);
        };

        if config.has_encoder {
            add_gin(&mut params, &mut rng, "enc.gin");
            add_affine(&mut params, &mut rng, "enc.noise", config.latent_dim, config.noise_branch);
            add_affine(
                &mut params,
                &mut rng,
                "enc.out",
                config.head_out + config.noise_branch,
                config.latent_dim,
            );
        }
        if config.has_joint {
            add_gin(&mut params, &mut rng, "djoint.gin");
            add_affine(&mut params, &mut rng, "djoint.code", config.latent_dim, config.noise_branch);
            add_affine(
                &mut params,
                &mut rng,
                "djoint.out",
                config.head_out + config.noise_branch,
                1,
            );
        }
        if config.has_cycle {
            // One message-passing module; both inputs of the pair share it.
            add_gin(&mut params, &mut rng, "dcycle.gin");
            add_affine(&mut params, &mut rng, "dcycle.mlp1", config.head_out, config.cycle_mlp);
            add_affine(&mut params, &mut rng, "dcycle.mlp2", config.cycle_mlp, config.cycle_mlp);
            add_affine(&mut params, &mut rng, "dcycle.out", config.cycle_mlp, 1);
        }
        if config.has_unary {
            add_gin(&mut params, &mut rng, "dunary.gin");
            add_affine(&mut params, &mut rng, "dunary.out", config.head_out, 1);
        }

        // Generator.
        let third = config.latent_dim / 3;
        let (in1, in2, in3) = if config.generator_skip {
            (
                third + config.latent_dim,
                config.generator_hidden[0] + third,
                config.generator_hidden[1] + third,
            )
        } else {
            (
                config.latent_dim * 2,
                config.generator_hidden[0],
                config.generator_hidden[1],
            )
        };
        add_affine(&mut params, &mut rng, "gen.fc1", in1, config.generator_hidden[0]);
        add_affine(&mut params, &mut rng, "gen.fc2", in2, config.generator_hidden[1]);
        add_affine(&mut params, &mut rng, "gen.fc3", in3, config.generator_hidden[2]);
        let n = config.n_max;
        add_affine(
            &mut params,
            &mut rng,
            "gen.edges",
            config.generator_hidden[2],
            n * n * config.edge_channel_dim(),
        );
        add_affine(
            &mut params,
            &mut rng,
            "gen.nodes",
            config.generator_hidden[2],
            n * config.node_feature_dim(),
        );

        Self { config, params }
    }

    /// Binds every parameter onto the tape; `differentiable` decides per
    /// name whether the leaf participates in gradients.
    pub fn bind<F: Fn(&str) -> bool>(&self, tape: &mut Tape, differentiable: F) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let var = if differentiable(name) {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.clone(), var);
        }
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    /// Names of generator/encoder-side parameters.
    pub fn generator_side_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("gen.") || n.starts_with("enc."))
            .cloned()
            .collect()
    }

    /// Names of discriminator-side parameters.
    pub fn discriminator_side_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("djoint.") || n.starts_with("dcycle.") || n.starts_with("dunary."))
            .cloned()
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    // ----- checkpoint serialization ---------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        #[derive(Serialize)]
        struct Header<'a> {
            version: u32,
            config: &'a NetConfig,
            arrays: Vec<(String, Vec<usize>)>,
        }
        let header = Header {
            version: 1,
            config: &self.config,
            arrays: self
                .params
                .iter()
                .map(|(n, a)| (n.clone(), a.shape().to_vec()))
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("serializable header");
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(b"MGNC")?;
            f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&header_bytes)?;
            for (_, a) in self.params.iter() {
                for v in a.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            config: NetConfig,
            arrays: Vec<(String, Vec<usize>)>,
        }
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"MGNC" {
            return Err(NetError::Malformed("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| NetError::Malformed(e.to_string()))?;
        if header.version != 1 {
            return Err(NetError::Version(header.version));
        }
        let mut params = ParamStore::default();
        for (name, shape) in header.arrays {
            let count: usize = shape.iter().product();
            let mut buf = vec![0u8; count * 8];
            f.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| NetError::Malformed(e.to_string()))?;
            params.insert(name, arr);
        }
        Ok(Self {
            config: header.config,
            params,
        })
    }
}

/// One message-passing update: for every real edge type, neighbors are
/// aggregated by a dense product with the corresponding adjacency channel,
/// combined with the (1 + w)-weighted self descriptor, passed through that
/// edge type's affine map, summed over edge types, and squashed by tanh.
///
/// `h` is (batch, n, h_in); `adjacency` is (batch, n, n, channels) with
/// channel 0 ignored (ghost edges carry no messages).
pub fn gin_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: Var,
    edge_affines: &[(Var, Var)],
    self_weight: Var,
) -> Var {
    let shape = tape.shape(adjacency).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    let h_shape = tape.shape(h).to_vec();

    let sw_scalar = tape.reshape(self_weight, &[]);
    let sw = tape.broadcast_as(sw_scalar, &h_shape);
    let weighted = tape.mul(sw, h);
    let self_term = tape.add(h, weighted);

    let mut total: Option<Var> = None;
    for (k, &(w, b)) in edge_affines.iter().enumerate() {
        let channel = k + 1;
        let a_k = tape.slice_last(adjacency, channel, channel + 1);
        let a_k = tape.reshape(a_k, &[batch, n, n]);
        let messages = tape.batch_matmul(a_k, h);
        let combined = tape.add(self_term, messages);
        let mapped = tape.affine(combined, w, b);
        total = Some(match total {
            None => mapped,
            Some(t) => tape.add(t, mapped),
        });
    }
    let summed = total.expect("at least one edge type");
    tape.tanh(summed)
}

/// Graph-level readout: concatenate the per-layer node descriptors,
/// project through tanh, optionally gate with soft attention, and sum over
/// nodes. `descriptors` is the skip-connection list (raw node features
/// first when enabled).
pub fn graph_pool(
    tape: &mut Tape,
    descriptors: &[Var],
    transform: (Var, Var),
    gate: Option<(Var, Var)>,
) -> Var {
    let mut concat = descriptors[0];
    for &d in &descriptors[1..] {
        concat = tape.concat_last(concat, d);
    }
    let projected = tape.affine(concat, transform.0, transform.1);
    let projected = tape.tanh(projected);
    let gated = match gate {
        Some((w, b)) => {
            let logits = tape.affine(projected, w, b);
            let g = tape.sigmoid(logits);
            tape.mul(g, projected)
        }
        None => projected,
    };
    tape.sum_axis(gated, 1)
}

/// Full graph descriptor: message-passing stack, pooling, and head MLP.
/// Returns a (batch, head_out) tensor.
pub fn graph_descriptor(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    prefix: &str,
    x: Var,
    adjacency: Var,
) -> Var {
    let mut h = x;
    let mut per_layer = vec![x];
    for layer in 0..config.gin_layers {
        let affines: Vec<(Var, Var)> = (1..=config.num_bond_types)
            .map(|k| {
                (
                    bound.var(&format!("{prefix}.l{layer}.e{k}.w")),
                    bound.var(&format!("{prefix}.l{layer}.e{k}.b")),
                )
            })
            .collect();
        let sw = bound.var(&format!("{prefix}.l{layer}.self_weight"));
        h = gin_layer(tape, h, adjacency, &affines, sw);
        per_layer.push(h);
    }
    let descriptors: Vec<Var> = if config.gin_skip {
        per_layer
    } else {
        vec![h]
    };
    let transform = (
        bound.var(&format!("{prefix}.att.tf.w")),
        bound.var(&format!("{prefix}.att.tf.b")),
    );
    let gate = if config.attention {
        Some((
            bound.var(&format!("{prefix}.att.gate.w")),
            bound.var(&format!("{prefix}.att.gate.b")),
        ))
    } else {
        None
    };
    let pooled = graph_pool(tape, &descriptors, transform, gate);
    let h1 = tape.affine(
        pooled,
        bound.var(&format!("{prefix}.head.fc1.w")),
        bound.var(&format!("{prefix}.head.fc1.b")),
    );
    let h1 = tape.tanh(h1);
    let h2 = tape.affine(
        h1,
        bound.var(&format!("{prefix}.head.fc2.w")),
        bound.var(&format!("{prefix}.head.fc2.b")),
    );
    tape.tanh(h2)
}

/// Encoder: graph descriptor plus a noise branch, linearly projected to the
/// latent dimensionality. Returns (batch, latent_dim).
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    x: Var,
    adjacency: Var,
    noise: Var,
) -> Var {
    let hg = graph_descriptor(tape, bound, config, "enc.gin", x, adjacency);
    let nb = tape.affine(noise, bound.var("enc.noise.w"), bound.var("enc.noise.b"));
    let nb = tape.tanh(nb);
    let joined = tape.concat_last(hg, nb);
    tape.affine(joined, bound.var("enc.out.w"), bound.var("enc.out.b"))
}

/// Joint discriminator logit over (graph, latent code) pairs: (batch,).
pub fn discriminate_joint(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    x: Var,
    adjacency: Var,
    code: Var,
) -> Var {
    let hg = graph_descriptor(tape, bound, config, "djoint.gin", x, adjacency);
    let cb = tape.affine(code, bound.var("djoint.code.w"), bound.var("djoint.code.b"));
    let cb = tape.tanh(cb);
    let joined = tape.concat_last(hg, cb);
    let logit = tape.affine(joined, bound.var("djoint.out.w"), bound.var("djoint.out.b"));
    let batch = tape.shape(logit)[0];
    tape.reshape(logit, &[batch])
}

/// Cycle discriminator logit over graph pairs; both graphs pass through the
/// same message-passing module and are combined by component-wise product.
pub fn discriminate_cycle(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    x1: Var,
    a1: Var,
    x2: Var,
    a2: Var,
) -> Var {
    let h1 = graph_descriptor(tape, bound, config, "dcycle.gin", x1, a1);
    let h2 = graph_descriptor(tape, bound, config, "dcycle.gin", x2, a2);
    let prod = tape.mul(h1, h2);
    let m1 = tape.affine(prod, bound.var("dcycle.mlp1.w"), bound.var("dcycle.mlp1.b"));
    let m1 = tape.tanh(m1);
    let m2 = tape.affine(m1, bound.var("dcycle.mlp2.w"), bound.var("dcycle.mlp2.b"));
    let m2 = tape.tanh(m2);
    let logit = tape.affine(m2, bound.var("dcycle.out.w"), bound.var("dcycle.out.b"));
    let batch = tape.shape(logit)[0];
    tape.reshape(logit, &[batch])
}

/// Unary discriminator logit over graphs alone: (batch,).
pub fn discriminate_unary(
    tape: &mut Tape,
    bound: &Bound,
    config: &NetConfig,
    x: Var,
    adjacency: Var,
) -> Var {
    let hg = graph_descriptor(tape, bound, config, "dunary.gin", x, adjacency);
    let logit = tape.affine(hg, bound.var("dunary.out.w"), bound.var("dunary.out.b"));
    let batch = tape.shape(logit)[0];
    tape.reshape(logit, &[batch])
}
