//! Named parameter storage, dense layers, the gated recurrent cell, and the
//! on-disk checkpoint format.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Array2, Tape, Var};

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Array2) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &Array2 {
        &self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Places every array on `tape` as a leaf, in registration order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Writes a manifest plus one little-endian `f64` blob per array into `dir`.
    pub fn save(&self, dir: &Path, model: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, value)) in self.iter().enumerate() {
            let file = format!("{i:03}_{}.bin", name.replace('/', "_"));
            let bytes: Vec<u8> = value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_atomic(&dir.join(&file), &bytes)?;
            entries.push(CheckpointEntry {
                name: name.to_string(),
                shape: [value.rows(), value.cols()],
                file,
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.to_string(),
            arrays: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    /// Loads a checkpoint written by [`ParamSet::save`]; returns the model tag too.
    pub fn load(dir: &Path) -> Result<(String, ParamSet)> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::Data(format!("bad checkpoint manifest {}: {e}", path.display())))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        let mut set = ParamSet::new();
        for entry in manifest.arrays {
            let blob_path = dir.join(&entry.file);
            let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            let [rows, cols] = entry.shape;
            if bytes.len() != rows * cols * 8 {
                return Err(Error::Data(format!(
                    "blob {} holds {} bytes, expected {}",
                    entry.file,
                    bytes.len(),
                    rows * cols * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.push(entry.name, Array2::new(rows, cols, data)?);
        }
        Ok((manifest.model, set))
    }
}

pub const CHECKPOINT_FORMAT: &str = "ctsdg-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    model: String,
    arrays: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

/// Uniform fan-in initializer: weights in `±scale/√fan_in`, biases zero.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, scale: f64) -> Array2 {
    let bound = scale / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
        .collect();
    Array2::new(fan_in, fan_out, data).expect("finite init")
}

/// Affine map `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
    ) -> Self {
        let weight = params.push(format!("{name}.w"), init_weight(rng, fan_in, fan_out, scale));
        let bias = params.push(format!("{name}.b"), Array2::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &[Var], x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound[self.weight])?;
        tape.add(xw, bound[self.bias])
    }
}

/// Stack of linear layers with ReLU between them; `relu_output` also
/// rectifies the final layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        relu_output: bool,
        scale: f64,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, rng, &format!("{name}.l{i}"), w[0], w[1], scale))
            .collect();
        Self {
            layers,
            relu_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    pub fn forward(&self, tape: &Tape, bound: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last || self.relu_output {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// GRU-style cell:
/// `u = σ(xW_u + hU_u + b_u)`, `r = σ(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + (r⊙h)U_n + b_n)`, `h' = (1−u)⊙n + u⊙h`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    gates: [(usize, usize, usize); 3],
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        scale: f64,
    ) -> Self {
        let mut gate = |g: &str| {
            let w = params.push(
                format!("{name}.{g}.w"),
                init_weight(rng, input_dim, hidden_dim, scale),
            );
            let u = params.push(
                format!("{name}.{g}.u"),
                init_weight(rng, hidden_dim, hidden_dim, scale),
            );
            let b = params.push(format!("{name}.{g}.b"), Array2::zeros(1, hidden_dim));
            (w, u, b)
        };
        let gates = [gate("update"), gate("reset"), gate("candidate")];
        Self {
            input_dim,
            hidden_dim,
            gates,
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &[Var], x: Var, h: Var) -> Result<Var> {
        let affine = |(w, u, b): (usize, usize, usize), hh: Var| -> Result<Var> {
            let xw = tape.matmul(x, bound[w])?;
            let hu = tape.matmul(hh, bound[u])?;
            tape.add(tape.add(xw, hu)?, bound[b])
        };
        let update = tape.sigmoid(affine(self.gates[0], h)?);
        let reset = tape.sigmoid(affine(self.gates[1], h)?);
        let gated_h = tape.mul(reset, h)?;
        let candidate = tape.tanh(affine(self.gates[2], gated_h)?);
        // h' = n + u⊙(h − n)
        let diff = tape.sub(h, candidate)?;
        tape.add(candidate, tape.mul(update, diff)?)
    }
}

/// Names of parameters that differ between two sets with identical layout.
pub fn changed_params(a: &ParamSet, b: &ParamSet) -> BTreeSet<String> {
    a.iter()
        .zip(b.iter())
        .filter(|((_, x), (_, y))| x != y)
        .map(|((n, _), _)| n.to_string())
        .collect()
}
