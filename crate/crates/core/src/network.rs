//! Feed-forward `tanh` networks, the residual variant with an identity skip
//! into the second layer, and the `(1 - x²)` boundary-matching wrapper.
//!
//! Parameters live in one flat vector. For each layer `ℓ = 1..=L` the weight
//! matrix `W^ℓ ∈ R^{n_ℓ × n_{ℓ-1}}` is stored column-major (entry `(r, k)` at
//! `k·n_ℓ + r`), immediately followed by the bias `b^ℓ ∈ R^{n_ℓ}`.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::jets::{self, Jet3, MAX_DIM};
use crate::{Error, Result};

/// Output transformation applied on top of the raw network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrapper {
    None,
    /// Multiplies the output by `1 - x_0²`, so it vanishes at `x_0 = ±1`.
    #[serde(rename = "poisson1d_dirichlet_zero")]
    DirichletZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRecord", into = "ArchitectureRecord")]
pub struct Architecture {
    widths: Vec<usize>,
    residual: bool,
    wrapper: Wrapper,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureRecord {
    widths: Vec<usize>,
    residual: bool,
    wrapper: Wrapper,
}

impl TryFrom<ArchitectureRecord> for Architecture {
    type Error = Error;
    fn try_from(r: ArchitectureRecord) -> Result<Self> {
        Architecture::new(r.widths, r.residual, r.wrapper)
    }
}

impl From<Architecture> for ArchitectureRecord {
    fn from(a: Architecture) -> Self {
        ArchitectureRecord {
            widths: a.widths,
            residual: a.residual,
            wrapper: a.wrapper,
        }
    }
}

impl Architecture {
    pub fn new(widths: Vec<usize>, residual: bool, wrapper: Wrapper) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if widths.len() < 3 {
            return bad(format!(
                "need at least one hidden layer, got widths {widths:?}"
            ));
        }
        if !(1..=MAX_DIM).contains(&widths[0]) {
            return bad(format!("input width must be 1..={MAX_DIM}, got {}", widths[0]));
        }
        if *widths.last().unwrap() != 1 {
            return bad("output width must be 1".into());
        }
        if widths.contains(&0) {
            return bad("all widths must be positive".into());
        }
        if residual && widths[0] != 1 {
            return bad("the residual skip requires a scalar input".into());
        }
        Ok(Architecture {
            widths,
            residual,
            wrapper,
        })
    }

    /// Plain `tanh` network with the given widths.
    pub fn feed_forward(widths: Vec<usize>) -> Result<Self> {
        Architecture::new(widths, false, Wrapper::None)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn wrapper(&self) -> Wrapper {
        self.wrapper
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }
}

/// `Σ_ℓ (n_ℓ·n_{ℓ-1} + n_ℓ)`.
pub fn param_count(arch: &Architecture) -> usize {
    arch.widths
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// An architecture together with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

impl Network {
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: params.len(),
            });
        }
        let mut offsets = Vec::with_capacity(arch.num_layers());
        let mut off = 0;
        for w in arch.widths.windows(2) {
            offsets.push((off, off + w[0] * w[1]));
            off += w[0] * w[1] + w[1];
        }
        Ok(Network {
            arch,
            params,
            offsets,
        })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Network::from_params(arch, vec![0.0; n]).expect("length matches by construction")
    }

    /// Uniform Glorot initialization: weights of layer `ℓ` iid on
    /// `[-√(6/(n_{ℓ-1}+n_ℓ)), √(6/(n_{ℓ-1}+n_ℓ))]`, biases zero.
    pub fn xavier(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::zeros(arch);
        for layer in 1..=net.arch.num_layers() {
            let n_in = net.arch.widths[layer - 1];
            let n_out = net.arch.widths[layer];
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let (w_off, _) = net.offsets[layer - 1];
            for w in &mut net.params[w_off..w_off + n_in * n_out] {
                *w = dist.sample(&mut rng);
            }
        }
        net
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Same architecture, new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Network::from_params(self.arch.clone(), params)
    }

    /// `(weight offset, bias offset)` of layer `ℓ` (1-based) in the flat
    /// parameter vector.
    pub fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        self.offsets[layer - 1]
    }

    /// Column-major weights and bias of layer `ℓ` (1-based).
    pub fn layer_params(&self, layer: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.offsets[layer - 1];
        let n_out = self.arch.widths[layer];
        (&self.params[w..b], &self.params[b..b + n_out])
    }

    /// Splits the flat vector into `(W^ℓ, b^ℓ)` with `W^ℓ` row-major.
    pub fn unflatten(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        (1..=self.arch.num_layers())
            .map(|layer| {
                let n_in = self.arch.widths[layer - 1];
                let n_out = self.arch.widths[layer];
                let (w, b) = self.layer_params(layer);
                let rows = (0..n_out)
                    .map(|r| (0..n_in).map(|k| w[k * n_out + r]).collect())
                    .collect();
                (rows, b.to_vec())
            })
            .collect()
    }

    /// Inverse of [`Network::unflatten`].
    pub fn flatten(arch: Architecture, layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        let mut params = Vec::with_capacity(arch.param_count());
        for (layer, (rows, b)) in layers.iter().enumerate() {
            let n_in = arch.widths.get(layer).copied().unwrap_or(0);
            for k in 0..n_in {
                for row in rows {
                    params.push(row[k]);
                }
            }
            params.extend_from_slice(b);
        }
        Network::from_params(arch, params)
    }

    /// Jet of the (possibly residual and wrapped) network at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Jet3> {
        jets::forward_jet(self, x)
    }

    /// Output value only.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(jets::forward_jet_order(self, x, 0)?.value)
    }

    pub fn save(&self, seed: u64, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint(seed)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        Network::from_checkpoint(&std::fs::read_to_string(path)?)
    }

    /// Checkpoint document: format version, architecture, seed and the flat
    /// parameters as decimals with 17 significant digits.
    pub fn to_checkpoint(&self, seed: u64) -> Result<String> {
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        let params = self
            .params
            .iter()
            .map(|p| RawValue::from_string(format!("{p:.16e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let doc = CheckpointOut {
            format_version: CHECKPOINT_VERSION,
            architecture: &self.arch,
            seed,
            params,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, u64)> {
        let doc: CheckpointIn = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let params = doc
            .params
            .iter()
            .map(|raw| {
                raw.get()
                    .parse::<f64>()
                    .map_err(|e| Error::Checkpoint(format!("bad parameter {}: {e}", raw.get())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Network::from_params(doc.architecture, params)?, doc.seed))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    architecture: &'a Architecture,
    seed: u64,
    params: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u32,
    architecture: Architecture,
    seed: u64,
    params: Vec<Box<RawValue>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(widths: &[usize]) -> Architecture {
        Architecture::feed_forward(widths.to_vec()).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&arch(&[1, 50, 50, 1])), 2701);
        assert_eq!(param_count(&arch(&[1, 1, 1])), 4);
        assert_eq!(param_count(&arch(&[2, 50, 50, 1])), 2751);
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        assert!(Architecture::feed_forward(vec![1, 1]).is_err());
        assert!(Architecture::feed_forward(vec![4, 5, 1]).is_err());
        assert!(Architecture::feed_forward(vec![1, 5, 2]).is_err());
        assert!(Architecture::feed_forward(vec![1, 0, 1]).is_err());
        assert!(Architecture::new(vec![2, 5, 5, 1], true, Wrapper::None).is_err());
    }

    #[test]
    fn xavier_is_deterministic_with_zero_biases() {
        let a = arch(&[2, 50, 50, 1]);
        let n1 = Network::xavier(a.clone(), 42);
        let n2 = Network::xavier(a.clone(), 42);
        assert_eq!(n1.params(), n2.params());
        assert_ne!(n1.params(), Network::xavier(a, 43).params());
        for layer in 1..=3 {
            assert!(n1.layer_params(layer).1.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn xavier_weight_variance_matches_glorot() {
        // 4 layers of 50x50 give 10^4 draws from U(-√0.06, √0.06)
        let a = arch(&[1, 50, 50, 50, 50, 50, 1]);
        let net = Network::xavier(a, 7);
        let mut draws = Vec::new();
        for layer in 2..=5 {
            draws.extend_from_slice(net.layer_params(layer).0);
        }
        assert_eq!(draws.len(), 10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 0.02).abs() < 0.15 * 0.02, "variance {var}");
    }

    #[test]
    fn single_tanh_network() {
        let net = Network::from_params(arch(&[1, 1, 1]), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let jet = net.evaluate(&[0.0]).unwrap();
        assert_eq!(jet.value, 0.0);
        assert_eq!(jet.d1[0], 1.0);
    }

    #[test]
    fn wrapped_network_vanishes_at_endpoints() {
        let a = Architecture::new(vec![1, 8, 8, 1], true, Wrapper::DirichletZero).unwrap();
        for seed in 0..10 {
            let net = Network::xavier(a.clone(), seed);
            for x in [-1.0, 1.0] {
                assert_eq!(net.evaluate(&[x]).unwrap().value, 0.0);
            }
        }
    }

    #[test]
    fn residual_zero_network_is_zero() {
        let a = Architecture::new(vec![1, 6, 6, 1], true, Wrapper::None).unwrap();
        let net = Network::zeros(a);
        for x in [-0.7, 0.0, 0.4] {
            assert_eq!(net.evaluate(&[x]).unwrap(), Jet3::zero(1));
        }
    }

    #[test]
    fn flatten_round_trip() {
        let a = Architecture::new(vec![1, 4, 3, 1], true, Wrapper::None).unwrap();
        let net = Network::xavier(a.clone(), 9);
        let back = Network::flatten(a, &net.unflatten()).unwrap();
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let a = Architecture::new(vec![1, 5, 5, 1], true, Wrapper::DirichletZero).unwrap();
        let net = Network::xavier(a, 1234);
        let text = net.to_checkpoint(1234).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        let (back, seed) = Network::from_checkpoint(&text).unwrap();
        assert_eq!(seed, 1234);
        assert_eq!(back, net);
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let net = Network::zeros(arch(&[1, 2, 1]));
        let text = net.to_checkpoint(0).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(Network::from_checkpoint(&text), Err(Error::Checkpoint(_))));
    }
}
