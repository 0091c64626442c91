//! Learnable directed communication graph.
//!
//! An edge `j -> i` lets agent `i` attend to agent `j`. Self-edges are
//! always on and do not count against the budget of
//! `k = min(N^2 - N, ceil(S * N^2))` off-diagonal edges, which are chosen by
//! a global top-k over the edge logits (perturbed by Gumbel noise while
//! training). Gradients reach the logits through a sigmoid relaxation of
//! the selection around the top-k threshold.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, StepOutcome, Tensor};

pub const INITIAL_TEMPERATURE: f64 = 1.0;
pub const FINAL_TEMPERATURE: f64 = 0.1;
const INIT_LOGIT_STD: f64 = 0.01;

/// Number of off-diagonal edges kept for `n` agents at sparsity `s`.
pub fn edge_budget(n: usize, s: f64) -> usize {
    let off = n * n - n;
    // the small slack keeps exact products such as 0.25 * 16 from rounding up
    let k = (s * (n * n) as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(off)
}

/// Binary `N x N` matrix; entry `(j, i)` is the edge `j -> i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdjacencyMask {
    n: usize,
    bits: Vec<u8>,
}

impl AdjacencyMask {
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![0; n * n];
        for i in 0..n {
            bits[i * n + i] = 1;
        }
        Self { n, bits }
    }

    pub fn complete(n: usize) -> Self {
        Self {
            n,
            bits: vec![1; n * n],
        }
    }

    /// Builds a mask from row-major bits; the diagonal must be set.
    pub fn from_bits(n: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n * n || bits.iter().any(|b| *b > 1) {
            return Err(Error::contract(format!("{} bits do not form a {n}x{n} 0/1 matrix", bits.len())));
        }
        if (0..n).any(|i| bits[i * n + i] != 1) {
            return Err(Error::contract("mask diagonal must be all ones"));
        }
        Ok(Self { n, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Whether agent `to` may read agent `from`.
    pub fn edge(&self, from: usize, to: usize) -> bool {
        self.bits[from * self.n + to] == 1
    }

    pub fn off_diagonal_edges(&self) -> usize {
        self.bits.iter().sum::<u8>() as usize - self.n
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.n, self.bits.iter().map(|b| *b as f64).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Train,
    Eval,
}

/// A drawn mask plus what is needed to differentiate its selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSample {
    pub mask: AdjacencyMask,
    /// Gumbel draws per entry, already scaled by the temperature; zero in eval mode.
    pub noise: Vec<f64>,
    /// Midpoint between the k-th and (k+1)-th perturbed scores.
    pub threshold: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    pub n_agents: usize,
    pub sparsity: f64,
    pub temperature: f64,
    edge_logits: Vec<Tensor>,
    optimizer: Adam,
}

/// Creates a graph with small seeded logits.
pub fn init_graph(n_agents: usize, sparsity: f64, seed: u64) -> Result<CommGraph> {
    if n_agents == 0 {
        return Err(Error::config("a communication graph needs at least one agent"));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::config(format!("sparsity {sparsity} is outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_LOGIT_STD).expect("valid std");
    let logits: Vec<f64> = (0..n_agents * n_agents).map(|_| normal.sample(&mut rng)).collect();
    let edge_logits = vec![Tensor::matrix(n_agents, n_agents, logits)];
    let optimizer = Adam::new(AdamConfig::with_learning_rate(1e-3), &edge_logits);
    Ok(CommGraph {
        n_agents,
        sparsity,
        temperature: INITIAL_TEMPERATURE,
        edge_logits,
        optimizer,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CommGraph {
    pub fn budget(&self) -> usize {
        edge_budget(self.n_agents, self.sparsity)
    }

    pub fn logits(&self) -> &Tensor {
        &self.edge_logits[0]
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.config.learning_rate = lr;
    }

    /// Replaces the logits, for tests and checkpoint loading.
    pub fn set_logits(&mut self, logits: Tensor) -> Result<()> {
        if logits.rows() != self.n_agents || logits.cols() != self.n_agents || !logits.is_finite() {
            return Err(Error::contract("logits must be a finite N x N matrix"));
        }
        self.edge_logits[0] = logits;
        Ok(())
    }

    /// Geometric schedule from 1.0 at `progress = 0` to 0.1 at `progress = 1`.
    pub fn anneal(&mut self, progress: f64) {
        let p = progress.clamp(0.0, 1.0);
        self.temperature = INITIAL_TEMPERATURE * (FINAL_TEMPERATURE / INITIAL_TEMPERATURE).powf(p);
    }

    fn off_diagonal(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_agents;
        (0..n * n).filter(move |e| e / n != e % n)
    }

    /// Draws this episode's mask. Eval mode is a pure function of the logits.
    pub fn sample_mask(&self, mode: MaskMode, rng: &mut impl Rng) -> MaskSample {
        let n = self.n_agents;
        let logits = self.logits().data();
        let noise: Vec<f64> = match mode {
            MaskMode::Eval => vec![0.0; n * n],
            MaskMode::Train => {
                let g = Gumbel::new(0.0, 1.0).expect("valid scale");
                (0..n * n)
                    .map(|e| if e / n == e % n { 0.0 } else { self.temperature * g.sample(rng) })
                    .collect()
            }
        };
        let mut ranked: Vec<(f64, usize)> = self.off_diagonal().map(|e| (logits[e] + noise[e], e)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let k = self.budget();
        let mut bits = AdjacencyMask::identity(n).bits;
        for (_, e) in &ranked[..k] {
            bits[*e] = 1;
        }
        let threshold = match (k.checked_sub(1).and_then(|i| ranked.get(i)), ranked.get(k)) {
            (Some(a), Some(b)) => 0.5 * (a.0 + b.0),
            (Some(a), None) => a.0 - self.temperature,
            (None, Some(b)) => b.0 + self.temperature,
            (None, None) => 0.0,
        };
        MaskSample {
            mask: AdjacencyMask { n, bits },
            noise,
            threshold,
            temperature: self.temperature,
        }
    }

    /// Sigmoid relaxation of the selection for the sample's noise and
    /// threshold; diagonal entries are 1.
    pub fn relaxed_scores(&self, sample: &MaskSample) -> Vec<f64> {
        let n = self.n_agents;
        let logits = self.logits().data();
        (0..n * n)
            .map(|e| {
                if e / n == e % n {
                    1.0
                } else {
                    sigmoid((logits[e] + sample.noise[e] - sample.threshold) / sample.temperature)
                }
            })
            .collect()
    }

    /// Maps a gradient on mask entries to a gradient on the logits through
    /// the relaxation. Diagonal entries contribute nothing.
    pub fn straight_through(&self, sample: &MaskSample, mask_grad: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_agents;
        if mask_grad.len() != n * n {
            return Err(Error::contract(format!("mask gradient has {} entries, expected {}", mask_grad.len(), n * n)));
        }
        let soft = self.relaxed_scores(sample);
        Ok((0..n * n)
            .map(|e| {
                if e / n == e % n {
                    0.0
                } else {
                    mask_grad[e] * soft[e] * (1.0 - soft[e]) / sample.temperature
                }
            })
            .collect())
    }

    /// Moves the logits up the given logit-space gradient with Adam.
    pub fn apply_logit_gradient(&mut self, logit_grad: &[f64]) -> Result<StepOutcome> {
        let n = self.n_agents;
        if logit_grad.len() != n * n {
            return Err(Error::contract("logit gradient must be N x N"));
        }
        let descent: Vec<f64> = (0..n * n)
            .map(|e| if e / n == e % n { 0.0 } else { -logit_grad[e] })
            .collect();
        let grads = [Tensor::matrix(n, n, descent)];
        Ok(self.optimizer.step(&mut self.edge_logits, &grads))
    }

    /// One ascent step on the logits for a gradient on the sampled mask.
    /// A non-finite gradient leaves the graph unchanged.
    pub fn edge_update(&mut self, sample: &MaskSample, mask_grad: &[f64]) -> Result<StepOutcome> {
        if mask_grad.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let g = self.straight_through(sample, mask_grad)?;
        self.apply_logit_gradient(&g)
    }
}

/// One log line: `episode=17 1 0 / 0 1`.
pub fn serialize_matrix(episode: u64, mask: &AdjacencyMask) -> String {
    let mut out = format!("episode={episode}");
    for (r, row) in mask.bits.chunks(mask.n.max(1)).enumerate() {
        if r > 0 {
            out.push_str(" /");
        }
        for b in row {
            write!(out, " {b}").expect("writing to a string");
        }
    }
    out
}

pub fn parse_matrix(line: &str) -> Result<(u64, AdjacencyMask)> {
    let bad = |m: &str| Error::Parse {
        line: 0,
        message: format!("{m}: {line:?}"),
    };
    let rest = line.trim().strip_prefix("episode=").ok_or_else(|| bad("missing episode"))?;
    let (ep, body) = rest.split_once(' ').ok_or_else(|| bad("missing matrix"))?;
    let episode = ep.parse().map_err(|_| bad("bad episode number"))?;
    let rows: Vec<Vec<u8>> = body
        .split('/')
        .map(|r| r.split_whitespace().map(|t| t.parse::<u8>()).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("bad matrix entry"))?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(bad("matrix is not square"));
    }
    let mask = AdjacencyMask::from_bits(n, rows.concat()).map_err(|e| bad(&e.to_string()))?;
    Ok((episode, mask))
}

#[cfg(test)]
mod tests;
