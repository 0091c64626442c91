//! Graph-masked attention policy.
//!
//! Observations are embedded by a map chosen by the agent's shape
//! (observation length, action count). The encoder lets agent `i` attend to
//! agent `j` only over an edge `j -> i` of the communication mask, and a
//! value head reads each agent's representation. The decoder produces
//! actions in agent order, each conditioned on the actions already chosen by
//! lower-numbered agents it can hear.
//!
//! Every attention reads its keys and values from tokens that carry only
//! one agent's information (the raw embeddings, or action embeddings), so a
//! missing edge removes that agent's influence exactly rather than merely
//! routing it through a third agent.

mod checkpoint;


use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::commgraph::AdjacencyMask;
use crate::error::{Error, Result};
use crate::netsim::ObservationVector;
use crate::numerics::{AttentionShape, MaskLayout, Tape, Tensor, Var};
use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ff_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointActionSample {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub mask_used: AdjacencyMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct AttentionParams {
    norm: Norm,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderBlock {
    attn: AttentionParams,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct DecoderBlock {
    own: AttentionParams,
    cross: AttentionParams,
    ff: FeedForward,
}

/// Indices of every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    obs_embed: Vec<Linear>,
    action_table: usize,
    action_offset: Vec<usize>,
    position: usize,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    /// (action count, head)
    heads: Vec<(usize, Linear)>,
    value_hidden: Linear,
    value_out: Linear,
}

struct Builder {
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, t: Tensor) -> usize {
        self.params.push(t);
        self.params.len() - 1
    }

    fn weight(&mut self, rows: usize, cols: usize, gain: f64) -> usize {
        let normal = Normal::new(0.0, gain / (rows as f64).sqrt()).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(Tensor::matrix(rows, cols, data))
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> usize {
        self.push(Tensor::zeros(vec![rows, cols]))
    }

    fn linear(&mut self, i: usize, o: usize, gain: f64) -> Linear {
        Linear {
            w: self.weight(i, o, gain),
            b: self.zeros(1, o),
        }
    }

    fn norm(&mut self, d: usize) -> Norm {
        Norm {
            g: self.push(Tensor::matrix(1, d, vec![1.0; d])),
            b: self.zeros(1, d),
        }
    }

    fn attention(&mut self, d: usize) -> AttentionParams {
        AttentionParams {
            norm: self.norm(d),
            q: self.weight(d, d, 1.0),
            k: self.weight(d, d, 1.0),
            v: self.weight(d, d, 1.0),
            o: self.weight(d, d, 0.5),
        }
    }

    fn feed_forward(&mut self, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(d),
            up: self.linear(d, hidden, 1.0),
            down: self.linear(hidden, d, 0.5),
        }
    }
}

/// Per-agent structure the model was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentShapes {
    pub obs_len: usize,
    /// Embedding type of each agent.
    pub agent_type: Vec<usize>,
    pub action_counts: Vec<usize>,
    /// Index into the head list for each agent.
    pub agent_head: Vec<usize>,
}

impl AgentShapes {
    pub fn from_scenario(s: &Scenario) -> Self {
        let mut types: Vec<(usize, usize)> = vec![];
        let mut sizes: Vec<usize> = vec![];
        let mut agent_type = vec![];
        let mut agent_head = vec![];
        for a in &s.agents {
            let shape = a.shape();
            let t = types.iter().position(|x| *x == shape).unwrap_or_else(|| {
                types.push(shape);
                types.len() - 1
            });
            agent_type.push(t);
            let m = a.action_space.len();
            let h = sizes.iter().position(|x| *x == m).unwrap_or_else(|| {
                sizes.push(m);
                sizes.len() - 1
            });
            agent_head.push(h);
        }
        Self {
            obs_len: s.obs_len(),
            agent_type,
            action_counts: s.action_space_sizes(),
            agent_head,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agent_type.len()
    }

    pub fn n_types(&self) -> usize {
        self.agent_type.iter().max().map_or(0, |m| m + 1)
    }
}

/// Inputs for a batched forward pass: `batch` joint observations with the
/// actions to score.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBatch {
    pub batch: usize,
    /// Row-major `[batch * N, obs_len]` padded observations.
    pub obs: Vec<f64>,
    /// Action index per agent row.
    pub actions: Vec<usize>,
    /// Availability per agent row, sized by that agent's action count.
    pub avail: Vec<Vec<bool>>,
}

impl PolicyBatch {
    pub fn from_joint(obs: &[&[ObservationVector]], actions: &[&[usize]], shapes: &AgentShapes) -> Result<Self> {
        let mut b = PolicyBatch {
            batch: 0,
            obs: vec![],
            actions: vec![],
            avail: vec![],
        };
        for (o, a) in obs.iter().zip(actions) {
            b.push(o, a, None, shapes)?;
        }
        Ok(b)
    }

    pub fn with_capacity(rows: usize, shapes: &AgentShapes) -> Self {
        PolicyBatch {
            batch: 0,
            obs: Vec::with_capacity(rows * shapes.n_agents() * shapes.obs_len),
            actions: Vec::with_capacity(rows * shapes.n_agents()),
            avail: Vec::with_capacity(rows * shapes.n_agents()),
        }
    }

    /// Appends one joint sample; `avail` defaults to every action.
    pub fn push(
        &mut self,
        obs: &[ObservationVector],
        actions: &[usize],
        avail: Option<&[Vec<bool>]>,
        shapes: &AgentShapes,
    ) -> Result<()> {
        let n = shapes.n_agents();
        if obs.len() != n || actions.len() != n {
            return Err(Error::contract(format!(
                "expected {n} observations and actions, got {} and {}",
                obs.len(),
                actions.len()
            )));
        }
        for (i, o) in obs.iter().enumerate() {
            if o.len() != shapes.obs_len {
                return Err(Error::contract(format!(
                    "agent {i} observation has {} bits, expected {}",
                    o.len(),
                    shapes.obs_len
                )));
            }
            let m = shapes.action_counts[i];
            let av = match avail {
                Some(a) => a[i].clone(),
                None => vec![true; m],
            };
            if av.len() != m || actions[i] >= m || !av[actions[i]] {
                return Err(Error::contract(format!("agent {i} action {} is not available", actions[i])));
            }
            self.obs.extend(o.bits().iter().map(|b| *b as f64));
            self.avail.push(av);
        }
        self.actions.extend_from_slice(actions);
        self.batch += 1;
        Ok(())
    }

    /// Stacks per-sample masks into the `[batch * N, N]` attention layout.
    pub fn mask_tensor(masks: &[&AdjacencyMask]) -> Tensor {
        let n = masks.first().map_or(0, |m| m.n());
        let data = masks.iter().flat_map(|m| m.bits().iter().map(|b| *b as f64)).collect();
        Tensor::matrix(masks.len() * n, n, data)
    }
}

/// Tape nodes produced by [`Policy::forward`]; all are `[batch * N, _]`.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub representations: Var,
    pub values: Var,
    pub log_probs: Var,
    pub entropies: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub config: ModelConfig,
    pub shapes: AgentShapes,
    layout: Layout,
    pub params: Vec<Tensor>,
}

impl Policy {
    pub fn new(scenario: &Scenario, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = AgentShapes::from_scenario(scenario);
        let d = config.d_model;
        let mut b = Builder {
            params: vec![],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let obs_embed = (0..shapes.n_types()).map(|_| b.linear(shapes.obs_len, d, 1.0)).collect();
        let mut action_offset = vec![];
        let mut total = 0;
        for t in 0..shapes.n_types() {
            let agent = shapes.agent_type.iter().position(|x| *x == t).expect("type in use");
            action_offset.push(total);
            total += shapes.action_counts[agent];
        }
        let action_table = b.weight(total, d, (total as f64).sqrt());
        let n = shapes.n_agents();
        let position = b.weight(n, d, 0.1 * (n as f64).sqrt());
        let encoder = (0..config.encoder_blocks)
            .map(|_| EncoderBlock {
                attn: b.attention(d),
                ff: b.feed_forward(d, config.ff_hidden),
            })
            .collect();
        let encoder_norm = b.norm(d);
        let decoder = (0..config.decoder_blocks)
            .map(|_| DecoderBlock {
                own: b.attention(d),
                cross: b.attention(d),
                ff: b.feed_forward(d, config.ff_hidden),
            })
            .collect();
        let decoder_norm = b.norm(d);
        let mut heads: Vec<(usize, Linear)> = vec![];
        for (i, &h) in shapes.agent_head.iter().enumerate() {
            if h == heads.len() {
                let m = shapes.action_counts[i];
                heads.push((m, b.linear(d, m, 0.01)));
            }
        }
        let value_hidden = b.linear(d, d, 1.0);
        let value_out = b.linear(d, 1, 0.1);
        let layout = Layout {
            obs_embed,
            action_table,
            action_offset,
            position,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            heads,
            value_hidden,
            value_out,
        };
        Ok(Self {
            config,
            shapes,
            layout,
            params: b.params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Parameter nodes for a tape built on `self.params`.
    pub fn param_vars(&self, tape: &mut Tape<'_>) -> Vec<Var> {
        (0..self.params.len()).map(|i| tape.param(i)).collect()
    }

    fn linear(tape: &mut Tape<'_>, p: &[Var], x: Var, l: Linear) -> Var {
        let y = tape.matmul(x, p[l.w]);
        tape.add_row(y, p[l.b])
    }

    fn norm(tape: &mut Tape<'_>, p: &[Var], x: Var, n: Norm) -> Var {
        tape.layer_norm(x, p[n.g], p[n.b])
    }

    fn feed_forward(tape: &mut Tape<'_>, p: &[Var], x: Var, f: &FeedForward) -> Var {
        let h = Self::norm(tape, p, x, f.norm);
        let h = Self::linear(tape, p, h, f.up);
        let h = tape.gelu(h);
        let h = Self::linear(tape, p, h, f.down);
        tape.add(x, h)
    }

    /// `x + attention(norm(x) -> queries, kv -> keys/values)`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        tape: &mut Tape<'_>,
        p: &[Var],
        x: Var,
        kv: Var,
        mask: Var,
        a: &AttentionParams,
        shape: AttentionShape,
    ) -> Var {
        let xn = Self::norm(tape, p, x, a.norm);
        let q = tape.matmul(xn, p[a.q]);
        let k = tape.matmul(kv, p[a.k]);
        let v = tape.matmul(kv, p[a.v]);
        let o = tape.attention(q, k, v, mask, shape);
        let o = tape.matmul(o, p[a.o]);
        tape.add(x, o)
    }

    fn rows_of<F: Fn(usize) -> bool>(&self, batch: usize, keep: F) -> Vec<usize> {
        let n = self.shapes.n_agents();
        (0..batch * n).filter(|r| keep(r % n)).collect()
    }

    /// Type-specific observation embeddings, `[batch * N, d]`.
    fn embed_rows(&self, tape: &mut Tape<'_>, p: &[Var], batch: &PolicyBatch) -> Var {
        let l = self.shapes.obs_len;
        let rows = batch.batch * self.shapes.n_agents();
        let mut acc: Option<Var> = None;
        for (t, lin) in self.layout.obs_embed.iter().enumerate() {
            let idx = self.rows_of(batch.batch, |i| self.shapes.agent_type[i] == t);
            let data = idx.iter().flat_map(|r| batch.obs[r * l..(r + 1) * l].iter().copied()).collect();
            let o = tape.constant(Tensor::matrix(idx.len(), l, data));
            let e = Self::linear(tape, p, o, *lin);
            let e = tape.gelu(e);
            let placed = tape.scatter_rows(e, idx, rows);
            acc = Some(match acc {
                None => placed,
                Some(a) => tape.add(a, placed),
            });
        }
        acc.expect("at least one agent type")
    }

    fn encode_rows(&self, tape: &mut Tape<'_>, p: &[Var], x0: Var, mask: Var, batch: usize) -> (Var, Var) {
        let shape = AttentionShape {
            batch,
            agents: self.shapes.n_agents(),
            heads: self.config.heads,
            layout: MaskLayout::Graph,
        };
        let mut x = x0;
        for blk in &self.layout.encoder {
            x = Self::attend(tape, p, x, x0, mask, &blk.attn, shape);
            x = Self::feed_forward(tape, p, x, &blk.ff);
        }
        let e = Self::norm(tape, p, x, self.layout.encoder_norm);
        let v = Self::linear(tape, p, e, self.layout.value_hidden);
        let v = tape.gelu(v);
        let v = Self::linear(tape, p, v, self.layout.value_out);
        (e, v)
    }

    /// Final decoder states `[batch * N, d]` given encoder output and the
    /// (teacher-forced) actions of every agent.
    fn decode_rows(
        &self,
        tape: &mut Tape<'_>,
        p: &[Var],
        e: Var,
        x0: Var,
        mask: Var,
        batch: usize,
        actions: &[usize],
    ) -> Var {
        let n = self.shapes.n_agents();
        let idx: Vec<usize> = actions
            .iter()
            .enumerate()
            .map(|(r, a)| self.layout.action_offset[self.shapes.agent_type[r % n]] + a)
            .collect();
        let y = tape.gather_rows(p[self.layout.action_table], idx);
        let pos_idx: Vec<usize> = (0..batch * n).map(|r| r % n).collect();
        let pos = tape.gather_rows(p[self.layout.position], pos_idx);
        let own = AttentionShape {
            batch,
            agents: n,
            heads: self.config.heads,
            layout: MaskLayout::DecoderSelf,
        };
        let cross = AttentionShape {
            layout: MaskLayout::Graph,
            ..own
        };
        let mut h = tape.add(e, pos);
        for blk in &self.layout.decoder {
            let hn = Self::norm(tape, p, h, blk.own.norm);
            let kv = tape.concat_seq(hn, y, batch);
            h = Self::attend(tape, p, h, kv, mask, &blk.own, own);
            h = Self::attend(tape, p, h, x0, mask, &blk.cross, cross);
            h = Self::feed_forward(tape, p, h, &blk.ff);
        }
        Self::norm(tape, p, h, self.layout.decoder_norm)
    }

    /// Per head: (rows, log-probabilities `[rows, m]`).
    fn head_log_probs(
        &self,
        tape: &mut Tape<'_>,
        p: &[Var],
        h: Var,
        batch: usize,
        avail: &[Vec<bool>],
    ) -> Vec<(Vec<usize>, Var)> {
        let mut out = vec![];
        for (hi, (_, lin)) in self.layout.heads.iter().enumerate() {
            let rows = self.rows_of(batch, |i| self.shapes.agent_head[i] == hi);
            let hr = tape.gather_rows(h, rows.clone());
            let logits = Self::linear(tape, p, hr, *lin);
            let av = rows.iter().flat_map(|r| avail[*r].iter().copied()).collect();
            out.push((rows, tape.masked_log_softmax(logits, av)));
        }
        out
    }

    /// Differentiable teacher-forced pass over a batch.
    ///
    /// `p` holds one node per parameter (see [`Policy::param_vars`]) and
    /// `mask` is the `[batch * N, N]` communication mask.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &[Var], batch: &PolicyBatch, mask: Var) -> Forward {
        let rows = batch.batch * self.shapes.n_agents();
        let x0 = self.embed_rows(tape, p, batch);
        let (e, values) = self.encode_rows(tape, p, x0, mask, batch.batch);
        let h = self.decode_rows(tape, p, e, x0, mask, batch.batch, &batch.actions);
        let mut log_probs: Option<Var> = None;
        let mut entropies: Option<Var> = None;
        for (idx, lp) in self.head_log_probs(tape, p, h, batch.batch, &batch.avail) {
            let picks = idx.iter().map(|r| batch.actions[*r]).collect();
            let av = idx.iter().flat_map(|r| batch.avail[*r].iter().copied()).collect();
            let chosen = tape.pick(lp, picks);
            let ent = tape.entropy(lp, av);
            let chosen = tape.scatter_rows(chosen, idx.clone(), rows);
            let ent = tape.scatter_rows(ent, idx, rows);
            log_probs = Some(log_probs.map_or(chosen, |a| tape.add(a, chosen)));
            entropies = Some(entropies.map_or(ent, |a| tape.add(a, ent)));
        }
        Forward {
            representations: e,
            values,
            log_probs: log_probs.expect("at least one head"),
            entropies: entropies.expect("at least one head"),
        }
    }

    fn single(&self, obs: &[ObservationVector], actions: &[usize]) -> Result<PolicyBatch> {
        let mut b = PolicyBatch::with_capacity(1, &self.shapes);
        b.push(obs, actions, None, &self.shapes)?;
        Ok(b)
    }

    fn check_mask(&self, mask: &AdjacencyMask) -> Result<()> {
        if mask.n() != self.shapes.n_agents() {
            return Err(Error::contract(format!(
                "mask is {0}x{0}, model has {1} agents",
                mask.n(),
                self.shapes.n_agents()
            )));
        }
        Ok(())
    }

    /// Observation embeddings, `N x d`.
    pub fn embed(&self, obs: &[ObservationVector]) -> Result<Tensor> {
        let batch = self.single(obs, &vec![0; obs.len()])?;
        let mut tape = Tape::new(&self.params);
        let p = self.param_vars(&mut tape);
        let x0 = self.embed_rows(&mut tape, &p, &batch);
        Ok(tape.value(x0).clone())
    }

    /// Encoder representations (`N x d`) and per-agent values.
    pub fn encode(&self, obs: &[ObservationVector], mask: &AdjacencyMask) -> Result<(Tensor, Vec<f64>)> {
        self.check_mask(mask)?;
        let batch = self.single(obs, &vec![0; obs.len()])?;
        let mut tape = Tape::new(&self.params);
        let p = self.param_vars(&mut tape);
        let m = tape.constant(mask.to_tensor());
        let x0 = self.embed_rows(&mut tape, &p, &batch);
        let (e, v) = self.encode_rows(&mut tape, &p, x0, m, 1);
        Ok((tape.value(e).clone(), tape.value(v).data().to_vec()))
    }

    /// Chooses a joint action agent by agent.
    pub fn decode(
        &self,
        obs: &[ObservationVector],
        mask: &AdjacencyMask,
        avail: Option<&[Vec<bool>]>,
        mode: DecodeMode,
        rng: &mut impl Rng,
    ) -> Result<JointActionSample> {
        self.check_mask(mask)?;
        let n = self.shapes.n_agents();
        let avail: Vec<Vec<bool>> = match avail {
            Some(a) => a.to_vec(),
            None => self.shapes.action_counts.iter().map(|m| vec![true; *m]).collect(),
        };
        for (i, a) in avail.iter().enumerate() {
            if a.len() != self.shapes.action_counts[i] || !a.iter().any(|x| *x) {
                return Err(Error::contract(format!("agent {i} has no available action")));
            }
        }
        let mut batch = self.single(obs, &vec![0; n])?;
        batch.avail = avail.clone();
        let mut tape = Tape::new(&self.params);
        let p = self.param_vars(&mut tape);
        let m = tape.constant(mask.to_tensor());
        let x0 = self.embed_rows(&mut tape, &p, &batch);
        let (e, values) = self.encode_rows(&mut tape, &p, x0, m, 1);
        let values = tape.value(values).data().to_vec();
        let mut actions = vec![0; n];
        let mut log_probs = vec![0.0; n];
        for i in 0..n {
            // only actions of agents before i are visible to agent i
            let h = self.decode_rows(&mut tape, &p, e, x0, m, 1, &actions);
            let hi = self.shapes.agent_head[i];
            let (_, lin) = self.layout.heads[hi];
            let hr = tape.gather_rows(h, vec![i]);
            let logits = Self::linear(&mut tape, &p, hr, lin);
            let lp_var = tape.masked_log_softmax(logits, avail[i].clone());
            let lp = tape.value(lp_var).data();
            let a = match mode {
                DecodeMode::Greedy => {
                    let mut best = None;
                    for (c, v) in lp.iter().enumerate() {
                        if avail[i][c] && best.is_none_or(|(_, bv)| *v > bv) {
                            best = Some((c, *v));
                        }
                    }
                    best.expect("an available action").0
                }
                DecodeMode::Sample => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (c, v) in lp.iter().enumerate() {
                        if avail[i][c] {
                            acc += v.exp();
                            pick = Some(c);
                            if u < acc {
                                break;
                            }
                        }
                    }
                    pick.expect("an available action")
                }
            };
            actions[i] = a;
            log_probs[i] = lp[a];
        }
        Ok(JointActionSample {
            actions,
            log_probs,
            values,
            mask_used: mask.clone(),
        })
    }

    /// Teacher-forced log-probabilities, entropies and values, one entry
    /// per agent row of the batch.
    pub fn evaluate_actions(&self, batch: &PolicyBatch, masks: &[&AdjacencyMask]) -> Result<Evaluation> {
        if masks.len() != batch.batch {
            return Err(Error::contract("one mask per batch sample"));
        }
        for m in masks {
            self.check_mask(m)?;
        }
        let mut tape = Tape::new(&self.params);
        let p = self.param_vars(&mut tape);
        let m = tape.constant(PolicyBatch::mask_tensor(masks));
        let f = self.forward(&mut tape, &p, batch, m);
        Ok(Evaluation {
            log_probs: tape.value(f.log_probs).data().to_vec(),
            entropies: tape.value(f.entropies).data().to_vec(),
            values: tape.value(f.values).data().to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
}
