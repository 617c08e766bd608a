//! Network building blocks on top of [`Graph`]: ReLU MLPs, a GRU, a causal
//! self-attention encoder and the tanh-squashed Gaussian policy head.
//!
//! Linear layers store `w` as `in × out` so a batch `x` (rows = samples)
//! maps through `x·w + b` without transposes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Binding, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const TANH_EPS: f64 = 1e-6;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Weights `U(-1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// `x·w (+ b)`; the bias is used when the store has one.
pub fn linear(g: &mut Graph, p: Binding<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.bind(p, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if p.store.contains(&bias) {
        let b = g.bind(p, &bias)?;
        g.add_row(y, b)
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Self {
        Self { prefix: prefix.into(), sizes }
    }

    fn layer(&self, i: usize) -> String {
        format!("{}.l{i}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output sizes"));
        }
        for (i, w) in self.sizes.windows(2).enumerate() {
            init_linear(store, &self.layer(i), w[0], w[1], true, rng)?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    /// ReLU between layers, identity on the output.
    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(Error::invalid(format!("MLP {} expects {} inputs, got {cols}", self.prefix, self.input_dim())));
        }
        let n = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..n {
            h = linear(g, p, &self.layer(i), h)?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Single-sample MLP evaluation.
pub fn mlp_forward(store: &ParamStore, prefix: &str, x: &[f64], sizes: &[usize]) -> Result<Vec<f64>> {
    let mlp = Mlp::new(prefix, sizes.to_vec());
    let mut g = Graph::new();
    let xv = g.input(1, x.len(), x.to_vec())?;
    let y = mlp.forward(&mut g, Binding::frozen(store), xv)?;
    Ok(g.value(y).to_vec())
}

/// Gated recurrent unit:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r⊙h) + b_h)`, `h' = (1-z)⊙h̃ + z⊙h`.
///
/// The three input projections are stored side by side in `w_x` (`in × 3H`,
/// gate order z, r, h) so a whole sequence is projected with one product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self { prefix: prefix.into(), input, hidden }
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (i, h) = (self.input, self.hidden);
        let bx = 1.0 / (i.max(1) as f64).sqrt();
        let bh = 1.0 / (h as f64).sqrt();
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        store.insert(self.path("w_x"), Tensor::matrix(i, 3 * h, uniform(i * 3 * h, bx))?)?;
        store.insert(self.path("u_zr"), Tensor::matrix(h, 2 * h, uniform(h * 2 * h, bh))?)?;
        store.insert(self.path("u_h"), Tensor::matrix(h, h, uniform(h * h, bh))?)?;
        store.insert(self.path("b"), Tensor::zeros(&[3 * h]))?;
        Ok(())
    }

    /// Projects inputs for every gate: `x·w_x + b`, shape `rows × 3H`.
    pub fn project_inputs(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Result<Var> {
        let w = g.bind(p, &self.path("w_x"))?;
        let b = g.bind(p, &self.path("b"))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// One step from pre-projected inputs. Rows whose `mask` entry is 0 keep `h`.
    pub fn cell(&self, g: &mut Graph, p: Binding<'_>, xp: Var, h: Var, mask: Option<&[f64]>) -> Result<Var> {
        let hs = self.hidden;
        let u_zr = g.bind(p, &self.path("u_zr"))?;
        let u_h = g.bind(p, &self.path("u_h"))?;
        let x_zr = g.slice_cols(xp, 0, 2 * hs)?;
        let x_h = g.slice_cols(xp, 2 * hs, 3 * hs)?;
        let h_zr = g.matmul(h, u_zr)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre);
        let z = g.slice_cols(zr, 0, hs)?;
        let r = g.slice_cols(zr, hs, 2 * hs)?;
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, u_h)?;
        let pre_h = g.add(x_h, rhu)?;
        let cand = g.tanh(pre_h);
        // h' = h̃ + z⊙(h − h̃)
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        let next = g.add(cand, zd)?;
        match mask {
            None => Ok(next),
            Some(m) => {
                let delta = g.sub(next, h)?;
                let md = g.row_mask(delta, m)?;
                g.add(h, md)
            }
        }
    }

    /// Runs a padded batch of sequences from a zero state.
    ///
    /// `tokens` is time-major: rows `t·batch .. (t+1)·batch` hold step `t`.
    /// Sequence `b` is active from step `starts[b]` on; before that its state
    /// stays exactly zero.
    pub fn run(&self, g: &mut Graph, p: Binding<'_>, tokens: Var, batch: usize, steps: usize, starts: &[usize]) -> Result<Var> {
        if starts.len() != batch || g.shape(tokens).0 != batch * steps {
            return Err(Error::invalid("GRU: token rows do not match batch × steps"));
        }
        let xp = self.project_inputs(g, p, tokens)?;
        let mut h = g.zeros(batch, self.hidden);
        for t in 0..steps {
            let mask: Vec<f64> = starts.iter().map(|&s| if t >= s { 1.0 } else { 0.0 }).collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let xt = g.slice_rows(xp, t * batch, (t + 1) * batch)?;
            let full = mask.iter().all(|&m| m == 1.0);
            h = self.cell(g, p, xt, h, if full { None } else { Some(&mask) })?;
        }
        Ok(h)
    }
}

/// Single-sample GRU step.
pub fn gru_step(store: &ParamStore, prefix: &str, x: &[f64], hprev: &[f64]) -> Result<Vec<f64>> {
    let hidden = hprev.len();
    let gru = Gru::new(prefix, x.len(), hidden);
    let w = store.get(&gru.path("w_x"))?;
    if w.shape != [x.len(), 3 * hidden] {
        return Err(Error::invalid(format!("GRU weights {:?} do not fit input {} / hidden {hidden}", w.shape, x.len())));
    }
    let mut g = Graph::new();
    let p = Binding::frozen(store);
    let xv = g.input(1, x.len(), x.to_vec())?;
    let hv = g.input(1, hidden, hprev.to_vec())?;
    let xp = gru.project_inputs(&mut g, p, xv)?;
    let h = gru.cell(&mut g, p, xp, hv, None)?;
    Ok(g.value(h).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenEmbedding {
    Learned,
    None,
}

/// `pe[2i] = sin(pos / 10000^(2i/dim))`, `pe[2i+1] = cos(...)`.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(i2 / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Causal self-attention encoder returning the last position's representation.
///
/// Tokens enter through a linear projection (followed by a learned ReLU
/// embedding layer when `token_embedding` is `Learned`), get a positional
/// encoding added, then pass through `layers` residual blocks of
/// multi-head causal attention and a ReLU feed-forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEncoder {
    pub prefix: String,
    pub token_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub context: usize,
    pub max_len: usize,
    pub positional: Positional,
    pub token_embedding: TokenEmbedding,
}

impl AttentionEncoder {
    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        let h = self.hidden;
        init_linear(store, &self.path("embed"), self.token_dim, h, true, rng)?;
        if self.token_embedding == TokenEmbedding::Learned {
            init_linear(store, &self.path("embed2"), h, h, true, rng)?;
        }
        if self.positional == Positional::Learned {
            let pos = (0..self.max_len * h).map(|_| 0.1 * crate::rng::normal(rng)).collect();
            store.insert(self.path("pos"), Tensor::matrix(self.max_len, h, pos)?)?;
        }
        for l in 0..self.layers {
            for name in ["q", "k", "v", "o"] {
                init_linear(store, &self.path(&format!("l{l}.{name}")), h, h, true, rng)?;
            }
            init_linear(store, &self.path(&format!("l{l}.ff1")), h, self.ff_width, true, rng)?;
            init_linear(store, &self.path(&format!("l{l}.ff2")), self.ff_width, h, true, rng)?;
        }
        init_linear(store, &self.path("proj"), h, self.context, false, rng)?;
        Ok(())
    }

    /// Encodes a padded batch. `tokens` is batch-major (`b·steps + t`);
    /// sequence `b` occupies steps `starts[b]..steps`. Returns the full
    /// pre-pooling sequence and the projected last-position context.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: Binding<'_>,
        tokens: Var,
        batch: usize,
        steps: usize,
        starts: &[usize],
    ) -> Result<(Var, Var)> {
        if steps == 0 || steps > self.max_len {
            return Err(Error::invalid(format!("sequence length {steps} outside 1..={}", self.max_len)));
        }
        if starts.len() != batch || g.shape(tokens).0 != batch * steps {
            return Err(Error::invalid("attention encoder: token rows do not match batch × steps"));
        }
        let h = self.hidden;
        let mut x = linear(g, p, &self.path("embed"), tokens)?;
        if self.token_embedding == TokenEmbedding::Learned {
            let r = g.relu(x);
            x = linear(g, p, &self.path("embed2"), r)?;
        }
        let positions: Vec<usize> = starts
            .iter()
            .flat_map(|&s| (0..steps).map(move |t| t.saturating_sub(s)))
            .collect();
        let pos = match self.positional {
            Positional::Learned => {
                let table = g.bind(p, &self.path("pos"))?;
                g.gather_rows(table, &positions)?
            }
            Positional::Sinusoidal => {
                let vals = positions.iter().flat_map(|&q| sinusoidal_encoding(q, h)).collect();
                g.input(batch * steps, h, vals)?
            }
        };
        x = g.add(x, pos)?;
        for l in 0..self.layers {
            let q = linear(g, p, &self.path(&format!("l{l}.q")), x)?;
            let k = linear(g, p, &self.path(&format!("l{l}.k")), x)?;
            let v = linear(g, p, &self.path(&format!("l{l}.v")), x)?;
            let att = g.causal_attention(q, k, v, self.heads, steps, starts)?;
            let o = linear(g, p, &self.path(&format!("l{l}.o")), att)?;
            x = g.add(x, o)?;
            let f1 = linear(g, p, &self.path(&format!("l{l}.ff1")), x)?;
            let f1 = g.relu(f1);
            let f2 = linear(g, p, &self.path(&format!("l{l}.ff2")), f1)?;
            x = g.add(x, f2)?;
        }
        let last: Vec<usize> = (0..batch).map(|b| b * steps + steps - 1).collect();
        let pooled = g.gather_rows(x, &last)?;
        let z = linear(g, p, &self.path("proj"), pooled)?;
        Ok((x, z))
    }
}

/// Single-sequence attention encoding; returns `(sequence, z)`.
pub fn attention_encode(store: &ParamStore, enc: &AttentionEncoder, tokens: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if tokens.is_empty() {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    let steps = tokens.len();
    let mut g = Graph::new();
    let flat: Vec<f64> = tokens.iter().flatten().copied().collect();
    let x = g.input(steps, enc.token_dim, flat)?;
    let (seq, z) = enc.encode(&mut g, Binding::frozen(store), x, 1, steps, &[0])?;
    let seq_rows = g.value(seq).chunks(enc.hidden).map(<[f64]>::to_vec).collect();
    Ok((seq_rows, g.value(z).to_vec()))
}

/// Outputs of the squashed Gaussian head for a batch.
pub struct SquashedGaussian {
    pub action: Var,
    pub log_prob: Var,
    pub mean: Var,
    pub log_std: Var,
}

/// `out` holds `[μ | log σ]` per row. `noise` holds one standard-normal draw
/// per action coordinate (row-major); `None` gives the deterministic action
/// `tanh(μ)`.
pub fn squashed_gaussian(g: &mut Graph, out: Var, act_dim: usize, noise: Option<&[f64]>) -> Result<SquashedGaussian> {
    let (rows, cols) = g.shape(out);
    if cols != 2 * act_dim {
        return Err(Error::invalid(format!("policy head emits {cols} values, expected {}", 2 * act_dim)));
    }
    let mean = g.slice_cols(out, 0, act_dim)?;
    let raw_log_std = g.slice_cols(out, act_dim, 2 * act_dim)?;
    let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
    let xi = match noise {
        Some(n) => n.to_vec(),
        None => vec![0.0; rows * act_dim],
    };
    if xi.len() != rows * act_dim {
        return Err(Error::invalid("noise length does not match batch"));
    }
    let sq: Vec<f64> = xi.iter().map(|x| -0.5 * x * x - HALF_LOG_2PI).collect();
    let u = if noise.is_some() {
        let std = g.exp(log_std);
        let xi_v = g.input(rows, act_dim, xi)?;
        let eps = g.mul(std, xi_v)?;
        g.add(mean, eps)?
    } else {
        mean
    };
    let action = g.tanh(u);
    // log N(u; μ, σ) = -ξ²/2 - log σ - log(2π)/2
    let sq_v = g.input(rows, act_dim, sq)?;
    let normal = g.sub(sq_v, log_std)?;
    let a2 = g.square(action);
    let one_minus = g.scale(a2, -1.0);
    let one_minus = g.shift(one_minus, 1.0 + TANH_EPS);
    let corr = g.ln(one_minus);
    let per = g.sub(normal, corr)?;
    let log_prob = g.sum_cols(per);
    Ok(SquashedGaussian { action, log_prob, mean, log_std })
}

/// Differential entropy of a diagonal Gaussian from its log standard deviations.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX) + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
        .sum()
}

/// Affine map `features → [μ | log σ]` followed by a squashed Gaussian draw.
pub fn gaussian_policy_head<R: Rng + ?Sized>(
    store: &ParamStore,
    prefix: &str,
    features: &[f64],
    rng: &mut R,
    deterministic: bool,
) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::new();
    let p = Binding::frozen(store);
    let x = g.input(1, features.len(), features.to_vec())?;
    let out = linear(&mut g, p, prefix, x)?;
    let act_dim = g.shape(out).1 / 2;
    let noise = (!deterministic).then(|| crate::rng::normal_vec(rng, act_dim));
    let head = squashed_gaussian(&mut g, out, act_dim, noise.as_deref())?;
    Ok((g.value(head.action).to_vec(), g.scalar(head.log_prob)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new("m", vec![3, 4, 2]);
        mlp.init(&mut store, &mut seeded(0)).unwrap();
        for (_, t) in store.iter_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(mlp_forward(&store, "m", &[1.0, -2.0, 3.0], &[3, 4, 2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut store = ParamStore::new();
        store.insert("m.l0.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        store.insert("m.l0.b", Tensor::zeros(&[2])).unwrap();
        assert_eq!(mlp_forward(&store, "m", &[1.0, 2.0], &[2, 2]).unwrap(), vec![1.0, 2.0]);
        assert!(mlp_forward(&store, "m", &[1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    fn zero_gru(input: usize, hidden: usize) -> ParamStore {
        let mut store = ParamStore::new();
        Gru::new("g", input, hidden).init(&mut store, &mut seeded(0)).unwrap();
        for (_, t) in store.iter_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        store
    }

    #[test]
    fn gru_zero_parameter_cases() {
        let store = zero_gru(2, 3);
        assert_eq!(gru_step(&store, "g", &[0.0, 0.0], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let h = gru_step(&store, "g", &[0.0, 0.0], &[2.0, -4.0, 1.0]).unwrap();
        assert_eq!(h, vec![1.0, -2.0, 0.5]);
        assert!(gru_step(&store, "g", &[0.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn sinusoidal_origin_pattern() {
        assert_eq!(sinusoidal_encoding(0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn encoder(positional: Positional, token_embedding: TokenEmbedding) -> (AttentionEncoder, ParamStore) {
        let enc = AttentionEncoder {
            prefix: "tx".into(),
            token_dim: 3,
            hidden: 8,
            heads: 2,
            layers: 1,
            ff_width: 32,
            context: 5,
            max_len: 6,
            positional,
            token_embedding,
        };
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut seeded(4)).unwrap();
        (enc, store)
    }

    #[test]
    fn attention_is_causal() {
        for pos in [Positional::Learned, Positional::Sinusoidal] {
            let (enc, store) = encoder(pos, TokenEmbedding::Learned);
            let mut rng = seeded(1);
            let toks: Vec<Vec<f64>> = (0..5).map(|_| crate::rng::normal_vec(&mut rng, 3)).collect();
            let (base, _) = attention_encode(&store, &enc, &toks).unwrap();
            let mut bumped = toks.clone();
            bumped[3][1] += 0.7;
            let (after, _) = attention_encode(&store, &enc, &bumped).unwrap();
            for t in 0..3 {
                assert_eq!(base[t], after[t]);
            }
            assert_ne!(base[3], after[3]);
            assert_ne!(base[4], after[4]);
        }
    }

    #[test]
    fn attention_rejects_empty_and_bad_heads() {
        let (enc, store) = encoder(Positional::Sinusoidal, TokenEmbedding::None);
        assert!(attention_encode(&store, &enc, &[]).is_err());
        let bad = AttentionEncoder { heads: 3, ..enc };
        assert!(bad.init(&mut ParamStore::new(), &mut seeded(0)).is_err());
    }

    #[test]
    fn padded_batch_matches_single_sequences() {
        let (enc, store) = encoder(Positional::Learned, TokenEmbedding::None);
        let mut rng = seeded(2);
        let a: Vec<Vec<f64>> = (0..4).map(|_| crate::rng::normal_vec(&mut rng, 3)).collect();
        let b: Vec<Vec<f64>> = (0..2).map(|_| crate::rng::normal_vec(&mut rng, 3)).collect();
        let (_, za) = attention_encode(&store, &enc, &a).unwrap();
        let (_, zb) = attention_encode(&store, &enc, &b).unwrap();
        let mut flat: Vec<f64> = a.iter().flatten().copied().collect();
        flat.extend(std::iter::repeat_n(0.0, 2 * 3));
        flat.extend(b.iter().flatten());
        let mut g = Graph::new();
        let x = g.input(8, 3, flat).unwrap();
        let (_, z) = enc.encode(&mut g, Binding::frozen(&store), x, 2, 4, &[0, 2]).unwrap();
        let zv = g.value(z);
        for (x, y) in zv[..5].iter().zip(&za) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in zv[5..].iter().zip(&zb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn head_store(mu: f64, log_std: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("pi.w", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        store.insert("pi.b", Tensor::vector(vec![mu, log_std])).unwrap();
        store
    }

    #[test]
    fn standard_normal_at_origin() {
        let store = head_store(0.0, 0.0);
        let (a, logp) = gaussian_policy_head(&store, "pi", &[1.0], &mut seeded(0), true).unwrap();
        assert_eq!(a, vec![0.0]);
        assert!((logp - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-5);
        assert!((logp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn deterministic_action_is_tanh_mean() {
        let store = head_store(0.4, -1.0);
        let (a, _) = gaussian_policy_head(&store, "pi", &[1.0], &mut seeded(0), true).unwrap();
        assert_eq!(a, vec![0.4f64.tanh()]);
    }

    #[test]
    fn stochastic_actions_are_symmetric() {
        let mut g = Graph::new();
        let n = 100_000;
        let out = g.input(n, 2, vec![0.0; 2 * n]).unwrap();
        let noise = crate::rng::normal_vec(&mut seeded(3), n);
        let head = squashed_gaussian(&mut g, out, 1, Some(&noise)).unwrap();
        let a = g.value(head.action);
        assert!(a.iter().all(|x| x.abs() < 1.0));
        let mean = a.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut g = Graph::new();
        let out = g.input(1, 2, vec![0.0, 10.0]).unwrap();
        let head = squashed_gaussian(&mut g, out, 1, Some(&[0.0])).unwrap();
        assert_eq!(g.value(head.log_std), &[LOG_STD_MAX]);
    }

    #[test]
    fn entropy_of_unit_gaussian() {
        let e = gaussian_entropy(&[0.0]);
        assert!((e - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }
}
