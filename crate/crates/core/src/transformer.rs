//! Non-causal pre-norm Transformer encoder.
//!
//! Tokens carry no positional information, so the encoder is equivariant to
//! any permutation of its input tokens. Blocks compute
//! `h += MHA(LN(h)); h += MLP(LN(h))` with full attention and a GELU MLP; a
//! final layer norm precedes the readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub in_dim: usize,
    /// Width of the readout projection; 0 reads the final hidden state as is.
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.model_dim, self.mlp_dim, self.heads, self.in_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Parameters of one block: two layer norms, four attention projections
    /// and the two MLP layers. Every linear map has a bias except the key
    /// projection, whose bias shifts all scores of a query equally and so
    /// never reaches the output.
    pub fn block_param_count(&self) -> usize {
        let (d, m) = (self.model_dim, self.mlp_dim);
        4 * d * d + 2 * d * m + 8 * d + m
    }

    /// Width of what `readout` returns.
    pub fn readout_dim(&self) -> usize {
        if self.out_dim == 0 {
            self.model_dim
        } else {
            self.out_dim
        }
    }

    /// Total parameters: embedding, blocks, final norm and readout.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        (self.in_dim + 1) * d + self.layers * self.block_param_count() + 2 * d + (d + 1) * self.out_dim
    }
}

/// Role of a token within a [`TokenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    ContextPair,
    Query,
    Summary,
}

/// Batched tokens `[batch, seq_len, model_dim]` with one role per position.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    /// Position of the single token carrying `role`.
    pub fn position(&self, role: TokenRole) -> Result<usize> {
        let mut hits = self.roles.iter().enumerate().filter(|(_, r)| **r == role).map(|(i, _)| i);
        match (hits.next(), hits.next()) {
            (Some(i), None) => Ok(i),
            (None, _) => Err(Error::invalid("readout", format!("no token with role {role:?}"))),
            (Some(_), Some(_)) => Err(Error::invalid("readout", format!("several tokens with role {role:?}"))),
        }
    }

    /// Additive attention bias hiding summary tokens from every query.
    /// `None` when the sequence has no summary token.
    pub fn key_mask(&self) -> Option<Tensor> {
        if !self.roles.contains(&TokenRole::Summary) {
            return None;
        }
        let bias = self
            .roles
            .iter()
            .map(|r| if *r == TokenRole::Summary { SUMMARY_KEY_BIAS } else { 0.0 })
            .collect();
        Some(Tensor::vector(bias))
    }
}

const SUMMARY_KEY_BIAS: f64 = -1e30;

/// Token features for an `(x, y)` pair: `[x, y or zeros, mask_flag]`.
pub fn pair_features(x: &[f64], y: Option<&[f64]>, y_dim: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + y_dim + 1);
    f.extend_from_slice(x);
    match y {
        Some(y) => {
            f.extend_from_slice(y);
            f.push(0.0);
        }
        None => {
            f.extend(std::iter::repeat(0.0).take(y_dim));
            f.push(1.0);
        }
    }
    f
}

/// Affine map on the last axis, weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = ps.add_normal(format!("{name}.w"), in_dim, out_dim, rng);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    /// Bias-free map around an existing `[in, out]` parameter.
    pub fn from_weight(w: ParamId, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul(n, p.var(self.gamma))?;
        g.add(s, p.var(self.beta))
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Called with `(layer, hidden)` after the embedding (layer 0) and after
/// every block; the returned value replaces the hidden state.
pub type LayerTap<'a> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    readout: Option<Linear>,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = Linear::new(ps, &format!("{prefix}.embed"), cfg.in_dim, d, true, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.block{l}.{s}");
                Block {
                    ln1: LayerNorm::new(ps, &n("ln1"), d),
                    q: Linear::new(ps, &n("q"), d, d, true, rng),
                    k: Linear::new(ps, &n("k"), d, d, false, rng),
                    v: Linear::new(ps, &n("v"), d, d, true, rng),
                    o: Linear::new(ps, &n("o"), d, d, true, rng),
                    ln2: LayerNorm::new(ps, &n("ln2"), d),
                    fc1: Linear::new(ps, &n("fc1"), d, cfg.mlp_dim, true, rng),
                    fc2: Linear::new(ps, &n("fc2"), cfg.mlp_dim, d, true, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{prefix}.final_ln"), d);
        let readout = (cfg.out_dim > 0).then(|| Linear::new(ps, &format!("{prefix}.readout"), d, cfg.out_dim, true, rng));
        Ok(Encoder {
            cfg,
            embed,
            blocks,
            final_ln,
            readout,
        })
    }

    pub fn readout_layer(&self) -> Option<&Linear> {
        self.readout.as_ref()
    }

    /// Embeds token features `[.., in_dim]` into `[.., model_dim]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, feats: Var) -> Result<Var> {
        let got = *g.shape(feats).last().unwrap_or(&0);
        if got != self.cfg.in_dim {
            return Err(Error::Shape {
                op: "embed",
                lhs: g.shape(feats).to_vec(),
                rhs: vec![self.cfg.in_dim],
            });
        }
        self.embed.forward(g, p, feats)
    }

    /// Single token for `(x, y)`; `None` marks the masked query slot.
    pub fn embed_pair(&self, g: &mut Graph, p: &Bound, x: &[f64], y: Option<&[f64]>, y_dim: usize) -> Result<Var> {
        let f = pair_features(x, y, y_dim);
        let n = f.len();
        let feats = g.constant(Tensor::new(vec![1, n], f)?);
        let e = self.embed(g, p, feats)?;
        g.reshape(e, &[self.cfg.model_dim])
    }

    /// Multi-head self-attention sublayer of block `layer` applied to
    /// already-normalized `x: [b, t, d]`.
    /// Multi-head attention of block `layer`. `mask` is an additive bias over
    /// key positions.
    pub fn self_attention(&self, g: &mut Graph, p: &Bound, layer: usize, x: Var, mask: Option<Var>) -> Result<Var> {
        let blk = &self.blocks[layer];
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.cfg.heads;
        let dh = d / h;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let r = g.reshape(v, &[b, t, h, dh])?;
            g.transpose(r, 1, 2)
        };
        let q = blk.q.forward(g, p, x)?;
        let q = split(g, q)?;
        let k = blk.k.forward(g, p, x)?;
        let k = split(g, k)?;
        let kt = g.transpose(k, 2, 3)?;
        let v = blk.v.forward(g, p, x)?;
        let v = split(g, v)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let att = g.softmax(scores);
        let ctx = g.matmul(att, v)?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        blk.o.forward(g, p, ctx)
    }

    fn block(&self, g: &mut Graph, p: &Bound, layer: usize, h: Var, mask: Option<Var>) -> Result<Var> {
        let blk = &self.blocks[layer];
        let n = blk.ln1.forward(g, p, h)?;
        let a = self.self_attention(g, p, layer, n, mask)?;
        let h = g.add(h, a)?;
        let n = blk.ln2.forward(g, p, h)?;
        let m = blk.fc1.forward(g, p, n)?;
        let m = g.gelu(m);
        let m = blk.fc2.forward(g, p, m)?;
        g.add(h, m)
    }

    /// Runs all blocks over embedded tokens `[b, t, d]` and applies the final
    /// layer norm.
    pub fn forward(&self, g: &mut Graph, p: &Bound, seq: &TokenSequence, tap: &mut LayerTap<'_>) -> Result<Var> {
        let shape = g.shape(seq.tokens);
        if shape.len() != 3 || shape[2] != self.cfg.model_dim || shape[1] != seq.roles.len() {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: shape.to_vec(),
                rhs: vec![seq.roles.len(), self.cfg.model_dim],
            });
        }
        if seq.roles.iter().all(|r| *r == TokenRole::Summary) {
            return Err(Error::invalid("encoder_forward", "no token is visible to attention"));
        }
        let mask = seq.key_mask().map(|m| g.constant(m));
        let mut h = tap(g, 0, seq.tokens)?;
        for l in 0..self.blocks.len() {
            h = self.block(g, p, l, h, mask)?;
            h = tap(g, l + 1, h)?;
        }
        self.final_ln.forward(g, p, h)
    }

    /// Final hidden state of the token with `role`, projected to `out_dim`
    /// when a readout exists.
    pub fn readout(&self, g: &mut Graph, p: &Bound, hidden: Var, seq: &TokenSequence, role: TokenRole) -> Result<Var> {
        let pos = seq.position(role)?;
        let shape = g.shape(hidden).to_vec();
        let row = g.slice(hidden, 1, pos, 1)?;
        let row = g.reshape(row, &[shape[0], shape[2]])?;
        match &self.readout {
            Some(r) => r.forward(g, p, row),
            None => Ok(row),
        }
    }
}

/// A tap that leaves every hidden state untouched.
pub fn no_tap(_: &mut Graph, _: usize, h: Var) -> Result<Var> {
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, rng};
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            model_dim: 8,
            mlp_dim: 12,
            heads: 2,
            in_dim: 3,
            out_dim: 2,
        }
    }

    fn random_tokens(b: usize, t: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        let data = (0..b * t * d).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::new(vec![b, t, d], data).unwrap()
    }

    fn roles(n: usize) -> Vec<TokenRole> {
        let mut r = vec![TokenRole::ContextPair; n];
        r.push(TokenRole::Query);
        r
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.mlp_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_formula_matches_construction() {
        for layers in [0, 1, 3] {
            let mut ps = ParamSet::new();
            let c = cfg(layers);
            Encoder::new(&mut ps, "enc", c.clone(), &mut rng::stream(0, &[])).unwrap();
            assert_eq!(ps.count(), c.param_count());
        }
    }

    #[test]
    fn masked_pair_features() {
        assert_eq!(pair_features(&[1.0, 2.0], None, 2), vec![1.0, 2.0, 0.0, 0.0, 1.0]);
        assert_eq!(pair_features(&[1.0], Some(&[5.0]), 1), vec![1.0, 5.0, 0.0]);
    }

    #[test]
    fn embed_pair_is_pure() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(1), &mut rng::stream(1, &[])).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let a = enc.embed_pair(&mut g, &p, &[0.3], Some(&[1.5]), 1).unwrap();
        let b = enc.embed_pair(&mut g, &p, &[0.3], Some(&[1.5]), 1).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.shape(a), &[8]);
        assert!(enc.embed_pair(&mut g, &p, &[0.3, 1.0], Some(&[1.5]), 1).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(1), &mut rng::stream(2, &[])).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(random_tokens(2, 1, 8, 3));
        let att = enc.self_attention(&mut g, &p, 0, x, None).unwrap();
        let blk = &enc.blocks[0];
        let v = blk.v.forward(&mut g, &p, x).unwrap();
        let expected = blk.o.forward(&mut g, &p, v).unwrap();
        assert!(g.value(att).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn permuting_context_permutes_hidden_states() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(2), &mut rng::stream(4, &[])).unwrap();
        let n = 5;
        let toks = random_tokens(1, n + 1, 8, 5);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = toks.data().to_vec();
        for (i, &pi) in perm.iter().enumerate() {
            permuted[i * 8..(i + 1) * 8].copy_from_slice(&toks.data()[pi * 8..(pi + 1) * 8]);
        }
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let tokens = g.constant(t);
            let seq = TokenSequence {
                tokens,
                roles: roles(n),
            };
            let h = enc.forward(&mut g, &p, &seq, &mut no_tap).unwrap();
            g.value(h).clone()
        };
        let h0 = run(toks.clone());
        let h1 = run(Tensor::new(vec![1, n + 1, 8], permuted).unwrap());
        assert_eq!(h1.shape(), &[1, n + 1, 8]);
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((h1.data()[i * 8 + j] - h0.data()[pi * 8 + j]).abs() < 1e-12);
            }
        }
        for j in 0..8 {
            assert!((h1.data()[n * 8 + j] - h0.data()[n * 8 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_requires_exactly_one_role() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(1), &mut rng::stream(6, &[])).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let tokens = g.constant(random_tokens(3, 4, 8, 7));
        let seq = TokenSequence {
            tokens,
            roles: roles(3),
        };
        let h = enc.forward(&mut g, &p, &seq, &mut no_tap).unwrap();
        let out = enc.readout(&mut g, &p, h, &seq, TokenRole::Query).unwrap();
        assert_eq!(g.shape(out), &[3, 2]);
        assert!(enc.readout(&mut g, &p, h, &seq, TokenRole::Summary).is_err());
        let dup = TokenSequence {
            tokens,
            roles: vec![TokenRole::Query; 4],
        };
        assert!(enc.readout(&mut g, &p, h, &dup, TokenRole::Query).is_err());
    }

    #[test]
    fn summary_token_is_invisible_to_other_tokens() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(2), &mut rng::stream(10, &[])).unwrap();
        let toks = random_tokens(1, 4, 8, 11);
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let tokens = g.constant(t);
            let mut roles = vec![TokenRole::ContextPair; 3];
            roles.push(TokenRole::Summary);
            let seq = TokenSequence { tokens, roles };
            let h = enc.forward(&mut g, &p, &seq, &mut no_tap).unwrap();
            g.value(h).clone()
        };
        let mut other = toks.data().to_vec();
        other[24..].iter_mut().for_each(|v| *v = -3.0 * *v + 1.0);
        let a = run(toks);
        let b = run(Tensor::new(vec![1, 4, 8], other).unwrap());
        assert_eq!(a.data()[..24], b.data()[..24]);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn readout_is_linear_without_bias() {
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "r", 4, 3, false, &mut rng::stream(8, &[]));
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let h = random_tokens(1, 2, 4, 9).reshape(&[2, 4]).unwrap();
        let a = g.constant(h.clone());
        let scaled = g.constant(h.map(|v| 2.5 * v));
        let ra = lin.forward(&mut g, &p, a).unwrap();
        let rs = lin.forward(&mut g, &p, scaled).unwrap();
        let ra = g.value(ra).map(|v| 2.5 * v);
        assert!(ra.max_abs_diff(g.value(rs)) < 1e-12);
    }

    #[test]
    fn two_layer_encoder_gradcheck() {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "e", cfg(2), &mut rng::stream(10, &[])).unwrap();
        let x = random_tokens(2, 4, 8, 11);
        let w = random_tokens(2, 4, 8, 12);
        let err = finite_diff_check(
            |g, tokens| {
                let p = ps.bind(g, false);
                let seq = TokenSequence {
                    tokens,
                    roles: roles(3),
                };
                let h = enc.forward(g, &p, &seq, &mut no_tap)?;
                let wv = g.constant(w.clone());
                let m = g.mul(h, wv)?;
                Ok(g.sum_all(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
