//! The Transformer block: channel-wise (transposed) attention and the gated
//! feed-forward network, plus the ablation variants of both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// LayerNorm epsilon, applied inside the square root.
pub const LN_EPS: f64 = 1e-5;

/// Spatial self-attention is a quadratic-cost baseline; refuse to build an
/// (HW)^2 map beyond this pixel count.
pub const SPATIAL_HW_GUARD: usize = 16384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// Multi-Dconv head transposed attention: pointwise + depthwise Q/K/V.
    #[serde(rename = "MDTA")]
    Mdta,
    /// Transposed attention without the depthwise stage.
    #[serde(rename = "MTA")]
    Mta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfnVariant {
    /// Gated, with depthwise convolutions.
    #[serde(rename = "GDFN")]
    Gdfn,
    /// Gated, pointwise only.
    #[serde(rename = "GFN")]
    Gfn,
    /// Single path with depthwise convolutions, no gate.
    #[serde(rename = "DFN")]
    Dfn,
    /// Plain feed-forward: single pointwise path.
    #[serde(rename = "FN")]
    Fn,
}

impl AttentionVariant {
    pub fn all() -> [AttentionVariant; 2] {
        [AttentionVariant::Mdta, AttentionVariant::Mta]
    }
    pub fn has_dconv(self) -> bool {
        self == AttentionVariant::Mdta
    }
}

impl FfnVariant {
    pub fn all() -> [FfnVariant; 4] {
        [FfnVariant::Gdfn, FfnVariant::Gfn, FfnVariant::Dfn, FfnVariant::Fn]
    }
    pub fn gated(self) -> bool {
        matches!(self, FfnVariant::Gdfn | FfnVariant::Gfn)
    }
    pub fn has_dconv(self) -> bool {
        matches!(self, FfnVariant::Gdfn | FfnVariant::Dfn)
    }
}

/// Everything needed to shape one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub attention_variant: AttentionVariant,
    pub ffn_variant: FfnVariant,
    pub ffn_gamma: f64,
    pub bias_free: bool,
    pub qk_l2_normalize: bool,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide channel width {}",
                self.heads, self.dim
            )));
        }
        if self.hidden_dim() < 1 {
            return Err(Error::Config("ffn hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// FFN hidden width: round(gamma * C), at least 1.
    pub fn hidden_dim(&self) -> usize {
        ((self.ffn_gamma * self.dim as f64).round() as usize).max(1)
    }

    /// Parameter names (relative to the block), shapes, and initializers, in
    /// the canonical field order used by the parameter store.
    pub fn param_descs(&self) -> Vec<ParamDesc> {
        let c = self.dim;
        let hid = self.hidden_dim();
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<ParamDesc>, name: &str, k: usize, cin_g: usize, cout: usize| {
            out.push(ParamDesc {
                name: name.to_string(),
                shape: vec![k, k, cin_g, cout],
                init: Init::Uniform { fan_in: k * k * cin_g },
            });
            if !self.bias_free {
                out.push(ParamDesc {
                    name: format!("{name}_b"),
                    shape: vec![cout],
                    init: Init::Zero,
                });
            }
        };

        out.push(ParamDesc::gamma("norm1.gamma", c));
        if !self.bias_free {
            out.push(ParamDesc::beta("norm1.beta", c));
        }
        push_conv(&mut out, "attn.wq_p", 1, c, c);
        push_conv(&mut out, "attn.wk_p", 1, c, c);
        push_conv(&mut out, "attn.wv_p", 1, c, c);
        if self.attention_variant.has_dconv() {
            push_conv(&mut out, "attn.wq_d", 3, 1, c);
            push_conv(&mut out, "attn.wk_d", 3, 1, c);
            push_conv(&mut out, "attn.wv_d", 3, 1, c);
        }
        push_conv(&mut out, "attn.w_out", 1, c, c);
        out.push(ParamDesc {
            name: "attn.alpha".to_string(),
            shape: vec![self.heads],
            init: Init::One,
        });
        out.push(ParamDesc::gamma("norm2.gamma", c));
        if !self.bias_free {
            out.push(ParamDesc::beta("norm2.beta", c));
        }
        push_conv(&mut out, "ffn.w1_p", 1, c, hid);
        if self.ffn_variant.has_dconv() {
            push_conv(&mut out, "ffn.w1_d", 3, 1, hid);
        }
        if self.ffn_variant.gated() {
            push_conv(&mut out, "ffn.w2_p", 1, c, hid);
            if self.ffn_variant.has_dconv() {
                push_conv(&mut out, "ffn.w2_d", 3, 1, hid);
            }
        }
        push_conv(&mut out, "ffn.w_out", 1, hid, c);
        out
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Uniform { fan_in: usize },
    One,
    Zero,
}

#[derive(Clone, Debug)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDesc {
    fn gamma(name: &str, c: usize) -> Self {
        ParamDesc { name: name.to_string(), shape: vec![c], init: Init::One }
    }
    fn beta(name: &str, c: usize) -> Self {
        ParamDesc { name: name.to_string(), shape: vec![c], init: Init::Zero }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Scalar, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zero => Tensor::zeros(&self.shape),
            Init::One => Tensor::full(&self.shape, T::one()),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<T> = (0..self.numel())
                    .map(|_| T::f(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(&self.shape, data).unwrap()
            }
        }
    }
}

/// Reads leaf variable ids in canonical store order, asserting names line up.
pub struct ParamCursor<'a> {
    names: &'a [String],
    ids: &'a [VarId],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(names: &'a [String], ids: &'a [VarId]) -> Self {
        ParamCursor { names, ids, pos: 0 }
    }

    pub fn take(&mut self, name: &str) -> Result<VarId> {
        if self.pos >= self.names.len() {
            return Err(Error::Integrity(format!("parameter store exhausted at {name}")));
        }
        if self.names[self.pos] != name {
            return Err(Error::Integrity(format!(
                "parameter order mismatch: expected {name}, found {}",
                self.names[self.pos]
            )));
        }
        let id = self.ids[self.pos];
        self.pos += 1;
        Ok(id)
    }

    pub fn finished(&self) -> bool {
        self.pos == self.names.len()
    }
}

/// Tape variable ids for one block's parameters.
pub struct BlockVars {
    pub spec: BlockSpec,
    pub norm1_gamma: VarId,
    pub norm1_beta: Option<VarId>,
    pub wq_p: ConvVar,
    pub wk_p: ConvVar,
    pub wv_p: ConvVar,
    pub wq_d: Option<ConvVar>,
    pub wk_d: Option<ConvVar>,
    pub wv_d: Option<ConvVar>,
    pub attn_out: ConvVar,
    pub alpha: VarId,
    pub norm2_gamma: VarId,
    pub norm2_beta: Option<VarId>,
    pub ffn_w1_p: ConvVar,
    pub ffn_w1_d: Option<ConvVar>,
    pub ffn_w2_p: Option<ConvVar>,
    pub ffn_w2_d: Option<ConvVar>,
    pub ffn_out: ConvVar,
}

/// A conv weight plus its optional bias.
#[derive(Clone, Copy)]
pub struct ConvVar {
    pub w: VarId,
    pub b: Option<VarId>,
}

impl BlockVars {
    /// Consumes this block's parameters from the cursor; `prefix` is the
    /// block's name in the store (e.g. `enc1.b0`), or empty for standalone
    /// blocks named with the relative descriptor names.
    pub fn from_cursor(prefix: &str, spec: BlockSpec, cur: &mut ParamCursor) -> Result<Self> {
        let full = |name: &str| -> String {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        let conv = |cur: &mut ParamCursor, name: &str| -> Result<ConvVar> {
            let w = cur.take(&full(name))?;
            let b = if spec.bias_free {
                None
            } else {
                Some(cur.take(&full(&format!("{name}_b")))?)
            };
            Ok(ConvVar { w, b })
        };
        let norm1_gamma = cur.take(&full("norm1.gamma"))?;
        let norm1_beta = if spec.bias_free {
            None
        } else {
            Some(cur.take(&full("norm1.beta"))?)
        };
        let wq_p = conv(cur, "attn.wq_p")?;
        let wk_p = conv(cur, "attn.wk_p")?;
        let wv_p = conv(cur, "attn.wv_p")?;
        let (wq_d, wk_d, wv_d) = if spec.attention_variant.has_dconv() {
            (
                Some(conv(cur, "attn.wq_d")?),
                Some(conv(cur, "attn.wk_d")?),
                Some(conv(cur, "attn.wv_d")?),
            )
        } else {
            (None, None, None)
        };
        let attn_out = conv(cur, "attn.w_out")?;
        let alpha = cur.take(&full("attn.alpha"))?;
        let norm2_gamma = cur.take(&full("norm2.gamma"))?;
        let norm2_beta = if spec.bias_free {
            None
        } else {
            Some(cur.take(&full("norm2.beta"))?)
        };
        let ffn_w1_p = conv(cur, "ffn.w1_p")?;
        let ffn_w1_d = if spec.ffn_variant.has_dconv() {
            Some(conv(cur, "ffn.w1_d")?)
        } else {
            None
        };
        let (ffn_w2_p, ffn_w2_d) = if spec.ffn_variant.gated() {
            let p = conv(cur, "ffn.w2_p")?;
            let d = if spec.ffn_variant.has_dconv() {
                Some(conv(cur, "ffn.w2_d")?)
            } else {
                None
            };
            (Some(p), d)
        } else {
            (None, None)
        };
        let ffn_out = conv(cur, "ffn.w_out")?;
        Ok(BlockVars {
            spec,
            norm1_gamma,
            norm1_beta,
            wq_p,
            wk_p,
            wv_p,
            wq_d,
            wk_d,
            wv_d,
            attn_out,
            alpha,
            norm2_gamma,
            norm2_beta,
            ffn_w1_p,
            ffn_w1_d,
            ffn_w2_p,
            ffn_w2_d,
            ffn_out,
        })
    }
}

fn pw<T: Scalar>(tape: &mut Tape<T>, x: VarId, cv: ConvVar) -> Result<VarId> {
    tape.conv2d(x, cv.w, cv.b, 0, 1)
}

fn dw<T: Scalar>(tape: &mut Tape<T>, x: VarId, cv: ConvVar) -> Result<VarId> {
    let c = *tape.value(x).shape().last().unwrap();
    tape.conv2d(x, cv.w, cv.b, 1, c)
}

/// Channel-wise attention: per head, a (C/h) x (C/h) cross-covariance map
/// between spatially enriched keys and queries, softmax-normalized rows,
/// applied to the value columns. Returns the block output with its residual
/// added.
pub fn mdta_forward<T: Scalar>(tape: &mut Tape<T>, x: VarId, p: &BlockVars) -> Result<VarId> {
    Ok(mdta_forward_with_maps(tape, x, p)?.0)
}

/// Also returns the per-head attention map variables for inspection.
pub fn mdta_forward_with_maps<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    p: &BlockVars,
) -> Result<(VarId, Vec<VarId>)> {
    p.spec.validate()?;
    let shape = tape.value(x).shape().to_vec();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if c != p.spec.dim {
        return Err(Error::Dimension(format!(
            "input width {} != block width {}",
            c, p.spec.dim
        )));
    }
    let heads = p.spec.heads;
    let d = c / heads;
    let eps = T::f(LN_EPS);

    let y = tape.layer_norm(x, p.norm1_gamma, p.norm1_beta, eps)?;
    let mut q = pw(tape, y, p.wq_p)?;
    let mut k = pw(tape, y, p.wk_p)?;
    let mut v = pw(tape, y, p.wv_p)?;
    if let (Some(qd), Some(kd), Some(vd)) = (p.wq_d, p.wk_d, p.wv_d) {
        q = dw(tape, q, qd)?;
        k = dw(tape, k, kd)?;
        v = dw(tape, v, vd)?;
    }
    // Flatten spatial: s = h * W + w, row-major.
    let hw = h * w;
    let q3 = tape.reshape(q, &[n, hw, c])?;
    let k3 = tape.reshape(k, &[n, hw, c])?;
    let v3 = tape.reshape(v, &[n, hw, c])?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let mut qh = tape.slice_last(q3, hd * d, d)?;
        let mut kh = tape.slice_last(k3, hd * d, d)?;
        let vh = tape.slice_last(v3, hd * d, d)?;
        if p.spec.qk_l2_normalize {
            // Normalize each channel's spatial vector.
            qh = tape.l2_normalize(qh, 1)?;
            kh = tape.l2_normalize(kh, 1)?;
        }
        let kt = tape.transpose_last2(kh)?; // [n, d, hw]
        let scores = tape.matmul(kt, qh)?; // [n, d, d]
        let alpha_h = tape.slice_last(p.alpha, hd, 1)?;
        let scaled = tape.div_scalar_var(scores, alpha_h)?;
        let a = tape.softmax(scaled, 2)?;
        maps.push(a);
        head_outs.push(tape.matmul(vh, a)?); // [n, hw, d]
    }
    let cat = tape.concat_last(&head_outs)?;
    let back = tape.reshape(cat, &[n, h, w, c])?;
    let proj = pw(tape, back, p.attn_out)?;
    let out = tape.add(proj, x)?;
    Ok((out, maps))
}

/// Feed-forward stage; the GDFN/GFN variants gate a GELU branch with a
/// linear branch, DFN/FN use a single GELU path.
pub fn gdfn_forward<T: Scalar>(tape: &mut Tape<T>, x: VarId, p: &BlockVars) -> Result<VarId> {
    p.spec.validate()?;
    let eps = T::f(LN_EPS);
    let y = tape.layer_norm(x, p.norm2_gamma, p.norm2_beta, eps)?;
    let mut b1 = pw(tape, y, p.ffn_w1_p)?;
    if let Some(d1) = p.ffn_w1_d {
        b1 = dw(tape, b1, d1)?;
    }
    let act = tape.gelu(b1);
    let hidden = if let Some(w2) = p.ffn_w2_p {
        let mut b2 = pw(tape, y, w2)?;
        if let Some(d2) = p.ffn_w2_d {
            b2 = dw(tape, b2, d2)?;
        }
        tape.mul(act, b2)?
    } else {
        act
    };
    let proj = pw(tape, hidden, p.ffn_out)?;
    tape.add(proj, x)
}

/// Attention followed by feed-forward, residuals inside each stage.
pub fn transformer_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    p: &BlockVars,
) -> Result<VarId> {
    let x1 = mdta_forward(tape, x, p)?;
    gdfn_forward(tape, x1, p)
}

/// Parameters for the quadratic spatial self-attention baseline.
pub struct SpatialAttnVars {
    pub wq: ConvVar,
    pub wk: ConvVar,
    pub wv: ConvVar,
    pub w_out: ConvVar,
    pub heads: usize,
}

/// Standard spatial self-attention with an (HW) x (HW) map. Benchmark
/// reference only; forward-only.
pub fn vanilla_spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    p: &SpatialAttnVars,
) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    if hw > SPATIAL_HW_GUARD {
        return Err(Error::Resource(format!(
            "spatial attention map would be {hw}x{hw}; guard is HW <= {SPATIAL_HW_GUARD}"
        )));
    }
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::Config(format!(
            "heads {} must divide channel width {}",
            p.heads, c
        )));
    }
    let d = c / p.heads;
    let q = pw(tape, x, p.wq)?;
    let k = pw(tape, x, p.wk)?;
    let v = pw(tape, x, p.wv)?;
    let q3 = tape.reshape(q, &[n, hw, c])?;
    let k3 = tape.reshape(k, &[n, hw, c])?;
    let v3 = tape.reshape(v, &[n, hw, c])?;
    let scale = T::f(1.0 / (d as f64).sqrt());
    let mut head_outs = Vec::with_capacity(p.heads);
    for hd in 0..p.heads {
        let qh = tape.slice_last(q3, hd * d, d)?;
        let kh = tape.slice_last(k3, hd * d, d)?;
        let vh = tape.slice_last(v3, hd * d, d)?;
        let kt = tape.transpose_last2(kh)?; // [n, d, hw]
        let scores = tape.matmul(qh, kt)?; // [n, hw, hw]
        let scaled = tape.scale(scores, scale);
        let a = tape.softmax(scaled, 2)?;
        head_outs.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_last(&head_outs)?;
    let back = tape.reshape(cat, &[n, h, w, c])?;
    let proj = pw(tape, back, p.w_out)?;
    tape.add(proj, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(
        dim: usize,
        heads: usize,
        attn: AttentionVariant,
        ffn: FfnVariant,
        bias_free: bool,
    ) -> BlockSpec {
        BlockSpec {
            dim,
            heads,
            attention_variant: attn,
            ffn_variant: ffn,
            ffn_gamma: 2.66,
            bias_free,
            qk_l2_normalize: false,
        }
    }

    /// Materializes a block on the tape, applying named data overrides first.
    fn build_vars(
        tape: &mut Tape<f64>,
        sp: &BlockSpec,
        seed: u64,
        overrides: &[(&str, Vec<f64>)],
    ) -> BlockVars {
        let descs = sp.param_descs();
        let names: Vec<String> = descs.iter().map(|d| d.name.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<VarId> = descs
            .iter()
            .map(|d| {
                let mut t: Tensor<f64> = d.materialize(&mut rng);
                if let Some((_, data)) = overrides.iter().find(|(n, _)| *n == d.name) {
                    t = Tensor::new(&d.shape, data.clone()).unwrap();
                }
                tape.leaf(t)
            })
            .collect();
        let mut cur = ParamCursor::new(&names, &ids);
        let vars = BlockVars::from_cursor("", sp.clone(), &mut cur).unwrap();
        assert!(cur.finished());
        vars
    }

    fn rand_x(tape: &mut Tape<f64>, shape: &[usize], seed: u64) -> VarId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn single_channel_attention_collapses_to_identity() {
        let sp = spec(1, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 3, &[]);
        let x = rand_x(&mut tape, &[1, 1, 1, 1], 4);
        let y = mdta_forward(&mut tape, x, &vars).unwrap();
        // LN of one channel is zero, so the attention branch contributes
        // nothing and the residual carries the input through unchanged.
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn two_channel_attention_matches_hand_evaluation() {
        let sp = spec(2, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        let identity_pw = vec![1.0, 0.0, 0.0, 1.0]; // [1,1,2,2]
        let mut delta_dw = vec![0.0; 9 * 2]; // [3,3,1,2], center tap = 1
        delta_dw[4 * 2] = 1.0;
        delta_dw[4 * 2 + 1] = 1.0;
        let overrides: Vec<(&str, Vec<f64>)> = vec![
            ("attn.wq_p", identity_pw.clone()),
            ("attn.wk_p", identity_pw.clone()),
            ("attn.wv_p", identity_pw.clone()),
            ("attn.wq_d", delta_dw.clone()),
            ("attn.wk_d", delta_dw.clone()),
            ("attn.wv_d", delta_dw.clone()),
            ("attn.w_out", identity_pw.clone()),
        ];
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 5, &overrides);
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let out = mdta_forward(&mut tape, x, &vars).unwrap();

        // Straight-line evaluation with the same weights.
        let s = 1.0 / (1.0 + LN_EPS).sqrt(); // LN of [1,-1]: mean 0, var 1
        let y = [s, -s]; // Q = K = V = y under identity weights
        let scores = [[y[0] * y[0], y[0] * y[1]], [y[1] * y[0], y[1] * y[1]]];
        let mut a = [[0.0; 2]; 2];
        for r in 0..2 {
            let m = scores[r][0].max(scores[r][1]);
            let e = [(scores[r][0] - m).exp(), (scores[r][1] - m).exp()];
            let z = e[0] + e[1];
            a[r] = [e[0] / z, e[1] / z];
        }
        let head = [
            y[0] * a[0][0] + y[1] * a[1][0],
            y[0] * a[0][1] + y[1] * a[1][1],
        ];
        let expect = [head[0] + 1.0, head[1] - 1.0];
        let got = tape.value(out).data();
        assert!((got[0] - expect[0]).abs() < 1e-12, "{got:?} vs {expect:?}");
        assert!((got[1] - expect[1]).abs() < 1e-12, "{got:?} vs {expect:?}");
    }

    #[test]
    fn attention_map_rows_sum_to_one() {
        let sp = spec(4, 2, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 6, &[]);
        let x = rand_x(&mut tape, &[1, 8, 8, 4], 7);
        let (_, maps) = mdta_forward_with_maps(&mut tape, x, &vars).unwrap();
        assert_eq!(maps.len(), 2);
        for &m in &maps {
            let t = tape.value(m);
            assert_eq!(t.shape(), &[1, 2, 2]);
            for row in t.data().chunks(2) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ffn_zero_fixed_point_bias_free() {
        for ffn in FfnVariant::all() {
            let sp = spec(4, 1, AttentionVariant::Mdta, ffn, true);
            let mut tape: Tape<f64> = Tape::new();
            let vars = build_vars(&mut tape, &sp, 8, &[]);
            let x = tape.leaf(Tensor::zeros(&[1, 3, 3, 4]));
            let y = gdfn_forward(&mut tape, x, &vars).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn ffn_constant_input_collapses() {
        let mut sp = spec(1, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        sp.ffn_gamma = 1.0;
        assert_eq!(sp.hidden_dim(), 1);
        let ones1 = vec![1.0];
        let ones9 = vec![1.0; 9];
        let overrides: Vec<(&str, Vec<f64>)> = vec![
            ("ffn.w1_p", ones1.clone()),
            ("ffn.w1_d", ones9.clone()),
            ("ffn.w2_p", ones1.clone()),
            ("ffn.w2_d", ones9.clone()),
            ("ffn.w_out", ones1.clone()),
        ];
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 9, &overrides);
        let c = 0.37;
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 1], c));
        let y = gdfn_forward(&mut tape, x, &vars).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - c).abs() < 1e-9);
        }
    }

    #[test]
    fn gdfn_matches_straight_line_oracle() {
        let sp = spec(8, 2, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        assert_eq!(sp.hidden_dim(), 21);
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 10, &[]);
        let x = rand_x(&mut tape, &[1, 4, 4, 8], 11);
        let y = gdfn_forward(&mut tape, x, &vars).unwrap();

        // Oracle: the same equation written out with raw kernels.
        let xin = tape.value(x).clone();
        let gamma = tape.value(vars.norm2_gamma).data().to_vec();
        let (ln, _, _) = kernels::layer_norm_forward(&xin, &gamma, None, LN_EPS);
        let b1 = kernels::conv2d_forward(&ln, tape.value(vars.ffn_w1_p.w), None, 0, 1);
        let b1 = kernels::conv2d_forward(&b1, tape.value(vars.ffn_w1_d.unwrap().w), None, 1, 21);
        let act: Vec<f64> = b1.data().iter().map(|&v| kernels::gelu(v)).collect();
        let b2 = kernels::conv2d_forward(&ln, tape.value(vars.ffn_w2_p.unwrap().w), None, 0, 1);
        let b2 = kernels::conv2d_forward(&b2, tape.value(vars.ffn_w2_d.unwrap().w), None, 1, 21);
        let gated: Vec<f64> = act.iter().zip(b2.data()).map(|(a, b)| a * b).collect();
        let gated = Tensor::new(b1.shape(), gated).unwrap();
        let proj = kernels::conv2d_forward(&gated, tape.value(vars.ffn_out.w), None, 0, 1);
        for (i, (got, (p, xi))) in tape
            .value(y)
            .data()
            .iter()
            .zip(proj.data().iter().zip(xin.data()))
            .enumerate()
        {
            let want = p + xi;
            let denom = got.abs().max(want.abs()).max(1.0);
            assert!((got - want).abs() / denom < 1e-6, "index {i}: {got} vs {want}");
        }
    }

    #[test]
    fn block_zero_input_zero_output_all_variants() {
        for attn in AttentionVariant::all() {
            for ffn in FfnVariant::all() {
                let sp = spec(4, 2, attn, ffn, true);
                let mut tape: Tape<f64> = Tape::new();
                let vars = build_vars(&mut tape, &sp, 12, &[]);
                let x = tape.leaf(Tensor::zeros(&[1, 4, 4, 4]));
                let y = transformer_block_forward(&mut tape, x, &vars).unwrap();
                assert!(
                    tape.value(y).data().iter().all(|&v| v.abs() < 1e-6),
                    "{attn:?}+{ffn:?}"
                );
            }
        }
    }

    #[test]
    fn block_preserves_shape_all_variants() {
        for attn in AttentionVariant::all() {
            for ffn in FfnVariant::all() {
                let sp = spec(6, 3, attn, ffn, false);
                let mut tape: Tape<f64> = Tape::new();
                let vars = build_vars(&mut tape, &sp, 13, &[]);
                let x = rand_x(&mut tape, &[2, 3, 5, 6], 14);
                let y = transformer_block_forward(&mut tape, x, &vars).unwrap();
                assert_eq!(tape.value(y).shape(), &[2, 3, 5, 6]);
                assert!(tape.value(y).all_finite());
            }
        }
    }

    #[test]
    fn alpha_irrelevant_when_scores_constant() {
        // Zero key projection makes every score 0; softmax of a constant row
        // is uniform at any temperature, so alpha cannot affect the output.
        let zeros_pw = vec![0.0; 16];
        let mut outs = Vec::new();
        for alpha in [1.0, 7.3] {
            let sp = spec(4, 2, AttentionVariant::Mta, FfnVariant::Fn, true);
            let mut tape: Tape<f64> = Tape::new();
            let vars = build_vars(
                &mut tape,
                &sp,
                15,
                &[("attn.wk_p", zeros_pw.clone()), ("attn.alpha", vec![alpha; 2])],
            );
            let x = rand_x(&mut tape, &[1, 3, 3, 4], 16);
            let y = mdta_forward(&mut tape, x, &vars).unwrap();
            outs.push(tape.value(y).data().to_vec());
        }
        for (a, b) in outs[0].iter().zip(&outs[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_below_guard_is_rejected() {
        let sp = spec(2, 1, AttentionVariant::Mta, FfnVariant::Fn, true);
        let mut tape: Tape<f64> = Tape::new();
        let vars = build_vars(&mut tape, &sp, 17, &[("attn.alpha", vec![0.0])]);
        let x = rand_x(&mut tape, &[1, 2, 2, 2], 18);
        assert!(matches!(
            mdta_forward(&mut tape, x, &vars),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let sp = spec(4, 3, AttentionVariant::Mdta, FfnVariant::Gdfn, true);
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hidden_width_rounding() {
        assert_eq!(spec(8, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true).hidden_dim(), 21);
        assert_eq!(spec(4, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true).hidden_dim(), 11);
        assert_eq!(spec(48, 1, AttentionVariant::Mdta, FfnVariant::Gdfn, true).hidden_dim(), 128);
    }

    #[test]
    fn spatial_attention_single_pixel() {
        let identity_pw = vec![1.0, 0.0, 0.0, 1.0];
        let mut tape: Tape<f64> = Tape::new();
        let conv = |tape: &mut Tape<f64>| ConvVar {
            w: tape.leaf(Tensor::new(&[1, 1, 2, 2], identity_pw.clone()).unwrap()),
            b: None,
        };
        let vars = SpatialAttnVars {
            wq: conv(&mut tape),
            wk: conv(&mut tape),
            wv: conv(&mut tape),
            w_out: conv(&mut tape),
            heads: 1,
        };
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.4, -0.9]).unwrap());
        let y = vanilla_spatial_attention(&mut tape, x, &vars).unwrap();
        // One pixel: the map is [[1]], so the output is V + x = 2x here.
        assert!((tape.value(y).data()[0] - 0.8).abs() < 1e-12);
        assert!((tape.value(y).data()[1] + 1.8).abs() < 1e-12);
    }

    #[test]
    fn spatial_attention_guard_trips() {
        let mut tape: Tape<f64> = Tape::new();
        let conv = |tape: &mut Tape<f64>| ConvVar {
            w: tape.leaf(Tensor::zeros(&[1, 1, 1, 1])),
            b: None,
        };
        let vars = SpatialAttnVars {
            wq: conv(&mut tape),
            wk: conv(&mut tape),
            wv: conv(&mut tape),
            w_out: conv(&mut tape),
            heads: 1,
        };
        let x = tape.leaf(Tensor::zeros(&[1, 130, 130, 1]));
        assert!(matches!(
            vanilla_spatial_attention(&mut tape, x, &vars),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn cursor_rejects_out_of_order_names() {
        let names = vec!["a".to_string(), "b".to_string()];
        let ids = vec![0, 1];
        let mut cur = ParamCursor::new(&names, &ids);
        assert!(cur.take("b").is_err());
    }

    #[test]
    fn block_gradient_spot_check() {
        let sp = spec(4, 2, AttentionVariant::Mdta, FfnVariant::Gdfn, false);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let err =
            crate::gradcheck::block_grad_check(&sp, 1, 6, 6, 1e-4, Some(5), &mut rng).unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
