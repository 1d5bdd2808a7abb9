//! Full restoration network: embedding conv, 4-level encoder-decoder with
//! pixel-(un)shuffle resampling and skip concatenation, refinement stage,
//! and the residual output head.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    self, AttentionVariant, BlockSpec, BlockVars, ConvVar, FfnVariant, Init, ParamCursor,
    ParamDesc,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_dim: usize,
    pub num_blocks: [usize; 4],
    pub heads: [usize; 4],
    pub refinement_blocks: usize,
    pub ffn_gamma: f64,
    pub bias_free: bool,
    pub attention_variant: AttentionVariant,
    pub ffn_variant: FfnVariant,
    pub qk_l2_normalize: bool,
}

impl Default for ModelConfig {
    /// The published full-size configuration.
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_dim: 48,
            num_blocks: [4, 6, 6, 8],
            heads: [1, 2, 4, 8],
            refinement_blocks: 4,
            ffn_gamma: 2.66,
            bias_free: true,
            attention_variant: AttentionVariant::Mdta,
            ffn_variant: FfnVariant::Gdfn,
            qk_l2_normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// Channel width of encoder level `l` (1-based): 2^(l-1) * C.
    pub fn level_width(&self, l: usize) -> usize {
        self.base_dim << (l - 1)
    }

    /// Width the blocks of decoder level `l` run at (level 1 keeps the
    /// concatenated 2C width).
    pub fn decoder_width(&self, l: usize) -> usize {
        match l {
            1 => 2 * self.base_dim,
            _ => self.level_width(l),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_dim < 2 {
            return Err(Error::Config("base_dim must be at least 2".into()));
        }
        for l in 1..=4 {
            if self.heads[l - 1] == 0 || self.level_width(l) % self.heads[l - 1] != 0 {
                return Err(Error::Config(format!(
                    "heads[{}] = {} must divide level width {}",
                    l - 1,
                    self.heads[l - 1],
                    self.level_width(l)
                )));
            }
        }
        for l in [2, 3] {
            if self.decoder_width(l) % self.heads[l - 1] != 0 {
                return Err(Error::Config(format!(
                    "heads[{}] must divide decoder width {}",
                    l - 1,
                    self.decoder_width(l)
                )));
            }
        }
        if self.decoder_width(1) % self.heads[0] != 0 {
            return Err(Error::Config("heads[0] must divide 2*base_dim".into()));
        }
        if !(self.ffn_gamma > 0.0) {
            return Err(Error::Config("ffn_gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn block_spec(&self, dim: usize, heads: usize) -> BlockSpec {
        BlockSpec {
            dim,
            heads,
            attention_variant: self.attention_variant,
            ffn_variant: self.ffn_variant,
            ffn_gamma: self.ffn_gamma,
            bias_free: self.bias_free,
            qk_l2_normalize: self.qk_l2_normalize,
        }
    }

    /// Full parameter descriptor list in canonical store order: embed,
    /// encoder levels 1..4, downsamples 1..3, upsamples 3..1, reduction
    /// convs (3, 2), decoder levels 3..1, refinement, output conv.
    pub fn param_descs(&self) -> Vec<ParamDesc> {
        let c = self.base_dim;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamDesc>, name: &str, k: usize, cin: usize, cout: usize| {
            out.push(ParamDesc {
                name: name.to_string(),
                shape: vec![k, k, cin, cout],
                init: Init::Uniform { fan_in: k * k * cin },
            });
            if !self.bias_free {
                out.push(ParamDesc {
                    name: format!("{name}_b"),
                    shape: vec![cout],
                    init: Init::Zero,
                });
            }
        };
        let blocks = |out: &mut Vec<ParamDesc>, prefix: &str, n: usize, spec: BlockSpec| {
            for b in 0..n {
                for d in spec.param_descs() {
                    out.push(ParamDesc {
                        name: format!("{prefix}.b{b}.{}", d.name),
                        ..d
                    });
                }
            }
        };

        conv(&mut out, "embed.w", 3, self.in_channels, c);
        for l in 1..=4 {
            let w = self.level_width(l);
            blocks(
                &mut out,
                &format!("enc{l}"),
                self.num_blocks[l - 1],
                self.block_spec(w, self.heads[l - 1]),
            );
        }
        for l in 1..=3 {
            let w = self.level_width(l);
            conv(&mut out, &format!("down{l}.w"), 3, w, w / 2);
        }
        for l in (1..=3).rev() {
            let w = self.level_width(l + 1);
            conv(&mut out, &format!("up{l}.w"), 3, w, 2 * w);
        }
        conv(&mut out, "reduce3.w", 1, 2 * self.level_width(3), self.level_width(3));
        conv(&mut out, "reduce2.w", 1, 2 * self.level_width(2), self.level_width(2));
        for l in (1..=3).rev() {
            blocks(
                &mut out,
                &format!("dec{l}"),
                self.num_blocks[l - 1],
                self.block_spec(self.decoder_width(l), self.heads[l - 1]),
            );
        }
        blocks(
            &mut out,
            "refine",
            self.refinement_blocks,
            self.block_spec(2 * c, self.heads[0]),
        );
        conv(&mut out, "out.w", 3, 2 * c, self.in_channels);
        out
    }
}

/// Named parameter tensors in canonical deterministic order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: IndexMap::new() }
    }

    pub fn push(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.map.insert(name.clone(), t).is_some() {
            return Err(Error::Integrity(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Configuration plus initialized parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic build: identical (cfg, seed) gives bit-identical
    /// parameters.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for desc in cfg.param_descs() {
            let t = desc.materialize::<T, _>(&mut rng);
            params.push(desc.name, t)?;
        }
        Ok(Model { cfg, params })
    }

    /// Registers every parameter on the tape (in store order) and returns
    /// the leaf ids. `requires_grad` controls whether backward will produce
    /// gradients for them.
    pub fn register_params(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<VarId> {
        self.params
            .iter()
            .map(|(_, t)| {
                let mut leaf = t.clone();
                leaf.requires_grad = requires_grad;
                tape.leaf(leaf)
            })
            .collect()
    }

    /// Forward pass. `param_ids` must be the leaves from `register_params`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[VarId],
        input: VarId,
    ) -> Result<VarId> {
        Ok(self.forward_traced(tape, param_ids, input)?.0)
    }

    /// Forward pass that also reports named intermediate feature shapes.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[VarId],
        input: VarId,
    ) -> Result<(VarId, Vec<(String, Vec<usize>)>)> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "input must be [n,h,w,{}], got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        if shape[1] % 8 != 0 || shape[2] % 8 != 0 {
            return Err(Error::Dimension(format!(
                "spatial extents must be divisible by 8, got {}x{}",
                shape[1], shape[2]
            )));
        }
        let vars = self.bind_vars(param_ids)?;
        let mut trace = Vec::new();
        let mut probe = |tape: &Tape<T>, name: &str, id: VarId| {
            trace.push((name.to_string(), tape.value(id).shape().to_vec()));
        };

        let f0 = tape.conv2d(input, vars.embed.w, vars.embed.b, 1, 1)?;
        let mut feat = f0;
        let mut skips = Vec::new();
        for l in 1..=4 {
            for bv in &vars.enc[l - 1] {
                feat = blocks::transformer_block_forward(tape, feat, bv)?;
            }
            probe(tape, &format!("enc{l}"), feat);
            if l < 4 {
                skips.push(feat);
                feat = downsample(tape, feat, vars.down[l - 1])?;
            }
        }
        probe(tape, "latent", feat);

        for l in (1..=3).rev() {
            feat = upsample(tape, feat, vars.up[l - 1])?;
            let reduce = match l {
                3 => Some(vars.reduce3),
                2 => Some(vars.reduce2),
                _ => None,
            };
            feat = skip_merge(tape, feat, skips[l - 1], l, reduce)?;
            for bv in &vars.dec[l - 1] {
                feat = blocks::transformer_block_forward(tape, feat, bv)?;
            }
            probe(tape, &format!("dec{l}"), feat);
        }
        for bv in &vars.refine {
            feat = blocks::transformer_block_forward(tape, feat, bv)?;
        }
        probe(tape, "refined", feat);
        let residual = tape.conv2d(feat, vars.out.w, vars.out.b, 1, 1)?;
        let restored = tape.add(input, residual)?;
        Ok((restored, trace))
    }

    fn bind_vars(&self, param_ids: &[VarId]) -> Result<ModelVars> {
        let names = self.params.names();
        if names.len() != param_ids.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter leaves, got {}",
                names.len(),
                param_ids.len()
            )));
        }
        let mut cur = ParamCursor::new(&names, param_ids);
        let cfg = &self.cfg;
        let conv = |cur: &mut ParamCursor, name: &str| -> Result<ConvVar> {
            let w = cur.take(&format!("{name}.w"))?;
            let b = if cfg.bias_free {
                None
            } else {
                Some(cur.take(&format!("{name}.w_b"))?)
            };
            Ok(ConvVar { w, b })
        };
        let block_group = |cur: &mut ParamCursor,
                           prefix: &str,
                           n: usize,
                           spec: BlockSpec|
         -> Result<Vec<BlockVars>> {
            (0..n)
                .map(|b| BlockVars::from_cursor(&format!("{prefix}.b{b}"), spec, cur))
                .collect()
        };

        let embed = conv(&mut cur, "embed")?;
        let mut enc = Vec::new();
        for l in 1..=4 {
            enc.push(block_group(
                &mut cur,
                &format!("enc{l}"),
                cfg.num_blocks[l - 1],
                cfg.block_spec(cfg.level_width(l), cfg.heads[l - 1]),
            )?);
        }
        let mut down = Vec::new();
        for l in 1..=3 {
            down.push(conv(&mut cur, &format!("down{l}"))?);
        }
        let mut up = [None, None, None];
        for l in (1..=3).rev() {
            up[l - 1] = Some(conv(&mut cur, &format!("up{l}"))?);
        }
        let reduce3 = conv(&mut cur, "reduce3")?;
        let reduce2 = conv(&mut cur, "reduce2")?;
        let mut dec = [vec![], vec![], vec![]];
        for l in (1..=3).rev() {
            dec[l - 1] = block_group(
                &mut cur,
                &format!("dec{l}"),
                cfg.num_blocks[l - 1],
                cfg.block_spec(cfg.decoder_width(l), cfg.heads[l - 1]),
            )?;
        }
        let refine = block_group(
            &mut cur,
            "refine",
            cfg.refinement_blocks,
            cfg.block_spec(2 * cfg.base_dim, cfg.heads[0]),
        )?;
        let out = conv(&mut cur, "out")?;
        if !cur.finished() {
            return Err(Error::Integrity("unconsumed parameters after binding".into()));
        }
        Ok(ModelVars { embed, enc, down, up: up.map(|o| o.unwrap()), reduce3, reduce2, dec, refine, out })
    }
}

struct ModelVars {
    embed: ConvVar,
    enc: Vec<Vec<BlockVars>>,
    down: Vec<ConvVar>,
    up: [ConvVar; 3],
    reduce3: ConvVar,
    reduce2: ConvVar,
    dec: [Vec<BlockVars>; 3],
    refine: Vec<BlockVars>,
    out: ConvVar,
}

/// 3x3 conv C -> C/2 followed by pixel-unshuffle(2): halves H,W, doubles C.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, x: VarId, conv: ConvVar) -> Result<VarId> {
    let c = tape.conv2d(x, conv.w, conv.b, 1, 1)?;
    tape.pixel_unshuffle(c, 2)
}

/// 3x3 conv C -> 2C followed by pixel-shuffle(2): doubles H,W, halves C.
pub fn upsample<T: Scalar>(tape: &mut Tape<T>, x: VarId, conv: ConvVar) -> Result<VarId> {
    let c = tape.conv2d(x, conv.w, conv.b, 1, 1)?;
    tape.pixel_shuffle(c, 2)
}

/// Channel-concatenate decoder features (first) with the encoder skip, then
/// reduce by half with a 1x1 conv at levels 3 and 2. Level 1 concatenates
/// only.
pub fn skip_merge<T: Scalar>(
    tape: &mut Tape<T>,
    decoder_feat: VarId,
    encoder_feat: VarId,
    level: usize,
    reduce: Option<ConvVar>,
) -> Result<VarId> {
    let ds = tape.value(decoder_feat).shape().to_vec();
    let es = tape.value(encoder_feat).shape().to_vec();
    if ds[..3] != es[..3] {
        return Err(Error::Dimension(format!(
            "skip_merge spatial mismatch: {:?} vs {:?}",
            ds, es
        )));
    }
    let merged = tape.concat_last(&[decoder_feat, encoder_feat])?;
    match (level, reduce) {
        (1, _) => Ok(merged),
        (_, Some(cv)) => tape.conv2d(merged, cv.w, cv.b, 0, 1),
        (_, None) => Err(Error::Config(format!(
            "skip_merge at level {level} requires a reduction conv"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            base_dim: 8,
            num_blocks: [1, 1, 1, 1],
            heads: [1, 1, 1, 1],
            refinement_blocks: 1,
            ffn_gamma: 2.66,
            bias_free: true,
            attention_variant: AttentionVariant::Mdta,
            ffn_variant: FfnVariant::Gdfn,
            qk_l2_normalize: false,
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn level_widths_follow_doubling_rule() {
        let cfg = ModelConfig::paper();
        assert_eq!(
            (1..=4).map(|l| cfg.level_width(l)).collect::<Vec<_>>(),
            vec![48, 96, 192, 384]
        );
        assert_eq!(cfg.decoder_width(1), 96);
        assert_eq!(cfg.decoder_width(2), 96);
        assert_eq!(cfg.decoder_width(3), 192);
    }

    #[test]
    fn same_seed_builds_identical_stores() {
        let a: Model<f32> = Model::build(tiny_cfg(), 42).unwrap();
        let b: Model<f32> = Model::build(tiny_cfg(), 42).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        for ((_, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
        let c: Model<f32> = Model::build(tiny_cfg(), 43).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn zero_input_zero_output_bias_free() {
        let model: Model<f32> = Model::build(tiny_cfg(), 1).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let ids = model.register_params(&mut tape, false);
        let x = tape.leaf(Tensor::zeros(&[1, 16, 16, 3]));
        let y = model.forward(&mut tape, &ids, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let model: Model<f32> = Model::build(tiny_cfg(), 2).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let ids = model.register_params(&mut tape, false);
        let x = tape.leaf(rand_input(&[1, 16, 16, 3], 3));
        let y = model.forward(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 16, 3]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn zeroed_output_conv_gives_identity() {
        let mut model: Model<f32> = Model::build(tiny_cfg(), 4).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("out.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let ids = model.register_params(&mut tape, false);
        let input = rand_input(&[1, 8, 8, 3], 5);
        let x = tape.leaf(input.clone());
        let y = model.forward(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn forward_rejects_bad_spatial_extents() {
        let model: Model<f32> = Model::build(tiny_cfg(), 6).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let ids = model.register_params(&mut tape, false);
        let x = tape.leaf(Tensor::zeros(&[1, 12, 16, 3]));
        assert!(matches!(
            model.forward(&mut tape, &ids, x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn encoder_probe_shapes_match_contract() {
        let model: Model<f32> = Model::build(tiny_cfg(), 7).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let ids = model.register_params(&mut tape, false);
        let x = tape.leaf(rand_input(&[1, 16, 16, 3], 8));
        let (_, trace) = model.forward_traced(&mut tape, &ids, x).unwrap();
        let find = |name: &str| {
            trace
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing probe {name}"))
                .1
                .clone()
        };
        assert_eq!(find("enc1"), vec![1, 16, 16, 8]);
        assert_eq!(find("enc2"), vec![1, 8, 8, 16]);
        assert_eq!(find("enc3"), vec![1, 4, 4, 32]);
        assert_eq!(find("latent"), vec![1, 2, 2, 64]);
        assert_eq!(find("dec3"), vec![1, 4, 4, 32]);
        assert_eq!(find("dec2"), vec![1, 8, 8, 16]);
        assert_eq!(find("dec1"), vec![1, 16, 16, 16]);
        assert_eq!(find("refined"), vec![1, 16, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model: Model<f32> = Model::build(tiny_cfg(), 9).unwrap();
        let input = rand_input(&[1, 16, 16, 3], 10);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape: Tape<f32> = Tape::new();
            let ids = model.register_params(&mut tape, false);
            let x = tape.leaf(input.clone());
            let y = model.forward(&mut tape, &ids, x).unwrap();
            outs.push(tape.value(y).data().to_vec());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn downsample_upsample_shape_round_trip() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(rand_input(&[1, 8, 8, 4], 11));
        let dw = tape.leaf(rand_input(&[3, 3, 4, 2], 12));
        let d = downsample(&mut tape, x, ConvVar { w: dw, b: None }).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 4, 4, 8]);
        let uw = tape.leaf(rand_input(&[3, 3, 8, 16], 13));
        let u = upsample(&mut tape, d, ConvVar { w: uw, b: None }).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 8, 8, 4]);
    }

    #[test]
    fn downsample_zero_conv_gives_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(rand_input(&[1, 4, 4, 2], 14));
        let w = tape.leaf(Tensor::zeros(&[3, 3, 2, 1]));
        let d = downsample(&mut tape, x, ConvVar { w, b: None }).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_merge_concat_order_and_widths() {
        // Level 1: plain concat, decoder channels first.
        let mut tape: Tape<f32> = Tape::new();
        let dec = tape.leaf(Tensor::full(&[1, 2, 2, 3], 1.0f32));
        let enc = tape.leaf(Tensor::full(&[1, 2, 2, 3], 2.0f32));
        let m = skip_merge(&mut tape, dec, enc, 1, None).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 2, 2, 6]);
        for px in tape.value(m).data().chunks(6) {
            assert_eq!(px, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        }

        // Level 3: concat then a 1x1 reduction halving the width.
        let dec = tape.leaf(rand_input(&[1, 2, 2, 4], 15));
        let enc = tape.leaf(rand_input(&[1, 2, 2, 4], 16));
        let rw = tape.leaf(rand_input(&[1, 1, 8, 4], 17));
        let m = skip_merge(&mut tape, dec, enc, 3, Some(ConvVar { w: rw, b: None })).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 2, 2, 4]);
    }

    #[test]
    fn config_validation_catches_bad_heads() {
        let mut cfg = tiny_cfg();
        cfg.heads = [3, 1, 1, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.in_channels = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.push("a".into(), Tensor::zeros(&[1])).unwrap();
        assert!(store.push("a".into(), Tensor::zeros(&[1])).is_err());
    }
}
