//! Analytic FLOP/parameter model and the empirical attention scaling
//! harness.
//!
//! FLOP unit: one multiply-accumulate (MAC). Elementwise work (LayerNorm,
//! GELU, gating, residual adds, softmax) is counted at one unit per output
//! element. `count_flops_2x` reports the 2*MAC convention alongside.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    self, AttentionVariant, BlockSpec, BlockVars, ConvVar, FfnVariant, Init, ParamCursor,
    ParamDesc, SpatialAttnVars, SPATIAL_HW_GUARD,
};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::tape::Tape;
use crate::tensor::Tensor;

const DTYPE_BYTES: u64 = 4;

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    /// Multiply-accumulate pairs.
    pub flops: u64,
    pub params: u64,
    pub activation_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct CostModel {
    pub entries: Vec<LayerCost>,
}

impl CostModel {
    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&LayerCost> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Closed-form per-layer model for a config at resolution h x w.
    /// Independent of the parameter-store builder; tests assert the two
    /// agree exactly on parameter counts.
    pub fn build(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostModel> {
        cfg.validate()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Dimension(format!(
                "cost model resolution {h}x{w} must be divisible by 8"
            )));
        }
        let mut m = CostModel { entries: Vec::new() };
        let c = cfg.base_dim as u64;
        let inc = cfg.in_channels as u64;
        let bias = !cfg.bias_free;
        let hw0 = (h * w) as u64;

        m.conv("embed", hw0, 3, inc, c, bias);
        for l in 1..=4u32 {
            let width = c << (l - 1);
            let hw = hw0 >> (2 * (l - 1));
            for b in 0..cfg.num_blocks[l as usize - 1] {
                m.block(
                    &format!("enc{l}.b{b}"),
                    hw,
                    width,
                    cfg.heads[l as usize - 1] as u64,
                    cfg,
                );
            }
            if l < 4 {
                m.conv(&format!("down{l}"), hw, 3, width, width / 2, bias);
            }
        }
        for l in (1..=3u32).rev() {
            let width = c << l; // level l+1 width
            let hw = hw0 >> (2 * l);
            m.conv(&format!("up{l}"), hw, 3, width, 2 * width, bias);
        }
        m.conv("reduce3", hw0 >> 4, 1, 8 * c, 4 * c, bias);
        m.conv("reduce2", hw0 >> 2, 1, 4 * c, 2 * c, bias);
        for l in (1..=3u32).rev() {
            let width = if l == 1 { 2 * c } else { c << (l - 1) };
            let hw = hw0 >> (2 * (l - 1));
            for b in 0..cfg.num_blocks[l as usize - 1] {
                m.block(
                    &format!("dec{l}.b{b}"),
                    hw,
                    width,
                    cfg.heads[l as usize - 1] as u64,
                    cfg,
                );
            }
        }
        for b in 0..cfg.refinement_blocks {
            m.block(&format!("refine.b{b}"), hw0, 2 * c, cfg.heads[0] as u64, cfg);
        }
        m.conv("out", hw0, 3, 2 * c, inc, bias);
        Ok(m)
    }

    fn push(&mut self, name: String, flops: u64, params: u64, activation_bytes: u64) {
        self.entries.push(LayerCost { name, flops, params, activation_bytes });
    }

    fn conv(&mut self, name: &str, hw: u64, k: u64, cin: u64, cout: u64, bias: bool) {
        let flops = hw * k * k * cin * cout + if bias { hw * cout } else { 0 };
        let params = k * k * cin * cout + if bias { cout } else { 0 };
        self.push(name.to_string(), flops, params, hw * cout * DTYPE_BYTES);
    }

    fn dconv(&mut self, name: &str, hw: u64, k: u64, ch: u64, bias: bool) {
        let flops = hw * k * k * ch + if bias { hw * ch } else { 0 };
        let params = k * k * ch + if bias { ch } else { 0 };
        self.push(name.to_string(), flops, params, hw * ch * DTYPE_BYTES);
    }

    fn norm(&mut self, name: &str, hw: u64, ch: u64, bias: bool) {
        let params = ch + if bias { ch } else { 0 };
        self.push(name.to_string(), hw * ch, params, hw * ch * DTYPE_BYTES);
    }

    fn block(&mut self, prefix: &str, hw: u64, c: u64, heads: u64, cfg: &ModelConfig) {
        let bias = !cfg.bias_free;
        let d = c / heads;
        self.norm(&format!("{prefix}.norm1"), hw, c, bias);
        self.conv(&format!("{prefix}.attn.qkv_pw"), hw, 1, c, 3 * c, bias);
        if cfg.attention_variant.has_dconv() {
            self.dconv(&format!("{prefix}.attn.qkv_dw"), hw, 3, 3 * c, bias);
        }
        // Transposed attention map: heads x (C/h)^2, independent of HW.
        let map_elems = heads * d * d;
        self.push(
            format!("{prefix}.attn.map_kq"),
            hw * c * d,
            heads, // alpha scalars
            map_elems * DTYPE_BYTES,
        );
        self.push(
            format!("{prefix}.attn.softmax"),
            map_elems,
            0,
            map_elems * DTYPE_BYTES,
        );
        self.push(
            format!("{prefix}.attn.apply_v"),
            hw * c * d,
            0,
            hw * c * DTYPE_BYTES,
        );
        self.conv(&format!("{prefix}.attn.proj"), hw, 1, c, c, bias);
        self.push(format!("{prefix}.attn.residual"), hw * c, 0, hw * c * DTYPE_BYTES);

        self.norm(&format!("{prefix}.norm2"), hw, c, bias);
        let hid = BlockSpec {
            dim: c as usize,
            heads: heads as usize,
            attention_variant: cfg.attention_variant,
            ffn_variant: cfg.ffn_variant,
            ffn_gamma: cfg.ffn_gamma,
            bias_free: cfg.bias_free,
            qk_l2_normalize: cfg.qk_l2_normalize,
        }
        .hidden_dim() as u64;
        self.conv(&format!("{prefix}.ffn.w1_p"), hw, 1, c, hid, bias);
        if cfg.ffn_variant.has_dconv() {
            self.dconv(&format!("{prefix}.ffn.w1_d"), hw, 3, hid, bias);
        }
        self.push(format!("{prefix}.ffn.gelu"), hw * hid, 0, hw * hid * DTYPE_BYTES);
        if cfg.ffn_variant.gated() {
            self.conv(&format!("{prefix}.ffn.w2_p"), hw, 1, c, hid, bias);
            if cfg.ffn_variant.has_dconv() {
                self.dconv(&format!("{prefix}.ffn.w2_d"), hw, 3, hid, bias);
            }
            self.push(format!("{prefix}.ffn.gate"), hw * hid, 0, hw * hid * DTYPE_BYTES);
        }
        self.conv(&format!("{prefix}.ffn.w_out"), hw, 1, hid, c, bias);
        self.push(format!("{prefix}.ffn.residual"), hw * c, 0, hw * c * DTYPE_BYTES);
    }
}

/// Exact parameter count for a config (bias terms excluded in bias-free
/// mode). Must agree with the enumerated parameter store.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    // Resolution is irrelevant for parameters; use the smallest valid one.
    Ok(CostModel::build(cfg, 8, 8)?.total_params())
}

/// Forward MAC count at resolution h x w (1 MAC = 1 FLOP unit).
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(CostModel::build(cfg, h, w)?.total_flops())
}

/// The 2-FLOPs-per-MAC reading of the same total.
pub fn count_flops_2x(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(2 * count_flops(cfg, h, w)?)
}

/// Attention-term MACs of one transposed-attention block: the two
/// (HW x C/h) x (C/h x C/h)-shaped products, linear in HW.
pub fn mdta_attention_flops(hw: u64, c: u64, heads: u64) -> u64 {
    2 * hw * c * (c / heads)
}

/// Attention-term MACs of spatial self-attention: quadratic in HW.
pub fn spatial_attention_flops(hw: u64, c: u64) -> u64 {
    2 * hw * hw * c
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub analytic_flops: u64,
    pub wall_ns: u64,
    /// Attention-map allocation for this kernel.
    pub peak_bytes: u64,
    /// Median too close to the timer resolution to trust.
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// (kernel, fitted log-log slope of wall time vs pixel count).
    pub slopes: Vec<(&'static str, f64)>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kernel,H,W,C,heads,analytic_flops,wall_ns,peak_bytes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.kernel, r.h, r.w, r.c, r.heads, r.analytic_flops, r.wall_ns, r.peak_bytes
            ));
        }
        for (k, v) in &self.slopes {
            out.push_str(&format!("# slope kernel={k} value={v:.4}\n"));
        }
        for r in &self.rows {
            if r.flagged {
                out.push_str(&format!(
                    "# flagged kernel={} H={} W={}: median below 20x timer resolution\n",
                    r.kernel, r.h, r.w
                ));
            }
        }
        out
    }
}

/// Ordinary least squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Usage("slope fit needs at least 2 points".into()));
    }
    let mut lx = Vec::with_capacity(points.len());
    let mut ly = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::Numeric(format!(
                "log-log fit requires positive values, got ({x}, {y})"
            )));
        }
        lx.push(x.ln());
        ly.push(y.ln());
    }
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::Numeric("degenerate x values in slope fit".into()));
    }
    Ok(num / den)
}

/// Times forward passes of one transposed-attention block and one spatial
/// self-attention block over square inputs, then fits log-log wall-time
/// slopes against pixel count. Strictly sequential and single-threaded.
pub fn scaling_bench(
    c: usize,
    heads: usize,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if sizes.len() < 4 {
        return Err(Error::Usage("need at least 4 sizes for a slope".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage("sizes must be strictly increasing".into()));
    }
    for &s in sizes {
        if s * s > SPATIAL_HW_GUARD {
            return Err(Error::Resource(format!(
                "size {s} exceeds the spatial attention guard (HW <= {SPATIAL_HW_GUARD})"
            )));
        }
    }
    let resolution = timer_resolution_ns();
    let mut rows = Vec::new();

    let spec = mdta_spec(c, heads);
    let descs = spec.param_descs();
    let names: Vec<String> = descs.iter().map(|d| d.name.clone()).collect();
    let mdta_tensors: Vec<Tensor<f32>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        descs.iter().map(|d| d.materialize::<f32, _>(&mut rng)).collect()
    };
    let spatial_tensors: Vec<Tensor<f32>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|_| {
                ParamDesc {
                    name: "w".to_string(),
                    shape: vec![1, 1, c, c],
                    init: Init::Uniform { fan_in: c },
                }
                .materialize::<f32, _>(&mut rng)
            })
            .collect()
    };

    for &s in sizes {
        let hw = (s * s) as u64;
        let input = random_input(s, c, seed);

        // Transposed-attention kernel.
        let wall = time_median(repeats, || {
            let mut tape: Tape<f32> = Tape::new();
            let ids: Vec<usize> = mdta_tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let mut cur = ParamCursor::new(&names, &ids);
            let bv = BlockVars::from_cursor("", spec, &mut cur).unwrap();
            let x = tape.leaf(input.clone());
            blocks::mdta_forward(&mut tape, x, &bv).unwrap();
        });
        rows.push(BenchRow {
            kernel: "MDTA",
            h: s,
            w: s,
            c,
            heads,
            analytic_flops: mdta_attention_flops(hw, c as u64, heads as u64),
            wall_ns: wall,
            peak_bytes: heads as u64 * ((c / heads) as u64).pow(2) * DTYPE_BYTES,
            flagged: wall < 20 * resolution,
        });

        // Quadratic spatial baseline.
        let wall = time_median(repeats, || {
            let mut tape: Tape<f32> = Tape::new();
            let mut conv_ids = spatial_tensors.iter().map(|t| ConvVar {
                w: tape.leaf(t.clone()),
                b: None,
            });
            let sp = SpatialAttnVars {
                wq: conv_ids.next().unwrap(),
                wk: conv_ids.next().unwrap(),
                wv: conv_ids.next().unwrap(),
                w_out: conv_ids.next().unwrap(),
                heads: 1,
            };
            drop(conv_ids);
            let x = tape.leaf(input.clone());
            blocks::vanilla_spatial_attention(&mut tape, x, &sp).unwrap();
        });
        rows.push(BenchRow {
            kernel: "spatial-SA",
            h: s,
            w: s,
            c,
            heads,
            analytic_flops: spatial_attention_flops(hw, c as u64),
            wall_ns: wall,
            peak_bytes: hw * hw * DTYPE_BYTES,
            flagged: wall < 20 * resolution,
        });
    }

    let mut slopes = Vec::new();
    for kernel in ["MDTA", "spatial-SA"] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kernel == kernel)
            .map(|r| ((r.h * r.w) as f64, r.wall_ns as f64))
            .collect();
        slopes.push((kernel, fit_loglog_slope(&pts)?));
    }
    Ok(BenchReport { rows, slopes })
}

fn mdta_spec(c: usize, heads: usize) -> BlockSpec {
    BlockSpec {
        dim: c,
        heads,
        attention_variant: AttentionVariant::Mdta,
        ffn_variant: FfnVariant::Gdfn,
        ffn_gamma: 2.66,
        bias_free: true,
        qk_l2_normalize: false,
    }
}

fn random_input(s: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe9c);
    ParamDesc {
        name: "x".to_string(),
        shape: vec![1, s, s, c],
        init: Init::Uniform { fan_in: 1 },
    }
    .materialize(&mut rng)
}

/// Median of `repeats` timed runs after 2 warmups (monotonic clock).
fn time_median(repeats: usize, mut f: impl FnMut()) -> u64 {
    for _ in 0..2 {
        f();
    }
    let mut times: Vec<u64> = (0..repeats.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut d = t0.elapsed();
        while d.as_nanos() == 0 {
            d = t0.elapsed();
        }
        best = best.min(d.as_nanos() as u64);
    }
    best.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{AttentionVariant, FfnVariant};
    use crate::network::Model;

    fn cfg_variants() -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for bias_free in [true, false] {
            for (attn, ffn) in [
                (AttentionVariant::Mdta, FfnVariant::Gdfn),
                (AttentionVariant::Mta, FfnVariant::Gfn),
                (AttentionVariant::Mdta, FfnVariant::Fn),
            ] {
                out.push(ModelConfig {
                    in_channels: 1,
                    base_dim: 8,
                    num_blocks: [1, 1, 1, 1],
                    heads: [1, 1, 1, 1],
                    refinement_blocks: 1,
                    ffn_gamma: 2.66,
                    bias_free,
                    attention_variant: attn,
                    ffn_variant: ffn,
                    qk_l2_normalize: false,
                });
            }
        }
        out
    }

    #[test]
    fn embed_layer_param_count() {
        let model = CostModel::build(&ModelConfig::paper(), 8, 8).unwrap();
        // 3x3 conv, 3 -> 48 channels, bias-free.
        assert_eq!(model.entry("embed").unwrap().params, 3 * 48 * 9);
    }

    #[test]
    fn analytic_params_equal_enumerated_store() {
        for cfg in cfg_variants() {
            let analytic = count_params(&cfg).unwrap();
            let model: Model<f32> = Model::build(cfg.clone(), 0).unwrap();
            let enumerated = model.params.total_params() as u64;
            assert_eq!(analytic, enumerated, "{cfg:?}");
        }
        let paper = ModelConfig::paper();
        let analytic = count_params(&paper).unwrap();
        let model: Model<f32> = Model::build(paper, 0).unwrap();
        assert_eq!(analytic, model.params.total_params() as u64);
    }

    #[test]
    fn paper_config_counts_within_tolerance() {
        let cfg = ModelConfig::paper();
        let params = count_params(&cfg).unwrap() as f64;
        assert!((params - 26.12e6).abs() / 26.12e6 < 0.01, "params {params}");
        let flops = count_flops(&cfg, 256, 256).unwrap() as f64;
        let flops2 = count_flops_2x(&cfg, 256, 256).unwrap() as f64;
        let near = |f: f64| (f - 141e9).abs() / 141e9 < 0.15;
        assert!(near(flops) || near(flops2), "flops {flops} / {flops2}");
    }

    #[test]
    fn pointwise_conv_mac_example() {
        // 1x1 conv with cin = cout = 2 over 2x2 spatial = HW*cin*cout MACs.
        assert_eq!(2 * 2 * 2 * 2, 16u64);
        let a = mdta_attention_flops(4, 2, 1);
        assert_eq!(a, 2 * 4 * 2 * 2);
    }

    #[test]
    fn attention_terms_scale_as_stated() {
        let c = 32;
        // MDTA term is linear in HW.
        assert_eq!(
            mdta_attention_flops(2048, c, 4),
            2 * mdta_attention_flops(1024, c, 4)
        );
        // Spatial term grows 16x when H and W double.
        assert_eq!(
            spatial_attention_flops(4 * 1024, c),
            16 * spatial_attention_flops(1024, c)
        );
    }

    #[test]
    fn loglog_slope_reference_fits() {
        let s = fit_loglog_slope(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = fit_loglog_slope(&[(1.0, 1.0), (2.0, 4.0), (4.0, 16.0)]).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        let pts = [(1.0, 2.0), (2.0, 4.2), (4.0, 7.8)];
        let s = fit_loglog_slope(&pts).unwrap();
        // Closed-form OLS on the logs, recomputed here independently.
        let n = pts.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in pts {
            let (lx, ly) = (f64::ln(x), f64::ln(y));
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
        }
        let expect = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((s - expect).abs() < 1e-12);
        assert!((s - 0.98).abs() < 0.01, "slope {s}");
        assert!(fit_loglog_slope(&[(1.0, -1.0), (2.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn slope_invariant_to_uniform_rescaling() {
        let pts = [(32.0, 3.0), (64.0, 7.0), (128.0, 13.0), (256.0, 29.0)];
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, y * 1e6)).collect();
        let a = fit_loglog_slope(&pts).unwrap();
        let b = fit_loglog_slope(&scaled).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn analytic_attention_slopes_are_exact() {
        let sizes = [32u64, 64, 128];
        let mdta: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&s| ((s * s) as f64, mdta_attention_flops(s * s, 32, 4) as f64))
            .collect();
        let spatial: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&s| ((s * s) as f64, spatial_attention_flops(s * s, 32) as f64))
            .collect();
        assert!((fit_loglog_slope(&mdta).unwrap() - 1.0).abs() < 1e-9);
        assert!((fit_loglog_slope(&spatial).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn attention_map_memory_independent_of_resolution() {
        let cfg = ModelConfig::paper();
        let small = CostModel::build(&cfg, 64, 64).unwrap();
        let large = CostModel::build(&cfg, 256, 256).unwrap();
        let map_bytes = |m: &CostModel| -> Vec<u64> {
            m.entries
                .iter()
                .filter(|l| l.name.ends_with("attn.map_kq"))
                .map(|l| l.activation_bytes)
                .collect()
        };
        let a = map_bytes(&small);
        let b = map_bytes(&large);
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn cost_model_totals_are_sums() {
        let cfg = ModelConfig::paper();
        let m = CostModel::build(&cfg, 64, 64).unwrap();
        assert_eq!(m.total_flops(), m.entries.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(m.total_params(), m.entries.iter().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn scaling_bench_rejects_bad_sizes() {
        assert!(scaling_bench(8, 1, &[8, 16, 32], 1, 0).is_err());
        assert!(scaling_bench(8, 1, &[8, 16, 16, 32], 1, 0).is_err());
        assert!(scaling_bench(8, 1, &[8, 16, 32, 200], 1, 0).is_err());
    }
}
