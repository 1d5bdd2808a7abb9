//! Portable image codec (Netpbm P5/P6), the binary checkpoint format, and
//! the JSON run configuration.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSTM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded image: values in [0,1], channel-interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub bit_depth: u8,
}

impl ImageBuffer {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width, self.channels], self.values.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor<f32>, bit_depth: u8) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Dimension(format!(
                "expected [1,h,w,c] tensor, got {:?}",
                s
            )));
        }
        Ok(ImageBuffer {
            width: s[2],
            height: s[1],
            channels: s[3],
            values: t.data().to_vec(),
            bit_depth,
        })
    }
}

struct PnmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmParser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse { offset: self.pos, msg: msg.to_string() }
    }

    fn skip_ws_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(self.err("unexpected end of header")),
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_ws_and_comments()?;
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .map(|b| b.is_ascii_digit())
            .unwrap_or(false)
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("integer out of range"))
    }
}

/// Parses a binary Netpbm file (P5 grayscale or P6 color, maxval 255 or
/// 65535, 16-bit samples big-endian).
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut p = PnmParser { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(p.err("file too short for magic"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(p.err("expected P5 or P6 magic")),
    };
    p.pos = 2;
    let width = p.read_uint()?;
    let height = p.read_uint()?;
    let maxval = p.read_uint()?;
    if width == 0 || height == 0 {
        return Err(p.err("zero image extent"));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(p.err("maxval must be 255 or 65535"));
    }
    // Exactly one whitespace byte separates the header from the body.
    match bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(p.err("expected single whitespace before body")),
    }
    let bytes_per_sample = if maxval == 255 { 1 } else { 2 };
    let count = width * height * channels;
    let need = count * bytes_per_sample;
    if bytes.len() - p.pos < need {
        p.pos = bytes.len();
        return Err(p.err("truncated pixel body"));
    }
    let body = &bytes[p.pos..p.pos + need];
    let scale = 1.0 / maxval as f32;
    let values: Vec<f32> = if bytes_per_sample == 1 {
        body.iter().map(|&b| (b as f32 * scale).clamp(0.0, 1.0)).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| {
                let v = u16::from_be_bytes([c[0], c[1]]);
                (v as f32 * scale).clamp(0.0, 1.0)
            })
            .collect()
    };
    Ok(ImageBuffer {
        width,
        height,
        channels,
        values,
        bit_depth: if maxval == 255 { 8 } else { 16 },
    })
}

/// Serializes to binary P5/P6; round-half-up quantization, clamped.
pub fn encode_pnm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("unsupported channel count {c}"))),
    };
    let maxval: u32 = match img.bit_depth {
        8 => 255,
        16 => 65535,
        d => return Err(Error::Format(format!("unsupported bit depth {d}"))),
    };
    if img.values.len() != img.width * img.height * img.channels {
        return Err(Error::Dimension("image value count mismatch".into()));
    }
    let mut out = Vec::with_capacity(
        img.values.len() * if maxval == 255 { 1 } else { 2 } + 32,
    );
    write!(out, "{magic}\n{} {}\n{maxval}\n", img.width, img.height)?;
    for &v in &img.values {
        let q = (v as f64 * maxval as f64 + 0.5).floor().clamp(0.0, maxval as f64) as u32;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pnm(&bytes)
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = encode_pnm(img)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reflect-pads the bottom/right of an [n,h,w,c] tensor so both spatial
/// extents become multiples of `multiple` (border sample not repeated).
pub fn reflect_pad_to_multiple(x: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return Ok(x.clone());
    }
    if ph >= h || pw >= w {
        return Err(Error::Dimension(format!(
            "image {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )));
    }
    let (nh, nw) = (h + ph, w + pw);
    let xs = x.data();
    let mut out = vec![0f32; n * nh * nw * c];
    for in_ in 0..n {
        for y in 0..nh {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for xx in 0..nw {
                let sx = if xx < w { xx } else { 2 * w - 2 - xx };
                let src = ((in_ * h + sy) * w + sx) * c;
                let dst = ((in_ * nh + y) * nw + xx) * c;
                out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    Tensor::new(&[n, nh, nw, c], out)
}

/// Crops the top-left h x w window (inverse of the reflect pad).
pub fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let (n, fh, fw, c) = (s[0], s[1], s[2], s[3]);
    if h > fh || w > fw {
        return Err(Error::Dimension(format!(
            "crop {h}x{w} exceeds {fh}x{fw}"
        )));
    }
    let xs = x.data();
    let mut out = vec![0f32; n * h * w * c];
    for in_ in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((in_ * fh + y) * fw + xx) * c;
                let dst = ((in_ * h + y) * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

// ---- checkpoint ---------------------------------------------------------

pub struct OptCheckpoint {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub opt: Option<OptCheckpoint>,
    pub iteration: u64,
    pub rng_seed: u64,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

/// Serializes: magic "RSTM", u32 LE version, u64 config-JSON length, config
/// JSON, u64 tensor count, tensors in canonical order (u32 name length,
/// name, u32 rank, u64 dims, f32 LE values), a one-byte optimizer presence
/// flag followed by the optimizer section in the same tensor layout, the
/// u64 iteration counter, and the u64 data RNG seed.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_string(&ckpt.config)?;
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut out, name, t);
    }
    match &ckpt.opt {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.t.to_le_bytes());
            out.extend_from_slice(&((opt.m.len() + opt.v.len()) as u64).to_le_bytes());
            for (i, (name, _)) in ckpt.params.iter().enumerate() {
                write_tensor(&mut out, &format!("m.{name}"), &opt.m[i]);
            }
            for (i, (name, _)) in ckpt.params.iter().enumerate() {
                write_tensor(&mut out, &format!("v.{name}"), &opt.v[i]);
            }
        }
        None => out.push(0),
    }
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)?;
    config.validate()?;
    let expected = config.param_descs();
    let count = r.u64()? as usize;
    if count != expected.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut params = ParamStore::new();
    for desc in &expected {
        let (name, t) = r.tensor()?;
        if name != desc.name || t.shape() != &desc.shape[..] {
            return Err(Error::Integrity(format!(
                "tensor {name} {:?} does not match expected {} {:?}",
                t.shape(),
                desc.name,
                desc.shape
            )));
        }
        params.push(name, t)?;
    }
    let opt = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let opt_count = r.u64()? as usize;
            if opt_count != 2 * expected.len() {
                return Err(Error::Integrity(format!(
                    "optimizer section holds {opt_count} tensors, expected {}",
                    2 * expected.len()
                )));
            }
            let mut m = Vec::with_capacity(expected.len());
            let mut v = Vec::with_capacity(expected.len());
            for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                for desc in &expected {
                    let (name, tensor) = r.tensor()?;
                    if name != format!("{kind}.{}", desc.name) || tensor.shape() != &desc.shape[..] {
                        return Err(Error::Integrity(format!(
                            "optimizer tensor {name} does not match {kind}.{}",
                            desc.name
                        )));
                    }
                    dst.push(tensor);
                }
            }
            Some(OptCheckpoint { t, m, v })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    let iteration = r.u64()?;
    let rng_seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, params, opt, iteration, rng_seed })
}

impl Checkpoint {
    pub fn into_model(self) -> Model<f32> {
        Model { cfg: self.config, params: self.params }
    }
}

// ---- run configuration ---------------------------------------------------

/// Top-level JSON config for `train`: model plus training sections.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Loads a ModelConfig from JSON, accepting either a bare model object or a
/// full run config.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg = match serde_json::from_str::<ModelConfig>(&text) {
        Ok(c) => c,
        Err(_) => serde_json::from_str::<RunConfig>(&text)?.model,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Training sample drawn from a directory of Netpbm images: picks an image
/// and patch location deterministically per (seed, index) and adds Gaussian
/// noise.
pub fn directory_sample(
    dir: &Path,
    seed: u64,
    index: u64,
    patch: usize,
    channels: usize,
    sigma: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm") | Some("pnm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no .pgm/.ppm/.pnm files in {}",
            dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let img = load_image(&files[rng.gen_range(0..files.len())])?;
    if img.channels != channels {
        return Err(Error::Config(format!(
            "dataset image has {} channels, model expects {channels}",
            img.channels
        )));
    }
    if img.width < patch || img.height < patch {
        return Err(Error::Config(format!(
            "dataset image {}x{} smaller than patch {patch}",
            img.width, img.height
        )));
    }
    let x0 = rng.gen_range(0..=img.width - patch);
    let y0 = rng.gen_range(0..=img.height - patch);
    let mut clean = vec![0f32; patch * patch * channels];
    for y in 0..patch {
        for x in 0..patch {
            let src = ((y0 + y) * img.width + x0 + x) * channels;
            let dst = (y * patch + x) * channels;
            clean[dst..dst + channels].copy_from_slice(&img.values[src..src + channels]);
        }
    }
    let clean = Tensor::new(&[1, patch, patch, channels], clean)?;
    let noisy = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / 255.0).unwrap();
        let data: Vec<f32> = clean
            .data()
            .iter()
            .map(|&c| c + normal.sample(&mut rng) as f32)
            .collect();
        Tensor::new(clean.shape(), data)?
    } else {
        clean.clone()
    };
    Ok((clean, noisy))
}
