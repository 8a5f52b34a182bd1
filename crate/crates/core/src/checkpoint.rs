//! Fit-state checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then every
//! tensor as little-endian 64-bit floats at the offsets listed in the header.
//! Values from 32-bit runs widen exactly, so a round trip is bit-identical
//! at either precision.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitState, Learnables, StateMeta};
use crate::geometry::{Camera, FrustumSpec, Pose};
use crate::grid::{Grid, Real};
use crate::lifting::AttentionScale;
use crate::optim::Moments;
use crate::params::ParamSet;

const MAGIC: &str = "frustum-fields-checkpoint";
const VERSION: u32 = 1;
const FEATURES: &str = "features";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    format: String,
    version: u32,
    pub precision: u32,
    pub step: u64,
    rng: RngState,
    pub learnables: Learnables,
    pub channels: usize,
    pub frustum: FrustumSpec,
    pub intrinsics: [f64; 4],
    pub pose: [f64; 12],
    pub image_size: [usize; 2],
    pub attention_scale: AttentionScale,
    pub tensors: Vec<TensorEntry>,
}

fn moment_names(name: &str) -> (String, String) {
    (format!("adam.m/{name}"), format!("adam.v/{name}"))
}

/// Named tensors in storage order: params, Adam moments, fixed features.
fn tensors<T: Real>(state: &FitState<T>) -> Vec<(String, &Grid<T>)> {
    let mut out: Vec<(String, &Grid<T>)> = state.params.iter().map(|(n, g)| (n.to_string(), g)).collect();
    for ((name, _), mo) in state.params.iter().zip(&state.moments) {
        let (m, v) = moment_names(name);
        out.push((m, &mo.m));
        out.push((v, &mo.v));
    }
    if let Some(f) = &state.features {
        out.push((FEATURES.to_string(), f));
    }
    out
}

pub fn encode<T: Real>(state: &FitState<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (name, g) in tensors(state) {
        entries.push(TensorEntry {
            name,
            shape: g.shape().to_vec(),
            offset: data.len(),
        });
        for &x in g.data() {
            data.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let meta = &state.meta;
    let header = Header {
        format: MAGIC.into(),
        version: VERSION,
        precision: T::BITS,
        step: state.step,
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        learnables: meta.learnables,
        channels: meta.channels,
        frustum: meta.frustum,
        intrinsics: meta.camera.intrinsics(),
        pose: meta.camera.pose.to_rows(),
        image_size: [meta.image_width, meta.image_height],
        attention_scale: meta.attention_scale,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

struct Decoded<'a> {
    header: Header,
    data: &'a [u8],
}

impl Decoded<'_> {
    fn parse(bytes: &[u8]) -> Result<Decoded<'_>> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(8..8usize.saturating_add(n)).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != MAGIC || header.version != VERSION {
            return Err(bad(format!("unsupported format {:?} v{}", header.format, header.version)));
        }
        let data = &bytes[8 + n..];
        let mut end = 0;
        for t in &header.tensors {
            if t.offset != end {
                return Err(bad(format!("tensor {} is not contiguous", t.name)));
            }
            end += t.shape.iter().product::<usize>() * 8;
        }
        if end != data.len() {
            return Err(bad(format!("data section holds {} bytes, header lists {end}", data.len())));
        }
        Ok(Decoded { header, data })
    }

    fn tensor<T: Real>(&self, name: &str) -> Result<Grid<T>> {
        let t = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        let n: usize = t.shape.iter().product();
        let vals = self.data[t.offset..t.offset + n * 8]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Grid::new(t.shape.clone(), vals)
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let r = &self.header.rng;
        let pos: u128 = r
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", r.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(r.seed);
        rng.set_stream(r.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    fn meta(&self) -> Result<StateMeta> {
        let h = &self.header;
        Ok(StateMeta {
            learnables: h.learnables,
            channels: h.channels,
            frustum: h.frustum,
            camera: Camera::new(h.intrinsics, Pose::from_rows(&h.pose))?,
            image_width: h.image_size[0],
            image_height: h.image_size[1],
            attention_scale: h.attention_scale,
        })
    }

    fn param_names(&self) -> Vec<&str> {
        self.header
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| !n.starts_with("adam.") && *n != FEATURES)
            .collect()
    }

    fn state<T: Real>(&self) -> Result<FitState<T>> {
        let mut params = ParamSet::new();
        let mut moments = Vec::new();
        for name in self.param_names() {
            params.insert(name, self.tensor(name)?)?;
            let (m, v) = moment_names(name);
            moments.push(Moments {
                m: self.tensor(&m)?,
                v: self.tensor(&v)?,
            });
        }
        let has_features = self.header.tensors.iter().any(|t| t.name == FEATURES);
        let state = FitState {
            params,
            moments,
            step: self.header.step,
            rng: self.rng()?,
            features: if has_features { Some(self.tensor(FEATURES)?) } else { None },
            meta: self.meta()?,
        };
        state.check_shapes()?;
        Ok(state)
    }
}

pub fn header(bytes: &[u8]) -> Result<Header> {
    Ok(Decoded::parse(bytes)?.header)
}

/// Rebuilds a full state from checkpoint bytes alone.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<FitState<T>> {
    Decoded::parse(bytes)?.state()
}

/// Replaces `state` with the checkpoint contents after checking that every
/// tensor matches the shape the current configuration expects.
pub fn restore<T: Real>(state: &mut FitState<T>, bytes: &[u8]) -> Result<()> {
    let dec = Decoded::parse(bytes)?;
    let loaded: FitState<T> = dec.state()?;
    let current = tensors(state);
    let incoming = tensors(&loaded);
    for (name, g) in &current {
        let other = incoming
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        if other.1.shape() != g.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor {name}: expected {:?}, found {:?}",
                g.shape(),
                other.1.shape()
            )));
        }
    }
    if let Some((name, _)) = incoming.iter().find(|(n, _)| !current.iter().any(|(c, _)| c == n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    if loaded.meta != state.meta {
        return Err(Error::Checkpoint("checkpoint was written for a different scene or frustum".into()));
    }
    *state = loaded;
    Ok(())
}

pub fn save<T: Real>(state: &FitState<T>, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<FitState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_into<T: Real>(state: &mut FitState<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(state, &bytes)
}
