//! Self-describing binary checkpoints.
//!
//! A checkpoint is an ordered list of named sections; each section is a
//! shaped `f64` tensor (shape header + row-major little-endian values), a
//! `u64`, or a raw byte blob (used for RNG states). Values round-trip
//! bit-exactly. The same container serialises network parameters, optimizer
//! moments, replay-buffer snapshots and full resumable run state.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSACKPT1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("missing section {0:?}")]
    Missing(String),
    #[error("section {0:?} has the wrong kind")]
    WrongKind(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Tensor(Tensor),
    U64(u64),
    Bytes(Vec<u8>),
}

/// An ordered, named collection of sections.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    sections: Vec<(String, Section)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    fn put(&mut self, name: &str, section: Section) {
        assert!(
            !self.index.contains_key(name),
            "duplicate checkpoint section {name:?}"
        );
        self.index.insert(name.to_string(), self.sections.len());
        self.sections.push((name.to_string(), section));
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.put(name, Section::Tensor(t.clone()));
    }

    pub fn put_f64_slice(&mut self, name: &str, data: &[f64]) {
        self.put(name, Section::Tensor(Tensor::new(1, data.len(), data.to_vec())));
    }

    pub fn put_f64(&mut self, name: &str, v: f64) {
        self.put_f64_slice(name, &[v]);
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put(name, Section::U64(v));
    }

    pub fn put_bytes(&mut self, name: &str, b: Vec<u8>) {
        self.put(name, Section::Bytes(b));
    }

    fn get(&self, name: &str) -> Result<&Section, CkptError> {
        self.index
            .get(name)
            .map(|&i| &self.sections[i].1)
            .ok_or_else(|| CkptError::Missing(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CkptError> {
        match self.get(name)? {
            Section::Tensor(t) => Ok(t),
            _ => Err(CkptError::WrongKind(name.to_string())),
        }
    }

    pub fn f64_slice(&self, name: &str) -> Result<&[f64], CkptError> {
        Ok(self.tensor(name)?.data())
    }

    pub fn f64(&self, name: &str) -> Result<f64, CkptError> {
        let s = self.f64_slice(name)?;
        if s.len() != 1 {
            return Err(CkptError::WrongKind(name.to_string()));
        }
        Ok(s[0])
    }

    pub fn u64(&self, name: &str) -> Result<u64, CkptError> {
        match self.get(name)? {
            Section::U64(v) => Ok(*v),
            _ => Err(CkptError::WrongKind(name.to_string())),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CkptError> {
        match self.get(name)? {
            Section::Bytes(b) => Ok(b),
            _ => Err(CkptError::WrongKind(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Section::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Section::Bytes(b) => {
                    out.push(2);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CkptError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CkptError::Format("bad magic".into()));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CkptError::Format("non-utf8 section name".into()))?;
            let kind = r.take(1)?[0];
            let section = match kind {
                0 => {
                    let rows = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
                    let cols = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows * cols {
                        data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    }
                    Section::Tensor(Tensor::new(rows, cols, data))
                }
                1 => Section::U64(u64::from_le_bytes(r.take(8)?.try_into().unwrap())),
                2 => {
                    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
                    Section::Bytes(r.take(len)?.to_vec())
                }
                k => return Err(CkptError::Format(format!("unknown section kind {k}"))),
            };
            ck.put(&name, section);
        }
        if r.pos != bytes.len() {
            return Err(CkptError::Format("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
        let mut f = fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.buf.len() {
            return Err(CkptError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

// ── network and optimizer sections ──────────────────────────────────

use crate::nn::{Activation, Adam, Mlp};

fn activation_code(a: Activation) -> u64 {
    match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    }
}

fn activation_from_code(c: u64) -> Result<Activation, CkptError> {
    match c {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Tanh),
        _ => Err(CkptError::Format(format!("unknown activation code {c}"))),
    }
}

pub fn write_mlp(ck: &mut Checkpoint, prefix: &str, net: &Mlp) {
    ck.put_u64(&format!("{prefix}/layers"), net.layers.len() as u64);
    ck.put_u64(&format!("{prefix}/activation"), activation_code(net.activation));
    for (i, layer) in net.layers.iter().enumerate() {
        ck.put_tensor(&format!("{prefix}/l{i}/w"), &layer.w);
        ck.put_tensor(&format!("{prefix}/l{i}/b"), &layer.b);
    }
}

pub fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp, CkptError> {
    let layer_count = ck.u64(&format!("{prefix}/layers"))? as usize;
    let activation = activation_from_code(ck.u64(&format!("{prefix}/activation"))?)?;
    let mut sizes = Vec::with_capacity(layer_count + 1);
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let w = ck.tensor(&format!("{prefix}/l{i}/w"))?.clone();
        let b = ck.tensor(&format!("{prefix}/l{i}/b"))?.clone();
        if i == 0 {
            sizes.push(w.rows());
        }
        sizes.push(w.cols());
        layers.push(crate::nn::Dense { w, b });
    }
    Ok(Mlp::from_layers(sizes, activation, layers))
}

pub fn write_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam) {
    ck.put_f64(&format!("{prefix}/lr"), adam.lr);
    ck.put_f64(&format!("{prefix}/beta1"), adam.beta1);
    ck.put_f64(&format!("{prefix}/beta2"), adam.beta2);
    ck.put_f64(&format!("{prefix}/eps"), adam.eps);
    ck.put_u64(&format!("{prefix}/steps"), adam.step_count);
    let (m, v) = adam.moments();
    for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
        ck.put_f64_slice(&format!("{prefix}/m{i}"), mi);
        ck.put_f64_slice(&format!("{prefix}/v{i}"), vi);
    }
}

/// Reads Adam state for a parameter list shaped like `params`.
pub fn read_adam(ck: &Checkpoint, prefix: &str, params: &[&Tensor]) -> Result<Adam, CkptError> {
    let mut adam = Adam::new(ck.f64(&format!("{prefix}/lr"))?, params);
    adam.beta1 = ck.f64(&format!("{prefix}/beta1"))?;
    adam.beta2 = ck.f64(&format!("{prefix}/beta2"))?;
    adam.eps = ck.f64(&format!("{prefix}/eps"))?;
    adam.step_count = ck.u64(&format!("{prefix}/steps"))?;
    let (m, v) = adam.moments_mut();
    for i in 0..params.len() {
        let mi = ck.f64_slice(&format!("{prefix}/m{i}"))?;
        let vi = ck.f64_slice(&format!("{prefix}/v{i}"))?;
        if mi.len() != m[i].len() || vi.len() != v[i].len() {
            return Err(CkptError::Format(format!("optimizer moment {i} shape mismatch")));
        }
        m[i].copy_from_slice(mi);
        v[i].copy_from_slice(vi);
    }
    Ok(adam)
}

// ── RNG state round-tripping ────────────────────────────────────────

/// Serialises a ChaCha8 RNG as seed (32 bytes) + stream (8) + word
/// position (16); the restored generator continues the exact same stream.
pub fn rng_to_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng, CkptError> {
    if bytes.len() != 56 {
        return Err(CkptError::Format(format!("rng state must be 56 bytes, got {}", bytes.len())));
    }
    let seed: [u8; 32] = bytes[..32].try_into().unwrap();
    let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn sections_round_trip_bit_exactly() {
        let mut ck = Checkpoint::new();
        // Values chosen to stress exactness: subnormals, negative zero, pi.
        let t = Tensor::new(2, 3, vec![std::f64::consts::PI, -0.0, 5e-324, 1.0 / 3.0, -1e300, 42.0]);
        ck.put_tensor("net/w", &t);
        ck.put_u64("steps", u64::MAX - 3);
        ck.put_bytes("rng", vec![1, 2, 3, 255]);
        ck.put_f64("alpha", 0.1);

        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensor("net/w").unwrap().data(), t.data());
        assert_eq!(
            back.tensor("net/w").unwrap().data()[1].to_bits(),
            (-0.0f64).to_bits(),
            "negative zero preserved"
        );
        assert_eq!(back.u64("steps").unwrap(), u64::MAX - 3);
        assert_eq!(back.bytes("rng").unwrap(), &[1, 2, 3, 255]);
        assert_eq!(back.f64("alpha").unwrap(), 0.1);
        // Serialising again yields identical bytes.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn missing_and_wrong_kind_are_reported() {
        let mut ck = Checkpoint::new();
        ck.put_u64("a", 1);
        assert!(matches!(ck.tensor("b"), Err(CkptError::Missing(_))));
        assert!(matches!(ck.tensor("a"), Err(CkptError::WrongKind(_))));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_u64("a", 7);
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let ck2 = Checkpoint::new().to_bytes();
        assert!(Checkpoint::from_bytes(&ck2[..ck2.len()]).is_ok());
        assert!(Checkpoint::from_bytes(&ck2[..ck2.len() - 1]).is_err());
    }

    #[test]
    fn rng_state_restores_the_exact_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(3);
        // Advance to a mid-stream position.
        for _ in 0..13 {
            rng.next_u64();
        }
        let saved = rng_to_bytes(&rng);
        let expected: Vec<u64> = (0..32).map(|_| rng.next_u64()).collect();
        let mut restored = rng_from_bytes(&saved).unwrap();
        let got: Vec<u64> = (0..32).map(|_| restored.next_u64()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut ck = Checkpoint::new();
        ck.put_f64_slice("xs", &[1.5, -2.5, 0.0]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.f64_slice("xs").unwrap(), &[1.5, -2.5, 0.0]);
    }
}
