//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HOPE" | u32 version | u64 epoch
//! u32 count | count × (u32 name_len, name, u32 rank, rank × u64 dims, f32 payload)
//! state: u64 seed, f64 gamma, f64 beta, hyperparameters,
//!        u32 len + config text, u32 count + (key, value) metadata strings
//! u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! Tensor names are `param/<name>`, `momentum/<name>` and `buffer/<name>`.

use std::fs;
use std::path::Path;

use super::config::NetworkConfig;
use super::network::Network;
use crate::error::{Error, Result};
use crate::optim::{Hyperparameters, TrainState};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HOPE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub tensors: Vec<NamedTensor>,
    pub seed: u64,
    pub gamma: f64,
    pub beta: f64,
    pub hyper: Hyperparameters,
    pub config_text: String,
    /// Free-form run metadata (dataset, colorspace, ...).
    pub meta: Vec<(String, String)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CheckpointContent(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.epoch);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u32(t.dims.len() as u32);
            t.dims.iter().for_each(|&d| w.u64(d as u64));
            for &v in &t.data {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.u64(self.seed);
        w.f64(self.gamma);
        w.f64(self.beta);
        let h = &self.hyper;
        w.f64(h.lr0);
        w.f64(h.lr_divisor);
        w.u64(h.lr_period as u64);
        w.f64(h.momentum);
        w.f64(h.weight_decay);
        w.f64(h.beta0);
        w.f64(h.beta_divisor);
        w.u64(h.beta_period as u64);
        w.u64(h.epochs as u64);
        w.u64(h.batch as u64);
        w.str(&self.config_text);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        let sum = fnv1a64(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 + 8 {
            return Err(Error::Truncated("header"));
        }
        // verify integrity before trusting any length field
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader {
            buf: body,
            pos: r.pos,
        };
        let epoch = r.u64("epoch")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u64("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(Error::Truncated("tensor payload"))?;
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or(Error::Truncated("tensor payload"))?,
                "tensor payload",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let seed = r.u64("state")?;
        let gamma = r.f64("state")?;
        let beta = r.f64("state")?;
        let hyper = Hyperparameters {
            lr0: r.f64("hyperparameters")?,
            lr_divisor: r.f64("hyperparameters")?,
            lr_period: r.u64("hyperparameters")? as usize,
            momentum: r.f64("hyperparameters")?,
            weight_decay: r.f64("hyperparameters")?,
            beta0: r.f64("hyperparameters")?,
            beta_divisor: r.f64("hyperparameters")?,
            beta_period: r.u64("hyperparameters")? as usize,
            epochs: r.u64("hyperparameters")? as usize,
            batch: r.u64("hyperparameters")? as usize,
        };
        let config_text = r.str("config text")?;
        let n_meta = r.u32("metadata")? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(256));
        for _ in 0..n_meta {
            meta.push((r.str("metadata")?, r.str("metadata")?));
        }
        if r.pos != body.len() {
            return Err(Error::CheckpointContent(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            epoch,
            tensors,
            seed,
            gamma,
            beta,
            hyper,
            config_text,
            meta,
        })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        NetworkConfig::parse(&self.config_text)
    }

    /// Snapshots a network and its optimizer state. Values are stored as f32.
    pub fn capture<T: Scalar>(
        net: &Network<T>,
        state: &TrainState<T>,
        meta: Vec<(String, String)>,
    ) -> Result<Self> {
        let params = net.params();
        if params.len() != state.momenta.len() {
            return Err(Error::CheckpointContent(format!(
                "{} parameters but {} momentum buffers",
                params.len(),
                state.momenta.len()
            )));
        }
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
        let mut tensors = Vec::new();
        for p in &params {
            tensors.push(NamedTensor {
                name: format!("param/{}", p.name),
                dims: vec![p.rows, p.cols],
                data: f32s(p.value),
            });
        }
        for (p, m) in params.iter().zip(&state.momenta) {
            tensors.push(NamedTensor {
                name: format!("momentum/{}", p.name),
                dims: vec![p.rows, p.cols],
                data: f32s(m),
            });
        }
        for (name, b) in net.buffers() {
            tensors.push(NamedTensor {
                name: format!("buffer/{name}"),
                dims: vec![b.len()],
                data: f32s(b),
            });
        }
        Ok(Self {
            epoch: state.epoch as u64,
            tensors,
            seed: state.seed,
            gamma: state.gamma,
            beta: state.beta,
            hyper: state.hyper,
            config_text: net.config().to_text(),
            meta,
        })
    }

    /// Rebuilds the network and optimizer state. Every expected tensor must
    /// be present with matching dims and nothing else may be.
    pub fn restore<T: Scalar>(&self) -> Result<(Network<T>, TrainState<T>)> {
        let config = self.config()?;
        let mut net = Network::<T>::build(&config, self.seed)?;
        let mut state = TrainState::new(&net, self.hyper, self.seed)?;
        let mut used = vec![false; self.tensors.len()];
        let mut fetch = |name: String, dims: &[usize], dst: &mut [T]| -> Result<()> {
            let i = self
                .tensors
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::CheckpointContent(format!("missing tensor {name}")))?;
            let t = &self.tensors[i];
            if t.dims != dims || t.data.len() != dst.len() {
                return Err(Error::CheckpointContent(format!(
                    "{name}: stored dims {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            dst.iter_mut()
                .zip(&t.data)
                .for_each(|(d, &s)| *d = T::of(f64::from(s)));
            used[i] = true;
            Ok(())
        };
        for (p, m) in net.params_mut().into_iter().zip(state.momenta.iter_mut()) {
            fetch(format!("param/{}", p.name), &[p.rows, p.cols], p.value)?;
            fetch(format!("momentum/{}", p.name), &[p.rows, p.cols], m)?;
        }
        for (name, b) in net.buffers_mut() {
            let len = b.len();
            fetch(format!("buffer/{name}"), &[len], b)?;
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::CheckpointContent(format!(
                "unexpected tensor {}",
                self.tensors[i].name
            )));
        }
        state.epoch = self.epoch as usize;
        state.gamma = self.gamma;
        state.beta = self.beta;
        Ok((net, state))
    }
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    state: &TrainState<T>,
    meta: Vec<(String, String)>,
    path: &Path,
) -> Result<()> {
    let bytes = Checkpoint::capture(net, state, meta)?.to_bytes();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, TrainState<T>, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let (net, state) = ckpt.restore()?;
    Ok((net, state, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Network<f32>, TrainState<f32>) {
        let cfg = NetworkConfig::parse(
            "network name=ck classes=3 input=2x4x4\nhope_projection kernel=2 maps=4 stride=2\nbatchnorm\nrelu\ndense units=3\nsoftmax_ce\n",
        )
        .unwrap();
        let net = Network::build(&cfg, 11).unwrap();
        let mut state = TrainState::new(&net, Hyperparameters::default(), 11).unwrap();
        for (i, m) in state.momenta.iter_mut().enumerate() {
            m.iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = (i * 100 + j) as f32 * 0.01);
        }
        state.set_epoch(30);
        (net, state)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_exact() {
        let (net, state) = sample();
        let meta = vec![("dataset".to_string(), "synthetic".to_string())];
        let ck = Checkpoint::capture(&net, &state, meta).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (net2, state2) = back.restore::<f32>().unwrap();
        assert_eq!(net2, net);
        assert_eq!(state2, state);
        assert_eq!(back.meta("dataset"), Some("synthetic"));
    }

    #[test]
    fn header_layout() {
        let (net, state) = sample();
        let bytes = Checkpoint::capture(&net, &state, vec![])
            .unwrap()
            .to_bytes();
        assert_eq!(&bytes[..4], b"HOPE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 30);
    }

    #[test]
    fn distinct_errors() {
        let (net, state) = sample();
        let bytes = Checkpoint::capture(&net, &state, vec![])
            .unwrap()
            .to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));

        let mut bad = bytes.clone();
        bad[40] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Truncated(_))
        ));
        // a truncated file loses its checksum, so integrity fails first
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 20]).is_err());
    }

    #[test]
    fn restore_rejects_missing_tensor() {
        let (net, state) = sample();
        let mut ck = Checkpoint::capture(&net, &state, vec![]).unwrap();
        ck.tensors.pop();
        assert!(matches!(
            ck.restore::<f32>(),
            Err(Error::CheckpointContent(_))
        ));
    }
}
