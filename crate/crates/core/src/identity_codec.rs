//! Private-key lifecycle and the keyed identity translator.
//!
//! The translator extracts a 1/8-resolution feature map, flattens it to
//! tokens, prepends a projected key token (and, when restoring, a learned
//! mode token), runs the transformer stack, and unflattens. Protection and
//! restoration share all weights; only the mode token distinguishes them.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::blocks::{Conv2dLayer, LinearLayer};
use crate::nn::transformer::{BlockConfig, TransformerBlock};
use crate::nn::{init, ParamId, ParamStore};
use crate::rng::substream;

pub const KEY_DIM: usize = 512;
pub const KEY_FILE_BYTES: usize = KEY_DIM * 4;

/// 512 floats drawn from a unit-variance Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateKey {
    values: Vec<f32>,
}

impl PrivateKey {
    pub fn from_vec(values: Vec<f32>) -> Result<Self> {
        if values.len() != KEY_DIM {
            return Err(Error::Key(format!(
                "key has {} elements, expected {KEY_DIM}",
                values.len()
            )));
        }
        Ok(PrivateKey { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Deterministic i.i.d. N(0,1) draw keyed by `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = substream(seed, "private-key");
        Self::sample_from(&mut rng)
    }

    pub fn sample_from<R: Rng>(rng: &mut R) -> Self {
        let values = (0..KEY_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32
            })
            .collect();
        PrivateKey { values }
    }

    /// Strictly different from `other` in at least one element.
    pub fn differs_from(&self, other: &PrivateKey) -> bool {
        self.values
            .iter()
            .zip(other.values.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
    }
}

/// Raw format: exactly 2048 bytes, 512 little-endian IEEE-754 f32.
pub fn write_key(key: &PrivateKey, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(KEY_FILE_BYTES);
    for v in &key.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Armored format: 4096 lowercase hex characters of the raw bytes.
pub fn write_key_armored(key: &PrivateKey, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(KEY_FILE_BYTES);
    for v in &key.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, hex::encode(bytes))?;
    Ok(())
}

/// Reads raw (2048-byte) or armored (4096 hex chars) key files.
pub fn read_key(path: &Path) -> Result<PrivateKey> {
    let raw = std::fs::read(path)?;
    let bytes = if raw.len() == KEY_FILE_BYTES {
        raw
    } else {
        let text: String = String::from_utf8(raw)
            .map_err(|_| Error::Format("key file is neither 2048 bytes nor hex text".into()))?
            .trim()
            .to_string();
        if text.len() != KEY_FILE_BYTES * 2 {
            return Err(Error::Format(format!(
                "key file must be {KEY_FILE_BYTES} bytes raw or {} hex chars, got {} chars",
                KEY_FILE_BYTES * 2,
                text.len()
            )));
        }
        hex::decode(&text).map_err(|e| Error::Format(format!("bad hex key: {e}")))?
    };
    if bytes.len() != KEY_FILE_BYTES {
        return Err(Error::Format(format!(
            "key payload is {} bytes, expected {KEY_FILE_BYTES}",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    PrivateKey::from_vec(values)
}

/// Key batch as an (n, 512) array on a tape.
pub fn keys_to_batch<T: Scalar>(keys: &[&PrivateKey]) -> ArrayD<T> {
    let mut out = Array2::<T>::zeros((keys.len(), KEY_DIM));
    for (i, k) in keys.iter().enumerate() {
        for (j, &v) in k.values().iter().enumerate() {
            out[[i, j]] = crate::autodiff::c::<T>(v as f64);
        }
    }
    out.into_dyn()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    Protect,
    Restore,
}

/// Shared translator/restorer network.
pub struct Translator<T: Scalar> {
    pub cfg: BlockConfig,
    pub grid: usize,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    key_proj: LinearLayer,
    mode_token: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Translator<T> {
    /// `grid` is the 1/8-resolution spatial side (canvas / 8).
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: BlockConfig,
        n_blocks: usize,
        grid: usize,
    ) -> Self {
        let d = cfg.channels;
        let conv1 = Conv2dLayer::new(store, rng, "tr.conv1", 3, 32, 3, 2, 1);
        let conv2 = Conv2dLayer::new(store, rng, "tr.conv2", 32, 64, 3, 2, 1);
        let conv3 = Conv2dLayer::new(store, rng, "tr.conv3", 64, d, 3, 2, 1);
        let key_proj = LinearLayer::new(store, rng, "tr.key_proj", KEY_DIM, d);
        let mode_token = store.add("tr.mode_token", init::normal(&[1, d], 0.02, rng));
        let pos_emb = store.add(
            "tr.pos_emb",
            init::normal(&[grid * grid, d], 0.02, rng),
        );
        let blocks = (0..n_blocks)
            .map(|i| TransformerBlock::new(store, rng, &format!("tr.block{i}"), cfg))
            .collect();
        Translator {
            cfg,
            grid,
            conv1,
            conv2,
            conv3,
            key_proj,
            mode_token,
            pos_emb,
            blocks,
            _marker: std::marker::PhantomData,
        }
    }

    /// Image batch (n,3,H,W) -> feature map (n,C,H/8,W/8).
    pub fn extract(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = tape.relu(h);
        self.conv3.forward(tape, store, h)
    }

    /// Keyed feature translation. Shape-preserving; deterministic given
    /// (features, keys, parameters).
    pub fn transform(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        keys: Var,
        mode: CodecMode,
    ) -> Var {
        let shape = tape.shape(features).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.cfg.channels, "feature channels {c}");
        assert_eq!(h * w, self.grid * self.grid, "grid mismatch");
        let mut tokens = tape.feat_to_tokens(features);
        let pos = store.on_tape(tape, self.pos_emb);
        tokens = tape.add_bcast0(tokens, pos);

        // key token: (n, 512) -> (n, 1, d)
        let key_tok = self.key_proj.forward(tape, store, keys);
        let key_tok = tape.reshape(key_tok, &[n, 1, self.cfg.channels]);

        let n_special = match mode {
            CodecMode::Protect => {
                tokens = tape.concat_tokens(key_tok, tokens);
                1
            }
            CodecMode::Restore => {
                let mode_tok = store.on_tape(tape, self.mode_token);
                let zeros = tape.constant(ArrayD::zeros(IxDyn(&[n, 1, self.cfg.channels])));
                let mode_tok = tape.add_bcast0(zeros, mode_tok);
                let specials = tape.concat_tokens(key_tok, mode_tok);
                tokens = tape.concat_tokens(specials, tokens);
                2
            }
        };
        for block in &self.blocks {
            tokens = block.forward(tape, store, tokens);
        }
        let body = tape.slice_tokens(tokens, n_special, n_special + h * w);
        tape.tokens_to_feat(body, h, w)
    }
}
