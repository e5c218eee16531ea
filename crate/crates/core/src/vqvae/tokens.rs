//! Token files: a JSON object with a header and 0-based indices.
//!
//! ```json
//! {"n": 16, "s": 512, "codec_fingerprint": "ab12...", "tokens": [3, 511, 0, ...]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::MeshVqVae;
use super::quantizer::TokenSequence;
use crate::error::{config_err, invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub n: usize,
    pub s: usize,
    pub codec_fingerprint: String,
    pub tokens: TokenSequence,
}

impl TokenFile {
    pub fn new(codec: &MeshVqVae, tokens: TokenSequence) -> Result<Self> {
        Ok(TokenFile {
            n: codec.latent_cells(),
            s: codec.config().codebook_size,
            codec_fingerprint: codec.fingerprint()?,
            tokens,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks the header against `codec` and every index against `S`.
    pub fn validate_for(&self, codec: &MeshVqVae) -> Result<()> {
        let fp = codec.fingerprint()?;
        if self.codec_fingerprint != fp {
            return Err(config_err!(
                "token file was produced by codec {}, not {}",
                short(&self.codec_fingerprint),
                short(&fp)
            ));
        }
        if self.n != codec.latent_cells() || self.s != codec.config().codebook_size {
            return Err(invalid!(
                "token header N={} S={} does not match codec N={} S={}",
                self.n,
                self.s,
                codec.latent_cells(),
                codec.config().codebook_size
            ));
        }
        if self.tokens.len() != self.n {
            return Err(invalid!("token file declares N={} but lists {} tokens", self.n, self.tokens.len()));
        }
        if let Some(bad) = self.tokens.indices().iter().find(|&&t| t as usize >= self.s) {
            return Err(invalid!("token {bad} is out of range for S={}", self.s));
        }
        Ok(())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}
