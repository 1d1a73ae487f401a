//! Token file layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "OVQT"
//! 4       4     u32 format version (1)
//! 8       4     u32 codebook size K
//! 12      4     u32 latent dimension n_z
//! 16      4     u32 grid height h
//! 20      4     u32 grid width w
//! 24      32    SHA-256 of the checkpoint file
//! 56      4·h·w u32 token indices, row-major
//! ```

use std::path::Path;

use crate::quantizer::TokenGrid;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OVQT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub codebook_size: u32,
    pub latent_dim: u32,
    pub height: u32,
    pub width: u32,
    pub checkpoint_sha256: [u8; 32],
    pub indices: Vec<u32>,
}

impl TokenFile {
    pub fn from_grid(grid: &TokenGrid, codebook_size: usize, latent_dim: usize, checkpoint_sha256_hex: &str) -> Result<Self> {
        if grid.batch != 1 {
            return Err(Error::Shape(format!("a token file holds one image, got a batch of {}", grid.batch)));
        }
        let mut sha = [0u8; 32];
        hex::decode_to_slice(checkpoint_sha256_hex, &mut sha)
            .map_err(|e| Error::Data(format!("bad checkpoint hash: {e}")))?;
        Ok(Self {
            codebook_size: codebook_size as u32,
            latent_dim: latent_dim as u32,
            height: grid.height as u32,
            width: grid.width as u32,
            checkpoint_sha256: sha,
            indices: grid.indices.clone(),
        })
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(1, self.height as usize, self.width as usize, self.indices.clone())
    }

    pub fn checkpoint_hex(&self) -> String {
        hex::encode(self.checkpoint_sha256)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.indices.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.codebook_size, self.latent_dim, self.height, self.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.checkpoint_sha256);
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("token file: {m}"));
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != VERSION {
            return Err(Error::SchemaVersion {
                found: format!("token file v{version}"),
                expected: format!("token file v{VERSION}"),
            });
        }
        let (codebook_size, latent_dim, height, width) = (word(1), word(2), word(3), word(4));
        let n = height as usize * width as usize;
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(bad(format!("expected {} bytes for a {height}x{width} grid, found {}", HEADER_LEN + 4 * n, bytes.len())));
        }
        let mut checkpoint_sha256 = [0u8; 32];
        checkpoint_sha256.copy_from_slice(&bytes[24..56]);
        let indices: Vec<u32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(&bad_index) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::Index {
                index: bad_index,
                size: codebook_size as usize,
            });
        }
        Ok(Self {
            codebook_size,
            latent_dim,
            height,
            width,
            checkpoint_sha256,
            indices,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenFile {
        let grid = TokenGrid::new(1, 2, 3, vec![0, 5, 2, 7, 1, 1]).unwrap();
        TokenFile::from_grid(&grid, 8, 4, &"ab".repeat(32)).unwrap()
    }

    #[test]
    fn byte_layout() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), 56 + 24);
        assert_eq!(&b[..4], b"OVQT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[8, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b[24], 0xab);
        assert_eq!(&b[60..64], &[5, 0, 0, 0]);
        assert_eq!(TokenFile::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn malformed_inputs() {
        let mut b = sample().to_bytes();
        assert!(TokenFile::from_bytes(&b[..50]).is_err());
        assert!(TokenFile::from_bytes(&b[..b.len() - 1]).is_err());
        b[4] = 2;
        assert!(matches!(TokenFile::from_bytes(&b), Err(Error::SchemaVersion { .. })));
        b[4] = 1;
        b[56] = 9;
        assert!(matches!(TokenFile::from_bytes(&b), Err(Error::Index { index: 9, size: 8 })));
        b[0] = b'X';
        assert!(TokenFile::from_bytes(&b).is_err());
        let batch = TokenGrid::new(2, 1, 1, vec![0, 0]).unwrap();
        assert!(TokenFile::from_grid(&batch, 8, 4, &"00".repeat(32)).is_err());
    }
}
