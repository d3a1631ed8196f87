//! Binary model file: a fitted tree plus the settings that produced it.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `STSMODEL` |
//! | 4 | format version (1) |
//! | 4 | header length `h` |
//! | h | UTF-8 JSON [`ModelHeader`] |
//! | 25 per node | node records in table order |
//!
//! A node record is a tag byte followed by 24 payload bytes. Tag 0 is a
//! split: predictor `u32`, left `u32`, right `u32`, threshold `f64`, 4 zero
//! bytes. Tag 1 is a leaf: prediction `f64`, count `u64`, 8 zero bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::NeighborhoodSpec;
use crate::tree::{CvReport, FitConfig, Node, RegressionTree};

pub const MODEL_MAGIC: &[u8; 8] = b"STSMODEL";
pub const MODEL_VERSION: u32 = 1;
const RECORD: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub schema_version: u32,
    pub l: Option<usize>,
    pub n_predictors: usize,
    pub n_nodes: usize,
    pub n_leaves: usize,
    pub depth: usize,
    pub fit_config: Option<FitConfig>,
    pub cv: Option<CvReport>,
    /// Hex SHA-256 of the standardized training image.
    pub training_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub tree: RegressionTree,
    pub fit_config: Option<FitConfig>,
    pub cv: Option<CvReport>,
    pub training_digest: Option<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl ModelFile {
    pub fn new(tree: RegressionTree) -> Self {
        ModelFile { tree, fit_config: None, cv: None, training_digest: None }
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            schema_version: MODEL_VERSION,
            l: self.tree.spec().map(|s| s.l()),
            n_predictors: self.tree.n_predictors(),
            n_nodes: self.tree.nodes().len(),
            n_leaves: self.tree.n_leaves(),
            depth: self.tree.depth(),
            fit_config: self.fit_config.clone(),
            cv: self.cv.clone(),
            training_digest: self.training_digest.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let nodes = self.tree.nodes();
        let mut out = Vec::with_capacity(16 + header.len() + RECORD * nodes.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for node in nodes {
            let mut rec = [0u8; RECORD];
            match *node {
                Node::Split { predictor, threshold, left, right } => {
                    rec[1..5].copy_from_slice(&predictor.to_le_bytes());
                    rec[5..9].copy_from_slice(&left.to_le_bytes());
                    rec[9..13].copy_from_slice(&right.to_le_bytes());
                    rec[13..21].copy_from_slice(&threshold.to_le_bytes());
                }
                Node::Leaf { prediction, count } => {
                    rec[0] = 1;
                    rec[1..9].copy_from_slice(&prediction.to_le_bytes());
                    rec[9..17].copy_from_slice(&count.to_le_bytes());
                }
            }
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("model file: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let table = &bytes[16 + hlen..];
        if table.len() != header.n_nodes * RECORD {
            return Err(bad("node table length does not match header"));
        }
        let nodes = table
            .chunks_exact(RECORD)
            .map(|rec| {
                let u32_at = |i: usize| u32::from_le_bytes(rec[i..i + 4].try_into().unwrap());
                let f64_at = |i: usize| f64::from_le_bytes(rec[i..i + 8].try_into().unwrap());
                match rec[0] {
                    0 => Ok(Node::Split { predictor: u32_at(1), left: u32_at(5), right: u32_at(9), threshold: f64_at(13) }),
                    1 => Ok(Node::Leaf { prediction: f64_at(1), count: u64::from_le_bytes(rec[9..17].try_into().unwrap()) }),
                    t => Err(bad(&format!("unknown node tag {t}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = header.l.map(NeighborhoodSpec::new).transpose()?;
        let tree = RegressionTree::from_nodes(nodes, header.n_predictors, spec)?;
        Ok(ModelFile { tree, fit_config: header.fit_config, cv: header.cv, training_digest: header.training_digest })
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GreyImage;
    use crate::tree::fit_on_image;

    #[test]
    fn round_trip() {
        let img = GreyImage::from_fn(40, 40, |r, c| ((r * 31 + c * 17) % 23) as f64);
        let spec = NeighborhoodSpec::new(2).unwrap();
        let cfg = FitConfig { min_leaf_size: 5, ..FitConfig::default() };
        let tree = fit_on_image(&img, spec, &cfg).unwrap();
        let mut m = ModelFile::new(tree);
        m.fit_config = Some(cfg);
        m.training_digest = Some(hex(&img.digest()));
        let bytes = m.to_bytes();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = ModelFile::new(RegressionTree::single_leaf(0.5, 10, 4, Some(NeighborhoodSpec::new(1).unwrap())));
        let bytes = m.to_bytes();
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&wrong), Err(Error::Format(_))));
        let mut tag = bytes.clone();
        let n = tag.len();
        tag[n - 25] = 7;
        assert!(ModelFile::from_bytes(&tag).is_err());
    }
}
