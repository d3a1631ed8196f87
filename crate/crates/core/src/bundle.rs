//! Calibration bundle file.
//!
//! Layout (integers little-endian, floats IEEE-754 little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `STSBUNDL` |
//! | 4 | format version (1) |
//! | 4 | manifest length `h` |
//! | h | UTF-8 JSON [`BundleManifest`] |
//! | 8 | model length `m` (0 when absent) |
//! | m | embedded model file |
//! | 1 | 1 if a reference cdf follows, else 0 |
//! | 72 + 8 + 8c | `q_l, q_u, p, lambda_l, lambda_u, r_p, r_1-p, r_ql, r_1-qu`, count `c`, sorted residuals |
//! | 8 + 8n | count `n`, Phase I statistics in input order |
//! | 8 + 8t | count `t`, largest pooled Phase I SMS values, descending |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelFile;
use crate::monitor::{CalibrationBundle, LimitRule, Limits};
use crate::refcdf::ReferenceCdf;
use crate::sms::SmsConfig;

pub const BUNDLE_MAGIC: &[u8; 8] = b"STSBUNDL";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub sms: SmsConfig,
    pub alpha: f64,
    pub rule: LimitRule,
    pub limits: Limits,
    pub control_limit: f64,
    pub diag_threshold: f64,
    pub n_d: usize,
    pub m_sms: usize,
    pub n_phase1: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub model_digest: Option<String>,
    pub reference_source: String,
    pub reference_count: Option<usize>,
}

impl CalibrationBundle {
    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            schema_version: BUNDLE_VERSION,
            sms: self.sms,
            alpha: self.alpha,
            rule: self.rule,
            limits: self.limits,
            control_limit: self.control_limit(),
            diag_threshold: self.diag_threshold,
            n_d: self.n_d,
            m_sms: self.m_sms,
            n_phase1: self.phase1_stats.len(),
            image_rows: self.image_rows,
            image_cols: self.image_cols,
            model_digest: self.model.as_ref().map(|m| m.digest()),
            reference_source: self.reference_source.clone(),
            reference_count: self.reference.as_ref().map(|r| r.count()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        let model = self.model.as_ref().map(|m| m.to_bytes()).unwrap_or_default();
        out.extend_from_slice(&(model.len() as u64).to_le_bytes());
        out.extend_from_slice(&model);
        match &self.reference {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                for v in [r.q_lower(), r.q_upper(), r.p(), r.lambda_lower(), r.lambda_upper(), r.r_p(), r.r_1mp(), r.r_ql(), r.r_1mqu()] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_f64s(&mut out, r.sorted_residuals());
            }
        }
        put_f64s(&mut out, &self.phase1_stats);
        put_f64s(&mut out, &self.diag_tail);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != BUNDLE_MAGIC {
            return Err(Error::Format("bundle: missing magic".into()));
        }
        let version = rd.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!("bundle: unsupported version {version}")));
        }
        let hlen = rd.u32()? as usize;
        let manifest: BundleManifest =
            serde_json::from_slice(rd.take(hlen)?).map_err(|e| Error::Format(format!("bundle manifest: {e}")))?;
        let mlen = rd.u64()? as usize;
        let model = if mlen == 0 { None } else { Some(ModelFile::from_bytes(rd.take(mlen)?)?) };
        if let (Some(m), Some(d)) = (&model, &manifest.model_digest) {
            if &m.digest() != d {
                return Err(Error::Format("bundle: embedded model does not match its digest".into()));
            }
        }
        let reference = match rd.take(1)?[0] {
            0 => None,
            1 => {
                let mut p = [0.0; 9];
                for v in p.iter_mut() {
                    *v = rd.f64()?;
                }
                let sorted = rd.f64s()?;
                Some(ReferenceCdf::from_parts(sorted, p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8])?)
            }
            t => return Err(Error::Format(format!("bundle: bad reference flag {t}"))),
        };
        let phase1_stats = rd.f64s()?;
        let diag_tail = rd.f64s()?;
        if rd.pos != bytes.len() {
            return Err(Error::Format("bundle: trailing bytes".into()));
        }
        if phase1_stats.len() != manifest.n_phase1 {
            return Err(Error::Format("bundle: Phase I count does not match manifest".into()));
        }
        manifest.sms.validate()?;
        Ok(CalibrationBundle {
            model,
            sms: manifest.sms,
            reference,
            reference_source: manifest.reference_source,
            alpha: manifest.alpha,
            rule: manifest.rule,
            limits: manifest.limits,
            phase1_stats,
            diag_threshold: manifest.diag_threshold,
            n_d: manifest.n_d,
            m_sms: manifest.m_sms,
            diag_tail,
            image_rows: manifest.image_rows,
            image_cols: manifest.image_cols,
        })
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("bundle: truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("bundle: bad length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{GreyImage, NeighborhoodSpec};
    use crate::monitor::{calibrate, CalibrationOptions, ReferenceSource};
    use crate::simulator::{in_control_image, SarParams};
    use crate::sms::SmsKind;
    use crate::tree::{fit_on_image, FitConfig};

    fn images(n: u64) -> Vec<GreyImage> {
        (0..n).map(|s| in_control_image(&SarParams { rows: 40, cols: 40, seed: 50 + s, ..Default::default() }).unwrap()).collect()
    }

    fn model() -> ModelFile {
        let train = in_control_image(&SarParams { rows: 60, cols: 60, seed: 1, ..Default::default() }).unwrap().standardize().unwrap();
        let cfg = FitConfig { min_leaf_size: 20, ..FitConfig::default() };
        ModelFile::new(fit_on_image(&train, NeighborhoodSpec::new(1).unwrap(), &cfg).unwrap())
    }

    #[test]
    fn round_trip_for_every_kind() {
        let imgs = images(6);
        for (kind, w) in [(SmsKind::Ad, 5), (SmsKind::Bp, 3), (SmsKind::Epwma, 5), (SmsKind::Epwmv, 5)] {
            let m = if kind.uses_residuals() { Some(model()) } else { None };
            let mut opts = CalibrationOptions::new(SmsConfig::new(kind, w).unwrap());
            opts.reference = ReferenceSource::PhaseIFirst(4);
            let b = calibrate(&imgs, m, &opts).unwrap();
            let bytes = b.to_bytes();
            let back = CalibrationBundle::from_bytes(&bytes).unwrap();
            assert_eq!(back, b, "{kind}");
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.manifest().reference_count.is_some(), kind == SmsKind::Ad);
        }
    }

    #[test]
    fn corrupt_bundles_are_format_errors() {
        let b = calibrate(&images(4), Some(model()), &CalibrationOptions::new(SmsConfig::new(SmsKind::Bp, 3).unwrap())).unwrap();
        let bytes = b.to_bytes();
        let fmt = |r: Result<CalibrationBundle>| matches!(r, Err(Error::Format(_)));
        assert!(fmt(CalibrationBundle::from_bytes(&bytes[..bytes.len() - 1])));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(fmt(CalibrationBundle::from_bytes(&extra)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(fmt(CalibrationBundle::from_bytes(&magic)));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(fmt(CalibrationBundle::from_bytes(&version)));
        // Flip a byte inside the embedded model's node table.
        let mut model = bytes.clone();
        let n = model.len();
        let pos = n - 8 * (b.phase1_stats.len() + b.diag_tail.len() + 2) - 1 - 10;
        model[pos] ^= 0x55;
        assert!(CalibrationBundle::from_bytes(&model).is_err());
    }
}
