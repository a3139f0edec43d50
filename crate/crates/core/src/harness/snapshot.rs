use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::env::SystemConfig;

use super::HarnessError;

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &str = "eshare-policy";

/// SHA-256 of the canonical JSON form of a configuration, as hex.
pub fn config_hash(config: &SystemConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A learned policy as text: a versioned header followed by one
/// `state,action` row per table entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    pub version: u32,
    pub config_hash: String,
    pub solver: String,
    pub rows: Vec<(String, String)>,
}

impl PolicySnapshot {
    pub fn new(config: &SystemConfig, solver: &str, rows: Vec<(String, String)>) -> Self {
        Self { version: SNAPSHOT_VERSION, config_hash: config_hash(config), solver: solver.to_string(), rows }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        writeln!(out, "{MAGIC} v{}", self.version)?;
        writeln!(out, "config-sha256 {}", self.config_hash)?;
        writeln!(out, "solver {}", self.solver)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "action"])?;
        for (s, a) in &self.rows {
            w.write_record([s, a])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self, HarnessError> {
        let mut header = |prefix: &str| -> Result<String, HarnessError> {
            let mut line = String::new();
            input.read_line(&mut line)?;
            line.trim_end()
                .strip_prefix(prefix)
                .map(str::to_string)
                .ok_or_else(|| HarnessError::Snapshot(format!("expected a line starting with {prefix:?}")))
        };
        let version: u32 = header(&format!("{MAGIC} v"))?
            .parse()
            .map_err(|_| HarnessError::Snapshot("bad version".into()))?;
        if version != SNAPSHOT_VERSION {
            return Err(HarnessError::Snapshot(format!("unsupported snapshot version {version}")));
        }
        let config_hash = header("config-sha256 ")?;
        let solver = header("solver ")?;
        let rows = csv::Reader::from_reader(input)
            .records()
            .map(|r| {
                let r = r?;
                Ok((r.get(0).unwrap_or_default().to_string(), r.get(1).unwrap_or_default().to_string()))
            })
            .collect::<Result<_, HarnessError>>()?;
        Ok(Self { version, config_hash, solver, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ArrivalModel, ConversionFunction, CostWeights};

    fn config(d: u32) -> SystemConfig {
        SystemConfig {
            nodes: 1,
            d_max: d,
            e_max: 2,
            conversion: ConversionFunction::default(),
            cost_weights: CostWeights::default(),
            arrival: ArrivalModel::iid_poisson(&[0.3], 1.0),
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let h = config_hash(&config(2));
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&config(2)));
        assert_ne!(h, config_hash(&config(3)));
    }

    #[test]
    fn snapshot_round_trip() {
        let snap = PolicySnapshot::new(&config(2), "ql-eps", vec![("q=0 e=1".into(), "0".into()), ("q=1, e=2".into(), "1".into())]);
        let mut buf = Vec::new();
        snap.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("eshare-policy v1\nconfig-sha256 "));
        assert_eq!(PolicySnapshot::read(buf.as_slice()).unwrap(), snap);
        assert!(PolicySnapshot::read("garbage\n".as_bytes()).is_err());
    }
}
