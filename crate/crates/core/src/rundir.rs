//! Run directories: config snapshot, per-epoch metrics CSV and a binary
//! parameter checkpoint.
//!
//! Checkpoint layout (little-endian): magic `CPSLCKPT`, `u32` version, `u32`
//! entry count, then per entry `u32` name length, UTF-8 name, `u32` rank,
//! `u32` per axis, and the `f64` values.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::methods::{EpochRecord, RunResult, TrainConfig};
use crate::model::SegNet;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STAGE1_METRICS_FILE: &str = "stage1_metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_HEADER: &str = "epoch,lr,l_s,l_cps_l,l_cps_u,l_cpc,miou,overlap";

const MAGIC: &[u8; 8] = b"CPSLCKPT";
const VERSION: u32 = 1;

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let overlap = r.overlap.map_or(String::new(), |o| format!("{o:.6}"));
        let _ = writeln!(
            out,
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch, r.lr, r.l_s, r.l_cps_labeled, r.l_cps_unlabeled, r.l_cpc, r.miou, overlap
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(
            "metrics file has an unexpected header".into(),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!(
                    "metrics row {line:?} has {} fields",
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number {s:?} in metrics")))
            };
            Ok(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad epoch {:?}", f[0])))?,
                lr: num(f[1])?,
                l_s: num(f[2])?,
                l_cps_labeled: num(f[3])?,
                l_cps_unlabeled: num(f[4])?,
                l_cpc: num(f[5])?,
                miou: num(f[6])?,
                overlap: if f[7].is_empty() {
                    None
                } else {
                    Some(num(f[7])?)
                },
            })
        })
        .collect()
}

fn put_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes named arrays in order.
pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    put_u32(&mut out, VERSION)?;
    put_u32(&mut out, entries.len() as u32)?;
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        put_u32(&mut out, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(&mut out, d as u32)?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = get_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut data = vec![0.0; shape.iter().product()];
        let mut b = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

fn net_entries<'a>(prefix: &str, net: &'a SegNet) -> Vec<(String, &'a Tensor)> {
    net.params()
        .iter()
        .map(|p| (format!("{prefix}.{}", p.name), &p.value))
        .collect()
}

/// Rebuilds a network of `config` from checkpoint entries under `prefix`.
pub fn load_network(
    entries: &[(String, Tensor)],
    prefix: &str,
    cfg: &TrainConfig,
) -> Result<SegNet> {
    let mut net = SegNet::new(cfg.model_config(0))?;
    for p in net.params_mut() {
        let key = format!("{prefix}.{}", p.name);
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {key}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "{key}: checkpoint shape {:?}, model {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(net)
}

/// Writes config snapshot, metrics and checkpoint into `dir`.
pub fn write_run_dir(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), result.config.to_text())?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&result.records))?;
    if !result.stage1.is_empty() {
        fs::write(dir.join(STAGE1_METRICS_FILE), metrics_csv(&result.stage1))?;
    }
    let mut entries = net_entries("net1", &result.net1);
    if let Some(net2) = &result.net2 {
        entries.extend(net_entries("net2", net2));
    }
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &entries)
}

pub fn read_run_config(dir: &Path) -> Result<TrainConfig> {
    TrainConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap();
        let b = Tensor::scalar(7.0);
        let path = dir.path().join("c.bin");
        write_checkpoint(&path, &[("a".into(), &a), ("b.x".into(), &b)]).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.x".to_string(), b)]);
        fs::write(&path, b"CPSLCKPT\x09\x00\x00\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn metrics_round_trip() {
        let rec = EpochRecord {
            epoch: 3,
            lr: 0.01,
            l_s: 0.5,
            l_cps_labeled: 0.25,
            l_cps_unlabeled: 0.125,
            l_cpc: 0.0,
            miou: 0.75,
            overlap: None,
        };
        let two = [
            rec,
            EpochRecord {
                overlap: Some(0.5),
                ..rec
            },
        ];
        let text = metrics_csv(&two);
        assert!(text.starts_with("epoch,lr,l_s,l_cps_l,l_cps_u,l_cpc,miou,overlap\n3,"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), two);
        assert!(parse_metrics_csv("a,b\n").is_err());
    }
}
