//! CSV and key=value persistence: deterministic column order, full-precision
//! reals, header always present.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::OpeError;
use crate::hard_instance::HardInstanceBundle;
use crate::mdp::RewardDist;
use crate::sampler::{OfflineDataset, SampleRecord};
use crate::Result;

/// Renders a real with 17 significant decimal digits, enough to round-trip
/// an f64.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OpeError + '_ {
    move |source| OpeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OpeError + '_ {
    move |source| OpeError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Writes rows under a fixed header. Rows must match the schema width.
pub fn emit_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(OpeError::invalid(format!(
            "row width {} does not match schema width {}",
            bad.len(),
            header.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    writer.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        writer.write_record(row).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `key=value` lines in the given order.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for (k, v) in pairs {
        writeln!(file, "{k}={v}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Short digest of the resolved configuration, recorded in every summary.
pub fn config_hash(lines: &[(String, String)]) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in lines {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Dataset CSV schema.
pub const DATASET_HEADER: [&str; 5] = ["idx", "state", "action", "reward", "next_state"];

/// Writes a dataset plus its `.meta` sidecar (`gamma=`, `d=`, `seed=`, `n=`,
/// `instance_hash=`).
pub fn write_dataset(path: &Path, ds: &OfflineDataset, gamma: f64, d: usize) -> Result<()> {
    let rows: Vec<Vec<String>> = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            vec![
                i.to_string(),
                rec.state.to_string(),
                rec.action.to_string(),
                format_real(rec.reward),
                rec.next_state.to_string(),
            ]
        })
        .collect();
    emit_csv(path, &DATASET_HEADER, &rows)?;
    write_kv(
        &meta_path(path),
        &[
            ("gamma".into(), format_real(gamma)),
            ("d".into(), d.to_string()),
            ("seed".into(), ds.seed.to_string()),
            ("n".into(), ds.n().to_string()),
            ("instance_hash".into(), ds.instance_hash.clone()),
        ],
    )
}

pub fn meta_path(dataset_path: &Path) -> std::path::PathBuf {
    let mut os = dataset_path.as_os_str().to_owned();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| OpeError::invalid(format!("bad {what} value '{raw}' in dataset csv")))
}

/// Reads a dataset CSV and its sidecar back into an [`OfflineDataset`].
pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    {
        let got = reader.headers().map_err(csv_err(path))?;
        if got.iter().collect::<Vec<_>>() != DATASET_HEADER {
            return Err(OpeError::invalid(format!(
                "unexpected dataset header {:?}",
                got
            )));
        }
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        let reward: f64 = parse_field(&row[3], "reward")?;
        if !(-1.0..=1.0).contains(&reward) {
            return Err(OpeError::invalid(format!(
                "reward {reward} outside [-1, 1] in dataset csv"
            )));
        }
        records.push(SampleRecord {
            state: parse_field(&row[1], "state")?,
            action: parse_field(&row[2], "action")?,
            reward,
            next_state: parse_field(&row[4], "next_state")?,
        });
    }
    let meta = read_kv(&meta_path(path))?;
    let get = |key: &str| -> Result<&String> {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| OpeError::invalid(format!("dataset meta missing key '{key}'")))
    };
    let seed: u64 = parse_field(get("seed")?, "seed")?;
    let n: usize = parse_field(get("n")?, "n")?;
    if n != records.len() {
        return Err(OpeError::invalid(format!(
            "dataset meta says n={n} but csv has {} records",
            records.len()
        )));
    }
    Ok(OfflineDataset {
        records,
        seed,
        instance_hash: get("instance_hash")?.clone(),
    })
}

/// Reads `key=value` lines, preserving order.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            OpeError::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Feature-table CSV: `state,action,phi_0,...,phi_{d-1}`.
pub fn write_features(path: &Path, fs_table: &crate::features::FeatureSystem) -> Result<()> {
    let mut header: Vec<String> = vec!["state".into(), "action".into()];
    for j in 0..fs_table.dim {
        header.push(format!("phi_{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (s, acts) in fs_table.phi.iter().enumerate() {
        for (a, phi) in acts.iter().enumerate() {
            let mut row = vec![s.to_string(), a.to_string()];
            row.extend(phi.iter().map(|&x| format_real(x)));
            rows.push(row);
        }
    }
    emit_csv(path, &header_refs, &rows)
}

/// Reads a feature-table CSV produced by [`write_features`]. States must have
/// contiguous ids; actions contiguous per state.
pub fn read_features(path: &Path) -> Result<crate::features::FeatureSystem> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let dim = {
        let header = reader.headers().map_err(csv_err(path))?;
        if header.len() < 3 || &header[0] != "state" || &header[1] != "action" {
            return Err(OpeError::invalid("unexpected feature csv header"));
        }
        header.len() - 2
    };
    let mut phi: Vec<Vec<nalgebra::DVector<f64>>> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(path))?;
        let s: usize = parse_field(&row[0], "state")?;
        let a: usize = parse_field(&row[1], "action")?;
        let values: Vec<f64> = (0..dim)
            .map(|j| parse_field(&row[2 + j], "phi"))
            .collect::<Result<_>>()?;
        if s >= phi.len() {
            phi.resize_with(s + 1, Vec::new);
        }
        if a != phi[s].len() {
            return Err(OpeError::invalid(format!(
                "feature csv rows out of order at state {s} action {a}"
            )));
        }
        phi[s].push(nalgebra::DVector::from_vec(values));
    }
    crate::features::FeatureSystem::new(dim, phi)
}

/// Instance description CSV: `state_id,group,l,i,reward_spec,next_state`.
pub const INSTANCE_HEADER: [&str; 6] = ["state_id", "group", "l", "i", "reward_spec", "next_state"];

fn reward_spec_string(dist: &RewardDist) -> String {
    if dist.support.len() == 1 {
        format!("point={}", format_real(dist.support[0].0))
    } else {
        format!("bernoulli_pm1={}", format_real(dist.support[0].1))
    }
}

pub fn write_instance_table(path: &Path, bundle: &HardInstanceBundle) -> Result<()> {
    let rows: Vec<Vec<String>> = bundle
        .labels
        .iter()
        .enumerate()
        .map(|(s, label)| {
            vec![
                s.to_string(),
                label.group.to_string(),
                label.level.to_string(),
                label.index.to_string(),
                reward_spec_string(&bundle.mdp.actions[s][0].reward),
                bundle.successor(s).to_string(),
            ]
        })
        .collect();
    emit_csv(path, &INSTANCE_HEADER, &rows)
}
