//! Metrics persistence and cross-run reporting.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::MetricsRecord;

/// Metric columns emitted by [`report`], in file order.
pub const METRIC_KEYS: [&str; 7] = [
    "lr_mult",
    "train_loss",
    "val_top1",
    "group_norm",
    "head_gain",
    "mcbr_train",
    "mcbr_val",
];

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn record_value(r: &MetricsRecord, key: &str) -> Option<f64> {
    Some(match key {
        "lr_mult" => r.lr_mult,
        "train_loss" => r.train_loss,
        "val_top1" => r.val_top1,
        "group_norm" => r.group_norm,
        "head_gain" => r.head_gain,
        "mcbr_train" => r.mcbr_train,
        "mcbr_val" => r.mcbr_val,
        _ => return None,
    })
}

/// Writes one CSV per metric into `out`: a row per epoch, a column per run.
/// Missing epochs (a run that stopped early) are left empty.
pub fn report(runs: &[(String, Vec<MetricsRecord>)], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let epochs = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut written = Vec::new();
    for key in METRIC_KEYS {
        let path = out.join(format!("{key}.csv"));
        let mut s = String::from("epoch");
        for (name, _) in runs {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for e in 0..epochs {
            s.push_str(&e.to_string());
            for (_, recs) in runs {
                s.push(',');
                if let Some(v) = recs.get(e).and_then(|r| record_value(r, key)) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
