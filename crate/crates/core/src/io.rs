//! CSV and JSON files for bars, samples and dataset metadata.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! back reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::data::{Dataset, DatasetMeta, MarketClass, PriceBar, StockSample, FACTOR_NAMES, N_FACTORS};
use crate::error::{Error, Result};

pub const BARS_HEADER: [&str; 8] = ["stock_id", "day", "open", "close", "high", "low", "volume", "vwap"];

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

pub fn write_bars(path: &Path, bars: &[PriceBar]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for b in bars {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bars(path: &Path) -> Result<Vec<PriceBar>> {
    require(path)?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != BARS_HEADER {
        return Err(Error::Parse(format!(
            "{}: expected header {}, found {}",
            path.display(),
            BARS_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        let bar: PriceBar = row?;
        bar.validate()?;
        out.push(bar);
    }
    Ok(out)
}

pub fn sample_header(window: usize, with_provenance: bool) -> Vec<String> {
    let mut h = vec!["stock_id".to_string(), "day".to_string()];
    for name in FACTOR_NAMES {
        for t in 0..window {
            h.push(format!("{name}_{t}"));
        }
    }
    h.extend(["y_e", "y_m", "r", "m"].map(String::from));
    if with_provenance {
        h.push("provenance".into());
    }
    h
}

/// Writes samples; `provenance`, when given, adds one string column per row.
pub fn write_samples(path: &Path, samples: &[StockSample], window: usize, provenance: Option<&[String]>) -> Result<()> {
    if let Some(p) = provenance {
        if p.len() != samples.len() {
            return Err(Error::invalid("provenance length differs from sample count"));
        }
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(sample_header(window, provenance.is_some()))?;
    let mut rec: Vec<String> = Vec::with_capacity(N_FACTORS * window + 7);
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != N_FACTORS * window {
            return Err(Error::shape("write_samples", &[s.features.len()], &[N_FACTORS * window]));
        }
        rec.clear();
        rec.push(s.stock_id.to_string());
        rec.push(s.day.to_string());
        rec.extend(s.features.iter().map(|v| v.to_string()));
        rec.push(s.y_e.to_string());
        rec.push(s.y_m.index().to_string());
        rec.push(s.r.to_string());
        rec.push(s.m.to_string());
        if let Some(p) = provenance {
            rec.push(p[i].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {what} from {field:?}")))
}

/// Reads a samples CSV written by [`write_samples`]; returns the window length too.
pub fn read_samples(path: &Path) -> Result<(Vec<StockSample>, usize)> {
    require(path)?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?.clone();
    let has_prov = header.iter().last() == Some("provenance");
    let n_features = header.len() - 6 - usize::from(has_prov);
    if n_features == 0 || n_features % N_FACTORS != 0 || header.get(0) != Some("stock_id") {
        return Err(Error::Parse(format!("{}: not a samples file", path.display())));
    }
    let window = n_features / N_FACTORS;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let features = (0..n_features)
            .map(|k| parse::<f64>(&row[2 + k], "feature", line))
            .collect::<Result<Vec<_>>>()?;
        let base = 2 + n_features;
        out.push(StockSample {
            stock_id: parse(&row[0], "stock_id", line)?,
            day: parse(&row[1], "day", line)?,
            features,
            y_e: parse(&row[base], "y_e", line)?,
            y_m: MarketClass::from_index(parse(&row[base + 1], "y_m", line)?)?,
            r: parse(&row[base + 2], "r", line)?,
            m: parse(&row[base + 3], "m", line)?,
        });
    }
    Ok((out, window))
}

/// `samples.csv` -> `samples.meta.json`.
pub fn sidecar_path(samples_path: &Path) -> PathBuf {
    samples_path.with_extension("meta.json")
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_samples(path, &ds.samples, ds.window, None)?;
    write_json(&sidecar_path(path), &ds.meta())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (samples, window) = read_samples(path)?;
    let meta: DatasetMeta = read_json(&sidecar_path(path))?;
    if meta.window != window {
        return Err(Error::Parse(format!(
            "sidecar window {} differs from samples window {window}",
            meta.window
        )));
    }
    let market_by_day: BTreeMap<u32, f64> = samples.iter().map(|s| (s.day, s.m)).collect();
    Ok(Dataset {
        samples,
        split: meta.split,
        thresholds: meta.thresholds,
        norm: meta.norm,
        window,
        skipped: meta.skipped,
        market_by_day,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_samples, normalize_features, DatasetSplit};
    use crate::synth::{generate_synthetic_market, SynthParams};

    #[test]
    fn bars_and_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bars = generate_synthetic_market(3, 70, 5, &SynthParams::default()).unwrap();
        let bp = dir.path().join("bars.csv");
        write_bars(&bp, &bars).unwrap();
        assert_eq!(read_bars(&bp).unwrap(), bars);

        let split = DatasetSplit::for_series(70, 10).unwrap();
        let ds = normalize_features(build_samples(&bars, 10, split).unwrap()).unwrap();
        let sp = dir.path().join("samples.csv");
        save_dataset(&sp, &ds).unwrap();
        let back = load_dataset(&sp).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.thresholds, ds.thresholds);
        assert_eq!(back.norm, ds.norm);
    }

    #[test]
    fn missing_file_is_named() {
        let err = read_bars(Path::new("/nonexistent/bars.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/bars.csv"));
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_bars(&p).is_err());
    }
}
