use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// One subject's continuous multichannel series.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording<T> {
    pub subject_id: String,
    pub label: usize,
    pub sampling_rate_hz: f64,
    /// `C × S`, channel-major.
    pub series: Tensor<T>,
}

impl<T: Scalar> Recording<T> {
    pub fn new(subject_id: impl Into<String>, label: usize, sampling_rate_hz: f64, series: Tensor<T>) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() || subject_id.contains([',', '\n', '\t', '\r']) {
            return Err(Error::Parameter(format!("invalid subject id {subject_id:?}")));
        }
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return Err(Error::Parameter(format!("sampling rate {sampling_rate_hz} must be positive")));
        }
        if series.rank() != 2 || series.rows() == 0 {
            return Err(Error::Parameter(format!(
                "series must be channels × samples, got {:?}",
                series.shape()
            )));
        }
        Ok(Self {
            subject_id,
            label,
            sampling_rate_hz,
            series,
        })
    }

    pub fn channels(&self) -> usize {
        self.series.rows()
    }

    pub fn samples(&self) -> usize {
        self.series.cols()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        self.series.row(c)
    }
}

/// A windowed `T × C` sample (time-major) with its subject provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub subject_id: String,
    pub label: usize,
    pub data: Tensor<T>,
    pub window_index: usize,
}

impl<T: Scalar> Segment<T> {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes one recording: a UTF-8 header line
/// `subject_id,label,channels,rate_hz,samples` followed by little-endian
/// `f32` samples, channel-major.
pub fn write_recording<T: Scalar>(path: &Path, rec: &Recording<T>) -> Result<()> {
    let mut out = Vec::with_capacity(64 + rec.series.len() * 4);
    writeln!(
        out,
        "{},{},{},{},{}",
        rec.subject_id,
        rec.label,
        rec.channels(),
        rec.sampling_rate_hz,
        rec.samples()
    )?;
    for v in rec.series.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_recording<T: Scalar>(path: &Path) -> Result<Recording<T>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.trim_end_matches(['\n', '\r']).split(',').collect();
    if fields.len() != 5 {
        return Err(format_err(path, format!("header has {} fields, expected 5", fields.len())));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| format_err(path, format!("bad {what} {:?}", fields[i])))
    };
    let label = num(1, "label")?;
    let channels = num(2, "channel count")?;
    let samples = num(4, "sample count")?;
    let rate: f64 = fields[3]
        .parse()
        .map_err(|_| format_err(path, format!("bad rate {:?}", fields[3])))?;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != channels * samples * 4 {
        return Err(format_err(
            path,
            format!("payload holds {} bytes, expected {}", raw.len(), channels * samples * 4),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Recording::new(fields[0], label, rate, Tensor::new(vec![channels, samples], data)?)
}

pub const MANIFEST: &str = "manifest.tsv";

/// Renders the manifest text for a set of recordings (`filename\tlabel`).
pub fn manifest_text<T: Scalar>(recs: &[Recording<T>]) -> String {
    let mut s = String::from("filename\tlabel\n");
    for r in recs {
        s.push_str(&format!("{}.rec\t{}\n", r.subject_id, r.label));
    }
    s
}

/// Writes every recording plus `manifest.tsv` into `dir`.
pub fn write_dataset<T: Scalar>(dir: &Path, recs: &[Recording<T>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in recs {
        write_recording(&dir.join(format!("{}.rec", r.subject_id)), r)?;
    }
    fs::write(dir.join(MANIFEST), manifest_text(recs))?;
    Ok(())
}

/// Loads the recordings listed in `dir/manifest.tsv`, checking that each
/// file's label agrees with the manifest.
pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Vec<Recording<T>>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut recs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| format_err(&manifest_path, format!("line {} lacks a tab", lineno + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format_err(&manifest_path, format!("line {}: bad label", lineno + 1)))?;
        let rec = read_recording(&dir.join(file))?;
        if rec.label != label {
            return Err(format_err(
                &manifest_path,
                format!("{file}: manifest label {label} != file label {}", rec.label),
            ));
        }
        recs.push(rec);
    }
    Ok(recs)
}
