//! On-disk formats.
//!
//! Images and sinograms are raw little-endian `f32` blobs with a sidecar
//! `.hdr` text file of `key value` lines. Model files (decomposer, denoiser)
//! keep a text header ending in `end_header` followed by raw little-endian
//! `f64` data in the same file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dect_core::decomp::{InputScaling, PolynomialDecomposer};
use dect_core::denoiser::{ConvLayer, DenoiserParams};
use dect_core::train::EpochRecord;
use dect_core::{EnergySinogram, MaterialImage};

use crate::error::{CliError, CliResult};

const END_HEADER: &[u8] = b"end_header\n";

/// `foo.raw` -> `foo.hdr`.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(format!("creating {}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(CliError::io(format!("writing {}", path.display())))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))
}

/// Parses `key value...` lines, skipping blanks and `#` comments.
pub fn parse_header(path: &Path, text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        map.insert(key.to_string(), value.trim().to_string());
    }
    if map.is_empty() {
        return Err(CliError::format(path, "empty header"));
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(path: &Path, map: &BTreeMap<String, String>, key: &str) -> CliResult<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| CliError::format(path, format!("header lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| CliError::format(path, format!("`{key}` has unreadable value {raw:?}")))
}

fn expect(path: &Path, map: &BTreeMap<String, String>, key: &str, value: &str) -> CliResult<()> {
    match map.get(key) {
        Some(v) if v == value => Ok(()),
        other => Err(CliError::format(
            path,
            format!("expected `{key} {value}`, found {other:?}"),
        )),
    }
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn f32_values(path: &Path, bytes: &[u8], expected: usize) -> CliResult<Vec<f64>> {
    if bytes.len() != 4 * expected {
        return Err(CliError::format(
            path,
            format!("expected {expected} f32 values, file holds {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_values(path: &Path, bytes: &[u8], expected: usize) -> CliResult<Vec<f64>> {
    if bytes.len() != 8 * expected {
        return Err(CliError::format(
            path,
            format!("expected {expected} f64 values, found {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Splits a model file into its text header and binary payload.
fn split_model_file<'a>(path: &Path, bytes: &'a [u8]) -> CliResult<(&'a str, &'a [u8])> {
    let pos = bytes
        .windows(END_HEADER.len())
        .position(|w| w == END_HEADER)
        .ok_or_else(|| CliError::format(path, "no end_header line"))?;
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| CliError::format(path, "header is not UTF-8"))?;
    Ok((header, &bytes[pos + END_HEADER.len()..]))
}

pub fn write_image(path: &Path, image: &MaterialImage) -> CliResult<()> {
    let header = format!(
        "# material image: two channel-major f32le planes\nwidth {}\nheight {}\npixel_size {:?}\nchannels 2\ndtype f32le\n",
        image.width(),
        image.height(),
        image.pixel_size()
    );
    write_file(path, &f32_bytes(image.as_slice().iter().copied()))?;
    write_file(&sidecar(path), header.as_bytes())
}

pub fn read_image(path: &Path) -> CliResult<MaterialImage> {
    let hdr_path = sidecar(path);
    let text = String::from_utf8(read_file(&hdr_path)?).map_err(|_| CliError::format(&hdr_path, "not UTF-8"))?;
    let map = parse_header(&hdr_path, &text)?;
    expect(&hdr_path, &map, "dtype", "f32le")?;
    expect(&hdr_path, &map, "channels", "2")?;
    let width: usize = field(&hdr_path, &map, "width")?;
    let height: usize = field(&hdr_path, &map, "height")?;
    let pixel_size: f64 = field(&hdr_path, &map, "pixel_size")?;
    let data = f32_values(path, &read_file(path)?, 2 * width * height)?;
    Ok(MaterialImage::from_raw_unchecked(width, height, pixel_size, data)?)
}

/// Stores the detected counts of both sources; log data and weights are
/// rebuilt from them and `i0` on load.
/// `clamped` counts the draws raised to the one-photon floor.
pub fn write_sinogram(path: &Path, y: &EnergySinogram, spacing: f64, i0: f64, clamped: usize) -> CliResult<()> {
    let header = format!(
        "# energy sinogram: detected counts, two angle-major f32le planes (low then high source)\n\
         n_angles {}\nn_detectors {}\nspacing {:?}\ni0 {:?}\nclamped_counts {clamped}\nchannels 2\nquantity counts\ndtype f32le\n",
        y.n_angles(),
        y.n_detectors(),
        spacing,
        i0
    );
    let counts = y.weights(0).iter().chain(y.weights(1)).copied();
    write_file(path, &f32_bytes(counts))?;
    write_file(&sidecar(path), header.as_bytes())
}

/// Sinogram plus the detector spacing and `i0` recorded with it.
pub struct StoredSinogram {
    pub sinogram: EnergySinogram,
    pub spacing: f64,
    pub i0: f64,
    pub clamped: usize,
}

pub fn read_sinogram(path: &Path) -> CliResult<StoredSinogram> {
    let hdr_path = sidecar(path);
    let text = String::from_utf8(read_file(&hdr_path)?).map_err(|_| CliError::format(&hdr_path, "not UTF-8"))?;
    let map = parse_header(&hdr_path, &text)?;
    expect(&hdr_path, &map, "dtype", "f32le")?;
    expect(&hdr_path, &map, "quantity", "counts")?;
    expect(&hdr_path, &map, "channels", "2")?;
    let n_angles: usize = field(&hdr_path, &map, "n_angles")?;
    let n_det: usize = field(&hdr_path, &map, "n_detectors")?;
    let spacing: f64 = field(&hdr_path, &map, "spacing")?;
    let i0: f64 = field(&hdr_path, &map, "i0")?;
    let clamped: usize = if map.contains_key("clamped_counts") {
        field(&hdr_path, &map, "clamped_counts")?
    } else {
        0
    };
    let n = n_angles * n_det;
    let counts = f32_values(path, &read_file(path)?, 2 * n)?;
    if counts.iter().any(|c| c.is_nan() || *c <= 0.0) {
        return Err(CliError::format(path, "counts must be positive"));
    }
    let (lo, hi) = counts.split_at(n);
    let log = |c: &[f64]| -> Vec<f64> { c.iter().map(|v| -(v / i0).ln()).collect() };
    let sinogram = EnergySinogram::new(n_angles, n_det, [log(lo), log(hi)], [lo.to_vec(), hi.to_vec()])?;
    Ok(StoredSinogram {
        sinogram,
        spacing,
        i0,
        clamped,
    })
}

pub fn write_decomposer(path: &Path, d: &PolynomialDecomposer) -> CliResult<()> {
    let (di, dj) = d.degrees();
    let s = d.scaling();
    let mut bytes = format!(
        "dect-decomposer 1\n\
         # p_c = sum_ij theta[(i * (degree_j + 1) + j) * 2 + c] u1^i u2^j, u = (y - center) / half_range\n\
         degree_i {di}\ndegree_j {dj}\ncenter {:?} {:?}\nhalf_range {:?} {:?}\ncoefficients {}\n",
        s.center[0],
        s.center[1],
        s.half_range[0],
        s.half_range[1],
        d.coefficients().len()
    )
    .into_bytes();
    bytes.extend_from_slice(END_HEADER);
    bytes.extend(f64_bytes(d.coefficients()));
    write_file(path, &bytes)
}

fn pair(path: &Path, map: &BTreeMap<String, String>, key: &str) -> CliResult<[f64; 2]> {
    let raw: String = field(path, map, key)?;
    let v: Vec<f64> = raw
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::format(path, format!("`{key}` is not a number pair")))?;
    <[f64; 2]>::try_from(v).map_err(|_| CliError::format(path, format!("`{key}` needs two values")))
}

pub fn read_decomposer(path: &Path) -> CliResult<PolynomialDecomposer> {
    let bytes = read_file(path)?;
    let (header, data) = split_model_file(path, &bytes)?;
    let map = parse_header(path, header)?;
    expect(path, &map, "dect-decomposer", "1")?;
    let di: usize = field(path, &map, "degree_i")?;
    let dj: usize = field(path, &map, "degree_j")?;
    let scaling = InputScaling {
        center: pair(path, &map, "center")?,
        half_range: pair(path, &map, "half_range")?,
    };
    let n: usize = field(path, &map, "coefficients")?;
    let theta = f64_values(path, data, n)?;
    Ok(PolynomialDecomposer::from_coefficients(di, dj, scaling, theta)?)
}

pub fn write_denoiser(path: &Path, d: &DenoiserParams) -> CliResult<()> {
    let mut header = String::from("dect-denoiser 1\n# per layer: weights [out][in][ky][kx] then bias, f64le\n");
    writeln!(header, "input_scale {:?}", d.input_scale).expect("string write");
    writeln!(header, "layers {}", d.layers.len()).expect("string write");
    for (k, l) in d.layers.iter().enumerate() {
        writeln!(header, "layer{k} {} {} {}", l.in_channels, l.out_channels, l.kernel).expect("string write");
    }
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(END_HEADER);
    bytes.extend(f64_bytes(&d.flatten()));
    write_file(path, &bytes)
}

pub fn read_denoiser(path: &Path) -> CliResult<DenoiserParams> {
    let bytes = read_file(path)?;
    let (header, data) = split_model_file(path, &bytes)?;
    let map = parse_header(path, header)?;
    expect(path, &map, "dect-denoiser", "1")?;
    let input_scale: f64 = field(path, &map, "input_scale")?;
    let n_layers: usize = field(path, &map, "layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let spec: String = field(path, &map, &format!("layer{k}"))?;
        let v: Vec<usize> = spec
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::format(path, format!("layer{k} spec {spec:?} is malformed")))?;
        let [i, o, kernel] = <[usize; 3]>::try_from(v)
            .map_err(|_| CliError::format(path, format!("layer{k} needs in, out and kernel")))?;
        layers.push(ConvLayer::zeros(i, o, kernel)?);
    }
    let mut params = DenoiserParams { input_scale, layers };
    params.set_flat(&f64_values(path, data, params.n_params())?)?;
    params.validate()?;
    Ok(params)
}

pub fn write_loss_log(path: &Path, log: &[EpochRecord]) -> CliResult<()> {
    let mut text = String::from("# epoch loss\n");
    for r in log {
        writeln!(text, "{} {:?}", r.epoch, r.loss).expect("string write");
    }
    write_file(path, text.as_bytes())
}

pub fn read_loss_log(path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| CliError::format(path, "not UTF-8"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parsed = (|| Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?)))();
        out.push(parsed.ok_or_else(|| CliError::format(path, format!("line {} is not `epoch loss`", n + 1)))?);
    }
    Ok(out)
}

/// Ordered `key = value` report.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl std::fmt::Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            writeln!(text, "{k} = {v}").expect("string write");
        }
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = String::from_utf8(read_file(path)?).map_err(|_| CliError::format(path, "not UTF-8"))?;
        let mut report = Report::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CliError::format(path, format!("line {line:?} is not `key = value`")))?;
            report.set(k, v);
        }
        Ok(report)
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub angles: usize,
    pub method: String,
    pub material: String,
    pub psnr_db: f64,
}

pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn parse_psnr(s: &str) -> Option<f64> {
    if s == "inf" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut text = String::from("# angles method material psnr_db\n");
    for r in rows {
        writeln!(
            text,
            "{} {} {} {}",
            r.angles,
            r.method,
            r.material,
            format_psnr(r.psnr_db)
        )
        .expect("string write");
    }
    write_file(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRow>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| CliError::format(path, "not UTF-8"))?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let bad = || CliError::format(path, format!("metrics row {line:?} is malformed"));
        if cols.len() != 4 {
            return Err(bad());
        }
        rows.push(MetricRow {
            angles: cols[0].parse().map_err(|_| bad())?,
            method: cols[1].into(),
            material: cols[2].into(),
            psnr_db: parse_psnr(cols[3]).ok_or_else(bad)?,
        });
    }
    Ok(rows)
}
