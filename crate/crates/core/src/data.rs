//! Feature matrices on disk and in memory.
//!
//! Two file formats are supported. CLDF is a small binary container (layout
//! in the README); CSV is comma-separated, unquoted, with an optional single
//! header line that is recognised by a non-numeric first row.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::metrics::Labeling;
use crate::rng::{self, std_normal, Domain};
use crate::{Error, Result};

pub const CLDF_MAGIC: &[u8; 4] = b"CLDF";
pub const CLDF_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

/// Feature matrix `x` (`N × n`), optional ground truth, and a display name.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub name: String,
    pub x: Array2<f64>,
    pub labels: Option<Labeling>,
}

impl FeatureDataset {
    pub fn new(name: impl Into<String>, x: Array2<f64>, labels: Option<Labeling>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            x,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(Error::invalid(format!("dataset must be non-empty, got {:?}", self.x.dim())));
        }
        if let Some(pos) = self.x.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / self.x.ncols(), pos % self.x.ncols());
            return Err(Error::invalid(format!("non-finite feature at row {r}, column {c}")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.x.nrows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.x.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Number of items `N`.
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Feature width `n`.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Shifts and scales every column to mean 0, standard deviation 1.
    /// Constant columns are only centred. Returns the `(mean, std)` used.
    pub fn standardize(&mut self) -> (Array1<f64>, Array1<f64>) {
        let mean = self.x.mean_axis(Axis(0)).expect("non-empty");
        let mut std = self.x.std_axis(Axis(0), 0.0);
        std.mapv_inplace(|s| if s > 0.0 { s } else { 1.0 });
        self.x -= &mean;
        self.x /= &std;
        (mean, std)
    }
}

/// Element type of the CLDF feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> u64 {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Serializes a dataset as CLDF with 64-bit features.
pub fn encode_cldf(ds: &FeatureDataset) -> Result<Vec<u8>> {
    encode_cldf_as(ds, Dtype::F64)
}

pub fn encode_cldf_as(ds: &FeatureDataset, dtype: Dtype) -> Result<Vec<u8>> {
    ds.validate()?;
    let (rows, cols) = ds.x.dim();
    let mut out = Vec::with_capacity(25 + rows * cols * dtype.width() as usize + rows * 4);
    out.extend_from_slice(CLDF_MAGIC);
    out.extend_from_slice(&CLDF_VERSION.to_le_bytes());
    let flags = if ds.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.push(dtype.tag());
    for &v in ds.x.iter() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    if let Some(labels) = &ds.labels {
        for &l in labels.as_slice() {
            let l = u32::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in u32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_cldf(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cldf(ds)?)?;
    Ok(())
}

/// Parses a CLDF image. `name` becomes the dataset name.
pub fn decode_cldf(bytes: &[u8], name: &str) -> Result<FeatureDataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CLDF_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"CLDF\""),
        });
    }
    let version_at = r.offset();
    let version = r.u16()?;
    if version != CLDF_VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported CLDF version {version}"),
        });
    }
    let flags_at = r.offset();
    let flags = r.u16()?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format {
            offset: flags_at,
            message: format!("unknown flag bits {flags:#06x}"),
        });
    }
    let rows_at = r.offset();
    let rows = r.u64()?;
    let cols = r.u64()?;
    let dtype_at = r.offset();
    let dtype = match r.u8()? {
        0 => Dtype::F64,
        1 => Dtype::F32,
        other => {
            return Err(Error::Format {
                offset: dtype_at,
                message: format!("unknown dtype tag {other}"),
            })
        }
    };
    let cells = rows.checked_mul(cols).filter(|c| c.checked_mul(dtype.width()).is_some()).ok_or(Error::Format {
        offset: rows_at,
        message: format!("shape {rows} × {cols} overflows"),
    })?;
    r.require(cells * dtype.width())?;
    let values: Vec<f64> = (0..cells)
        .map(|_| match dtype {
            Dtype::F64 => r.f64(),
            Dtype::F32 => r.f32().map(f64::from),
        })
        .collect::<Result<_>>()?;
    let labels = if flags & FLAG_LABELS != 0 {
        r.require(rows * 4)?;
        let ls = (0..rows).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        Some(Labeling::new(ls)?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    let x = Array2::from_shape_vec((rows as usize, cols as usize), values).map_err(|e| Error::Format {
        offset: rows_at,
        message: e.to_string(),
    })?;
    FeatureDataset::new(name, x, labels)
}

pub fn read_cldf(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    decode_cldf(&fs::read(path)?, &stem(path))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Parses CSV text. With `has_labels` the last column holds integer labels.
pub fn parse_csv_features(text: &str, has_labels: bool, name: &str) -> Result<FeatureDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    // a first row with any non-numeric cell is a header
    let skip = usize::from(
        records
            .first()
            .is_some_and(|r| r.iter().any(|c| c.trim().parse::<f64>().is_err())),
    );
    let body = &records[skip..];
    let width = body.first().map(|r| r.len()).ok_or_else(|| Error::Parse {
        row: skip + 1,
        column: 0,
        message: "no data rows".into(),
    })?;
    let n = width - usize::from(has_labels);
    if n == 0 {
        return Err(Error::Parse {
            row: skip + 1,
            column: 1,
            message: "no feature columns".into(),
        });
    }
    let mut values = Vec::with_capacity(body.len() * n);
    let mut labels = Vec::new();
    for (i, rec) in body.iter().enumerate() {
        let row = i + skip + 1;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let bad = |what: &str| Error::Parse {
                row,
                column: j + 1,
                message: format!("{what}: {cell:?}"),
            };
            if has_labels && j == n {
                labels.push(cell.parse::<usize>().map_err(|_| bad("not an integer label"))?);
            } else {
                values.push(cell.parse::<f64>().map_err(|_| bad("not a number"))?);
            }
        }
    }
    let x = Array2::from_shape_vec((body.len(), n), values).expect("row widths checked");
    let labels = if has_labels { Some(Labeling::new(labels)?) } else { None };
    FeatureDataset::new(name, x, labels)
}

pub fn read_csv_features(path: impl AsRef<Path>, has_labels: bool) -> Result<FeatureDataset> {
    let path = path.as_ref();
    parse_csv_features(&fs::read_to_string(path)?, has_labels, &stem(path))
}

/// Writes `x0..x{n-1}[,label]` with a header; 17 significant digits per value.
pub fn write_csv_features<W: Write>(ds: &FeatureDataset, mut out: W) -> Result<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in ds.x.axis_iter(Axis(0)).enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(labels) = &ds.labels {
            cells.push(labels.as_slice()[i].to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Isotropic Gaussian blobs around centres on a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub k: usize,
    pub dim: usize,
    pub per_component: usize,
    pub center_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dim == 0 || self.per_component == 0 {
            return Err(Error::invalid("mixture needs positive k, dim and per_component"));
        }
        if !(self.center_radius > 0.0 && self.center_radius.is_finite()) {
            return Err(Error::invalid("center_radius must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }

    /// Centres drawn uniformly on the sphere of radius `center_radius`.
    pub fn centers(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let mut rng = rng::derive(self.seed, Domain::Mixture, 0, 0);
        let mut centers = Array2::zeros((self.k, self.dim));
        for mut c in centers.axis_iter_mut(Axis(0)) {
            loop {
                c.mapv_inplace(|_| std_normal(&mut rng));
                let norm = c.dot(&c).sqrt();
                if norm > 1e-12 {
                    c.mapv_inplace(|v| v * self.center_radius / norm);
                    break;
                }
            }
        }
        Ok(centers)
    }
}

/// Samples `k · per_component` rows, component-major, labelled by component.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<FeatureDataset> {
    let centers = spec.centers()?;
    let mut rng = rng::derive(spec.seed, Domain::Mixture, 1, 0);
    let rows = spec.k * spec.per_component;
    let mut x = Array2::zeros((rows, spec.dim));
    let mut labels = Vec::with_capacity(rows);
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let c = i / spec.per_component;
        labels.push(c);
        for (v, &m) in row.iter_mut().zip(centers.row(c)) {
            *v = m + spec.noise_std * std_normal(&mut rng);
        }
    }
    FeatureDataset::new(
        format!("mixture-k{}-n{}-s{}", spec.k, spec.dim, spec.seed),
        x,
        Some(Labeling::new(labels)?),
    )
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Fails with a truncation error unless `len` more bytes are available.
    pub(crate) fn require(&self, len: u64) -> Result<()> {
        if (self.remaining() as u64) < len {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                expected: self.pos as u64 + len,
            });
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        self.require(len as u64)?;
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(labels: bool) -> FeatureDataset {
        let x = Array2::from_shape_fn((7, 5), |(i, j)| ((i * 5 + j) as f64).sin() * 1e3 / 7.0);
        let labels = labels.then(|| Labeling::new((0..7).map(|i| i % 3).collect()).unwrap());
        FeatureDataset::new("s", x, labels).unwrap()
    }

    #[test]
    fn cldf_round_trip_is_bit_exact() {
        for with_labels in [true, false] {
            let ds = sample(with_labels);
            let back = decode_cldf(&encode_cldf(&ds).unwrap(), "s").unwrap();
            assert_eq!(back, ds);
            for (a, b) in back.x.iter().zip(ds.x.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn cldf_f32_widens() {
        let ds = sample(false);
        let back = decode_cldf(&encode_cldf_as(&ds, Dtype::F32).unwrap(), "s").unwrap();
        for (a, b) in back.x.iter().zip(ds.x.iter()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn cldf_header_layout() {
        let bytes = encode_cldf(&sample(true)).unwrap();
        assert_eq!(&bytes[..4], b"CLDF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 5);
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes.len(), 25 + 7 * 5 * 8 + 7 * 4);
    }

    #[test]
    fn cldf_errors_name_offsets() {
        let bytes = encode_cldf(&sample(true)).unwrap();
        for cut in [0, 3, 10, 24, 100, bytes.len() - 1] {
            assert!(matches!(decode_cldf(&bytes[..cut], "t"), Err(Error::Truncated { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cldf(&bad, "t"), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_cldf(&bad, "t"), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[24] = 7;
        assert!(matches!(decode_cldf(&bad, "t"), Err(Error::Format { offset: 24, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_cldf(&long, "t"), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_parsing() {
        let ds = parse_csv_features("1,2\n3,4", false, "c").unwrap();
        assert_eq!(ds.x, ndarray::array![[1.0, 2.0], [3.0, 4.0]]);
        let ds = parse_csv_features("a,b,label\n1.5,2,0\n3,4e1,2\n", true, "c").unwrap();
        assert_eq!(ds.x, ndarray::array![[1.5, 2.0], [3.0, 40.0]]);
        assert_eq!(ds.labels.unwrap().as_slice(), &[0, 2]);
        match parse_csv_features("1,2\n3\n", false, "c") {
            Err(Error::Parse { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_csv_features("1,2\n3,x\n", false, "c") {
            Err(Error::Parse { row: 2, column: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_csv_features("1,2\n3,4.5\n", true, "c").is_err());
    }

    #[test]
    fn csv_round_trip_matches_cldf() {
        let ds = sample(true);
        let mut buf = Vec::new();
        write_csv_features(&ds, &mut buf).unwrap();
        let back = parse_csv_features(std::str::from_utf8(&buf).unwrap(), true, "s").unwrap();
        assert_eq!(back, decode_cldf(&encode_cldf(&ds).unwrap(), "s").unwrap());
    }

    #[test]
    fn mixture_properties() {
        let spec = MixtureSpec {
            k: 4,
            dim: 6,
            per_component: 9,
            center_radius: 3.0,
            noise_std: 0.0,
            seed: 11,
        };
        let ds = generate_mixture(&spec).unwrap();
        let centers = spec.centers().unwrap();
        assert_eq!(ds.len(), 36);
        let labels = ds.labels.as_ref().unwrap().as_slice();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 9);
        }
        for (row, &l) in ds.x.axis_iter(Axis(0)).zip(labels) {
            assert_eq!(row, centers.row(l));
        }
        for a in 0..4 {
            let r = centers.row(a);
            assert!((r.dot(&r).sqrt() - 3.0).abs() < 1e-12);
            for b in 0..a {
                let diff = &centers.row(a) - &centers.row(b);
                assert!(diff.dot(&diff) > 0.0);
            }
        }
        assert_eq!(generate_mixture(&spec).unwrap(), ds);
    }

    #[test]
    fn standardize_columns() {
        let mut ds = sample(false);
        ds.standardize();
        for col in ds.x.axis_iter(Axis(1)) {
            assert!(col.mean().unwrap().abs() < 1e-12);
            assert!((col.std(0.0) - 1.0).abs() < 1e-12);
        }
    }
}
