//! Datasets: libsvm and CSV parsing, synthetic generators, splitting and
//! standardization.
//!
//! libsvm rows are `label idx:val idx:val ...` with 1-based, strictly
//! increasing indices. Internally every index is 0-based; serialization
//! writes them back 1-based. Inputs starting with the gzip magic bytes are
//! decompressed transparently.

use std::io::{BufRead, BufReader, Read, Write};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Feature vector of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Dense(Vec<f64>),
    /// Parallel arrays of 0-based strictly increasing indices and values.
    Sparse { indices: Vec<u32>, values: Vec<f64> },
}

impl Features {
    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            Features::Dense(v) => crate::linalg::dot(v, w),
            Features::Sparse { indices, values } => indices
                .iter()
                .zip(values)
                .map(|(&j, v)| v * w[j as usize])
                .sum(),
        }
    }

    /// `out += alpha * self`
    pub fn axpy_into(&self, alpha: f64, out: &mut [f64]) {
        match self {
            Features::Dense(v) => crate::linalg::axpy(alpha, v, out),
            Features::Sparse { indices, values } => {
                for (&j, v) in indices.iter().zip(values) {
                    out[j as usize] += alpha * v;
                }
            }
        }
    }

    /// `out = alpha * self` on the support, zero elsewhere.
    pub fn scale_into(&self, alpha: f64, out: &mut [f64]) {
        match self {
            Features::Dense(v) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = alpha * x;
                }
            }
            Features::Sparse { indices, values } => {
                out.fill(0.0);
                for (&j, v) in indices.iter().zip(values) {
                    out[j as usize] = alpha * v;
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.axpy_into(1.0, &mut out);
        out
    }

    pub fn nnz(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Sparse { indices, .. } => indices.len(),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            Features::Dense(v) => v.len().checked_sub(1),
            Features::Sparse { indices, .. } => indices.last().map(|&j| j as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub features: Features,
    pub label: f64,
}

/// An immutable collection of labelled records of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Row>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Row>, dim: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        for (r, row) in rows.iter().enumerate() {
            if !row.label.is_finite() {
                return Err(invalid(format!("row {r}: non-finite label")));
            }
            match &row.features {
                Features::Dense(v) if v.len() != dim => {
                    return Err(Error::DimensionMismatch { expected: dim, got: v.len() })
                }
                Features::Sparse { indices, values } if indices.len() != values.len() => {
                    return Err(invalid(format!("row {r}: index/value length mismatch")))
                }
                f => {
                    if let Some(j) = f.max_index() {
                        if j >= dim {
                            return Err(Error::IndexOutOfRange { index: j, len: dim });
                        }
                    }
                }
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn from_dense(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(invalid("feature and label counts differ"));
        }
        let dim = features.first().map_or(0, Vec::len);
        let rows = features
            .into_iter()
            .zip(labels)
            .map(|(f, label)| Row { features: Features::Dense(f), label })
            .collect();
        Self::new(rows, dim)
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when any row is stored sparsely.
    pub fn is_sparse(&self) -> bool {
        self.rows.iter().any(|r| matches!(r.features, Features::Sparse { .. }))
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.label)
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.rows[i].clone()).collect(), self.dim)
    }
}

/// Wrap a byte stream, decompressing it when it starts with the gzip magic.
pub fn maybe_gunzip<'a, R: Read + 'a>(reader: R) -> Result<Box<dyn BufRead + 'a>> {
    let mut buf = BufReader::new(reader);
    let head = buf.fill_buf()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(BufReader::new(GzDecoder::new(buf))))
    } else {
        Ok(Box::new(buf))
    }
}

/// Streaming libsvm row reader; holds one line buffer at a time.
pub struct LibsvmRows<R> {
    reader: R,
    line: String,
    lineno: usize,
}

impl<R: BufRead> LibsvmRows<R> {
    pub fn new(reader: R) -> Self {
        Self { reader, line: String::new(), lineno: 0 }
    }

    fn parse_line(&self) -> Result<Option<Row>> {
        let content = match self.line.find('#') {
            Some(p) => &self.line[..p],
            None => &self.line,
        };
        let lineno = self.lineno;
        let mut tokens = tokens_with_columns(content);
        let Some((col, label_tok)) = tokens.next() else {
            return Ok(None);
        };
        let perr = |column: usize, message: String| Error::Parse { line: lineno, column, message };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(col, format!("invalid label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(perr(col, "non-finite label".into()));
        }
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (col, tok) in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| perr(col, format!("expected idx:val, found {tok:?}")))?;
            if idx == "qid" {
                continue;
            }
            let idx: u64 = idx
                .parse()
                .map_err(|_| perr(col, format!("invalid index {idx:?}")))?;
            if idx == 0 || idx > u32::MAX as u64 {
                return Err(perr(col, format!("index {idx} outside 1..=2^32-1")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| perr(col, format!("non-numeric value {val:?}")))?;
            let idx = (idx - 1) as u32;
            if let Some(&prev) = indices.last() {
                if idx == prev {
                    return Err(perr(col, format!("duplicate index {}", idx + 1)));
                }
                if idx < prev {
                    return Err(perr(col, format!("index {} after {} is not increasing", idx + 1, prev + 1)));
                }
            }
            indices.push(idx);
            values.push(val);
        }
        Ok(Some(Row { features: Features::Sparse { indices, values }, label }))
    }
}

impl<R: BufRead> Iterator for LibsvmRows<R> {
    type Item = Result<Row>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line.clear();
            self.lineno += 1;
            match self.reader.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            match self.parse_line() {
                Ok(Some(row)) => return Some(Ok(row)),
                Ok(None) => continue,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

fn tokens_with_columns(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split(|c: char| c.is_ascii_whitespace())
        .scan(0usize, |offset, tok| {
            let start = *offset;
            *offset += tok.len() + 1;
            Some((start + 1, tok))
        })
        .filter(|(_, t)| !t.is_empty())
}

/// Parse a whole libsvm stream. `dim` overrides the inferred dimension
/// (max index seen) and must cover every index present.
pub fn parse_libsvm<R: Read>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let rows = LibsvmRows::new(maybe_gunzip(reader)?).collect::<Result<Vec<_>>>()?;
    let seen = rows
        .iter()
        .filter_map(|r| r.features.max_index())
        .max()
        .map_or(0, |m| m + 1);
    Dataset::new(rows, dim.unwrap_or(seen))
}

pub fn write_libsvm<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for row in ds.rows() {
        write!(out, "{}", row.label)?;
        match &row.features {
            Features::Sparse { indices, values } => {
                for (j, v) in indices.iter().zip(values) {
                    write!(out, " {}:{}", j + 1, v)?;
                }
            }
            Features::Dense(v) => {
                for (j, v) in v.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                    write!(out, " {}:{}", j + 1, v)?;
                }
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Which CSV column holds the label.
#[derive(Debug, Clone)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// Parse a dense CSV with a header row; every other column is a feature.
pub fn parse_csv<R: Read>(reader: R, label: &LabelColumn) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(maybe_gunzip(reader)?);
    let headers = rdr.headers()?.clone();
    let label_idx = match label {
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => return Err(invalid(format!("label column {i} out of range"))),
        LabelColumn::Name(n) => headers
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| invalid(format!("no column named {n:?}")))?,
    };
    let dim = headers.len() - 1;
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => Error::Parse {
                line,
                column: *len as usize,
                message: format!("ragged row: expected {} fields, found {len}", headers.len()),
            },
            _ => Error::Csv(e),
        })?;
        let mut features = Vec::with_capacity(dim);
        let mut y = 0.0;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                column: c + 1,
                message: format!("non-numeric field {field:?}"),
            })?;
            if c == label_idx {
                y = v;
            } else {
                features.push(v);
            }
        }
        rows.push(Row { features: Features::Dense(features), label: y });
    }
    Dataset::new(rows, dim)
}

/// Write a dense CSV with the label first under the header `label`.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for row in ds.rows() {
        let dense = row.features.to_dense(ds.dim());
        let mut rec = Vec::with_capacity(ds.dim() + 1);
        rec.push(row.label.to_string());
        rec.extend(dense.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded random partition into `(train, test)` with
/// `round(ratio * N)` training rows.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n_train = (ratio * ds.len() as f64).round() as usize;
    if n_train == 0 || n_train == ds.len() {
        return Err(invalid("split leaves one side empty"));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut rng::seeded(seed));
    Ok((ds.subset(&perm[..n_train])?, ds.subset(&perm[n_train..])?))
}

/// Per-feature affine map fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Features with zero training variance; their scale is left at 1.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let d = train.dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for row in train.rows() {
            row.features.axpy_into(1.0, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.rows() {
            let x = row.features.to_dense(d);
            for ((v, xi), m) in var.iter_mut().zip(&x).zip(&mean) {
                *v += (xi - m) * (xi - m);
            }
        }
        let mut constant = vec![false; d];
        let scale = var
            .iter()
            .zip(constant.iter_mut())
            .map(|(v, c)| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    *c = true;
                    1.0
                }
            })
            .collect();
        Self { mean, scale, constant }
    }

    /// Apply to every row; the result is dense.
    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.dim();
        crate::error::check_dim(self.mean.len(), d)?;
        let rows = ds
            .rows()
            .iter()
            .map(|r| {
                let mut x = r.features.to_dense(d);
                for ((xi, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
                    *xi = (*xi - m) / s;
                }
                Row { features: Features::Dense(x), label: r.label }
            })
            .collect();
        Dataset::new(rows, d)
    }
}

/// Fit feature standardization on `train` and apply it to both sets.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    let s = Standardizer::fit(train);
    Ok((s.transform(train)?, s.transform(test)?, s))
}

/// Affine label map fitted on training labels (zero mean, unit variance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScaler {
    pub mean: f64,
    pub scale: f64,
}

impl LabelScaler {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let mean = train.labels().sum::<f64>() / n;
        let var = train.labels().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let rows = ds
            .rows()
            .iter()
            .map(|r| Row { features: r.features.clone(), label: (r.label - self.mean) / self.scale })
            .collect();
        Dataset::new(rows, ds.dim())
    }
}

/// A generated dataset together with the weight vector that produced it.
#[derive(Debug, Clone)]
pub struct Planted {
    pub data: Dataset,
    pub weights: Vec<f64>,
}

/// Sparse logistic data: each feature is present with probability
/// `density` with a standard normal value; the planted weights give the
/// linear predictor unit-free standard deviation 3, and
/// `P(y = +1 | x) = sigmoid(w.x)` (logistic noise).
pub fn synth_sparse(n: usize, dim: usize, density: f64, seed: u64) -> Result<Planted> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("density {density} not in (0, 1]")));
    }
    if n == 0 || dim == 0 {
        return Err(invalid("synth_sparse needs n, dim >= 1"));
    }
    let mut wrng = rng::stream_rng(seed, 0, rng::Stream::Init);
    let sd = (9.0 / (dim as f64 * density)).sqrt();
    let weights: Vec<f64> = (0..dim)
        .map(|_| sd * wrng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rng = rng::stream_rng(seed, 0, rng::Stream::Aux);
    let rows = (0..n)
        .map(|_| {
            let features = if density >= 1.0 {
                Features::Dense((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            } else {
                let mut indices = Vec::new();
                let mut values = Vec::new();
                for j in 0..dim {
                    if rng.random::<f64>() < density {
                        indices.push(j as u32);
                        values.push(StandardNormal.sample(&mut rng));
                    }
                }
                Features::Sparse { indices, values }
            };
            let t = features.dot(&weights);
            let u: f64 = rng.random();
            let label = if u < crate::model::sigmoid(t) { 1.0 } else { -1.0 };
            Row { features, label }
        })
        .collect();
    Ok(Planted { data: Dataset::new(rows, dim)?, weights })
}

/// Dense linear-Gaussian regression data: `x ~ N(0, I)`, planted
/// `w ~ N(0, I)`, `y = w.x + noise_sd * e`.
pub fn synth_linear(n: usize, dim: usize, noise_sd: f64, seed: u64) -> Result<Planted> {
    if n == 0 || dim == 0 {
        return Err(invalid("synth_linear needs n, dim >= 1"));
    }
    let mut wrng = rng::stream_rng(seed, 0, rng::Stream::Init);
    let weights: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut wrng)).collect();
    let mut rng = rng::stream_rng(seed, 0, rng::Stream::Aux);
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        labels.push(crate::linalg::dot(&x, &weights) + noise_sd * e);
        feats.push(x);
    }
    Ok(Planted { data: Dataset::from_dense(feats, labels)?, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_libsvm(s.as_bytes(), None)
    }

    #[test]
    fn libsvm_basic_row() {
        let ds = parse("+1 1:0.5 3:2.0\n").unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.rows()[0].label, 1.0);
        assert_eq!(
            ds.rows()[0].features,
            Features::Sparse { indices: vec![0, 2], values: vec![0.5, 2.0] }
        );
    }

    #[test]
    fn libsvm_empty_feature_list() {
        let ds = parse_libsvm("-1\n".as_bytes(), Some(4)).unwrap();
        assert_eq!(ds.rows()[0].label, -1.0);
        assert_eq!(ds.rows()[0].features.nnz(), 0);
        assert_eq!(ds.dim(), 4);
    }

    #[test]
    fn libsvm_duplicate_index() {
        match parse("1 2:1 2:1\n") {
            Err(Error::Parse { line: 1, column: 7, message }) => assert!(message.contains("duplicate")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn libsvm_errors_report_position() {
        assert!(matches!(parse("1 3:1 2:1\n"), Err(Error::Parse { column: 7, .. })));
        assert!(matches!(parse("1 1:1\n1 2:x\n"), Err(Error::Parse { line: 2, column: 3, .. })));
        assert!(matches!(parse("1 0:1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("1 abc\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("nope 1:1\n"), Err(Error::Parse { column: 1, .. })));
        assert!(parse("").is_err());
    }

    #[test]
    fn libsvm_skips_comments_and_blank_lines() {
        let ds = parse("# header\n\n1 1:1 # trailing\n-1 2:3\n").unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn libsvm_dim_override_too_small() {
        assert!(parse_libsvm("1 5:1\n".as_bytes(), Some(3)).is_err());
    }

    #[test]
    fn libsvm_gzip() {
        use flate2::write::GzEncoder;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(b"1 1:0.5\n-1 2:1.5\n").unwrap();
        let bytes = enc.finish().unwrap();
        let ds = parse_libsvm(&bytes[..], None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn libsvm_rows_stream_without_reading_everything() {
        // An endless source: the iterator must yield rows lazily.
        let rows: Vec<_> = LibsvmRows::new(BufReader::with_capacity(64, EndlessRows::default()))
            .take(1000)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(rows.len(), 1000);
    }

    #[derive(Default)]
    struct EndlessRows {
        pending: Vec<u8>,
    }

    impl Read for EndlessRows {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            if self.pending.is_empty() {
                self.pending.extend_from_slice(b"1 1:0.25 7:3\n");
            }
            let n = buf.len().min(self.pending.len());
            buf[..n].copy_from_slice(&self.pending[..n]);
            self.pending.drain(..n);
            Ok(n)
        }
    }

    #[test]
    fn csv_with_named_label() {
        let ds = parse_csv("a,y,b\n1,2,3\n4,5,6\n".as_bytes(), &LabelColumn::Name("y".into())).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.rows()[1].label, 5.0);
        assert_eq!(ds.rows()[1].features, Features::Dense(vec![4.0, 6.0]));
    }

    #[test]
    fn csv_ragged_rows_rejected() {
        let err = parse_csv("a,y\n1,2\n3\n".as_bytes(), &LabelColumn::Index(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn split_partition() {
        let ds = Dataset::from_dense((0..10).map(|i| vec![i as f64]).collect(), vec![0.0; 10]).unwrap();
        let (tr, te) = split(&ds, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<f64> = tr.rows().iter().chain(te.rows()).map(|r| r.features.to_dense(1)[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let (tr2, te2) = split(&ds, 0.8, 5).unwrap();
        assert_eq!((tr, te), (tr2, te2));
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn standardize_uses_train_statistics() {
        let train = Dataset::from_dense(vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]], vec![0.0; 3]).unwrap();
        let test = Dataset::from_dense(vec![vec![3.0, 6.0]], vec![0.0]).unwrap();
        let (tr, te, s) = standardize(&train, &test).unwrap();
        assert_eq!(s.constant, vec![false, true]);
        let col0: Vec<f64> = tr.rows().iter().map(|r| r.features.to_dense(2)[0]).collect();
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(te.rows()[0].features, Features::Dense(vec![0.0, 1.0]));
    }

    #[test]
    fn synth_sparse_full_density_is_dense() {
        let p = synth_sparse(20, 4, 1.0, 1).unwrap();
        assert!(!p.data.is_sparse());
        assert!(p.data.labels().all(|y| y == 1.0 || y == -1.0));
        let p = synth_sparse(20, 40, 0.1, 1).unwrap();
        assert!(p.data.is_sparse());
    }
}
