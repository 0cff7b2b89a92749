//! Feature datasets and the SFDE on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! | field        | type                 |
//! |--------------|----------------------|
//! | magic        | `b"SFDE"`            |
//! | version      | `u32` = 1            |
//! | n, m, K      | `u64` each           |
//! | flags        | `u32`, bit 0: labels |
//! | domain tag   | `u16` len + UTF-8    |
//! | features     | `n·m × f32`, row-major |
//! | labels       | `n × i32` if flagged |
//!
//! Features are promoted to `f64` on load. Writing narrows to `f32`, so a
//! round trip is bit-exact for any dataset whose values are `f32`-representable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Matrix;

pub const DATASET_MAGIC: [u8; 4] = *b"SFDE";
pub const DATASET_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    domain_tag: String,
}

impl FeatureDataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let domain_tag = domain_tag.into();
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::InvalidDataset(format!(
                "need n >= 1 and m >= 1, got {}x{}",
                features.rows(),
                features.cols()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need K >= 2, got {num_classes}"
            )));
        }
        if domain_tag.len() > u16::MAX as usize {
            return Err(Error::InvalidDataset("domain tag too long".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::shape(
                    format!("{} labels", features.rows()),
                    format!("{} labels", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad as i64,
                    num_classes,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain_tag,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or(Error::MissingLabels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order, labels carried along.
    ///
    /// An empty selection yields an empty dataset, which bypasses the `n >= 1`
    /// constructor check on purpose.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            features,
            labels,
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
        })
    }

    /// All rows labelled `k`.
    pub fn class_rows(&self, k: usize) -> Result<Self> {
        let labels = self.require_labels()?;
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect();
        self.select_rows(&idx)
    }

    /// Per-class sample counts; requires labels.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.require_labels()? {
            counts[l] += 1;
        }
        Ok(counts)
    }

    /// The same rows with labels dropped.
    pub fn unlabeled(&self) -> Unlabeled {
        Unlabeled(Self {
            features: self.features.clone(),
            labels: None,
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.features.rows();
        let m = self.features.cols();
        let mut out = Vec::with_capacity(40 + self.domain_tag.len() + n * m * 4 + n * 4);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.domain_tag.len() as u16).to_le_bytes());
        out.extend_from_slice(self.domain_tag.as_bytes());
        for &v in self.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.extend_from_slice(&(l as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let k = r.u64()? as usize;
        let flags = r.u32()?;
        let tag_len = r.u16()? as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|e| Error::InvalidDataset(format!("domain tag: {e}")))?;
        let count = n
            .checked_mul(m)
            .ok_or_else(|| Error::InvalidDataset("n*m overflows".into()))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| {
            Error::InvalidDataset("feature payload size overflows".into())
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let labels = if flags & FLAG_LABELS != 0 {
            let raw = r.take(n * 4)?;
            let mut labels = Vec::with_capacity(n);
            for c in raw.chunks_exact(4) {
                let l = i32::from_le_bytes(c.try_into().unwrap());
                if l < 0 || l as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label: l as i64,
                        num_classes: k,
                    });
                }
                labels.push(l as usize);
            }
            Some(labels)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::InvalidDataset(format!(
                "{} trailing bytes after the payload",
                r.remaining()
            )));
        }
        let features = Matrix::from_vec(n, m, data)?;
        Self::new(features, labels, k, tag)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parses CSV text with header `f0,..,f{m-1}[,label]`.
    ///
    /// `num_classes` defaults to `max(label) + 1` (at least 2).
    pub fn from_csv_str(
        text: &str,
        num_classes: Option<usize>,
        domain_tag: &str,
    ) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let has_label = cols.last() == Some(&"label");
        let m = cols.len() - usize::from(has_label);
        for (j, c) in cols[..m].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::Csv(format!("line 1: expected column f{j}, found {c:?}")));
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Csv(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 1,
                    cols.len(),
                    fields.len()
                )));
            }
            for f in &fields[..m] {
                let v: f64 = f
                    .parse()
                    .map_err(|e| Error::Csv(format!("line {}: {f:?}: {e}", lineno + 1)))?;
                data.push(v);
            }
            if has_label {
                let l: i64 = fields[m]
                    .parse()
                    .map_err(|e| Error::Csv(format!("line {}: label: {e}", lineno + 1)))?;
                if l < 0 {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: num_classes.unwrap_or(0),
                    });
                }
                labels.push(l as usize);
            }
        }
        let n = data.len() / m.max(1);
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&l| (l + 1).max(2)));
        let features = Matrix::from_vec(n, m, data)?;
        Self::new(features, has_label.then_some(labels), k, domain_tag)
    }

    pub fn read_csv(
        path: impl AsRef<Path>,
        num_classes: Option<usize>,
        domain_tag: &str,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, num_classes, domain_tag)
    }
}

/// A dataset whose labels have been stripped; the only form the adaptation
/// loop accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Unlabeled(FeatureDataset);

impl Unlabeled {
    pub fn features(&self) -> &Matrix {
        self.0.features()
    }

    pub fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn domain_tag(&self) -> &str {
        self.0.domain_tag()
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(Error::TruncatedFile {
                offset: self.pos,
                needed: len,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use proptest::prelude::*;

    fn small() -> FeatureDataset {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.5], [0.25, 8.0]]).unwrap();
        FeatureDataset::new(x, Some(vec![0, 1, 1]), 2, "source").unwrap()
    }

    #[test]
    fn round_trip_small() {
        let ds = small();
        assert_eq!(FeatureDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }

    #[test]
    fn header_layout() {
        let b = small().to_bytes();
        assert_eq!(&b[..4], b"SFDE");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[32..36].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[36..38].try_into().unwrap()), 6);
        assert_eq!(&b[38..44], b"source");
        assert_eq!(b.len(), 44 + 6 * 4 + 3 * 4);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = small().to_bytes();
        b[0] = b'X';
        assert!(matches!(FeatureDataset::from_bytes(&b), Err(Error::BadMagic { .. })));
        let mut b = small().to_bytes();
        b[4] = 2;
        assert!(matches!(
            FeatureDataset::from_bytes(&b),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_and_label_range() {
        let b = small().to_bytes();
        for cut in [3, 20, 40, b.len() - 1] {
            assert!(matches!(
                FeatureDataset::from_bytes(&b[..cut]),
                Err(Error::TruncatedFile { .. })
            ));
        }
        let mut b = small().to_bytes();
        let last = b.len() - 4;
        b[last..].copy_from_slice(&7i32.to_le_bytes());
        assert!(matches!(
            FeatureDataset::from_bytes(&b),
            Err(Error::LabelOutOfRange { label: 7, .. })
        ));
        b[last..].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(matches!(
            FeatureDataset::from_bytes(&b),
            Err(Error::LabelOutOfRange { label: -1, .. })
        ));
    }

    #[test]
    fn large_dataset_bytes_are_stable() {
        let mut rng = SeededRng::new(1);
        let data: Vec<f64> = rng
            .standard_normal::<f32>(10_000 * 64)
            .into_iter()
            .map(f64::from)
            .collect();
        let labels = (0..10_000).map(|i| i % 7).collect();
        let ds = FeatureDataset::new(Matrix::from_vec(10_000, 64, data).unwrap(), Some(labels), 7, "t")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.sfde"), dir.path().join("b.sfde"));
        ds.write_binary(&p1).unwrap();
        ds.write_binary(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(FeatureDataset::read_binary(&p1).unwrap(), ds);
    }

    #[test]
    fn select_and_class_rows() {
        let ds = small();
        assert_eq!(ds.select_rows(&[0, 1, 2]).unwrap(), ds);
        let c1 = ds.class_rows(1).unwrap();
        assert_eq!(c1.len(), 2);
        assert_eq!(c1.features().row(0), &[3.0, -4.5]);
        assert!(matches!(
            ds.select_rows(&[3]),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
        let all_zero = FeatureDataset::new(ds.features().clone(), Some(vec![0; 3]), 2, "x").unwrap();
        assert!(all_zero.class_rows(1).unwrap().is_empty());
        assert!(matches!(ds.unlabeled_dataset().class_rows(0), Err(Error::MissingLabels)));
    }

    #[test]
    fn class_rows_matches_filter_loop() {
        let mut rng = SeededRng::new(2);
        let n = 60;
        let x = Matrix::from_vec(n, 3, rng.standard_normal(n * 3)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let ds = FeatureDataset::new(x, Some(labels.clone()), 4, "r").unwrap();
        for k in 0..4 {
            let mut rows = Vec::new();
            for i in 0..n {
                if labels[i] == k {
                    rows.push(ds.features().row(i).to_vec());
                }
            }
            let got = ds.class_rows(k).unwrap();
            assert_eq!(got.len(), rows.len());
            for (i, r) in rows.iter().enumerate() {
                assert_eq!(got.features().row(i), r.as_slice());
            }
        }
    }

    #[test]
    fn csv_import() {
        let text = "f0,f1,label\n1.0,2.0,0\n3,4,2\n";
        let ds = FeatureDataset::from_csv_str(text, None, "csv").unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.labels(), Some(&[0, 2][..]));
        let nolab = FeatureDataset::from_csv_str("f0\n1\n2\n", Some(2), "csv").unwrap();
        assert!(nolab.labels().is_none());
        assert!(FeatureDataset::from_csv_str("f0,f2\n1,2\n", None, "x").is_err());
        assert!(FeatureDataset::from_csv_str("f0,label\n1,-1\n", None, "x").is_err());
    }

    #[test]
    fn constructor_invariants() {
        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        assert!(FeatureDataset::new(x.clone(), None, 1, "x").is_err());
        assert!(matches!(
            FeatureDataset::new(x, Some(vec![2]), 2, "x"),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    impl FeatureDataset {
        fn unlabeled_dataset(&self) -> FeatureDataset {
            self.unlabeled().0
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_identity(
            n in 1usize..20,
            m in 1usize..8,
            k in 2usize..6,
            labelled: bool,
            seed: u64,
            tag in "[a-z]{0,12}",
        ) {
            let mut rng = SeededRng::new(seed);
            let data: Vec<f64> = rng.standard_normal::<f32>(n * m).into_iter().map(f64::from).collect();
            let labels = labelled.then(|| (0..n).map(|_| rng.below(k)).collect());
            let ds = FeatureDataset::new(Matrix::from_vec(n, m, data).unwrap(), labels, k, tag).unwrap();
            let bytes = ds.to_bytes();
            prop_assert_eq!(&bytes, &ds.to_bytes());
            prop_assert_eq!(FeatureDataset::from_bytes(&bytes).unwrap(), ds);
        }
    }
}
