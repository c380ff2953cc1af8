//! Point-cloud container, deterministic synthetic generators and CSV I/O.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One or more point sets packed into a single flat buffer.
///
/// Positions are stored row-major as `[n × dim]`. Independent sets are
/// delimited by `batch_offsets`, which always starts at 0 and ends at `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<f64>,
    dim: usize,
    features: Option<Vec<f64>>,
    feature_dim: usize,
    batch_offsets: Vec<usize>,
}

impl PointCloud {
    /// Single point set without features.
    pub fn new(positions: Vec<f64>, dim: usize) -> Result<Self> {
        let n = positions.len().checked_div(dim).unwrap_or(0);
        Self::with_batches(positions, dim, None, 0, vec![0, n])
    }

    /// Single point set with a `[n × feature_dim]` feature matrix.
    pub fn with_features(positions: Vec<f64>, dim: usize, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        let n = positions.len().checked_div(dim).unwrap_or(0);
        Self::with_batches(positions, dim, Some(features), feature_dim, vec![0, n])
    }

    pub fn with_batches(
        positions: Vec<f64>,
        dim: usize,
        features: Option<Vec<f64>>,
        feature_dim: usize,
        batch_offsets: Vec<usize>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "positions length {} is not a positive multiple of {dim}",
                positions.len()
            )));
        }
        let n = positions.len() / dim;
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate at point {}", i / dim)));
        }
        let (features, feature_dim) = match features {
            Some(f) if feature_dim > 0 => {
                if f.len() != n * feature_dim {
                    return Err(Error::Shape(format!(
                        "features [{} values] do not match [{n} × {feature_dim}]",
                        f.len()
                    )));
                }
                (Some(f), feature_dim)
            }
            _ => (None, 0),
        };
        if batch_offsets.first() != Some(&0)
            || batch_offsets.last() != Some(&n)
            || batch_offsets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Input(format!(
                "batch offsets {batch_offsets:?} must increase strictly from 0 to {n}"
            )));
        }
        Ok(PointCloud {
            positions,
            dim,
            features,
            feature_dim,
            batch_offsets,
        })
    }

    /// Packs several clouds of equal dimension into one batch.
    pub fn concat(clouds: &[PointCloud]) -> Result<Self> {
        let first = clouds
            .first()
            .ok_or_else(|| Error::Input("cannot pack an empty list of clouds".into()))?;
        let dim = first.dim;
        let fdim = first.feature_dim;
        let mut positions = Vec::new();
        let mut features = Vec::new();
        let mut offsets = vec![0];
        for c in clouds {
            if c.dim != dim || c.feature_dim != fdim {
                return Err(Error::Shape("clouds differ in dimension or feature width".into()));
            }
            for s in 0..c.batch_len() {
                let sub = c.batch(s);
                positions.extend_from_slice(sub.positions);
                if let Some(f) = sub.features {
                    features.extend_from_slice(f);
                }
                offsets.push(positions.len() / dim);
            }
        }
        let features = (fdim > 0).then_some(features);
        Self::with_batches(positions, dim, features, fdim, offsets)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> Option<&[f64]> {
        self.features.as_deref()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn batch_offsets(&self) -> &[usize] {
        &self.batch_offsets
    }

    pub fn batch_len(&self) -> usize {
        self.batch_offsets.len() - 1
    }

    /// Borrowed view of the `b`-th point set in the batch.
    pub fn batch(&self, b: usize) -> CloudView<'_> {
        let (lo, hi) = (self.batch_offsets[b], self.batch_offsets[b + 1]);
        CloudView {
            positions: &self.positions[lo * self.dim..hi * self.dim],
            dim: self.dim,
            features: self
                .features
                .as_deref()
                .map(|f| &f[lo * self.feature_dim..hi * self.feature_dim]),
            feature_dim: self.feature_dim,
        }
    }

    pub fn view(&self) -> CloudView<'_> {
        CloudView {
            positions: &self.positions,
            dim: self.dim,
            features: self.features.as_deref(),
            feature_dim: self.feature_dim,
        }
    }

    /// Copy of the cloud with rows reordered so that row `i` of the result is
    /// row `order[i]` of `self`. Batch structure is dropped.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::Shape("reorder length differs from point count".into()));
        }
        let d = self.dim;
        let positions = order
            .iter()
            .flat_map(|&i| self.positions[i * d..(i + 1) * d].iter().copied())
            .collect();
        let features = self.features.as_ref().map(|f| {
            let c = self.feature_dim;
            order
                .iter()
                .flat_map(|&i| f[i * c..(i + 1) * c].iter().copied())
                .collect()
        });
        Self::with_batches(positions, d, features, self.feature_dim, vec![0, order.len()])
    }
}

/// Borrowed single point set.
#[derive(Clone, Copy, Debug)]
pub struct CloudView<'a> {
    pub positions: &'a [f64],
    pub dim: usize,
    pub features: Option<&'a [f64]>,
    pub feature_dim: usize,
}

impl<'a> CloudView<'a> {
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyntheticKind {
    /// Uniform samples in the unit box.
    UniformBox,
    /// Isotropic Gaussian clusters around uniformly placed centres.
    GaussianBlobs { blobs: usize, spread: f64 },
    /// Random walk whose consecutive points are at most `bond_length` apart.
    ChainPolymer { bond_length: f64 },
    /// Ring (2D) or spherical shell (3D) with radii in `[inner, outer]`.
    Annulus { inner: f64, outer: f64 },
}

impl SyntheticKind {
    pub const DEFAULT_BOND_LENGTH: f64 = 0.05;
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-box" => Ok(SyntheticKind::UniformBox),
            "gaussian-blobs" => Ok(SyntheticKind::GaussianBlobs { blobs: 4, spread: 0.05 }),
            "chain-polymer" => Ok(SyntheticKind::ChainPolymer {
                bond_length: Self::DEFAULT_BOND_LENGTH,
            }),
            "annulus" => Ok(SyntheticKind::Annulus { inner: 0.5, outer: 1.0 }),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::UniformBox => "uniform-box",
            SyntheticKind::GaussianBlobs { .. } => "gaussian-blobs",
            SyntheticKind::ChainPolymer { .. } => "chain-polymer",
            SyntheticKind::Annulus { .. } => "annulus",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize, dim: usize, seed: u64) -> Self {
        SyntheticSpec { kind, n, dim, seed }
    }
}

/// Generates a deterministic point cloud: the same spec always yields the
/// same bytes.
pub fn generate(spec: &SyntheticSpec) -> Result<PointCloud> {
    let SyntheticSpec { kind, n, dim, seed } = *spec;
    if n == 0 {
        return Err(Error::Config("synthetic cloud needs at least one point".into()));
    }
    if dim != 2 && dim != 3 {
        return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::with_capacity(n * dim);
    match kind {
        SyntheticKind::UniformBox => {
            pos.extend((0..n * dim).map(|_| rng.random::<f64>()));
        }
        SyntheticKind::GaussianBlobs { blobs, spread } => {
            if blobs == 0 || spread.is_nan() || spread < 0.0 {
                return Err(Error::Config("gaussian-blobs needs blobs ≥ 1 and spread ≥ 0".into()));
            }
            let centres: Vec<f64> = (0..blobs * dim).map(|_| rng.random::<f64>()).collect();
            for _ in 0..n {
                let b = rng.random_range(0..blobs);
                for k in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    pos.push(centres[b * dim + k] + spread * z);
                }
            }
        }
        SyntheticKind::ChainPolymer { bond_length } => {
            if !(bond_length > 0.0 && bond_length.is_finite()) {
                return Err(Error::Config("chain-polymer bond length must be positive".into()));
            }
            let mut cur = vec![0.0; dim];
            pos.extend_from_slice(&cur);
            for _ in 1..n {
                let dir = unit_vector(&mut rng, dim);
                // step lengths in [0.9, 1.0) of the bond keep rounding below the bound
                let len = bond_length * (0.9 + 0.1 * rng.random::<f64>()) * (1.0 - 1e-9);
                for k in 0..dim {
                    cur[k] += len * dir[k];
                }
                pos.extend_from_slice(&cur);
            }
        }
        SyntheticKind::Annulus { inner, outer } => {
            if !(inner >= 0.0 && outer >= inner) {
                return Err(Error::Config("annulus needs 0 ≤ inner ≤ outer".into()));
            }
            for _ in 0..n {
                let dir = unit_vector(&mut rng, dim);
                let r = inner + (outer - inner) * rng.random::<f64>();
                pos.extend(dir.iter().map(|u| r * u));
            }
        }
    }
    PointCloud::new(pos, dim)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Reads a cloud from CSV. `"-"` reads standard input.
///
/// The first `dim` columns are coordinates and any further columns become
/// features. A header row is detected when its first field is not numeric.
pub fn load_csv(path: impl AsRef<Path>, dim: usize) -> Result<PointCloud> {
    let path = path.as_ref();
    if path == Path::new("-") {
        read_csv(std::io::stdin().lock(), dim)
    } else {
        read_csv(std::fs::File::open(path)?, dim)
    }
}

pub fn read_csv<R: Read>(reader: R, dim: usize) -> Result<PointCloud> {
    if dim != 2 && dim != 3 {
        return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut width: Option<usize> = None;
    for (row, record) in rdr.records().enumerate() {
        let line = row + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if row == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("field {} `{f}` is not a number", col + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() < dim {
            return Err(Error::Parse {
                line,
                message: format!("expected at least {dim} fields, found {}", values.len()),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("field {} is not finite", i + 1),
            });
        }
        positions.extend_from_slice(&values[..dim]);
        features.extend_from_slice(&values[dim..]);
    }
    let width = width.ok_or_else(|| Error::Input("CSV contains no data rows".into()))?;
    let fdim = width - dim;
    let features = (fdim > 0).then_some(features);
    let n = positions.len() / dim;
    PointCloud::with_batches(positions, dim, features, fdim, vec![0, n])
}

/// Writes the header `x0..x{d-1},f0..` followed by one row per point.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so a save/load round trip is exact.
pub fn save_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path == Path::new("-") {
        write_csv(cloud, std::io::stdout().lock())
    } else {
        write_csv(cloud, std::fs::File::create(path)?)
    }
}

pub fn write_csv<W: Write>(cloud: &PointCloud, writer: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let d = cloud.dim();
    let c = cloud.feature_dim();
    let header: Vec<String> = (0..d)
        .map(|k| format!("x{k}"))
        .chain((0..c).map(|k| format!("f{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..cloud.len() {
        let mut fields: Vec<String> = cloud.point(i).iter().map(|v| v.to_string()).collect();
        if let Some(f) = cloud.features() {
            fields.extend(f[i * c..(i + 1) * c].iter().map(|v| v.to_string()));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_uniform_point_lies_in_unit_square() {
        let c = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 1, 2, 0)).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.positions().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::new("gaussian-blobs".parse().unwrap(), 1000, 3, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let bits = |c: &PointCloud| c.positions().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn chain_polymer_bond_lengths_are_bounded() {
        let bond = 0.05;
        let spec = SyntheticSpec::new(SyntheticKind::ChainPolymer { bond_length: bond }, 64, 3, 1);
        let c = generate(&spec).unwrap();
        let max_step = (1..c.len())
            .map(|i| {
                c.point(i)
                    .iter()
                    .zip(c.point(i - 1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(max_step <= bond, "{max_step}");
        assert!(max_step > 0.5 * bond);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 10, 4, 0)),
            Err(Error::Config(_))
        ));
        assert!(generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 0, 2, 0)).is_err());
        assert!("spiral".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn csv_without_header_or_features() {
        let c = read_csv("0,0\n1,0\n0,1\n".as_bytes(), 2).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.features().is_none());
        assert_eq!(c.point(2), &[0.0, 1.0]);
    }

    #[test]
    fn extra_columns_become_features() {
        let data = "x0,x1,x2,f0,f1\n1,2,3,4,5\n6,7,8,9,10\n";
        let c = read_csv(data.as_bytes(), 3).unwrap();
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.features().unwrap(), &[4.0, 5.0, 9.0, 10.0]);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let err = read_csv("0,0\n1,abc\n".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_csv("0,0\n1\n".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(read_csv("".as_bytes(), 2), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_positions_are_rejected() {
        assert!(PointCloud::new(vec![0.0, f64::NAN], 2).is_err());
    }

    #[test]
    fn concat_packs_offsets() {
        let a = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 3, 2, 0)).unwrap();
        let b = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 5, 2, 1)).unwrap();
        let p = PointCloud::concat(&[a.clone(), b]).unwrap();
        assert_eq!(p.batch_offsets(), &[0, 3, 8]);
        assert_eq!(p.batch(0).positions, a.positions());
    }
}
