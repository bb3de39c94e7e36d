//! On-disk dataset formats.
//!
//! * Scans: flat little-endian `f32` quadruples `(x, y, z, intensity)`, one
//!   file per sweep (`000000.bin`, `000001.bin`, ...).
//! * Labels: one little-endian `u32` per point. The low 16 bits hold the
//!   SemanticKITTI class id; the instance id in the high bits is ignored.
//! * Poses: text, one pose per line, 12 floats of a row-major `3×4 [R | t]`.
//!   Trajectories written by this crate use `nan` for all 12 values of a
//!   scan that has no valid pose, so line `k` always belongs to scan `k`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{GeometryError, Pose};
use crate::point::{LabeledPoint, Scan, SemanticClass};

pub const MIN_RANGE: f64 = 1.0;
pub const MAX_RANGE: f64 = 120.0;

/// Rotations further than this from orthonormal are reported when loading
/// ground truth (they are projected back either way).
const GROUNDTRUTH_ORTHONORMAL_WARN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scan index {index} out of range ({count} scans)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("{path}: size {size} bytes is not a multiple of {record}")]
    Truncated {
        path: PathBuf,
        size: usize,
        record: usize,
    },
    #[error("scan has {points} points but label file has {labels}")]
    LabelCountMismatch { points: usize, labels: usize },
    #[error("{count} scans but {labels} label files")]
    LabelFileCountMismatch { count: usize, labels: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    InvalidPose {
        path: PathBuf,
        line: usize,
        #[source]
        source: GeometryError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a sequence lives on disk.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub scan_dir: PathBuf,
    pub label_dir: Option<PathBuf>,
    pub groundtruth: Option<PathBuf>,
    /// Sensor-from-reference transform; ground truth `P` is mapped to
    /// `E⁻¹ P E`.
    pub extrinsic: Pose,
    scans: Vec<PathBuf>,
}

impl DatasetSource {
    /// Indexes the `.bin` files in `scan_dir` (sorted by name). When a label
    /// directory is given it must hold one `.label` file per scan.
    pub fn open(
        scan_dir: impl Into<PathBuf>,
        label_dir: Option<PathBuf>,
        groundtruth: Option<PathBuf>,
    ) -> Result<Self, DatasetError> {
        let scan_dir = scan_dir.into();
        let scans = list_with_extension(&scan_dir, "bin")?;
        if let Some(dir) = &label_dir {
            let labels = list_with_extension(dir, "label")?;
            if labels.len() != scans.len() {
                return Err(DatasetError::LabelFileCountMismatch {
                    count: scans.len(),
                    labels: labels.len(),
                });
            }
        }
        Ok(DatasetSource {
            scan_dir,
            label_dir,
            groundtruth,
            extrinsic: Pose::identity(),
            scans,
        })
    }

    pub fn with_extrinsic(mut self, extrinsic: Pose) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scan_path(&self, index: usize) -> Option<&Path> {
        self.scans.get(index).map(PathBuf::as_path)
    }

    fn label_path(&self, index: usize) -> Option<PathBuf> {
        let dir = self.label_dir.as_ref()?;
        let stem = self.scans[index].file_stem()?;
        Some(dir.join(stem).with_extension("label"))
    }

    pub fn read_scan(&self, index: usize) -> Result<Scan, DatasetError> {
        if index >= self.scans.len() {
            return Err(DatasetError::IndexOutOfRange {
                index,
                count: self.scans.len(),
            });
        }
        let label_path = self.label_path(index);
        read_scan_files(&self.scans[index], label_path.as_deref(), index)
    }

    pub fn read_groundtruth(&self) -> Result<Option<Vec<Pose>>, DatasetError> {
        match &self.groundtruth {
            None => Ok(None),
            Some(path) => read_groundtruth(path, &self.extrinsic).map(Some),
        }
    }
}

/// Random-access sequence of scans with optional ground truth.
pub trait ScanSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scan(&self, index: usize) -> Result<Scan, DatasetError>;

    /// One pose per scan, when available.
    fn groundtruth(&self) -> Result<Option<Vec<Pose>>, DatasetError>;
}

impl ScanSource for DatasetSource {
    fn len(&self) -> usize {
        DatasetSource::len(self)
    }

    fn scan(&self, index: usize) -> Result<Scan, DatasetError> {
        self.read_scan(index)
    }

    fn groundtruth(&self) -> Result<Option<Vec<Pose>>, DatasetError> {
        self.read_groundtruth()
    }
}

/// The scans of `inner` at `indices`, renumbered from zero.
#[derive(Debug, Clone)]
pub struct Subsequence<'a, S: ?Sized> {
    pub inner: &'a S,
    pub indices: Vec<usize>,
}

impl<'a, S: ScanSource + ?Sized> Subsequence<'a, S> {
    pub fn new(inner: &'a S, indices: Vec<usize>) -> Self {
        Subsequence { inner, indices }
    }
}

impl<S: ScanSource + ?Sized> ScanSource for Subsequence<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn scan(&self, index: usize) -> Result<Scan, DatasetError> {
        let &source = self.indices.get(index).ok_or(DatasetError::IndexOutOfRange {
            index,
            count: self.indices.len(),
        })?;
        let mut scan = self.inner.scan(source)?;
        scan.index = index;
        Ok(scan)
    }

    fn groundtruth(&self) -> Result<Option<Vec<Pose>>, DatasetError> {
        Ok(self
            .inner
            .groundtruth()?
            .map(|gt| self.indices.iter().filter_map(|&i| gt.get(i).copied()).collect()))
    }
}

fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one scan and, optionally, its labels.
///
/// Non-finite points and points outside `[1, 120]` m are dropped after the
/// labels are merged, so label order always follows file order. Stamps come
/// from azimuth, see [`azimuth_stamp`].
pub fn read_scan_files(
    scan_path: &Path,
    label_path: Option<&Path>,
    index: usize,
) -> Result<Scan, DatasetError> {
    let bytes = fs::read(scan_path).map_err(io_err(scan_path))?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::Truncated {
            path: scan_path.to_path_buf(),
            size: bytes.len(),
            record: 16,
        });
    }
    let raw: Vec<[f32; 3]> = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            [f(0), f(4), f(8)]
        })
        .collect();

    let labels = match label_path {
        None => vec![SemanticClass::Other; raw.len()],
        Some(path) => {
            let lb = fs::read(path).map_err(io_err(path))?;
            if lb.len() % 4 != 0 {
                return Err(DatasetError::Truncated {
                    path: path.to_path_buf(),
                    size: lb.len(),
                    record: 4,
                });
            }
            if lb.len() / 4 != raw.len() {
                return Err(DatasetError::LabelCountMismatch {
                    points: raw.len(),
                    labels: lb.len() / 4,
                });
            }
            lb.chunks_exact(4)
                .map(|c| {
                    let word = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    SemanticClass::from_semantic_kitti((word & 0xffff) as u16)
                })
                .collect()
        }
    };

    let first_azimuth = raw
        .iter()
        .find(|p| p.iter().all(|v| v.is_finite()) && (p[0] != 0.0 || p[1] != 0.0))
        .map(|p| (p[1] as f64).atan2(p[0] as f64))
        .unwrap_or(0.0);

    let points = raw
        .iter()
        .zip(labels)
        .filter_map(|(p, label)| {
            let v = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            if !v.iter().all(|c| c.is_finite()) {
                return None;
            }
            let range = v.norm();
            if !(MIN_RANGE..=MAX_RANGE).contains(&range) {
                return None;
            }
            Some(LabeledPoint::new(v, label, azimuth_stamp(first_azimuth, &v)))
        })
        .collect();
    Ok(Scan::new(index, points))
}

/// In-sweep fraction for a clockwise-spinning sensor whose sweep starts at
/// azimuth `first_azimuth`: `((az₀ − az) mod 2π) / 2π`.
pub fn azimuth_stamp(first_azimuth: f64, p: &Vector3<f64>) -> f64 {
    let tau = std::f64::consts::TAU;
    let delta = (first_azimuth - p.y.atan2(p.x)).rem_euclid(tau);
    (delta / tau).clamp(0.0, 1.0)
}

/// Writes points as KITTI float32 quadruples with zero intensity.
pub fn write_scan_file(path: &Path, scan: &Scan) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(scan.len() * 16);
    for p in &scan.points {
        for v in [p.position.x as f32, p.position.y as f32, p.position.z as f32, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_label_file(path: &Path, scan: &Scan) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(scan.len() * 4);
    for p in &scan.points {
        bytes.extend_from_slice(&(p.label.semantic_kitti_id() as u32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a pose file. Lines whose 12 values are all `nan` come back as
/// `None`.
pub fn read_pose_file(path: &Path) -> Result<Vec<Option<Pose>>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let values: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected 12 values, found {}", v.len()),
        })?;
        if values.iter().all(|v| v.is_nan()) {
            out.push(None);
            continue;
        }
        let pose = Pose::from_row_major_3x4(&values).map_err(|source| DatasetError::InvalidPose {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?;
        let raw = nalgebra::Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let drift = (raw.transpose() * raw - nalgebra::Matrix3::identity()).norm();
        if drift > GROUNDTRUTH_ORTHONORMAL_WARN {
            log::warn!("{}:{line_no}: rotation off SO(3) by {drift:.3e}, re-orthonormalized", path.display());
        }
        out.push(Some(pose));
    }
    Ok(out)
}

/// Reads a ground-truth file where every line is a valid pose, expressing
/// each pose in the sensor frame through `extrinsic` (`E⁻¹ P E`).
pub fn read_groundtruth(path: &Path, extrinsic: &Pose) -> Result<Vec<Pose>, DatasetError> {
    let ext_inv = extrinsic.inverse();
    read_pose_file(path)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.map(|p| ext_inv.compose(&p).compose(extrinsic))
                .ok_or_else(|| DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "ground truth cannot contain nan poses".into(),
                })
        })
        .collect()
}

/// Reads the `Tr:` line of a KITTI `calib.txt`: the LiDAR-to-camera
/// extrinsic used to bring camera-frame ground truth into the sensor frame.
pub fn read_calibration(path: &Path) -> Result<Pose, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("Tr:") else { continue };
        let parse = |message: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| parse(e.to_string()))?;
        let values: [f64; 12] = values
            .try_into()
            .map_err(|v: Vec<f64>| parse(format!("expected 12 values, found {}", v.len())))?;
        return Pose::from_row_major_3x4(&values).map_err(|source| DatasetError::InvalidPose {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        });
    }
    Err(DatasetError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "no `Tr:` line".into(),
    })
}

/// `%.8e` formatting: nine significant digits.
fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let s = format!("{v:.8e}");
    // Rust prints `1.00000000e0`; normalize the exponent to `e+00` form.
    match s.split_once('e') {
        Some((mantissa, exp)) => {
            let (sign, digits) = match exp.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', exp),
            };
            format!("{mantissa}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

pub fn format_pose_line(pose: Option<&Pose>) -> String {
    let values = pose.map_or([f64::NAN; 12], Pose::to_row_major_3x4);
    values.iter().map(|v| fmt_value(*v)).collect::<Vec<_>>().join(" ")
}

pub fn write_trajectory(path: &Path, poses: &[Option<Pose>]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in poses {
        writeln!(w, "{}", format_pose_line(p.as_ref())).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes(points: &[[f32; 4]]) -> Vec<u8> {
        points.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn crafted_four_point_scan_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("000000.bin");
        let lab = dir.path().join("000000.label");
        fs::write(
            &bin,
            fixture_bytes(&[
                [5.0, 0.0, 0.0, 0.1],
                [0.0, 5.0, 0.0, 0.2],
                [-5.0, 0.0, 1.0, 0.3],
                [0.0, -5.0, -1.0, 0.4],
            ]),
        )
        .unwrap();
        // Instance id in the high half must be ignored.
        let labels: Vec<u8> = [80u32 | (7 << 16), 71, 10 | (3 << 16), 0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&lab, labels).unwrap();
        let scan = read_scan_files(&bin, Some(&lab), 0).unwrap();
        assert_eq!(scan.len(), 4);
        let classes: Vec<_> = scan.points.iter().map(|p| p.label).collect();
        assert_eq!(
            classes,
            vec![
                SemanticClass::Pole,
                SemanticClass::Trunk,
                SemanticClass::Vehicle,
                SemanticClass::Other
            ]
        );
        assert_eq!(scan.points[2].position, Vector3::new(-5.0, 0.0, 1.0));
        // Clockwise from +x: +y is three quarters round, -x half, -y one quarter.
        let stamps: Vec<f64> = scan.points.iter().map(|p| p.stamp).collect();
        assert_eq!(stamps, vec![0.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn range_gate_drops_origin_and_far_points() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("a.bin");
        fs::write(
            &bin,
            fixture_bytes(&[
                [0.0, 0.0, 0.0, 0.0],
                [10.0, 0.0, 0.0, 0.0],
                [200.0, 0.0, 0.0, 0.0],
                [f32::NAN, 0.0, 0.0, 0.0],
            ]),
        )
        .unwrap();
        let scan = read_scan_files(&bin, None, 3).unwrap();
        assert_eq!(scan.index, 3);
        assert_eq!(scan.len(), 1);
        assert_eq!(scan.points[0].label, SemanticClass::Other);
    }

    #[test]
    fn label_size_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("a.bin");
        let lab = dir.path().join("a.label");
        fs::write(&bin, fixture_bytes(&[[5.0, 0.0, 0.0, 0.0], [6.0, 0.0, 0.0, 0.0]])).unwrap();
        fs::write(&lab, 10u32.to_le_bytes()).unwrap();
        assert!(matches!(
            read_scan_files(&bin, Some(&lab), 0),
            Err(DatasetError::LabelCountMismatch { points: 2, labels: 1 })
        ));
        assert!(matches!(
            read_scan_files(&dir.path().join("missing.bin"), None, 0),
            Err(DatasetError::Io { .. })
        ));
        fs::write(&bin, [0u8; 10]).unwrap();
        assert!(matches!(read_scan_files(&bin, None, 0), Err(DatasetError::Truncated { .. })));
    }

    #[test]
    fn scan_round_trip_is_bit_exact_for_f32_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<LabeledPoint> = (0..50)
            .map(|i| {
                let a = -(i as f64) * 0.1;
                let r = 5.0 + i as f64 * 0.37;
                let v = Vector3::new((r * a.cos()) as f32 as f64, (r * a.sin()) as f32 as f64, 0.25);
                LabeledPoint::new(v, SemanticClass::ALL[i % 7], 0.0)
            })
            .collect();
        let scan = Scan::new(0, points);
        let bin = dir.path().join("000000.bin");
        let lab = dir.path().join("000000.label");
        write_scan_file(&bin, &scan).unwrap();
        write_label_file(&lab, &scan).unwrap();
        let back = read_scan_files(&bin, Some(&lab), 0).unwrap();
        assert_eq!(back.len(), scan.len());
        for (a, b) in scan.points.iter().zip(&back.points) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn dataset_source_lists_and_checks_label_count() {
        let dir = tempfile::tempdir().unwrap();
        let scans = dir.path().join("velodyne");
        let labels = dir.path().join("labels");
        fs::create_dir_all(&scans).unwrap();
        fs::create_dir_all(&labels).unwrap();
        for i in 0..3 {
            fs::write(scans.join(format!("{i:06}.bin")), fixture_bytes(&[[5.0, 1.0, 0.0, 0.0]])).unwrap();
        }
        for i in 0..2 {
            fs::write(labels.join(format!("{i:06}.label")), 80u32.to_le_bytes()).unwrap();
        }
        assert!(matches!(
            DatasetSource::open(&scans, Some(labels.clone()), None),
            Err(DatasetError::LabelFileCountMismatch { count: 3, labels: 2 })
        ));
        fs::write(labels.join("000002.label"), 71u32.to_le_bytes()).unwrap();
        let src = DatasetSource::open(&scans, Some(labels), None).unwrap();
        assert_eq!(src.len(), 3);
        assert_eq!(src.read_scan(2).unwrap().points[0].label, SemanticClass::Trunk);
        assert!(matches!(src.read_scan(3), Err(DatasetError::IndexOutOfRange { .. })));
    }

    #[test]
    fn groundtruth_identity_count_and_reflection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let poses = read_groundtruth(&path, &Pose::identity()).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0], Pose::identity());

        fs::write(
            &path,
            "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 1 0 1 0 0 0 0 1 0\n1 0 0 2 0 1 0 0 0 0 1 0\n",
        )
        .unwrap();
        let poses = read_groundtruth(&path, &Pose::identity()).unwrap();
        assert_eq!(poses.len(), 3);
        assert_eq!(poses[2].translation(), &Vector3::new(2.0, 0.0, 0.0));

        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 -1 0\n").unwrap();
        assert!(matches!(
            read_groundtruth(&path, &Pose::identity()),
            Err(DatasetError::InvalidPose { line: 1, .. })
        ));
        fs::write(&path, "1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(read_groundtruth(&path, &Pose::identity()), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn groundtruth_extrinsic_conjugates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        // Camera frame moves +1 along its z axis.
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 1\n").unwrap();
        // Sensor x axis is camera z axis: E maps sensor coordinates to camera.
        let e = Pose::new(
            nalgebra::Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0)
                .transpose(),
            Vector3::zeros(),
        )
        .unwrap();
        let p = read_groundtruth(&path, &e).unwrap()[0];
        // E⁻¹ t: camera z translation seen as motion along the sensor axis.
        let expected = e.inverse().transform_point(&Vector3::new(0.0, 0.0, 1.0));
        assert!((p.translation() - expected).norm() < 1e-12);
        assert!(p.rotation_angle() < 1e-12);
    }

    #[test]
    fn trajectory_format_and_nan_slots() {
        assert_eq!(fmt_value(1.0), "1.00000000e+00");
        assert_eq!(fmt_value(-0.000123456789), "-1.23456789e-04");
        assert_eq!(fmt_value(1.5e120), "1.50000000e+120");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let a = Pose::rot_z(0.3).with_translation(Vector3::new(1.0, -2.0, 0.5));
        write_trajectory(&path, &[Some(Pose::identity()), None, Some(a)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().split(' ').all(|t| t == "nan"));
        let back = read_pose_file(&path).unwrap();
        assert_eq!(back[0], Some(Pose::identity()));
        assert!(back[1].is_none());
        let b = back[2].unwrap();
        assert!((b.translation() - a.translation()).norm() < 1e-8);
        assert!(b.between(&a).rotation_angle() < 1e-8);
    }

    #[test]
    fn calibration_tr_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        fs::write(
            &path,
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0.1 0 0 -1 -0.2 1 0 0 -0.3\n",
        )
        .unwrap();
        let tr = read_calibration(&path).unwrap();
        assert_eq!(tr.translation(), &nalgebra::Vector3::new(0.1, -0.2, -0.3));
        // Sensor x (forward) maps to camera z.
        let x = tr.rotation() * nalgebra::Vector3::x();
        assert!((x - nalgebra::Vector3::z()).norm() < 1e-12);

        fs::write(&path, "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(read_calibration(&path), Err(DatasetError::Parse { .. })));
        fs::write(&path, "Tr: 1 0 0\n").unwrap();
        assert!(matches!(read_calibration(&path), Err(DatasetError::Parse { line: 1, .. })));
    }
}
