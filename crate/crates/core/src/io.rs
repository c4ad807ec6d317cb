//! CSV dataset and trajectory files.
//!
//! Every file is UTF-8 CSV with a header row. Floats are written in the
//! shortest form that parses back to the identical `f64`, so a write/read
//! round trip is exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Quat;
use crate::motion::{ImuSample, NAV_DIM};
use crate::radar::{RadarDetection, RadarScan};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// Records may arrive this far (s) behind the newest one seen and are re-sorted.
pub const REORDER_WINDOW: f64 = 0.010;

pub const IMU_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "wx", "wy", "wz"];
pub const RADAR_HEADER: [&str; 5] = ["t", "azimuth", "elevation", "range", "doppler"];
pub const POSE_HEADER: [&str; 11] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];
pub const SIGMA_HEADER: [&str; NAV_DIM] = [
    "sigma_vx", "sigma_vy", "sigma_vz", "sigma_rx", "sigma_ry", "sigma_rz", "sigma_px", "sigma_py", "sigma_pz",
];

struct Table {
    path: PathBuf,
    header: Vec<String>,
    /// (line, fields)
    rows: Vec<(usize, Vec<f64>)>,
}

impl Table {
    fn parse_error(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.column(n)
                    .ok_or_else(|| self.parse_error(1, format!("missing column {n:?}")))
            })
            .collect()
    }

    /// Row order sorted by time, tolerating disorder within the re-sort window.
    fn time_order(&self, t_col: usize) -> Result<Vec<usize>> {
        let mut newest = f64::NEG_INFINITY;
        for (line, row) in &self.rows {
            let t = row[t_col];
            if t < newest - REORDER_WINDOW {
                return Err(Error::Monotonicity {
                    path: self.path.clone(),
                    line: *line,
                    t_prev: newest,
                    t,
                });
            }
            newest = newest.max(t);
        }
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_by(|&a, &b| self.rows[a].1[t_col].total_cmp(&self.rows[b].1[t_col]));
        Ok(order)
    }
}

/// Empty fields in `nullable` columns read as NaN.
fn read_table(reader: impl Read, path: &Path, nullable: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let csv_error = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("{kind:?}"),
            },
        }
    };
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    let mut table = Table {
        path: path.to_path_buf(),
        header,
        rows: Vec::new(),
    };
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut row = Vec::with_capacity(record.len());
        for (i, field) in record.iter().enumerate() {
            if field.is_empty() && nullable.contains(&table.header[i].as_str()) {
                row.push(f64::NAN);
                continue;
            }
            let x: f64 = field.parse().map_err(|_| {
                table.parse_error(line, format!("column {:?}: not a number: {field:?}", table.header[i]))
            })?;
            if !x.is_finite() {
                return Err(table.parse_error(line, format!("column {:?}: non-finite value", table.header[i])));
            }
            row.push(x);
        }
        table.rows.push((line, row));
    }
    Ok(table)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    read_imu_from(open(path)?, path)
}

/// `path` only labels errors.
pub fn read_imu_from(reader: impl Read, path: &Path) -> Result<Vec<ImuSample>> {
    let table = read_table(reader, path, &[])?;
    let c = table.require(&IMU_HEADER)?;
    let order = table.time_order(c[0])?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(order.len());
    for i in order {
        let (line, r) = &table.rows[i];
        let s = ImuSample::new(
            r[c[0]],
            Vector3::new(r[c[1]], r[c[2]], r[c[3]]),
            Vector3::new(r[c[4]], r[c[5]], r[c[6]]),
        );
        if let Some(prev) = out.last() {
            if s.t <= prev.t {
                return Err(Error::Monotonicity {
                    path: path.to_path_buf(),
                    line: *line,
                    t_prev: prev.t,
                    t: s.t,
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_radar(path: &Path, sensor: usize) -> Result<Vec<RadarScan>> {
    read_radar_from(open(path)?, path, sensor)
}

/// Rows sharing a timestamp form one scan.
pub fn read_radar_from(reader: impl Read, path: &Path, sensor: usize) -> Result<Vec<RadarScan>> {
    let table = read_table(reader, path, &["snr"])?;
    let c = table.require(&RADAR_HEADER)?;
    let snr = table.column("snr");
    let order = table.time_order(c[0])?;
    let mut scans: Vec<RadarScan> = Vec::new();
    for i in order {
        let r = &table.rows[i].1;
        let t = r[c[0]];
        let d = RadarDetection {
            azimuth: r[c[1]],
            elevation: r[c[2]],
            range: r[c[3]],
            doppler: r[c[4]],
            snr: snr.map(|k| r[k]).filter(|x| !x.is_nan()),
        };
        match scans.last_mut() {
            Some(scan) if scan.t == t => scan.detections.push(d),
            _ => scans.push(RadarScan {
                t,
                sensor,
                detections: vec![d],
            }),
        }
    }
    Ok(scans)
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn write_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::InvalidInput(format!("{kind:?}")),
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_imu<W: Write>(w: W, samples: &[ImuSample]) -> Result<()> {
    let mut wtr = writer(w);
    wtr.write_record(IMU_HEADER).map_err(write_err)?;
    for s in samples {
        let row = [s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z];
        wtr.write_record(row.map(fmt)).map_err(write_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// The `snr` column is written when any detection carries one.
pub fn write_radar<W: Write>(w: W, scans: &[RadarScan]) -> Result<()> {
    let with_snr = scans.iter().flat_map(|s| &s.detections).any(|d| d.snr.is_some());
    let mut wtr = writer(w);
    let mut header: Vec<&str> = RADAR_HEADER.to_vec();
    if with_snr {
        header.push("snr");
    }
    wtr.write_record(&header).map_err(write_err)?;
    for scan in scans {
        for d in &scan.detections {
            let mut row = vec![
                fmt(scan.t),
                fmt(d.azimuth),
                fmt(d.elevation),
                fmt(d.range),
                fmt(d.doppler),
            ];
            if with_snr {
                row.push(d.snr.map_or_else(String::new, fmt));
            }
            wtr.write_record(&row).map_err(write_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Sigma columns are written when every point carries them.
pub fn write_trajectory<W: Write>(w: W, traj: &Trajectory) -> Result<()> {
    let with_sigma = !traj.is_empty() && traj.points.iter().all(|p| p.sigma.is_some());
    let mut wtr = writer(w);
    let mut header: Vec<&str> = POSE_HEADER.to_vec();
    if with_sigma {
        header.extend(SIGMA_HEADER);
    }
    wtr.write_record(&header).map_err(write_err)?;
    for pt in &traj.points {
        let q = pt.q.quaternion();
        let mut row: Vec<f64> = vec![pt.t, pt.p.x, pt.p.y, pt.p.z, q.w, q.i, q.j, q.k, pt.v.x, pt.v.y, pt.v.z];
        if let (true, Some(s)) = (with_sigma, pt.sigma) {
            row.extend(s);
        }
        wtr.write_record(row.into_iter().map(fmt)).map_err(write_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trajectory_file(path: &Path, traj: &Trajectory) -> Result<()> {
    write_trajectory(BufWriter::new(File::create(path)?), traj)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory_from(open(path)?, path)
}

/// Velocity and sigma columns are optional; extra columns are ignored.
pub fn read_trajectory_from(reader: impl Read, path: &Path) -> Result<Trajectory> {
    let table = read_table(reader, path, &[])?;
    let c = table.require(&POSE_HEADER[..8])?;
    let v: Option<Vec<usize>> = POSE_HEADER[8..].iter().map(|n| table.column(n)).collect();
    let sig: Option<Vec<usize>> = SIGMA_HEADER.iter().map(|n| table.column(n)).collect();
    let mut points = Vec::with_capacity(table.rows.len());
    for (line, r) in &table.rows {
        let quat = Quaternion::new(r[c[4]], r[c[5]], r[c[6]], r[c[7]]);
        let norm = quat.norm();
        if !(norm > 0.5 && norm < 2.0) {
            return Err(table.parse_error(*line, format!("quaternion norm {norm} is not close to 1")));
        }
        let t = r[c[0]];
        if let Some(prev) = points.last().map(|p: &TrajectoryPoint| p.t) {
            if t <= prev {
                return Err(Error::Monotonicity {
                    path: path.to_path_buf(),
                    line: *line,
                    t_prev: prev,
                    t,
                });
            }
        }
        points.push(TrajectoryPoint {
            t,
            p: Vector3::new(r[c[1]], r[c[2]], r[c[3]]),
            // Written unit quaternions come back bit-exact; only renormalize real drift.
            q: if (norm - 1.0).abs() < 1e-12 {
                Quat::new_unchecked(quat)
            } else {
                Quat::from_quaternion(quat)
            },
            v: v.as_ref()
                .map_or_else(Vector3::zeros, |k| Vector3::new(r[k[0]], r[k[1]], r[k[2]])),
            sigma: sig.as_ref().map(|k| std::array::from_fn(|i| r[k[i]])),
        });
    }
    Ok(Trajectory { points })
}
