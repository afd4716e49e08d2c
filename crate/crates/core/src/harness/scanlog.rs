//! Line-oriented scan/odometry log.
//!
//! ```text
//! # comment
//! HEADER <fov_rad> <z_max> <n_z> <off_x> <off_y> <off_theta>
//! ODOM <t> <x> <y> <theta>
//! SCAN <t> <r_1> ... <r_nz>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Pose2D;
use crate::rbpf::OdometryReading;
use crate::sensor::{Scan, ScanGeometry};

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    /// Raw odometry pose.
    Odom { t: f64, pose: Pose2D },
    Scan { t: f64, ranges: Vec<f64> },
}

impl Record {
    pub fn timestamp(&self) -> f64 {
        match self {
            Record::Odom { t, .. } | Record::Scan { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanLog {
    pub geometry: ScanGeometry,
    pub records: Vec<Record>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("invalid number '{tok}'")))
}

impl ScanLog {
    pub fn new(geometry: ScanGeometry) -> Self {
        Self {
            geometry,
            records: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut geometry: Option<ScanGeometry> = None;
        let mut records = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut toks = content.split_whitespace();
            let tag = toks.next().unwrap_or("");
            let fields: Vec<&str> = toks.collect();
            match tag {
                "HEADER" => {
                    if geometry.is_some() {
                        return Err(parse_err(line, "duplicate HEADER"));
                    }
                    if fields.len() != 6 {
                        return Err(parse_err(line, format!("HEADER expects 6 fields, got {}", fields.len())));
                    }
                    let n_z: usize = fields[2]
                        .parse()
                        .map_err(|_| parse_err(line, format!("invalid beam count '{}'", fields[2])))?;
                    let v: Vec<f64> = [0, 1, 3, 4, 5]
                        .iter()
                        .map(|&k| number(fields[k], line))
                        .collect::<Result<_>>()?;
                    if !(v[0] > 0.0) || !(v[1] > 0.0) {
                        return Err(Error::Validation(format!("line {line}: fov and z_max must be positive")));
                    }
                    geometry = Some(ScanGeometry {
                        fov: v[0],
                        n_beams: n_z,
                        max_range: v[1],
                        offset: Pose2D::new(v[2], v[3], v[4]),
                    });
                }
                "ODOM" | "SCAN" => {
                    let geom = geometry
                        .as_ref()
                        .ok_or_else(|| parse_err(line, format!("{tag} record before HEADER")))?;
                    let t = number(fields.first().ok_or_else(|| parse_err(line, "missing timestamp"))?, line)?;
                    if t < last_t {
                        return Err(Error::Validation(format!("line {line}: timestamp {t} decreases")));
                    }
                    last_t = t;
                    if tag == "ODOM" {
                        if fields.len() != 4 {
                            return Err(parse_err(line, format!("ODOM expects 4 fields, got {}", fields.len())));
                        }
                        let x = number(fields[1], line)?;
                        let y = number(fields[2], line)?;
                        let theta = number(fields[3], line)?;
                        records.push(Record::Odom {
                            t,
                            pose: Pose2D { x, y, theta },
                        });
                    } else {
                        let ranges = fields[1..]
                            .iter()
                            .map(|f| number(f, line))
                            .collect::<Result<Vec<_>>>()?;
                        if ranges.len() != geom.n_beams {
                            return Err(parse_err(
                                line,
                                format!("SCAN record has {} ranges, header declares {}", ranges.len(), geom.n_beams),
                            ));
                        }
                        if let Some(r) = ranges.iter().find(|r| !(**r >= 0.0 && **r <= geom.max_range)) {
                            return Err(Error::Validation(format!(
                                "line {line}: range {r} outside [0, {}]",
                                geom.max_range
                            )));
                        }
                        records.push(Record::Scan { t, ranges });
                    }
                }
                other => return Err(parse_err(line, format!("unknown record type '{other}'"))),
            }
        }
        let geometry = geometry.ok_or_else(|| parse_err(1, "missing HEADER"))?;
        Ok(Self { geometry, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "HEADER {} {} {} {} {} {}",
            g.fov, g.max_range, g.n_beams, g.offset.x, g.offset.y, g.offset.theta
        );
        for r in &self.records {
            match r {
                Record::Odom { t, pose } => {
                    let _ = writeln!(s, "ODOM {t} {} {} {}", pose.x, pose.y, pose.theta);
                }
                Record::Scan { t, ranges } => {
                    let _ = write!(s, "SCAN {t}");
                    for v in ranges {
                        let _ = write!(s, " {v}");
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn scan_count(&self) -> usize {
        self.records.iter().filter(|r| matches!(r, Record::Scan { .. })).count()
    }

    /// One `(odometry, scan)` pair per SCAN record. The odometry is the relative
    /// motion between the raw odometry poses latest before this scan and before
    /// the previous one; the first scan gets the identity.
    pub fn steps(&self) -> Result<Vec<(OdometryReading, Scan)>> {
        let mut out = Vec::new();
        let mut latest: Option<Pose2D> = None;
        let mut anchor: Option<Pose2D> = None;
        for r in &self.records {
            match r {
                Record::Odom { pose, .. } => latest = Some(*pose),
                Record::Scan { t, ranges } => {
                    let u = match (anchor, latest) {
                        (Some(a), Some(b)) => OdometryReading::from_poses(&a, &b),
                        _ => OdometryReading::identity(),
                    };
                    anchor = latest;
                    out.push((u, Scan::from_ranges(*t, &self.geometry, ranges)?));
                }
            }
        }
        Ok(out)
    }
}
