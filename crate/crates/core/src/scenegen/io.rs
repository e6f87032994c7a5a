// SPDX-License-Identifier: Apache-2.0

//! Point-cloud CSV interchange.
//!
//! One point per row, `x,y,z` or `x,y,z,tag`, coordinates written with six
//! decimal places. A header row (`x,y,z` / `x,y,z,tag`) is only written when
//! [`CsvOptions::header`] is set; the loader accepts files with or without it.
//! An empty cloud is written as an empty file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LabeledScene, Point3};
use crate::{Error, Result};

pub const DECIMALS: usize = 6;

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    pub header: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFile {
    pub points: Vec<Point3>,
    pub tags: Option<Vec<i64>>,
}

pub fn save_point_cloud(
    points: &[Point3],
    tags: Option<&[i64]>,
    path: &Path,
    opts: CsvOptions,
) -> Result<()> {
    if let Some(t) = tags {
        if t.len() != points.len() {
            return Err(Error::Contract(format!(
                "{} tags for {} points",
                t.len(),
                points.len()
            )));
        }
    }
    let mut out = String::with_capacity(points.len() * 40);
    if opts.header && !points.is_empty() {
        out.push_str(if tags.is_some() { "x,y,z,tag\n" } else { "x,y,z\n" });
    }
    for (i, p) in points.iter().enumerate() {
        write!(out, "{:.*},{:.*},{:.*}", DECIMALS, p.x, DECIMALS, p.y, DECIMALS, p.z).unwrap();
        if let Some(t) = tags {
            write!(out, ",{}", t[i]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloudFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut tags = Vec::new();
    let mut columns: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && (line == "x,y,z" || line == "x,y,z,tag") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 3 or 4 columns, found {}", fields.len()),
            });
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!(
                        "mixed column counts: line {line_no} has {} columns, earlier rows have {c}",
                        fields.len()
                    ),
                })
            }
            Some(_) => {}
        }
        let coord = |s: &str, name: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("bad {name} value {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("non-finite {name} value"),
                });
            }
            Ok(v)
        };
        points.push(Point3::new(
            coord(fields[0], "x")?,
            coord(fields[1], "y")?,
            coord(fields[2], "z")?,
        ));
        if fields.len() == 4 {
            tags.push(fields[3].parse::<i64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("bad tag value {:?}", fields[3]),
            })?);
        }
    }
    let tags = (columns == Some(4)).then_some(tags);
    Ok(PointCloudFile { points, tags })
}

/// One integer label per line.
pub fn save_labels(labels: &[i64], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(out, "{l}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("bad label {l:?}"),
            })
        })
        .collect()
}

/// A scene as written by `save_point_cloud` plus `save_labels`. Object
/// centres are recomputed as the mean of each object's points.
pub fn load_labeled_scene(points_path: &Path, labels_path: &Path) -> Result<LabeledScene> {
    let cloud = load_point_cloud(points_path)?;
    let labels = load_labels(labels_path)?;
    if labels.len() != cloud.points.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            reason: format!("{} labels for {} points", labels.len(), cloud.points.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l < -1) {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            reason: format!("label {bad} below -1"),
        });
    }
    let n_objects = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut sums = vec![(0.0, 0.0, 0.0, 0usize); n_objects];
    for (p, &l) in cloud.points.iter().zip(&labels) {
        if l >= 0 {
            let s = &mut sums[l as usize];
            s.0 += p.x;
            s.1 += p.y;
            s.2 += p.z;
            s.3 += 1;
        }
    }
    let mut object_centers = Vec::with_capacity(n_objects);
    for (id, &(x, y, z, n)) in sums.iter().enumerate() {
        if n == 0 {
            return Err(Error::Format {
                path: labels_path.to_path_buf(),
                reason: format!("object {id} has no points"),
            });
        }
        let k = n as f64;
        object_centers.push(Point3::new(x / k, y / k, z / k));
    }
    Ok(LabeledScene {
        points: cloud.points,
        true_membership: labels,
        object_centers,
    })
}
