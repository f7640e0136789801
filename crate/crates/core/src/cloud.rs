//! Point clouds, laser profiles and ASCII PLY I/O.

use crate::error::{Error, Result};
use crate::{Transform, Vec3};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Profile points must lie in the sensor plane `y = 0` within this tolerance.
pub const PROFILE_PLANE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vec3,
    /// Grayscale intensity in `[0, 1]`, when the source provides one.
    pub intensity: Option<f64>,
}

impl CloudPoint {
    pub fn new(position: Vec3) -> Self {
        Self {
            position,
            intensity: None,
        }
    }

    pub fn with_intensity(position: Vec3, intensity: f64) -> Self {
        Self {
            position,
            intensity: Some(intensity),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self
                .intensity
                .map_or(true, |i| i.is_finite() && (0.0..=1.0).contains(&i))
    }
}

/// One laser line, expressed in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaserProfile {
    pub points: Vec<CloudPoint>,
    pub sensor_pose_index: usize,
}

impl LaserProfile {
    pub fn new(points: Vec<CloudPoint>, sensor_pose_index: usize) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| p.position.y.abs() >= PROFILE_PLANE_TOL)
        {
            return Err(Error::InvalidArgument(format!(
                "profile point {:?} is off the sensor plane",
                p.position
            )));
        }
        Ok(Self {
            points,
            sensor_pose_index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    frame: String,
}

impl PointCloud {
    pub fn new(frame: impl Into<String>, points: Vec<CloudPoint>) -> Result<Self> {
        let frame = frame.into();
        validate_frame(&frame)?;
        Ok(Self { points, frame })
    }

    pub fn empty(frame: impl Into<String>) -> Result<Self> {
        Self::new(frame, Vec::new())
    }

    pub fn from_positions(frame: impl Into<String>, positions: &[Vec3]) -> Result<Self> {
        Self::new(frame, positions.iter().map(|p| CloudPoint::new(*p)).collect())
    }

    pub fn frame(&self) -> &str {
        &self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn has_intensity(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.intensity.is_some())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vec3::zeros(), |acc, p| acc + p.position);
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.points.first()?.position;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(&p.position), hi.sup(&p.position))
        }))
    }
}

fn validate_frame(frame: &str) -> Result<()> {
    if frame.is_empty() || frame.chars().any(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!(
            "frame label must be a nonempty token, got {frame:?}"
        )));
    }
    Ok(())
}

/// Maps every point by `h` and relabels the frame; intensities are kept.
pub fn transform_cloud(h: &Transform, c: &PointCloud, new_frame: &str) -> Result<PointCloud> {
    PointCloud::new(
        new_frame,
        c.points
            .iter()
            .map(|p| CloudPoint {
                position: h.apply(&p.position),
                intensity: p.intensity,
            })
            .collect(),
    )
}

/// Multiset union of clouds sharing one frame.
pub fn merge_clouds(clouds: &[PointCloud]) -> Result<PointCloud> {
    let first = clouds
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    let total = clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    for c in clouds {
        if c.frame != first.frame {
            return Err(Error::FrameMismatch {
                expected: first.frame.clone(),
                found: c.frame.clone(),
            });
        }
        points.extend_from_slice(&c.points);
    }
    PointCloud::new(first.frame.clone(), points)
}

/// Renders `c` as ASCII PLY. Extra `comments` are written verbatim after the
/// frame comment.
pub fn write_ply_string(c: &PointCloud, comments: &[String]) -> String {
    let mut out = String::with_capacity(64 + c.len() * 48);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment frame {}", c.frame);
    for line in comments {
        let _ = writeln!(out, "comment {line}");
    }
    let _ = writeln!(out, "element vertex {}", c.len());
    out.push_str(
        "property float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
    );
    for p in &c.points {
        // Display for f64 is the shortest representation that round-trips.
        let _ = writeln!(
            out,
            "{} {} {} {}",
            p.position.x,
            p.position.y,
            p.position.z,
            p.intensity.unwrap_or(0.0)
        );
    }
    out
}

/// Parsed PLY with any comment lines other than the frame label.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyDocument {
    pub cloud: PointCloud,
    pub comments: Vec<String>,
}

pub fn parse_ply(text: &str) -> Result<PlyDocument> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")))
    };

    let (ln, magic) = next("magic")?;
    if magic != "ply" {
        return Err(Error::parse(ln, "missing 'ply' magic"));
    }
    let mut frame: Option<String> = None;
    let mut comments = Vec::new();
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (ln, line) = next("end_header")?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(Error::parse(ln, "only ascii PLY is supported"));
                }
            }
            Some("comment") => {
                let rest = line["comment".len()..].trim();
                match rest.strip_prefix("frame ") {
                    Some(f) => frame = Some(f.trim().to_string()),
                    None => comments.push(rest.to_string()),
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tok.next();
                let n = tok
                    .next()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(ln, "malformed element line"))?;
                in_vertex = name == Some("vertex");
                if in_vertex {
                    count = Some(n);
                } else if n > 0 {
                    return Err(Error::parse(ln, "only vertex elements are supported"));
                }
            }
            Some("property") => {
                if in_vertex {
                    let name = tok
                        .last()
                        .ok_or_else(|| Error::parse(ln, "malformed property line"))?;
                    props.push(name.to_string());
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::parse(ln, format!("unexpected header keyword '{other}'")))
            }
            None => return Err(Error::parse(ln, "empty header line")),
        }
    }

    let count = count.ok_or_else(|| Error::parse(0, "header has no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(0, "vertex element lacks x/y/z properties")),
    };
    let ii = col("intensity");

    let mut points = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(props.len());
    let mut last_line = 0;
    for _ in 0..count {
        let (ln, line) = loop {
            match lines.next() {
                Some((_, "")) => continue,
                Some(l) => break l,
                None => {
                    return Err(Error::parse(
                        last_line + 1,
                        format!("expected {count} vertex rows, found {}", points.len()),
                    ))
                }
            }
        };
        last_line = ln;
        values.clear();
        for t in line.split_whitespace() {
            values.push(
                t.parse::<f64>()
                    .map_err(|_| Error::parse(ln, format!("non-numeric value '{t}'")))?,
            );
        }
        if values.len() != props.len() {
            return Err(Error::parse(
                ln,
                format!("expected {} values, found {}", props.len(), values.len()),
            ));
        }
        let p = CloudPoint {
            position: Vec3::new(values[ix], values[iy], values[iz]),
            intensity: ii.map(|i| values[i]),
        };
        if !p.is_valid() {
            return Err(Error::parse(ln, "non-finite coordinate or intensity out of [0, 1]"));
        }
        points.push(p);
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(Error::parse(ln, format!("trailing data after {count} vertices: '{extra}'")));
    }

    let frame = frame.unwrap_or_else(|| "unknown".to_string());
    Ok(PlyDocument {
        cloud: PointCloud::new(frame, points).map_err(|e| Error::parse(0, e.to_string()))?,
        comments,
    })
}

pub fn save_cloud(c: &PointCloud, path: &Path) -> Result<()> {
    save_cloud_with_comments(c, &[], path)
}

pub fn save_cloud_with_comments(c: &PointCloud, comments: &[String], path: &Path) -> Result<()> {
    fs::write(path, write_ply_string(c, comments)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    Ok(load_ply(path)?.cloud)
}

pub fn load_ply(path: &Path) -> Result<PlyDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation3;

    fn cloud(frame: &str, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|i| CloudPoint::with_intensity(Vec3::new(i as f64, 0.5 * i as f64, -1.0), 0.25))
            .collect();
        PointCloud::new(frame, pts).unwrap()
    }

    #[test]
    fn identity_transform_keeps_cloud() {
        let c = cloud("B", 5);
        assert_eq!(transform_cloud(&Transform::identity(), &c, "B").unwrap(), c);
    }

    #[test]
    fn translation_moves_points_and_keeps_intensity() {
        let c = PointCloud::new("S", vec![CloudPoint::with_intensity(Vec3::zeros(), 0.7)]).unwrap();
        let h = Transform::from_translation(Vec3::new(0.0, 0.0, 10.0));
        let t = transform_cloud(&h, &c, "B").unwrap();
        assert_eq!(t.frame(), "B");
        assert_eq!(t.points[0].position, Vec3::new(0.0, 0.0, 10.0));
        assert_eq!(t.points[0].intensity, Some(0.7));
    }

    #[test]
    fn transform_then_inverse_restores() {
        let c = cloud("B", 20);
        let h = Transform::new(Rotation3::about_x(0.4) * Rotation3::about_z(1.2), Vec3::new(3.0, -7.0, 11.0));
        let back = transform_cloud(&h.inverse(), &transform_cloud(&h, &c, "X").unwrap(), "B").unwrap();
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a.position - b.position).norm() < 1e-12);
        }
    }

    #[test]
    fn merge_counts_and_frames() {
        let merged = merge_clouds(&[cloud("B", 1), PointCloud::empty("B").unwrap()]).unwrap();
        assert_eq!(merged.len(), 1);
        let merged = merge_clouds(&[cloud("B", 10), cloud("B", 20), cloud("B", 30)]).unwrap();
        assert_eq!(merged.len(), 60);
        let err = merge_clouds(&[cloud("B", 1), cloud("S", 1)]).unwrap_err();
        assert!(matches!(err, Error::FrameMismatch { .. }));
    }

    #[test]
    fn empty_cloud_file() {
        let text = write_ply_string(&PointCloud::empty("C").unwrap(), &[]);
        assert!(text.contains("element vertex 0\n"));
        let doc = parse_ply(&text).unwrap();
        assert!(doc.cloud.is_empty());
        assert_eq!(doc.cloud.frame(), "C");
    }

    #[test]
    fn short_file_reports_line() {
        let mut text = write_ply_string(&cloud("B", 4), &[]);
        text = text.replace("element vertex 4", "element vertex 5");
        match parse_ply(&text).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 14, "{message}");
                assert!(message.contains("expected 5"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_numeric_row() {
        let text = write_ply_string(&cloud("B", 2), &[]).replace("0.5 -1", "abc -1");
        match parse_ply(&text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 11),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_header_terminator() {
        assert!(matches!(
            parse_ply("ply\nformat ascii 1.0\nelement vertex 0\n").unwrap_err(),
            Error::Parse { .. }
        ));
        assert!(matches!(parse_ply("plx\n").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_survive() {
        let doc = parse_ply(&write_ply_string(&cloud("B", 1), &["mode rotation_only".into()])).unwrap();
        assert_eq!(doc.comments, vec!["mode rotation_only".to_string()]);
    }

    #[test]
    fn profile_must_be_planar() {
        assert!(LaserProfile::new(vec![CloudPoint::new(Vec3::new(1.0, 0.0, 5.0))], 0).is_ok());
        assert!(LaserProfile::new(vec![CloudPoint::new(Vec3::new(1.0, 0.1, 5.0))], 0).is_err());
    }
}
