//! KITTI label, calibration and result files.
//!
//! Label lines hold 15 whitespace-separated fields (16 with a score):
//! type, truncated, occluded, alpha, bbox (4), dimensions h w l,
//! location x y z, rotation_y, [score].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D, CameraIntrinsics};
use crate::postproc::Detection;

/// Object classes in index order.
pub const CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| *c == name)
}

const FIELDS: [&str; 16] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "bbox_left",
    "bbox_top",
    "bbox_right",
    "bbox_bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// `left, top, right, bottom` as written; sentinels are kept verbatim.
    pub bbox: [f64; 4],
    /// `h, w, l`
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn class(&self) -> Option<usize> {
        class_index(&self.kind)
    }

    pub fn box2d(&self) -> Result<Box2D> {
        let [l, t, r, b] = self.bbox;
        Box2D::new(l, t, r, b)
    }

    pub fn box3d(&self) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        Box3D::new(self.location, [w, h, l], self.rotation_y)
    }

    pub fn height_px(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn from_detection(d: &Detection) -> Self {
        let b = &d.box3d;
        Self {
            kind: CLASSES.get(d.class).copied().unwrap_or("Car").to_string(),
            truncation: -1.0,
            occlusion: -1,
            alpha: d.alpha,
            bbox: d.box2d.corners(),
            dims: [b.h, b.w, b.l],
            location: [b.x, b.y, b.z],
            rotation_y: b.yaw,
            score: Some(d.score),
        }
    }

    /// Inverse of [`from_detection`](Self::from_detection) for scored records.
    pub fn to_detection(&self) -> Result<Detection> {
        Ok(Detection {
            class: self.class().unwrap_or(usize::MAX),
            score: self.score.unwrap_or(1.0),
            box2d: self.box2d()?,
            box3d: self.box3d()?,
            alpha: self.alpha,
        })
    }
}

fn field_err(line: usize, field: usize, detail: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        detail: format!("field {} ({}): {detail}", field + 1, FIELDS[field]),
    }
}

/// Parses one label line; `line_no` is used in error messages.
pub fn parse_label_line(line: &str, line_no: usize) -> Result<LabelRecord> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 15 && parts.len() != 16 {
        return Err(Error::Parse {
            line: line_no,
            detail: format!("expected 15 or 16 fields, found {}", parts.len()),
        });
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = parts[i]
            .parse()
            .map_err(|_| field_err(line_no, i, format!("not a number: {:?}", parts[i])))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(field_err(line_no, i, "not finite"))
        }
    };
    let occlusion: i32 = parts[2]
        .parse()
        .map_err(|_| field_err(line_no, 2, format!("not an integer: {:?}", parts[2])))?;
    Ok(LabelRecord {
        kind: parts[0].to_string(),
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dims: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if parts.len() == 16 {
            Some(num(15)?)
        } else {
            None
        },
    })
}

/// Parses every non-blank line; accepts LF and CRLF.
pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1))
        .collect()
}

/// Formats a record: boxes, sizes and positions to 2 decimals, angles and
/// score to 6.
pub fn format_label(r: &LabelRecord) -> String {
    let mut s = format!(
        "{} {:.2} {} {:.6}",
        r.kind, r.truncation, r.occlusion, r.alpha
    );
    for v in r.bbox.iter().chain(&r.dims).chain(&r.location) {
        let _ = write!(s, " {v:.2}");
    }
    let _ = write!(s, " {:.6}", r.rotation_y);
    if let Some(sc) = r.score {
        let _ = write!(s, " {sc:.6}");
    }
    s
}

/// One 16-field result line.
pub fn write_result_line(d: &Detection) -> String {
    format_label(&LabelRecord::from_detection(d))
}

/// Named projection/rectification matrices from a calibration file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibRecord {
    pub matrices: BTreeMap<String, Vec<f64>>,
}

impl CalibRecord {
    /// The left colour camera.
    pub fn p2(&self) -> Result<CameraIntrinsics> {
        let m = self.matrices.get("P2").ok_or_else(|| Error::Parse {
            line: 0,
            detail: "no P2 entry".into(),
        })?;
        CameraIntrinsics::from_row_slice(m)
    }
}

pub fn parse_calib(text: &str) -> Result<CalibRecord> {
    let mut out = CalibRecord::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: i + 1,
            detail: "missing ':' after the matrix name".into(),
        })?;
        let vals = rest
            .split_whitespace()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    detail: format!("{key} entry {}: not a number: {f:?}", j + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let want = if key.starts_with('P') || key.starts_with("Tr") {
            12
        } else {
            vals.len()
        };
        if vals.len() != want {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("{key} needs {want} values, found {}", vals.len()),
            });
        }
        out.matrices.insert(key.trim().to_string(), vals);
    }
    Ok(out)
}

/// Writes a minimal calibration file holding only `P2`.
pub fn format_calib_p2(k: &CameraIntrinsics) -> String {
    let mut s = String::from("P2:");
    for v in k.row_major() {
        let _ = write!(s, " {v:e}");
    }
    s.push('\n');
    s
}

/// Reads every `<frame>.txt` under `dir`, keyed by frame id.
pub fn read_label_dir(dir: &Path) -> Result<BTreeMap<String, Vec<LabelRecord>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = fs::read_to_string(&path)?;
        let recs = parse_label_file(&text).map_err(|e| match e {
            Error::Parse { line, detail } => Error::Parse {
                line,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })?;
        out.insert(id, recs);
    }
    Ok(out)
}

/// Writes one `<frame>.txt` per entry, creating `dir` if needed.
pub fn write_result_dir(dir: &Path, frames: &BTreeMap<String, Vec<Detection>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, dets) in frames {
        let mut text = String::new();
        for d in dets {
            text.push_str(&write_result_line(d));
            text.push('\n');
        }
        fs::write(dir.join(format!("{id}.txt")), text)?;
    }
    Ok(())
}

/// Writes ground-truth style label files (15 fields unless a score is set).
pub fn write_label_dir(dir: &Path, frames: &BTreeMap<String, Vec<LabelRecord>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, recs) in frames {
        let mut text = String::new();
        for r in recs {
            text.push_str(&format_label(r));
            text.push('\n');
        }
        fs::write(dir.join(format!("{id}.txt")), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAR: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.75";

    #[test]
    fn car_line() {
        let r = parse_label_line(CAR, 1).unwrap();
        assert_eq!(r.kind, "Car");
        assert_eq!(r.location[2], 46.70);
        assert_eq!(r.rotation_y, -1.75);
        assert_eq!(r.dims, [1.65, 1.67, 3.64]);
        assert_eq!(r.score, None);
    }

    #[test]
    fn dont_care_keeps_sentinels() {
        let r = parse_label_line(
            "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10",
            3,
        )
        .unwrap();
        assert!(r.is_dont_care());
        assert_eq!(r.occlusion, -1);
        assert_eq!(r.location, [-1000.0; 3]);
        assert_eq!(r.dims, [-1.0; 3]);
    }

    #[test]
    fn wrong_field_count() {
        let line = CAR.rsplit_once(' ').unwrap().0;
        let e = parse_label_line(line, 7).unwrap_err().to_string();
        assert!(e.contains("line 7") && e.contains("15 or 16"), "{e}");
    }

    #[test]
    fn bad_number_names_field() {
        let line = CAR.replace("46.70", "4x.70");
        let e = parse_label_line(&line, 2).unwrap_err().to_string();
        assert!(e.contains("field 14 (z)"), "{e}");
    }

    #[test]
    fn format_is_a_fixed_point() {
        let r = parse_label_line(CAR, 1).unwrap();
        let once = format_label(&r);
        let twice = format_label(&parse_label_line(&once, 1).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn crlf_and_blank_lines() {
        let text = format!("{CAR}\r\n\r\n{CAR}\r\n");
        assert_eq!(parse_label_file(&text).unwrap().len(), 2);
    }

    #[test]
    fn calib_p2() {
        let text = "P0: 7 0 6 0 0 7 1 0 0 0 1 0\nP2: 721.5 0 609.5 44.8 0 721.5 172.8 0.21 0 0 1 0.0027\nR0_rect: 1 0 0 0 1 0 0 0 1\n";
        let c = parse_calib(text).unwrap();
        let k = c.p2().unwrap();
        assert_eq!(k.focal_x(), 721.5);
        assert!(parse_calib("P2: 1 2 3\n").is_err());
        let back = parse_calib(&format_calib_p2(&k)).unwrap().p2().unwrap();
        assert_eq!(back, k);
    }
}
