//! Text and binary formats: detection-matrix CSV, the shipped reference
//! matrices, centroid-series CSV, phase-screen binaries, and P6 PPM images.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::protocol::{DetectionMatrix, Provenance};
use crate::{Error, Result};

/// Names accepted by [`fixture`]: the five matrices measured over the link
/// (d2/d4, raw/corrected, plus the turbulent-night run) and the two ideal
/// references.
pub const FIXTURE_NAMES: [&str; 7] = [
    "d2_raw",
    "d2_corrected",
    "d2_theory",
    "d4_raw",
    "d4_corrected",
    "d4_noisy",
    "d4_theory",
];

/// Returns a shipped reference detection matrix by name.
pub fn fixture(name: &str) -> Result<DetectionMatrix> {
    let text = match name {
        "d2_raw" => include_str!("../fixtures/d2_raw.csv"),
        "d2_corrected" => include_str!("../fixtures/d2_corrected.csv"),
        "d2_theory" => include_str!("../fixtures/d2_theory.csv"),
        "d4_raw" => include_str!("../fixtures/d4_raw.csv"),
        "d4_corrected" => include_str!("../fixtures/d4_corrected.csv"),
        "d4_noisy" => include_str!("../fixtures/d4_noisy.csv"),
        "d4_theory" => include_str!("../fixtures/d4_theory.csv"),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown fixture {other:?}; expected one of {FIXTURE_NAMES:?}"
            )))
        }
    };
    parse_matrix_csv(text)
}

fn parse_provenance(s: &str, line: usize) -> Result<Provenance> {
    match s {
        "raw" => Ok(Provenance::Raw),
        "target_corrected" => Ok(Provenance::TargetCorrected),
        "theoretical" => Ok(Provenance::Theoretical),
        "simulated" => Ok(Provenance::Simulated),
        other => Err(Error::Parse {
            line,
            message: format!("unknown provenance {other:?}"),
        }),
    }
}

/// Parses a detection matrix from CSV text.
///
/// Layout: optional `# key = value` metadata lines (`d`, `provenance`), a
/// header row `state,<projector labels>`, then one row per sent state. Line
/// numbers in errors count every line of the input, comments included.
pub fn parse_matrix_csv(text: &str) -> Result<DetectionMatrix> {
    let mut meta_d: Option<usize> = None;
    let mut provenance = Provenance::Raw;
    let mut col_labels: Option<Vec<String>> = None;
    let mut row_labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "d" => {
                        meta_d = Some(value.trim().parse().map_err(|_| Error::Parse {
                            line: lineno,
                            message: format!("bad dimension {:?}", value.trim()),
                        })?)
                    }
                    "provenance" => provenance = parse_provenance(value.trim(), lineno)?,
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if col_labels.is_none() {
            if fields.len() < 3 || fields[0] != "state" {
                return Err(Error::Parse {
                    line: lineno,
                    message: "expected header row starting with 'state'".into(),
                });
            }
            col_labels = Some(fields[1..].iter().map(|s| s.to_string()).collect());
            continue;
        }
        let ncols = col_labels.as_ref().unwrap().len();
        if fields.len() != ncols + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", ncols + 1, fields.len()),
            });
        }
        row_labels.push(fields[0].to_string());
        let mut row = Vec::with_capacity(ncols);
        for (k, f) in fields[1..].iter().enumerate() {
            row.push(f.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("column {}: not a number: {f:?}", k + 2),
            })?);
        }
        rows.push(row);
    }

    let col_labels = col_labels.ok_or(Error::Parse {
        line: text.lines().count(),
        message: "missing header row".into(),
    })?;
    let n = col_labels.len();
    if n % 2 != 0 {
        return Err(Error::Parse {
            line: 1,
            message: format!("odd projector count {n}; two bases of d states required"),
        });
    }
    let d = n / 2;
    if let Some(md) = meta_d {
        if md != d {
            return Err(Error::Parse {
                line: 1,
                message: format!("metadata says d = {md} but header has {n} projectors"),
            });
        }
    }
    if rows.len() != n {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!("expected {n} data rows, found {}", rows.len()),
        });
    }
    let probs = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
    DetectionMatrix::new(d, row_labels, col_labels, probs, provenance)
}

/// Renders a detection matrix in the CSV layout accepted by
/// [`parse_matrix_csv`].
pub fn matrix_to_csv(matrix: &DetectionMatrix) -> String {
    let mut out = String::new();
    out.push_str(&format!("# d = {}\n", matrix.d()));
    out.push_str(&format!("# provenance = {}\n", matrix.provenance()));
    out.push_str("# rows: sent state; columns: projector\n");
    out.push_str("state");
    for label in matrix.col_labels() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    let n = 2 * matrix.d();
    for r in 0..n {
        out.push_str(&matrix.row_labels()[r]);
        for c in 0..n {
            out.push_str(&format!(",{}", matrix.prob(r, c)));
        }
        out.push('\n');
    }
    out
}

/// Parses a two-column centroid-displacement CSV (meters). Lines starting
/// with `#` and a single non-numeric header row are skipped.
pub fn parse_centroids_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut samples = Vec::new();
    let mut header_seen = false;
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => samples.push((x, y)),
            _ if !header_seen && samples.is_empty() => header_seen = true,
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("not a coordinate pair: {line:?}"),
                })
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no centroid samples found".into(),
        });
    }
    Ok(samples)
}

/// Renders centroid displacements as the CSV accepted by
/// [`parse_centroids_csv`].
pub fn centroids_to_csv(samples: &[(f64, f64)]) -> String {
    let mut out = String::from("x_m,y_m\n");
    for (x, y) in samples {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// A square phase-screen grid as stored on disk.
#[derive(Debug, Clone)]
pub struct ScreenData {
    pub n: usize,
    /// Pixel pitch in meters.
    pub pitch: f64,
    /// Fried parameter the screen was synthesized for, in meters.
    pub r0: f64,
    /// Row-major phase values in radians, length n².
    pub values: Vec<f64>,
}

const SCREEN_MAGIC: &str = "hdqkd-screen";

/// Writes a phase screen: one ASCII header line `hdqkd-screen N pitch r0`,
/// then N² little-endian f32 phase values, row-major.
pub fn write_screen(data: &ScreenData, w: &mut impl Write) -> Result<()> {
    if data.values.len() != data.n * data.n {
        return Err(Error::InvalidArgument(format!(
            "screen claims {}×{} but holds {} values",
            data.n,
            data.n,
            data.values.len()
        )));
    }
    writeln!(w, "{SCREEN_MAGIC} {} {} {}", data.n, data.pitch, data.r0)?;
    let mut buf = Vec::with_capacity(4 * data.values.len());
    for &v in &data.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a phase screen written by [`write_screen`].
pub fn read_screen(r: &mut impl Read) -> Result<ScreenData> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
        line: 1,
        message: "missing screen header line".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Parse {
        line: 1,
        message: "header is not UTF-8".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != SCREEN_MAGIC {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected '{SCREEN_MAGIC} N pitch r0', got {header:?}"),
        });
    }
    let n: usize = fields[1].parse().map_err(|_| Error::Parse {
        line: 1,
        message: format!("bad grid size {:?}", fields[1]),
    })?;
    let pitch: f64 = fields[2].parse().map_err(|_| Error::Parse {
        line: 1,
        message: format!("bad pitch {:?}", fields[2]),
    })?;
    let r0: f64 = fields[3].parse().map_err(|_| Error::Parse {
        line: 1,
        message: format!("bad Fried parameter {:?}", fields[3]),
    })?;
    let body = &bytes[nl + 1..];
    if body.len() != 4 * n * n {
        return Err(Error::Parse {
            line: 2,
            message: format!("expected {} payload bytes, found {}", 4 * n * n, body.len()),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ScreenData {
        n,
        pitch,
        r0,
        values,
    })
}

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, length 3·width·height.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }
}

/// Writes a binary P6 PPM with maxval 255.
pub fn write_ppm(img: &RgbImage, w: &mut impl Write) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Reads a binary P6 PPM (maxval must be 255; header comments allowed).
pub fn read_ppm(r: &mut impl Read) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                line: 1,
                message: "truncated PPM header".into(),
            });
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Parse {
                line: 1,
                message: "PPM header is not ASCII".into(),
            })?
            .to_string())
    };
    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected P6 magic, got {magic:?}"),
        });
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| Error::Parse {
        line: 1,
        message: "bad PPM width".into(),
    })?;
    let height: usize = token(&bytes)?.parse().map_err(|_| Error::Parse {
        line: 1,
        message: "bad PPM height".into(),
    })?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::Parse {
        line: 1,
        message: "bad PPM maxval".into(),
    })?;
    if maxval != 255 {
        return Err(Error::Parse {
            line: 1,
            message: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "PPM payload truncated: need {need} bytes, found {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    RgbImage::new(width, height, bytes[pos..pos + need].to_vec())
}
