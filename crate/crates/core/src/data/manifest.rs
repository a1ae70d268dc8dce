//! CSV manifest ingestion: `path,label_0,…,label_{C-1}` with 8-bit grayscale
//! PNG images resolved against an image root.

use std::fmt::Write as _;
use std::path::Path;

use super::png_io::read_gray_png;
use super::{Dataset, MultiLabelSample};
use crate::error::{Error, Result};

/// Load a manifest strictly: labels must parse as exactly `0` or `1`, every
/// image must exist, and all images must share one size. Row order is kept.
pub fn load_manifest(manifest_path: &Path, image_root: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: 1,
        msg: "empty manifest (missing header)".to_string(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "path" {
        return Err(Error::Parse {
            path: manifest_path.to_path_buf(),
            line: 1,
            msg: format!("header must be `path,label_0,…`, got `{header}`"),
        });
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("label_{i}") {
            return Err(Error::Parse {
                path: manifest_path.to_path_buf(),
                line: 1,
                msg: format!("expected column `label_{i}`, got `{c}`"),
            });
        }
    }
    let classes = cols.len() - 1;

    let mut samples = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != classes + 1 {
            return Err(Error::Parse {
                path: manifest_path.to_path_buf(),
                line: line_no,
                msg: format!("expected {} fields, got {}", classes + 1, fields.len()),
            });
        }
        let mut labels = Vec::with_capacity(classes);
        for (ci, tok) in fields[1..].iter().enumerate() {
            match *tok {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => {
                    return Err(Error::Parse {
                        path: manifest_path.to_path_buf(),
                        line: line_no,
                        msg: format!("label_{ci} must be 0 or 1, got `{other}`"),
                    })
                }
            }
        }
        let image_path = image_root.join(fields[0]);
        if !image_path.is_file() {
            return Err(Error::Parse {
                path: manifest_path.to_path_buf(),
                line: line_no,
                msg: format!("image file not found: {}", image_path.display()),
            });
        }
        let (pixels, w, h) = read_gray_png(&image_path)?;
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(Error::Parse {
                    path: manifest_path.to_path_buf(),
                    line: line_no,
                    msg: format!("image size {w}x{h} differs from first image {}x{}", s.0, s.1),
                })
            }
            _ => {}
        }
        samples.push(MultiLabelSample {
            id: fields[0].to_string(),
            image: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            labels,
        });
    }
    let (w, h) = size.unwrap_or((0, 0));
    Ok(Dataset {
        classes,
        height: h as usize,
        width: w as usize,
        samples,
    })
}

/// Render a manifest body for the given rows.
pub fn render_manifest(classes: usize, rows: &[(String, Vec<u8>)]) -> String {
    let mut out = String::from("path");
    for c in 0..classes {
        let _ = write!(out, ",label_{c}");
    }
    out.push('\n');
    for (path, labels) in rows {
        out.push_str(path);
        for &l in labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, classes: usize, rows: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::write(path, render_manifest(classes, rows)).map_err(|e| Error::io(path, e))
}
