//! Annotated image collections and `.pts` landmark files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AamError, Result};
use crate::raster::Raster;
use crate::shape::Shape;

/// An image together with its ground-truth landmarks.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub name: String,
    pub image: Raster,
    pub shape: Shape,
}

/// Images loaded from a directory plus the problems encountered on the way.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

/// Parses the `version / n_points / { x y ... }` landmark format.
pub fn parse_pts(text: &str) -> Result<Shape> {
    let mut expected = None;
    let mut points = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("n_points:") {
            let n = rest
                .trim()
                .parse::<usize>()
                .map_err(|e| AamError::Format(format!("bad n_points: {e}")))?;
            expected = Some(n);
        } else if line.starts_with("version:") {
            continue;
        } else if line == "{" {
            inside = true;
        } else if line == "}" {
            inside = false;
        } else if inside {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => points.push([x, y]),
                _ => return Err(AamError::Format(format!("bad landmark line '{line}'"))),
            }
        } else {
            return Err(AamError::Format(format!("unexpected line '{line}'")));
        }
    }
    if let Some(n) = expected {
        if n != points.len() {
            return Err(AamError::Format(format!(
                "header declares {n} points, found {}",
                points.len()
            )));
        }
    }
    Shape::from_points(&points)
}

pub fn format_pts(shape: &Shape) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", shape.n_points());
    for [x, y] in shape.points() {
        let _ = writeln!(out, "{x} {y}");
    }
    out.push_str("}\n");
    out
}

pub fn read_pts(path: &Path) -> Result<Shape> {
    let text = fs::read_to_string(path)?;
    parse_pts(&text).map_err(|e| AamError::Format(format!("{}: {e}", path.display())))
}

pub fn write_pts(path: &Path, shape: &Shape) -> Result<()> {
    fs::write(path, format_pts(shape))?;
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(AamError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every image with a sibling `.pts` file. Images without landmarks
/// or with unreadable files are skipped and reported as warnings.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut out = Dataset::default();
    for path in image_files(dir)? {
        let pts = path.with_extension("pts");
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !pts.is_file() {
            out.warnings.push(format!("{}: missing landmark file", path.display()));
            continue;
        }
        let loaded = read_pts(&pts).and_then(|shape| Ok((Raster::load(&path)?, shape)));
        match loaded {
            Ok((image, shape)) => out.images.push(AnnotatedImage { name, image, shape }),
            Err(e) => out.warnings.push(format!("{}: {e}", path.display())),
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    if out.images.is_empty() {
        return Err(AamError::Config(format!(
            "no annotated images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Writes `name.png` and `name.pts` for every image.
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for item in images {
        item.image.save_png(&dir.join(format!("{}.png", item.name)))?;
        write_pts(&dir.join(format!("{}.pts", item.name)), &item.shape)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pts_roundtrip() {
        let s = Shape::from_points(&[[1.5, 2.0], [3.25, -4.0], [0.1, 7.0]]).unwrap();
        let back = parse_pts(&format_pts(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn pts_count_mismatch() {
        let text = "version: 1\nn_points: 4\n{\n0 0\n1 0\n0 1\n}\n";
        assert!(matches!(parse_pts(text), Err(AamError::Format(_))));
    }
}
