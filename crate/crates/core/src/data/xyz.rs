use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::geometry::PointCloud;

/// Parse an ASCII XYZ file: one point per line, at least three
/// whitespace-separated reals (extras ignored), blank lines and
/// '#' comments skipped.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(CoreError::Parse {
                line: lineno + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for (a, f) in fields.iter().take(3).enumerate() {
            p[a] = f.parse::<f64>().map_err(|_| CoreError::Parse {
                line: lineno + 1,
                msg: format!("cannot parse '{f}' as a number"),
            })?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(CoreError::EmptyInput(format!(
            "no points in {}",
            path.display()
        )));
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_two_points() {
        let f = write_tmp("0 0 0\n1 0 0\n");
        let c = load_xyz(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn skips_comments_and_blanks_and_extras() {
        let f = write_tmp("# header\n\n0.5 1.5 -2.5 255 0 0\n");
        let c = load_xyz(f.path()).unwrap();
        assert_eq!(c.points, vec![[0.5, 1.5, -2.5]]);
    }

    #[test]
    fn parse_error_cites_line() {
        let f = write_tmp("0 0 0\n1 1 1\n0 0 abc\n");
        match load_xyz(f.path()) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        let f = write_tmp("# only a comment\n");
        assert!(matches!(load_xyz(f.path()), Err(CoreError::EmptyInput(_))));
    }
}
