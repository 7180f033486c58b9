//! Plain-text grid files, key = value manifests, CSV and PNG export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::ScalarField;

/// `rows cols` header, then one row per line, values with 17 significant digits.
pub fn format_grid(f: &ScalarField) -> String {
    let (rows, cols) = f.dim();
    let mut out = String::with_capacity(rows * cols * 25 + 16);
    let _ = writeln!(out, "{rows} {cols}");
    for row in f.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_grid(text: &str, path: &Path) -> Result<ScalarField> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty grid file".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().ok().filter(|&n| n > 0);
    let (rows, cols) = match dims.as_slice() {
        [r, c] => match (parse_dim(r), parse_dim(c)) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(err(hline + 1, format!("bad header '{header}'"))),
        },
        _ => return Err(err(hline + 1, format!("expected 'rows cols', got '{header}'"))),
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut last_line = hline + 1;
    for (idx, line) in lines {
        last_line = idx + 1;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(idx + 1, format!("cannot parse '{tok}' as a number")))?;
            if !v.is_finite() {
                return Err(err(idx + 1, format!("non-finite value '{tok}'")));
            }
            if values.len() == rows * cols {
                return Err(err(idx + 1, format!("more than {} values", rows * cols)));
            }
            values.push(v);
        }
    }
    if values.len() != rows * cols {
        return Err(err(
            last_line,
            format!("expected {} values, found {}", rows * cols, values.len()),
        ));
    }
    Ok(ScalarField::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn read_grid(path: &Path) -> Result<ScalarField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, path)
}

pub fn write_grid(path: &Path, f: &ScalarField) -> Result<()> {
    write_text(path, &format_grid(f))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Ordered `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    /// Set `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            m.set(key, v.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_string())
    }
}

impl std::fmt::Display for Manifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// CSV with a header row, comma separators and LF line endings.
pub fn format_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngScale {
    Linear,
    Log,
}

/// 16-bit grayscale PNG, values rescaled to the full range.
pub fn write_png(path: &Path, f: &ScalarField, scale: PngScale) -> Result<()> {
    let mapped = match scale {
        PngScale::Linear => f.clone(),
        PngScale::Log => f.mapv(|v| v.max(0.0).ln_1p()),
    };
    let lo = mapped.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = mapped.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = f.dim();
    let mut bytes = Vec::with_capacity(rows * cols * 2);
    for v in mapped.iter() {
        let q = (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}
