//! Readers and writers for scanning-probe height data.
//!
//! Two formats are supported:
//!
//! * A Nanoscope-style container: an ASCII header of backslash-prefixed
//!   `key: value` lines terminated by `\*File list end`, followed at
//!   `Data offset` by `Data length` bytes of signed little-endian integers.
//! * A plain text matrix: `#`-prefixed metadata lines followed by rows of
//!   whitespace-separated decimal heights, so ordinary numeric tools can load
//!   the body unchanged.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::{BitMask, GridError, HeightMap, MaskStage};

const HEADER_END: &str = "\\*File list end";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpmError {
    #[error("missing header key `{0}`")]
    MissingKey(String),
    #[error("header has no `\\*File list end` marker")]
    MissingHeaderEnd,
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("body truncated: expected {expected} bytes, found {actual}")]
    TruncatedBody { expected: usize, actual: usize },
    #[error("unsupported bytes per pixel: {0}")]
    UnsupportedBytesPerPixel(usize),
    #[error("data length {declared} does not match {expected} implied by the image shape")]
    InconsistentDataLength { declared: usize, expected: usize },
    #[error("row {0} has a different number of values than the first row")]
    RaggedRow(usize),
    #[error("non-numeric token `{token}` at line {line}, column {column}")]
    NonNumericToken {
        line: usize,
        column: usize,
        token: String,
    },
    #[error("non-finite value at line {line}, column {column}")]
    NonFiniteValue { line: usize, column: usize },
    #[error("input contains no data rows")]
    EmptyInput,
    #[error("header declares {declared:?} but body has {actual:?}")]
    HeaderMismatch {
        declared: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Header fields the parser needs; everything else is kept verbatim in
/// `provenance`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanMetadata {
    pub samples_per_line: usize,
    pub lines: usize,
    /// Fast-axis scan size in micrometers.
    pub scan_size_x: f64,
    /// Slow-axis scan size in micrometers.
    pub scan_size_y: f64,
    /// Nanometers per raw LSB.
    pub z_scale: f64,
    pub data_offset: usize,
    pub data_length: usize,
    pub bytes_per_pixel: usize,
    pub header_length: usize,
    pub provenance: Vec<String>,
}

fn normalize_key(raw: &str) -> String {
    // "@2:Z scale" -> "z scale"
    let trimmed = raw.trim();
    let without_group = match trimmed.strip_prefix('@') {
        Some(rest) => rest.split_once(':').map(|(_, k)| k).unwrap_or(rest),
        None => trimmed,
    };
    without_group.trim().to_ascii_lowercase()
}

fn first_number(text: &str) -> Option<f64> {
    text.split(|c: char| c.is_whitespace() || c == '(' || c == ')')
        .find_map(|tok| tok.parse::<f64>().ok())
}

fn parse_scan_size(value: &str) -> Option<(f64, f64)> {
    let numbers: Vec<f64> = value
        .split_whitespace()
        .filter_map(|t| t.parse::<f64>().ok())
        .collect();
    let unit = value
        .split_whitespace()
        .find(|t| t.parse::<f64>().is_err())
        .unwrap_or("~m");
    let to_um = match unit {
        "nm" => 1e-3,
        "~m" | "um" | "µm" => 1.0,
        _ => return None,
    };
    match numbers.as_slice() {
        [x] => Some((x * to_um, x * to_um)),
        [x, y, ..] => Some((x * to_um, y * to_um)),
        [] => None,
    }
}

fn parse_z_scale(value: &str) -> Option<f64> {
    // Nanoscope writes "V [Sens. Zsens] (0.0067 V/LSB) 26.3 V"; the
    // parenthesized factor wins when present.
    if let (Some(open), Some(close)) = (value.find('('), value.find(')')) {
        if open < close {
            if let Some(v) = first_number(&value[open + 1..close]) {
                return Some(v);
            }
        }
    }
    first_number(value)
}

/// Parses a Nanoscope-style file into heights (nm) and its metadata.
///
/// Heights are `raw * z_scale` with raw values read as signed
/// little-endian integers of `Bytes/pixel` width. Row order is preserved.
pub fn parse_nanoscope(bytes: &[u8]) -> Result<(HeightMap, ScanMetadata), SpmError> {
    let marker = HEADER_END.as_bytes();
    let marker_pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or(SpmError::MissingHeaderEnd)?;
    let mut header_length = marker_pos + marker.len();
    while header_length < bytes.len() && matches!(bytes[header_length], b'\r' | b'\n') {
        header_length += 1;
        if bytes[header_length - 1] == b'\n' {
            break;
        }
    }
    let header = String::from_utf8_lossy(&bytes[..marker_pos]);

    let mut fields: Vec<(String, String)> = Vec::new();
    let mut provenance = Vec::new();
    for line in header.lines() {
        let line = line.trim_end_matches('\r');
        let Some(body) = line.strip_prefix('\\') else {
            if !line.trim().is_empty() {
                provenance.push(line.to_string());
            }
            continue;
        };
        if body.starts_with('*') {
            provenance.push(line.to_string());
            continue;
        }
        let split = body.find(": ").or_else(|| body.rfind(':'));
        match split {
            Some(i) => {
                let key = normalize_key(&body[..i]);
                let value = body[i + 1..].trim().to_string();
                if is_required_key(&key) && !fields.iter().any(|(k, _)| *k == key) {
                    fields.push((key, value));
                } else {
                    provenance.push(line.to_string());
                }
            }
            None => provenance.push(line.to_string()),
        }
    }

    let lookup = |name: &str| -> Result<&str, SpmError> {
        fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| SpmError::MissingKey(name.to_string()))
    };
    let invalid = |key: &str, value: &str| SpmError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    };
    let parse_count = |name: &str| -> Result<usize, SpmError> {
        let value = lookup(name)?;
        first_number(value)
            .filter(|v| *v >= 0.0 && v.fract() == 0.0)
            .map(|v| v as usize)
            .ok_or_else(|| invalid(name, value))
    };

    let data_offset = parse_count("data offset")?;
    let data_length = parse_count("data length")?;
    let bytes_per_pixel = parse_count("bytes/pixel")?;
    let samples_per_line = parse_count("samples/line")?;
    let lines = parse_count("number of lines")?;
    let scan_value = lookup("scan size")?;
    let (scan_size_x, scan_size_y) =
        parse_scan_size(scan_value).ok_or_else(|| invalid("scan size", scan_value))?;
    let z_value = lookup("z scale")?;
    let z_scale = parse_z_scale(z_value)
        .filter(|z| *z > 0.0 && z.is_finite())
        .ok_or_else(|| invalid("z scale", z_value))?;

    if bytes_per_pixel != 2 && bytes_per_pixel != 4 {
        return Err(SpmError::UnsupportedBytesPerPixel(bytes_per_pixel));
    }
    let expected = samples_per_line * lines * bytes_per_pixel;
    if data_length != expected {
        return Err(SpmError::InconsistentDataLength {
            declared: data_length,
            expected,
        });
    }
    if data_offset < header_length {
        return Err(invalid("data offset", &data_offset.to_string()));
    }
    let available = bytes.len().saturating_sub(data_offset);
    if available < data_length {
        return Err(SpmError::TruncatedBody {
            expected: data_length,
            actual: available,
        });
    }

    let body = &bytes[data_offset..data_offset + data_length];
    let heights: Vec<f64> = match bytes_per_pixel {
        2 => body
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 * z_scale)
            .collect(),
        _ => body
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 * z_scale)
            .collect(),
    };
    let map = HeightMap::new(lines, samples_per_line, heights)?
        .with_scan_size(scan_size_x, scan_size_y)?
        .with_source_id("nanoscope");
    let meta = ScanMetadata {
        samples_per_line,
        lines,
        scan_size_x,
        scan_size_y,
        z_scale,
        data_offset,
        data_length,
        bytes_per_pixel,
        header_length,
        provenance,
    };
    Ok((map, meta))
}

fn is_required_key(key: &str) -> bool {
    matches!(
        key,
        "data offset"
            | "data length"
            | "bytes/pixel"
            | "samples/line"
            | "number of lines"
            | "scan size"
            | "z scale"
    )
}

/// Encodes a map as a Nanoscope-style file, quantizing heights to
/// `round(h / z_scale)`. Values outside the integer range saturate.
pub fn encode_nanoscope(map: &HeightMap, z_scale: f64, bytes_per_pixel: usize) -> Result<Vec<u8>, SpmError> {
    if bytes_per_pixel != 2 && bytes_per_pixel != 4 {
        return Err(SpmError::UnsupportedBytesPerPixel(bytes_per_pixel));
    }
    let data_length = map.len() * bytes_per_pixel;
    let header_body = |offset: usize| {
        format!(
            "\\*File list\r\n\\Version: 0x09300201\r\n\\*Ciao image list\r\n\\Data offset: {offset}\r\n\\Data length: {data_length}\r\n\\Bytes/pixel: {bytes_per_pixel}\r\n\\Samples/line: {}\r\n\\Number of lines: {}\r\n\\Scan Size: {} {} ~m\r\n\\@2:Z scale: V [Sens. Zsens] ({z_scale} nm/LSB) 1.0 V\r\n{HEADER_END}\r\n",
            map.cols(),
            map.rows(),
            map.scan_size_x(),
            map.scan_size_y(),
        )
    };
    // offset is padded to a fixed width so the header length is stable
    let probe = header_body(0).len() + 16;
    let offset = probe.div_ceil(256) * 256;
    let mut header = header_body(offset).into_bytes();
    header.resize(offset, 0x1a);
    for &h in map.data() {
        let q = (h / z_scale).round();
        if bytes_per_pixel == 2 {
            let v = q.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            header.extend_from_slice(&v.to_le_bytes());
        } else {
            let v = q.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
            header.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(header)
}

/// Serializes a map as a `#`-commented text matrix. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_txt_matrix(map: &HeightMap) -> String {
    let mut out = String::with_capacity(map.len() * 12 + 160);
    let source = map.source_id().replace(['\n', '\r'], " ");
    let _ = writeln!(out, "# afm-restore height map v1");
    let _ = writeln!(out, "# rows: {}", map.rows());
    let _ = writeln!(out, "# cols: {}", map.cols());
    let _ = writeln!(out, "# scan_size_x_um: {}", map.scan_size_x());
    let _ = writeln!(out, "# scan_size_y_um: {}", map.scan_size_y());
    let _ = writeln!(out, "# source_id: {source}");
    for r in 0..map.rows() {
        let row = map.row(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Default)]
struct TxtHeader {
    rows: Option<usize>,
    cols: Option<usize>,
    scan_x: Option<f64>,
    scan_y: Option<f64>,
    source_id: Option<String>,
}

fn parse_txt_header_line(header: &mut TxtHeader, comment: &str) {
    let Some((key, value)) = comment.split_once(':') else {
        return;
    };
    let value = value.trim();
    match key.trim() {
        "rows" => header.rows = value.parse().ok(),
        "cols" => header.cols = value.parse().ok(),
        "scan_size_x_um" => header.scan_x = value.parse().ok(),
        "scan_size_y_um" => header.scan_y = value.parse().ok(),
        "source_id" => header.source_id = Some(value.to_string()),
        _ => {}
    }
}

fn read_matrix_body(text: &str) -> Result<(TxtHeader, usize, Vec<f64>, usize), SpmError> {
    let mut header = TxtHeader::default();
    let mut values = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            parse_txt_header_line(&mut header, comment);
            continue;
        }
        let before = values.len();
        for (col, token) in trimmed.split_whitespace().enumerate() {
            let v: f64 = token.parse().map_err(|_| SpmError::NonNumericToken {
                line: line_no + 1,
                column: col + 1,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SpmError::NonFiniteValue {
                    line: line_no + 1,
                    column: col + 1,
                });
            }
            values.push(v);
        }
        let n = values.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => return Err(SpmError::RaggedRow(rows)),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or(SpmError::EmptyInput)?;
    Ok((header, rows, values, cols))
}

/// Parses a text matrix written by [`write_txt_matrix`] or any
/// whitespace-separated numeric table.
pub fn read_txt_matrix(text: &str) -> Result<HeightMap, SpmError> {
    let (header, rows, values, cols) = read_matrix_body(text)?;
    if let (Some(hr), Some(hc)) = (header.rows, header.cols) {
        if (hr, hc) != (rows, cols) {
            return Err(SpmError::HeaderMismatch {
                declared: (hr, hc),
                actual: (rows, cols),
            });
        }
    }
    let map = HeightMap::new(rows, cols, values)?
        .with_scan_size(header.scan_x.unwrap_or(1.0), header.scan_y.unwrap_or(1.0))?;
    Ok(match header.source_id {
        Some(id) => map.with_source_id(id),
        None => map,
    })
}

/// Either format, sniffed from the first bytes.
pub fn read_any(bytes: &[u8]) -> Result<HeightMap, SpmError> {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace()).unwrap_or(0);
    if bytes[start..].starts_with(b"\\*") {
        return parse_nanoscope(bytes).map(|(map, _)| map);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| SpmError::NonNumericToken {
        line: 0,
        column: e.valid_up_to(),
        token: "<invalid utf-8>".to_string(),
    })?;
    read_txt_matrix(text)
}

/// Writes a mask as rows of `0`/`1` tokens with the same header layout.
pub fn write_mask_txt(mask: &BitMask) -> String {
    let mut out = String::with_capacity(mask.rows() * mask.cols() * 2 + 64);
    let _ = writeln!(out, "# afm-restore mask v1");
    let _ = writeln!(out, "# rows: {}", mask.rows());
    let _ = writeln!(out, "# cols: {}", mask.cols());
    let _ = writeln!(out, "# stage: {}", mask.stage());
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if c > 0 {
                out.push(' ');
            }
            out.push(if mask.get(r, c) { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Reads a 0/1 text mask. Any nonzero value counts as set.
pub fn read_mask_txt(text: &str, stage: MaskStage) -> Result<BitMask, SpmError> {
    let (_, rows, values, cols) = read_matrix_body(text)?;
    let bits = values.iter().map(|&v| v != 0.0).collect();
    Ok(BitMask::from_bits(rows, cols, bits, stage)?)
}

/// 8-bit single-channel rendering of a height map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grayscale {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Linear min–max scaling to `[0, 255]` with round-half-up; a constant map
/// renders as mid-gray 128.
pub fn to_grayscale(map: &HeightMap) -> Grayscale {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let pixels = map
        .data()
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                128
            } else {
                ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Grayscale {
        rows: map.rows(),
        cols: map.cols(),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled 2×2 fixture: raw {0, 1, -1, 2}, 0.5 nm/LSB.
    pub(crate) fn fixture(header_tweak: impl Fn(String) -> String, body: &[u8]) -> Vec<u8> {
        let header = "\\*File list\r\n\\Version: 0x09300201\r\n\\*Ciao image list\r\n\\Data offset: 256\r\n\\Data length: 8\r\n\\Bytes/pixel: 2\r\n\\Samples/line: 2\r\n\\Number of lines: 2\r\n\\Scan Size: 5 5 ~m\r\n\\@2:Z scale: V [Sens. Zsens] (0.5 nm/LSB) 1.0 V\r\n\\*File list end\r\n".to_string();
        let mut bytes = header_tweak(header).into_bytes();
        bytes.resize(256, 0);
        bytes.extend_from_slice(body);
        bytes
    }

    fn body() -> Vec<u8> {
        [0i16, 1, -1, 2].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn parses_fixture() {
        let (map, meta) = parse_nanoscope(&fixture(|h| h, &body())).unwrap();
        assert_eq!(map.data(), &[0.0, 0.5, -0.5, 1.0]);
        assert_eq!(meta.z_scale, 0.5);
        assert_eq!(meta.scan_size_x, 5.0);
        assert_eq!(meta.bytes_per_pixel, 2);
        assert!(meta.provenance.iter().any(|l| l.contains("Version")));
    }

    #[test]
    fn missing_offset_is_missing_key() {
        let bytes = fixture(|h| h.replace("\\Data offset: 256\r\n", ""), &body());
        assert_eq!(
            parse_nanoscope(&bytes).unwrap_err(),
            SpmError::MissingKey("data offset".into())
        );
    }

    #[test]
    fn short_body_is_truncated() {
        let b = body();
        let err = parse_nanoscope(&fixture(|h| h, &b[..5])).unwrap_err();
        assert_eq!(
            err,
            SpmError::TruncatedBody {
                expected: 8,
                actual: 5
            }
        );
    }

    #[test]
    fn unsupported_width() {
        let bytes = fixture(
            |h| h.replace("Bytes/pixel: 2", "Bytes/pixel: 3").replace("Data length: 8", "Data length: 12"),
            &[0; 12],
        );
        assert_eq!(parse_nanoscope(&bytes).unwrap_err(), SpmError::UnsupportedBytesPerPixel(3));
    }

    #[test]
    fn four_byte_pixels() {
        let body: Vec<u8> = [0i32, -70000, 3, 4].iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = fixture(
            |h| h.replace("Bytes/pixel: 2", "Bytes/pixel: 4").replace("Data length: 8", "Data length: 16"),
            &body,
        );
        let (map, _) = parse_nanoscope(&bytes).unwrap();
        assert_eq!(map.data(), &[0.0, -35000.0, 1.5, 2.0]);
    }

    #[test]
    fn txt_round_trip_small() {
        let map = HeightMap::new(2, 3, vec![1.25, -2.5, 0.0, 0.1, 1e-300, -0.0]).unwrap();
        let back = read_txt_matrix(&write_txt_matrix(&map)).unwrap();
        assert_eq!(back, map);
        assert!(back.data()[5].is_sign_negative());
    }

    #[test]
    fn txt_errors() {
        assert_eq!(read_txt_matrix("1 2 3\n4 5\n").unwrap_err(), SpmError::RaggedRow(1));
        assert!(matches!(
            read_txt_matrix("1 2\n3 x\n").unwrap_err(),
            SpmError::NonNumericToken { line: 2, column: 2, .. }
        ));
        assert_eq!(read_txt_matrix("# only a comment\n\n").unwrap_err(), SpmError::EmptyInput);
        assert!(matches!(
            read_txt_matrix("1 2\nNaN 3\n").unwrap_err(),
            SpmError::NonFiniteValue { .. }
        ));
    }

    #[test]
    fn grayscale_examples() {
        let c = HeightMap::constant(2, 2, 7.0).unwrap();
        assert!(to_grayscale(&c).pixels.iter().all(|&p| p == 128));
        let m = HeightMap::new(2, 2, vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        assert_eq!(to_grayscale(&m).pixels, vec![0, 255, 0, 255]);
        let m = HeightMap::new(2, 3, vec![0.0, 5.0, 10.0, 0.0, 5.0, 10.0]).unwrap();
        assert_eq!(to_grayscale(&m).pixels[..3], [0, 128, 255]);
    }

    #[test]
    fn mask_text_round_trip() {
        let m = BitMask::from_fn(3, 4, MaskStage::Final, |r, c| (r + c) % 3 == 0);
        assert_eq!(read_mask_txt(&write_mask_txt(&m), MaskStage::Final).unwrap(), m);
    }

    #[test]
    fn encoder_round_trips_quantized_values() {
        let map = HeightMap::new(2, 3, vec![0.0, 0.5, -1.0, 2.0, 3.5, -4.0]).unwrap();
        let bytes = encode_nanoscope(&map, 0.5, 2).unwrap();
        let (back, meta) = parse_nanoscope(&bytes).unwrap();
        assert_eq!(back.data(), map.data());
        assert_eq!(meta.samples_per_line, 3);
        assert_eq!(read_any(&bytes).unwrap().data(), map.data());
    }
}
