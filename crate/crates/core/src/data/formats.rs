//! Byte-exact image ingestion: binary PGM (P5), IDX archives, and the
//! `path,label,class_name` manifest CSV.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A decoded grayscale image: height, width, and raw 8-bit pixels.
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Parses a binary PGM (magic `P5`, maxval 255).
pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<GrayImage> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos)
        .ok_or_else(|| Error::load(format!("{origin}: missing PGM header")))?;
    if magic != b"P5" {
        return Err(Error::load(format!("{origin}: not a binary PGM (expected P5 magic)")));
    }
    let width = parse_dim(bytes, &mut pos, origin, "width")?;
    let height = parse_dim(bytes, &mut pos, origin, "height")?;
    let maxval = parse_dim(bytes, &mut pos, origin, "maxval")?;
    if maxval != 255 {
        return Err(Error::load(format!("{origin}: unsupported PGM maxval {maxval} (need 255)")));
    }
    // Exactly one whitespace byte separates the header from raster data.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::load(format!(
            "{origin}: truncated PGM ({} raster bytes, need {need})",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(GrayImage {
        height,
        width,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)
        .map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes, &path.display().to_string())
}

fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn parse_dim(bytes: &[u8], pos: &mut usize, origin: &str, what: &str) -> Result<usize> {
    let token = take_token(bytes, pos)
        .ok_or_else(|| Error::load(format!("{origin}: missing PGM {what}")))?;
    let text = std::str::from_utf8(token)
        .map_err(|_| Error::load(format!("{origin}: non-ASCII PGM {what}")))?;
    let value: usize = text
        .parse()
        .map_err(|_| Error::load(format!("{origin}: bad PGM {what} {text:?}")))?;
    if value == 0 {
        return Err(Error::load(format!("{origin}: zero PGM {what}")));
    }
    Ok(value)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], pos: &mut usize, origin: &str) -> Result<u32> {
    if bytes.len() < *pos + 4 {
        return Err(Error::load(format!("{origin}: truncated IDX header")));
    }
    let v = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().expect("4 bytes"));
    *pos += 4;
    Ok(v)
}

/// Parses an IDX3-ubyte image archive into per-image grayscale buffers.
pub fn parse_idx_images(bytes: &[u8], origin: &str) -> Result<Vec<GrayImage>> {
    let mut pos = 0;
    let magic = read_be_u32(bytes, &mut pos, origin)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::load(format!(
            "{origin}: bad IDX image magic {magic:#010x} (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let count = read_be_u32(bytes, &mut pos, origin)? as usize;
    let height = read_be_u32(bytes, &mut pos, origin)? as usize;
    let width = read_be_u32(bytes, &mut pos, origin)? as usize;
    let need = count * height * width;
    if bytes.len() < pos + need {
        return Err(Error::load(format!(
            "{origin}: truncated IDX data ({} bytes, need {need})",
            bytes.len() - pos
        )));
    }
    Ok((0..count)
        .map(|i| GrayImage {
            height,
            width,
            pixels: bytes[pos + i * height * width..pos + (i + 1) * height * width].to_vec(),
        })
        .collect())
}

/// Parses an IDX1-ubyte label archive.
pub fn parse_idx_labels(bytes: &[u8], origin: &str) -> Result<Vec<u8>> {
    let mut pos = 0;
    let magic = read_be_u32(bytes, &mut pos, origin)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::load(format!(
            "{origin}: bad IDX label magic {magic:#010x} (expected {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    let count = read_be_u32(bytes, &mut pos, origin)? as usize;
    if bytes.len() < pos + count {
        return Err(Error::load(format!("{origin}: truncated IDX labels")));
    }
    Ok(bytes[pos..pos + count].to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<Vec<GrayImage>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
    parse_idx_images(&bytes, &path.display().to_string())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
    parse_idx_labels(&bytes, &path.display().to_string())
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
}

/// Parsed dataset manifest with a dense label -> class-name table.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    /// Parses manifest CSV text: header `path,label,class_name`, UTF-8, LF.
    pub fn parse(text: &str, origin: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data(format!("{origin}: empty manifest")))?;
        if header.trim() != "path,label,class_name" {
            return Err(Error::data(format!(
                "{origin}: manifest header must be `path,label,class_name`, got {header:?}"
            )));
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            // Paths may contain commas only if the row still splits into
            // exactly three fields from the right.
            let mut parts = line.rsplitn(3, ',');
            let class_name = parts.next().unwrap_or("").trim().to_string();
            let label_text = parts.next().unwrap_or("").trim();
            let path_text = parts.next().ok_or_else(|| {
                Error::data(format!("{origin}: line {}: expected 3 fields", lineno + 2))
            })?;
            let label: usize = label_text.parse().map_err(|_| {
                Error::data(format!(
                    "{origin}: line {}: bad label {label_text:?}",
                    lineno + 2
                ))
            })?;
            entries.push(ManifestEntry {
                path: PathBuf::from(path_text.trim()),
                label,
                class_name,
            });
        }
        if entries.is_empty() {
            return Err(Error::data(format!("{origin}: manifest lists no samples")));
        }

        let max_label = entries.iter().map(|e| e.label).max().expect("non-empty");
        let num_classes = max_label + 1;
        if num_classes < 2 {
            return Err(Error::data(format!("{origin}: need at least 2 classes")));
        }
        let mut class_names: Vec<Option<String>> = vec![None; num_classes];
        for entry in &entries {
            match &class_names[entry.label] {
                None => class_names[entry.label] = Some(entry.class_name.clone()),
                Some(existing) if *existing != entry.class_name => {
                    return Err(Error::data(format!(
                        "{origin}: label {} maps to both {existing:?} and {:?}",
                        entry.label, entry.class_name
                    )));
                }
                _ => {}
            }
        }
        let class_names: Vec<String> = class_names
            .into_iter()
            .enumerate()
            .map(|(label, name)| {
                name.ok_or_else(|| {
                    Error::data(format!(
                        "{origin}: labels are not dense, class {label} has no samples"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            entries,
            class_names,
        })
    }

    /// Reads and parses a manifest file; relative entry paths are resolved
    /// against the manifest's directory.
    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut manifest = Self::parse(&text, &path.display().to_string())?;
        if let Some(dir) = path.parent() {
            for entry in &mut manifest.entries {
                if entry.path.is_relative() {
                    entry.path = dir.join(&entry.path);
                }
            }
        }
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Serializes a manifest back to CSV (UTF-8, LF).
pub fn manifest_to_csv(manifest: &DatasetManifest) -> String {
    let mut out = String::from("path,label,class_name\n");
    for entry in &manifest.entries {
        out.push_str(&format!(
            "{},{},{}\n",
            entry.path.display(),
            entry.label,
            entry.class_name
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm_bytes(w: usize, h: usize, fill: u8) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
        v.extend(std::iter::repeat_n(fill, w * h));
        v
    }

    #[test]
    fn pgm_round_trip() {
        let img = parse_pgm(&pgm_bytes(4, 3, 7), "test").unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert!(img.pixels.iter().all(|&p| p == 7));
    }

    #[test]
    fn pgm_with_comment() {
        let mut v = b"P5\n# a comment\n2 2\n255\n".to_vec();
        v.extend([0, 64, 128, 255]);
        let img = parse_pgm(&v, "test").unwrap();
        assert_eq!(img.pixels, vec![0, 64, 128, 255]);
    }

    #[test]
    fn pgm_rejects_wrong_magic_and_maxval() {
        assert!(parse_pgm(b"P2\n2 2\n255\n....", "test").is_err());
        let mut v = format!("P5\n2 2\n65535\n").into_bytes();
        v.extend([0u8; 8]);
        assert!(parse_pgm(&v, "test").is_err());
    }

    #[test]
    fn pgm_rejects_truncation() {
        let mut v = pgm_bytes(4, 4, 1);
        v.truncate(v.len() - 3);
        assert!(parse_pgm(&v, "test").is_err());
    }

    #[test]
    fn idx_images_round_trip() {
        let mut bytes = Vec::new();
        bytes.extend(0x0000_0803u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(3u32.to_be_bytes());
        bytes.extend(0..12u8);
        let images = parse_idx_images(&bytes, "test").unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].pixels, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!((images[1].height, images[1].width), (2, 3));
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let mut bytes = Vec::new();
        bytes.extend(0x0000_0801u32.to_be_bytes());
        bytes.extend(0u32.to_be_bytes());
        assert!(parse_idx_images(&bytes, "test").is_err());
        assert!(parse_idx_labels(&bytes, "test").is_ok());
    }

    #[test]
    fn manifest_parses_and_checks_density() {
        let text = "path,label,class_name\na.pgm,0,disk\nb.pgm,1,bar\nc.pgm,2,ring\n";
        let m = DatasetManifest::parse(text, "test").unwrap();
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.class_names, vec!["disk", "bar", "ring"]);

        let sparse = "path,label,class_name\na.pgm,0,disk\nc.pgm,2,ring\n";
        assert!(DatasetManifest::parse(sparse, "test").is_err());

        let conflicting = "path,label,class_name\na.pgm,0,disk\nb.pgm,0,ring\n";
        assert!(DatasetManifest::parse(conflicting, "test").is_err());
    }

    #[test]
    fn manifest_rejects_bad_header() {
        assert!(DatasetManifest::parse("file,label\na,0\n", "test").is_err());
    }
}
