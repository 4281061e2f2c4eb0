//! Scan and pose file formats.
//!
//! * PLSC: ASCII header line `PLSC <A> <R> <timestamp>` followed by `A*R`
//!   little-endian f32 values, azimuth-major.
//! * PGM (P5, 8-bit): azimuth as rows, range as columns, rescaled to [0, 1];
//!   the timestamp is taken from the file stem.
//! * Poses: CSV with header `timestamp,x,y,yaw`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{PolarImage, PolarScan, Pose, Traversal};
use crate::error::{Error, Result};

pub const POSES_FILE: &str = "poses.csv";
const SCANS_DIR: &str = "scans";

pub fn write_plsc<W: Write>(mut w: W, timestamp: f64, image: &PolarImage) -> Result<()> {
    writeln!(w, "PLSC {} {} {}", image.angular(), image.radial(), timestamp)?;
    let mut buf = Vec::with_capacity(image.data().len() * 4);
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads a PLSC scan, returning its timestamp and image.
pub fn read_plsc<R: Read>(r: R) -> Result<(f64, PolarImage)> {
    let bad = |reason: String| Error::format("PLSC scan", reason);
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "PLSC" {
        return Err(bad(format!("bad header {:?}", header.trim_end())));
    }
    let a: usize = fields[1].parse().map_err(|_| bad(format!("bad angular extent {}", fields[1])))?;
    let rr: usize = fields[2].parse().map_err(|_| bad(format!("bad radial extent {}", fields[2])))?;
    let ts: f64 = fields[3].parse().map_err(|_| bad(format!("bad timestamp {}", fields[3])))?;
    let mut raw = vec![0u8; a * rr * 4];
    r.read_exact(&mut raw).map_err(|_| bad("truncated image data".into()))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((ts, PolarImage::new(a, rr, data)?))
}

/// Reads an 8-bit binary PGM (P5) as a polar image in [0, 1].
pub fn read_pgm<R: Read>(mut r: R) -> Result<PolarImage> {
    let bad = |reason: &str| Error::format("PGM image", reason);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("only binary P5 graymaps are supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit graymaps are supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let scale = 1.0 / maxval as f32;
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| (b as f32 * scale).min(1.0))
        .collect();
    PolarImage::new(height, width, data)
}

/// Reads a `.plsc` or `.pgm` scan; the id is the file stem.
pub fn read_scan_file(path: &Path) -> Result<PolarScan> {
    let load = || -> Result<PolarScan> {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data("scan file without a name".into()))?
            .to_string();
        let file = fs::File::open(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("plsc") => {
                let (timestamp, image) = read_plsc(file)?;
                Ok(PolarScan { id, timestamp, image })
            }
            Some("pgm") => {
                let timestamp: f64 = id
                    .parse()
                    .map_err(|_| Error::format("PGM image", format!("file stem {id:?} is not a timestamp")))?;
                Ok(PolarScan {
                    id,
                    timestamp,
                    image: read_pgm(file)?,
                })
            }
            _ => Err(Error::Data("unsupported scan extension".into())),
        }
    };
    load().map_err(|e| e.in_file(path))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoseRow {
    timestamp: f64,
    x: f64,
    y: f64,
    yaw: f64,
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<Pose>> {
    let load = || -> Result<Vec<Pose>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let expect = ["timestamp", "x", "y", "yaw"];
        if headers.iter().map(str::trim).ne(expect) {
            return Err(Error::format("pose file", format!("expected header timestamp,x,y,yaw, got {headers:?}")));
        }
        let mut poses = Vec::new();
        for row in rdr.deserialize::<PoseRow>() {
            let row = row?;
            poses.push(Pose {
                timestamp: row.timestamp,
                x: row.x,
                y: row.y,
                yaw: row.yaw,
            });
        }
        if poses.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::format("pose file", "timestamps are not sorted"));
        }
        Ok(poses)
    };
    load().map_err(|e| e.in_file(path))
}

pub fn write_poses_csv(path: &Path, poses: &[Pose]) -> Result<()> {
    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in poses {
            w.serialize(PoseRow {
                timestamp: p.timestamp,
                x: p.x,
                y: p.y,
                yaw: p.yaw,
            })?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| e.in_file(path))
}

/// Writes `<dir>/scans/<id>.plsc` for every scan and `<dir>/poses.csv`.
pub fn write_traversal_dir(dir: &Path, traversal: &Traversal) -> Result<()> {
    let scans = dir.join(SCANS_DIR);
    fs::create_dir_all(&scans).map_err(|e| Error::from(e).in_file(&scans))?;
    for scan in &traversal.scans {
        let path = scans.join(format!("{}.plsc", scan.id));
        let f = fs::File::create(&path).map_err(|e| Error::from(e).in_file(&path))?;
        write_plsc(std::io::BufWriter::new(f), scan.timestamp, &scan.image).map_err(|e| e.in_file(&path))?;
    }
    write_poses_csv(&dir.join(POSES_FILE), &traversal.poses)
}

/// Loads a traversal directory laid out by [`write_traversal_dir`],
/// applying the ingestion rules.
pub fn read_traversal_dir(
    dir: &Path,
    role: super::TraversalRole,
    rules: &super::IngestRules,
) -> Result<Traversal> {
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("traversal")
        .to_string();
    super::ingest(&name, role, &dir.join(SCANS_DIR), &dir.join(POSES_FILE), rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plsc_round_trip() {
        let img = PolarImage::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let mut buf = Vec::new();
        write_plsc(&mut buf, 1234.5625, &img).unwrap();
        assert!(buf.starts_with(b"PLSC 3 2 1234.5625\n"));
        let (ts, back) = read_plsc(buf.as_slice()).unwrap();
        assert_eq!(ts, 1234.5625);
        assert_eq!(back, img);
    }

    #[test]
    fn plsc_rejects_truncation() {
        let mut buf = b"PLSC 2 2 0\n".to_vec();
        buf.extend_from_slice(&[0u8; 12]);
        assert!(read_plsc(buf.as_slice()).is_err());
        assert!(read_plsc(&b"XYZ 2 2 0\n"[..]).is_err());
    }

    #[test]
    fn pgm_rows_are_azimuth() {
        let mut buf = b"P5\n# comment\n3 2\n255\n".to_vec();
        buf.extend_from_slice(&[0, 51, 255, 102, 153, 204]);
        let img = read_pgm(buf.as_slice()).unwrap();
        assert_eq!((img.angular(), img.radial()), (2, 3));
        assert!((img.get(0, 1) - 0.2).abs() < 1e-6);
        assert_eq!(img.get(0, 2), 1.0);
        assert!((img.get(1, 0) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn pgm_rejects_ascii_and_16_bit() {
        assert!(read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(read_pgm(&b"P5\n1 1\n65535\n\0\0"[..]).is_err());
    }
}
