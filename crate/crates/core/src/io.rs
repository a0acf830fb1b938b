//! File formats: ASCII PLY and XYZ point clouds, PGM rasters, CSV score
//! rasters, and the binary feature-matrix container.
//!
//! Cloud writers emit floats with 9 significant digits; values written at
//! that precision round-trip exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"FPFH";
const FEATURE_VERSION: u32 = 1;

fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes an ASCII PLY file with `x y z` and, when present, `nx ny nz`.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if cloud.normals.is_some() {
        writeln!(w, "property double nx")?;
        writeln!(w, "property double ny")?;
        writeln!(w, "property double nz")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", fmt9(p.x), fmt9(p.y), fmt9(p.z))?;
        if let Some(ns) = &cloud.normals {
            let n = ns[i];
            write!(w, " {} {} {}", fmt9(n.x), fmt9(n.y), fmt9(n.z))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads an ASCII PLY with vertex properties `x y z [nx ny nz]`.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of PLY header".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    if next()?.trim() != "format ascii 1.0" {
        return Err(Error::Format("only 'format ascii 1.0' is supported".into()));
    }
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("comment") => {}
            Some("element") => {
                let kind = tok.next().unwrap_or_default();
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format("bad element line".into()))?;
                in_vertex = kind == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                } else if count > 0 {
                    return Err(Error::Format(format!(
                        "unsupported element '{kind}' with {count} entries"
                    )));
                }
            }
            Some("property") => {
                if in_vertex {
                    let ty = tok.next().unwrap_or_default();
                    if ty != "float" && ty != "double" && ty != "float32" && ty != "float64" {
                        return Err(Error::Format(format!("unsupported property type '{ty}'")));
                    }
                    props.push(tok.next().unwrap_or_default().to_string());
                }
            }
            Some(other) => {
                return Err(Error::Format(format!("unexpected header line '{other}'")));
            }
            None => {}
        }
    }
    let count = vertex_count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let has_normals = match props.as_slice() {
        [x, y, z] if x == "x" && y == "y" && z == "z" => false,
        [x, y, z, nx, ny, nz]
            if x == "x" && y == "y" && z == "z" && nx == "nx" && ny == "ny" && nz == "nz" =>
        {
            true
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported vertex properties {props:?}"
            )))
        }
    };
    let mut points = Vec::with_capacity(count);
    let mut normals = has_normals.then(|| Vec::with_capacity(count));
    for _ in 0..count {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad vertex line: {e}")))?;
        let expected = if has_normals { 6 } else { 3 };
        if vals.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} values per vertex, got {}",
                vals.len()
            )));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if let Some(ns) = &mut normals {
            ns.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    Ok(PointCloud {
        points,
        normals,
        grid_index: None,
    })
}

/// Writes whitespace-separated `x y z [nx ny nz]` lines.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", fmt9(p.x), fmt9(p.y), fmt9(p.z))?;
        if let Some(ns) = &cloud.normals {
            let n = ns[i];
            write!(w, " {} {} {}", fmt9(n.x), fmt9(n.y), fmt9(n.z))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals: Option<Vec<Vector3<f64>>> = None;
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        match vals.len() {
            3 => {
                if normals.is_some() {
                    return Err(Error::Format(format!(
                        "line {}: inconsistent column count",
                        lineno + 1
                    )));
                }
                points.push(Vector3::new(vals[0], vals[1], vals[2]));
            }
            6 => {
                if points.len() > normals.as_ref().map_or(0, |n| n.len()) {
                    return Err(Error::Format(format!(
                        "line {}: inconsistent column count",
                        lineno + 1
                    )));
                }
                points.push(Vector3::new(vals[0], vals[1], vals[2]));
                normals
                    .get_or_insert_with(Vec::new)
                    .push(Vector3::new(vals[3], vals[4], vals[5]));
            }
            n => {
                return Err(Error::Format(format!(
                    "line {}: expected 3 or 6 columns, got {n}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(PointCloud {
        points,
        normals,
        grid_index: None,
    })
}

/// Writes a binary (P5) PGM raster with maxval 255.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[u8]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::GeometryMismatch(format!(
            "PGM payload {} does not match {rows}x{cols}",
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    w.write_all(data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    // Header: "P5" <ws> cols <ws> rows <ws> maxval <single ws> payload.
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" {
        return Err(Error::Format("not a P5 PGM".into()));
    }
    let cols: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let rows: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format("only maxval 255 is supported".into()));
    }
    if bytes.len() < pos + rows * cols {
        return Err(Error::Format("truncated PGM payload".into()));
    }
    Ok((rows, cols, bytes[pos..pos + rows * cols].to_vec()))
}

pub fn write_mask_pgm(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, mask.nrows(), mask.ncols(), &data)
}

pub fn read_mask_pgm(path: &Path) -> Result<Array2<bool>> {
    let (rows, cols, data) = read_pgm(path)?;
    Ok(Array2::from_shape_vec((rows, cols), data.iter().map(|&b| b > 0).collect())
        .expect("shape checked by read_pgm"))
}

/// Writes a score raster as CSV, one row per line. Values use the shortest
/// decimal form that round-trips exactly.
pub fn write_csv_raster(path: &Path, raster: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in raster.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv_raster(path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if let Some(first) = rows.first() {
            if vals.len() != first.len() {
                return Err(Error::Format(format!(
                    "line {}: ragged CSV raster",
                    lineno + 1
                )));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Format("empty CSV raster".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .expect("rectangular by construction"))
}

/// Writes a feature matrix in the binary container: magic `FPFH`, version
/// u32, row count u64, dimension u32, then row-major little-endian f64.
pub fn write_feature_matrix(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.nrows() as u64).to_le_bytes())?;
    w.write_all(&(features.ncols() as u32).to_le_bytes())?;
    for v in features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("bad feature-matrix magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature-matrix version {version}"
        )));
    }
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut data = Vec::with_capacity(n * dim);
    let mut f64buf = [0u8; 8];
    for _ in 0..n * dim {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Array2::from_shape_vec((n, dim), data)
        .map_err(|e| Error::Format(format!("inconsistent feature matrix shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    struct TempDir(PathBuf);

    impl TempDir {
        fn path(&self) -> &Path {
            &self.0
        }
    }

    impl Drop for TempDir {
        fn drop(&mut self) {
            let _ = std::fs::remove_dir_all(&self.0);
        }
    }

    fn tempdir(tag: &str) -> TempDir {
        let dir = std::env::temp_dir().join(format!("pcad-io-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        TempDir(dir)
    }

    fn quantize9(x: f64) -> f64 {
        format!("{x:.8e}").parse().unwrap()
    }

    #[test]
    fn ply_round_trip_with_normals() {
        let dir = tempdir("ply");
        let mut cloud = PointCloud::from_points(vec![
            Vector3::new(0.125, -3.5, 7.0),
            Vector3::new(1.0 / 3.0, 0.1, -0.7),
        ]);
        cloud.normals = Some(vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        let path = dir.path().join("c.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cloud.points.iter().zip(&back.points) {
            for k in 0..3 {
                assert_eq!(quantize9(a[k]), b[k]);
            }
        }
        // Values already at 9 significant digits survive a second pass
        // byte-for-byte.
        let path2 = dir.path().join("c2.ply");
        write_ply(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn xyz_round_trip() {
        let dir = tempdir("xyz");
        let cloud = PointCloud::from_points(vec![
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-0.25, 0.5, 0.875),
        ]);
        let path = dir.path().join("c.xyz");
        write_xyz(&path, &cloud).unwrap();
        let back = read_xyz(&path).unwrap();
        assert_eq!(cloud.points, back.points);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempdir("pgm");
        let path = dir.path().join("m.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 3, 4, &data).unwrap();
        let (rows, cols, back) = read_pgm(&path).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn csv_raster_round_trip() {
        let dir = tempdir("csv");
        let path = dir.path().join("r.csv");
        let raster =
            Array2::from_shape_vec((2, 3), vec![0.1, -2.0, 3.5e-9, 4.0, 5.25, 6.0]).unwrap();
        write_csv_raster(&path, &raster).unwrap();
        let back = read_csv_raster(&path).unwrap();
        assert_eq!(raster, back);
    }

    #[test]
    fn feature_matrix_round_trip_is_exact() {
        let dir = tempdir("feat");
        let path = dir.path().join("f.bin");
        let m = Array2::from_shape_vec(
            (3, 4),
            (0..12).map(|i| (i as f64).exp() / 7.0).collect(),
        )
        .unwrap();
        write_feature_matrix(&path, &m).unwrap();
        let back = read_feature_matrix(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn feature_matrix_rejects_bad_magic() {
        let dir = tempdir("featbad");
        let path = dir.path().join("f.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            read_feature_matrix(&path),
            Err(Error::Format(_))
        ));
    }
}
