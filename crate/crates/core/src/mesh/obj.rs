//! Minimal ASCII Wavefront OBJ: `v x y z` and triangular `f a b c` records.
//! Polygon faces are fan-triangulated on read; texture/normal indices are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::geometry::Vec3;
use crate::error::{invalid, Error, Result};

pub fn to_obj_string(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    std::fs::write(path, to_obj_string(vertices, faces)).map_err(|e| Error::io(path, e))
}

pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| invalid!("line {}: bad vertex: {e}", lineno + 1))?;
                if coords.len() != 3 {
                    return Err(invalid!("line {}: vertex needs 3 coordinates", lineno + 1));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        first.parse::<i64>().map_err(|e| invalid!("line {}: bad face index: {e}", lineno + 1))
                    })
                    .map(|r| {
                        r.and_then(|i| {
                            if i >= 1 {
                                Ok((i - 1) as u32)
                            } else if i < 0 && (-i) as usize <= vertices.len() {
                                Ok((vertices.len() as i64 + i) as u32)
                            } else {
                                Err(invalid!("line {}: face index {i} out of range", lineno + 1))
                            }
                        })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(invalid!("line {}: face needs at least 3 vertices", lineno + 1));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= vertices.len())) {
        return Err(invalid!("face {:?} references a missing vertex", f));
    }
    Ok((vertices, faces))
}

pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let vs = vec![Vec3::new(0.1, -2.5e-3, 1.0 / 3.0), Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.7, 0.0, 9.0)];
        let fs = vec![[0, 1, 2]];
        let (v2, f2) = parse_obj(&to_obj_string(&vs, &fs)).unwrap();
        assert_eq!(v2, vs);
        assert_eq!(f2, fs);
    }

    #[test]
    fn quads_and_slashes() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let (v, f) = parse_obj(text).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(f, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn bad_index_rejected() {
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
