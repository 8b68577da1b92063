//! Text formats for point clouds and meshes (XYZ, ASCII PLY, OBJ) and the
//! parser for SDF initialization specs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::optimizer::Normalization;
use crate::sdf::{GridSdf, SdfOracle};
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Xyz,
    Ply,
    Obj,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "xyz" | "txt" => Ok(Format::Xyz),
        "ply" => Ok(Format::Ply),
        "obj" => Ok(Format::Obj),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unsupported extension (expected .xyz, .ply or .obj)",
            path.display()
        ))),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("expected a finite number, found `{tok}`"))),
    }
}

fn parse_xyz_tokens<'a>(path: &Path, line: usize, mut toks: impl Iterator<Item = &'a str>) -> Result<Vec3> {
    let mut c = [0.0; 3];
    for v in c.iter_mut() {
        let tok = toks
            .next()
            .ok_or_else(|| parse_err(path, line, "expected three coordinates"))?;
        *v = parse_f64(path, line, tok)?;
    }
    Ok(Vec3::from_array(c))
}

/// Points and triangles read from a file; `triangles` is empty for XYZ.
#[derive(Clone, Debug, Default)]
struct Parsed {
    points: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

fn parse_xyz(path: &Path, text: &str) -> Result<Parsed> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        points.push(parse_xyz_tokens(path, i + 1, line.split_whitespace())?);
    }
    Ok(Parsed {
        points,
        triangles: Vec::new(),
    })
}

/// Split a polygon into a triangle fan.
fn fan(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn parse_obj(path: &Path, text: &str) -> Result<Parsed> {
    let mut p = Parsed::default();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => p.points.push(parse_xyz_tokens(path, i + 1, toks)?),
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<i64>()
                            .map_err(|_| parse_err(path, i + 1, format!("bad face index `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(path, i + 1, "face needs at least three vertices"));
                }
                faces.push((i + 1, idx));
            }
            _ => {}
        }
    }
    let n = p.points.len() as i64;
    for (line, idx) in faces {
        let poly = idx
            .iter()
            .map(|&k| {
                let r = if k < 0 { n + k } else { k - 1 };
                if (0..n).contains(&r) {
                    Ok(r as usize)
                } else {
                    Err(parse_err(path, line, format!("face index {k} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        fan(&poly, &mut p.triangles);
    }
    Ok(p)
}

struct PlyElement {
    name: String,
    count: usize,
    /// Property names; list properties are marked.
    props: Vec<(String, bool)>,
}

fn parse_ply(path: &Path, text: &str) -> Result<Parsed> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (i, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "header has no `end_header`"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(parse_err(path, i + 1, format!("only ASCII PLY is supported, found `{fmt}`")));
                }
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(path, i + 1, "property before any element"))?
                .props
                .push((name.to_string(), true)),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(path, i + 1, "property before any element"))?
                .props
                .push((name.to_string(), false)),
            _ => {}
        }
    }
    let mut p = Parsed::default();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for el in &elements {
        let axis = |n: &str| el.props.iter().position(|(p, list)| p == n && !list);
        let xyz = [axis("x"), axis("y"), axis("z")];
        for _ in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, 0, format!("file ends inside element `{}`", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let mut cursor = 0;
            let mut scalars = Vec::with_capacity(el.props.len());
            let mut list = None;
            for (_, is_list) in &el.props {
                let tok = toks
                    .get(cursor)
                    .ok_or_else(|| parse_err(path, i + 1, "too few values"))?;
                if *is_list {
                    let len: usize = tok
                        .parse()
                        .map_err(|_| parse_err(path, i + 1, format!("bad list length `{tok}`")))?;
                    let items = toks
                        .get(cursor + 1..cursor + 1 + len)
                        .ok_or_else(|| parse_err(path, i + 1, "list is shorter than its length"))?;
                    if list.is_none() {
                        list = Some(
                            items
                                .iter()
                                .map(|t| t.parse::<i64>().map_err(|_| parse_err(path, i + 1, format!("bad index `{t}`"))))
                                .collect::<Result<Vec<_>>>()?,
                        );
                    }
                    cursor += 1 + len;
                    scalars.push(0.0);
                } else {
                    scalars.push(parse_f64(path, i + 1, tok)?);
                    cursor += 1;
                }
            }
            if el.name == "vertex" {
                let [Some(x), Some(y), Some(z)] = xyz else {
                    return Err(parse_err(path, i + 1, "vertex element lacks x/y/z"));
                };
                p.points.push(Vec3::new(scalars[x], scalars[y], scalars[z]));
            } else if el.name == "face" {
                if let Some(l) = list {
                    faces.push((i + 1, l));
                }
            }
        }
    }
    let n = p.points.len() as i64;
    for (line, idx) in faces {
        if idx.iter().any(|k| !(0..n).contains(k)) {
            return Err(parse_err(path, line, "face index out of range"));
        }
        let poly: Vec<usize> = idx.iter().map(|&k| k as usize).collect();
        fan(&poly, &mut p.triangles);
    }
    Ok(p)
}

fn parse_file(path: &Path) -> Result<(Format, Parsed)> {
    let format = format_of(path)?;
    let text = fs::read_to_string(path)?;
    let parsed = match format {
        Format::Xyz => parse_xyz(path, &text)?,
        Format::Ply => parse_ply(path, &text)?,
        Format::Obj => parse_obj(path, &text)?,
    };
    if parsed.points.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok((format, parsed))
}

/// Vertex positions from `.xyz`, ASCII `.ply` or `.obj`; faces, normals and
/// other attributes are ignored.
pub fn read_point_cloud(path: &Path) -> Result<Vec<Vec3>> {
    Ok(parse_file(path)?.1.points)
}

/// Triangle mesh from `.obj` or ASCII `.ply`; polygons are fan-triangulated.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let (format, parsed) = parse_file(path)?;
    if format == Format::Xyz || parsed.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(TriangleMesh {
        vertices: parsed.points,
        provenance: (0..parsed.triangles.len()).collect(),
        triangles: parsed.triangles,
    })
}

/// Nine significant digits, shortest of fixed and exponent notation, in the
/// style of C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    const P: i32 = 9;
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..P).contains(&exp) {
        trim(&format!("{:.*}", (P - 1 - exp) as usize, x))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn push_point(out: &mut String, prefix: &str, p: Vec3) {
    let _ = writeln!(out, "{prefix}{} {} {}", fmt_g9(p.x), fmt_g9(p.y), fmt_g9(p.z));
}

/// Write `mesh` as OBJ or ASCII PLY by extension, mapping vertices back to
/// original coordinates through `normalization` when given.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path, normalization: Option<&Normalization>) -> Result<()> {
    let vertex = |v: Vec3| normalization.map_or(v, |n| n.invert(v));
    let mut out = String::with_capacity(40 * (mesh.vertices.len() + mesh.triangles.len()));
    match format_of(path)? {
        Format::Obj => {
            for &v in &mesh.vertices {
                push_point(&mut out, "v ", vertex(v));
            }
            for t in &mesh.triangles {
                let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
            }
        }
        Format::Ply => {
            let _ = write!(
                out,
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
                 element face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.triangles.len()
            );
            for &v in &mesh.vertices {
                push_point(&mut out, "", vertex(v));
            }
            for t in &mesh.triangles {
                let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
            }
        }
        Format::Xyz => {
            return Err(Error::InvalidArgument(format!(
                "{}: meshes are written as .obj or .ply",
                path.display()
            )))
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// One `x y z` line per point.
pub fn write_xyz(points: &[Vec3], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(40 * points.len());
    for &p in points {
        push_point(&mut out, "", p);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse an SDF initialization spec.
///
/// Forms: `sphere` (radius 0.8), `sphere:R`, `torus:R,r`, `box:hx,hy,hz`,
/// `grid:PATH`, and any of these followed by `+noise:AMP[,SEED]`.
/// Analytic shapes are centered at the origin of the normalized frame; grid
/// files are read in original coordinates and mapped through
/// `normalization`.
pub fn parse_oracle(spec: &str, normalization: &Normalization, default_seed: u64) -> Result<SdfOracle> {
    let bad = |msg: &str| Error::InvalidArgument(format!("init spec `{spec}`: {msg}"));
    let (base, noise) = match spec.split_once("+noise:") {
        Some((b, n)) => (b, Some(n)),
        None => (spec, None),
    };
    let (name, args) = base.split_once(':').unwrap_or((base, ""));
    let numbers = || -> Result<Vec<f64>> {
        if args.is_empty() {
            return Ok(Vec::new());
        }
        args.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad(&format!("`{t}` is not a number"))))
            .collect()
    };
    let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
    let oracle = match name {
        "sphere" => match numbers()?.as_slice() {
            [] => SdfOracle::sphere(0.8),
            [r] if positive(&[*r]) => SdfOracle::sphere(*r),
            _ => return Err(bad("expected sphere:RADIUS")),
        },
        "torus" => match numbers()?.as_slice() {
            [a, b] if positive(&[*a, *b]) && b < a => SdfOracle::torus(*a, *b),
            _ => return Err(bad("expected torus:MAJOR,MINOR with MINOR < MAJOR")),
        },
        "box" => match numbers()?.as_slice() {
            [x, y, z] if positive(&[*x, *y, *z]) => SdfOracle::Box {
                center: Vec3::ZERO,
                half: Vec3::new(*x, *y, *z),
            },
            _ => return Err(bad("expected box:HX,HY,HZ")),
        },
        "grid" if !args.is_empty() => SdfOracle::Transformed {
            base: Box::new(SdfOracle::Grid(GridSdf::read(&PathBuf::from(args))?)),
            center: normalization.center,
            scale: normalization.scale,
        },
        _ => return Err(bad("unknown shape (use sphere, torus, box or grid)")),
    };
    match noise {
        None => Ok(oracle),
        Some(n) => {
            let (amp, seed) = n.split_once(',').unwrap_or((n, ""));
            let amp: f64 = amp.trim().parse().map_err(|_| bad("bad noise amplitude"))?;
            let seed = if seed.is_empty() {
                default_seed
            } else {
                seed.trim().parse().map_err(|_| bad("bad noise seed"))?
            };
            if !(amp >= 0.0) || !amp.is_finite() {
                return Err(bad("noise amplitude must be non-negative"));
            }
            Ok(SdfOracle::noisy(oracle, amp, seed))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::manifold_check;
    use crate::shapes::{icosphere, torus_mesh};
    use proptest::{prop_assert, proptest};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn reads_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.xyz", "0 0 0\n1 2 3\n\n# note\n-1e-3 4.5 6\n");
        let pts = read_point_cloud(&p).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2], Vec3::new(-1e-3, 4.5, 6.0));
    }

    #[test]
    fn malformed_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let text = "0 0 0\n".repeat(6) + "1 2 x\n";
        let p = write(dir.path(), "bad.xyz", &text);
        match read_point_cloud(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "short.xyz", "1 2\n");
        assert!(matches!(read_point_cloud(&p), Err(Error::Parse { line: 1, .. })));
        let p = write(dir.path(), "empty.xyz", "\n# nothing\n");
        assert!(matches!(read_point_cloud(&p), Err(Error::EmptyFile(_))));
        let p = write(dir.path(), "x.stl", "");
        assert!(matches!(read_point_cloud(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ply_extra_properties_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float nx\nproperty float x\n\
                    property float y\nproperty float z\nproperty float ny\nproperty float nz\nelement face 1\n\
                    property list uchar int vertex_indices\nend_header\n\
                    9 0 0 0 9 9\n9 1 0 0 9 9\n9 0 1 0 9 9\n3 0 1 2\n";
        let p = write(dir.path(), "n.ply", text);
        let pts = read_point_cloud(&p).unwrap();
        assert_eq!(pts, vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)]);
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        let bin = write(dir.path(), "b.ply", "ply\nformat binary_little_endian 1.0\nend_header\n");
        assert!(matches!(read_point_cloud(&bin), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn obj_reads_vertices_and_polygons() {
        let dir = tempfile::tempdir().unwrap();
        let text = "# quad\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/1/1 3/1/1 -1/1/1\n";
        let p = write(dir.path(), "q.obj", text);
        assert_eq!(read_point_cloud(&p).unwrap().len(), 4);
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        let bad = write(dir.path(), "r.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n");
        assert!(matches!(read_mesh(&bad), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn single_triangle_obj_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = TriangleMesh {
            vertices: vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2]],
            provenance: vec![0],
        };
        let p = dir.path().join("t.obj");
        write_mesh(&m, &p, None).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(), vec!["f 1 2 3"]);
    }

    #[test]
    fn closed_meshes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (m, chi) in [(icosphere(0.6, 2), 2), (torus_mesh(0.5, 0.2, 24, 12), 0)] {
            for ext in ["obj", "ply"] {
                let p = dir.path().join(format!("m.{ext}"));
                write_mesh(&m, &p, None).unwrap();
                let back = read_mesh(&p).unwrap();
                assert_eq!(back.triangles, m.triangles);
                for (a, b) in back.vertices.iter().zip(&m.vertices) {
                    assert!(a.dist(*b) < 1e-9);
                }
                let r = manifold_check(&back);
                assert!(r.is_closed_manifold());
                assert_eq!(r.euler_characteristic, chi);
            }
        }
    }

    #[test]
    fn normalization_is_undone_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let n = Normalization {
            center: Vec3::new(10.0, -3.0, 2.0),
            scale: 0.25,
        };
        let m = icosphere(0.5, 1);
        let p = dir.path().join("m.obj");
        write_mesh(&m, &p, Some(&n)).unwrap();
        let back = read_mesh(&p).unwrap();
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!(n.apply(*a).dist(*b) < 1e-8);
            assert!((a.dist(n.center) - 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(-0.5), "-0.5");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(123456789.0), "123456789");
        assert_eq!(fmt_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_g9(1e-5), "1e-05");
        assert_eq!(fmt_g9(0.0001), "0.0001");
        assert_eq!(fmt_g9(2.5e-12), "2.5e-12");
        assert_eq!(fmt_g9(9.9999999999), "10");
    }

    #[test]
    fn oracle_specs() {
        let id = Normalization::IDENTITY;
        let s = parse_oracle("sphere", &id, 0).unwrap();
        assert!((s.value(Vec3::new(0.8, 0.0, 0.0))).abs() < 1e-15);
        let t = parse_oracle("torus:0.5,0.2", &id, 0).unwrap();
        assert!(t.value(Vec3::new(0.7, 0.0, 0.0)).abs() < 1e-15);
        let b = parse_oracle("box:0.1,0.2,0.3", &id, 0).unwrap();
        assert!((b.value(Vec3::ZERO) + 0.1).abs() < 1e-15);
        let n1 = parse_oracle("sphere:0.6+noise:0.1,7", &id, 0).unwrap();
        let n2 = parse_oracle("sphere:0.6+noise:0.1", &id, 7).unwrap();
        let q = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(n1.value(q), n2.value(q));
        assert!((n1.value(q) - SdfOracle::sphere(0.6).value(q)).abs() <= 0.1 + 1e-12);
        for bad in ["cube", "sphere:-1", "torus:0.2,0.5", "sphere:a", "box:1,2", "sphere+noise:x", "grid:"] {
            assert!(parse_oracle(bad, &id, 0).is_err(), "{bad}");
        }
    }

    #[test]
    fn grid_spec_maps_through_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let original = SdfOracle::Sphere {
            center: Vec3::new(5.0, 0.0, 0.0),
            radius: 2.0,
        };
        let g = GridSdf::from_oracle(&original, [33, 33, 33], Vec3::new(2.0, -3.0, -3.0), Vec3::new(8.0, 3.0, 3.0));
        let p = dir.path().join("s.grid");
        g.write(&p).unwrap();
        let n = Normalization {
            center: Vec3::new(5.0, 0.0, 0.0),
            scale: 0.4,
        };
        let o = parse_oracle(&format!("grid:{}", p.display()), &n, 0).unwrap();
        // radius 2 in original units is 0.8 after normalization
        assert!(o.value(Vec3::new(0.8, 0.0, 0.0)).abs() < 1e-2);
        assert!(o.value(Vec3::ZERO) < -0.7);
    }

    proptest! {
        #[test]
        fn g9_round_trips_to_nine_digits(x in -1e6f64..1e6, e in -12i32..12) {
            let v = x * 10f64.powi(e);
            let back: f64 = fmt_g9(v).parse().unwrap();
            prop_assert!((back - v).abs() <= 5e-9 * v.abs().max(f64::MIN_POSITIVE));
        }
    }
}
