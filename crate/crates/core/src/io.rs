//! Exchange formats: a versioned text format for meshes and small binary
//! formats for boundary operators and corrector tables. Floats are written so
//! that reading them back is bit-exact.

use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::cell::CorrectorField;
use crate::error::{Error, Result};
use crate::geom::{BoundaryMesh, Domain, Feature, Panel, Psi};
use crate::layer::{BemOperator, OperatorKind};
use crate::small::{Point, Vector};

pub const MESH_HEADER: &str = "layerlab-mesh 1";
pub const OPERATOR_MAGIC: &[u8; 8] = b"LLOPER\x00\x01";
pub const CORRECTOR_MAGIC: &[u8; 8] = b"LLCORR\x00\x01";

fn mesh_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "mesh", reason: reason.into() }
}

fn push_vec<const D: usize>(out: &mut String, v: &Vector<D>) {
    for x in v.iter() {
        out.push(' ');
        out.push_str(&format!("{x:?}"));
    }
}

/// Header lines, then one panel per line:
/// `centroid normal measure feature tangent tangent2 origin span0 span1`.
pub fn write_mesh<const D: usize>(mesh: &BoundaryMesh<D>, w: &mut impl Write) -> Result<()> {
    let mut s = String::new();
    s.push_str(MESH_HEADER);
    s.push('\n');
    s.push_str(&format!(
        "dim {D}\npanels {}\nfeatures {}\nsigma {:?}\ngrading {}\nlipschitz {:?}\n",
        mesh.len(),
        mesh.features().len(),
        mesh.sigma(),
        mesh.grading(),
        mesh.lipschitz()
    ));
    match mesh.domain() {
        Domain::Polygon(v) => {
            s.push_str(&format!("domain polygon {}", v.len()));
            v.iter().for_each(|p| push_vec(&mut s, p));
        }
        Domain::Box { center, half_width } => {
            s.push_str("domain box");
            push_vec(&mut s, center);
            s.push_str(&format!(" {half_width:?}"));
        }
        Domain::Graph(Psi::Flat) => s.push_str("domain graph flat"),
        Domain::Graph(Psi::Cone { slope }) => s.push_str(&format!("domain graph cone {slope:?}")),
        Domain::Graph(Psi::Sawtooth { slope, period }) => s.push_str(&format!("domain graph sawtooth {slope:?} {period:?}")),
    }
    s.push('\n');
    for f in mesh.features() {
        s.push_str(&format!("feature {} {} {}", f.shape[0], f.shape[1], u8::from(f.periodic)));
        f.panels.iter().for_each(|i| s.push_str(&format!(" {i}")));
        s.push('\n');
    }
    for p in mesh.panels() {
        s.push_str("panel");
        push_vec(&mut s, &p.centroid);
        push_vec(&mut s, &p.normal);
        s.push_str(&format!(" {:?} {}", p.measure, p.feature));
        push_vec(&mut s, &p.tangent);
        push_vec(&mut s, &p.tangent2);
        push_vec(&mut s, &p.origin);
        push_vec(&mut s, &p.span[0]);
        push_vec(&mut s, &p.span[1]);
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Tokens<'a> {
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn word(&mut self) -> Result<&'a str> {
        self.it.next().ok_or_else(|| mesh_err("unexpected end of line"))
    }

    fn expect(&mut self, key: &str) -> Result<()> {
        let w = self.word()?;
        if w != key {
            return Err(mesh_err(format!("expected `{key}`, found `{w}`")));
        }
        Ok(())
    }

    fn num<T: std::str::FromStr>(&mut self) -> Result<T> {
        let w = self.word()?;
        w.parse().map_err(|_| mesh_err(format!("bad number `{w}`")))
    }

    fn vec<const D: usize>(&mut self) -> Result<Vector<D>> {
        let mut v = Vector::<D>::zeros();
        for i in 0..D {
            v[i] = self.num()?;
        }
        Ok(v)
    }

    fn done(&mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(mesh_err(format!("trailing token `{w}`"))),
        }
    }
}

pub fn read_mesh<const D: usize>(r: impl BufRead) -> Result<BoundaryMesh<D>> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut lines = lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty());
    let mut next = || lines.next().map(|l| Tokens { it: l.split_whitespace() }).ok_or_else(|| mesh_err("truncated"));
    let header = next()?.it.collect::<Vec<_>>().join(" ");
    if header != MESH_HEADER {
        return Err(mesh_err(format!("unsupported header `{header}`")));
    }
    let field = |t: &mut Tokens, key: &str| -> Result<String> {
        t.expect(key)?;
        let v = t.word()?.to_string();
        t.done()?;
        Ok(v)
    };
    let parse = |s: String| -> Result<f64> { s.parse().map_err(|_| mesh_err(format!("bad number `{s}`"))) };
    let dim: usize = parse(field(&mut next()?, "dim")?)? as usize;
    if dim != D {
        return Err(Error::DimensionMismatch { expected: D, found: dim });
    }
    let n_panels = parse(field(&mut next()?, "panels")?)? as usize;
    let n_features = parse(field(&mut next()?, "features")?)? as usize;
    let sigma = parse(field(&mut next()?, "sigma")?)?;
    let grading = parse(field(&mut next()?, "grading")?)? as usize;
    let lipschitz = parse(field(&mut next()?, "lipschitz")?)?;
    let mut t = next()?;
    t.expect("domain")?;
    let domain = match t.word()? {
        "polygon" => {
            let n: usize = t.num()?;
            Domain::Polygon((0..n).map(|_| t.vec::<D>()).collect::<Result<_>>()?)
        }
        "box" => Domain::Box { center: t.vec::<D>()?, half_width: t.num()? },
        "graph" => Domain::Graph(match t.word()? {
            "flat" => Psi::Flat,
            "cone" => Psi::Cone { slope: t.num()? },
            "sawtooth" => Psi::Sawtooth { slope: t.num()?, period: t.num()? },
            other => return Err(mesh_err(format!("unknown graph `{other}`"))),
        }),
        other => return Err(mesh_err(format!("unknown domain `{other}`"))),
    };
    t.done()?;
    let mut features = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        let mut t = next()?;
        t.expect("feature")?;
        let shape = [t.num()?, t.num()?];
        let periodic = t.num::<u8>()? == 1;
        let panels = (0..shape[0] * shape[1]).map(|_| t.num()).collect::<Result<_>>()?;
        t.done()?;
        features.push(Feature { panels, shape, periodic });
    }
    let mut panels = Vec::with_capacity(n_panels);
    for _ in 0..n_panels {
        let mut t = next()?;
        t.expect("panel")?;
        let centroid = t.vec::<D>()?;
        let normal = t.vec::<D>()?;
        let measure = t.num()?;
        let feature = t.num()?;
        let tangent = t.vec::<D>()?;
        let tangent2 = t.vec::<D>()?;
        let origin: Point<D> = t.vec::<D>()?;
        let span = [t.vec::<D>()?, t.vec::<D>()?];
        t.done()?;
        panels.push(Panel { centroid, normal, tangent, tangent2, measure, feature, origin, span });
    }
    if next().is_ok() {
        return Err(mesh_err("trailing lines"));
    }
    let mesh = BoundaryMesh::from_parts(panels, features, domain, grading, lipschitz);
    if mesh.sigma().to_bits() != sigma.to_bits() {
        return Err(mesh_err(format!("sigma {sigma:?} does not match panel measures {:?}", mesh.sigma())));
    }
    Ok(mesh)
}

fn read_exact<const N: usize>(r: &mut impl Read, format: &'static str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format { format, reason: e.to_string() })?;
    Ok(b)
}

fn read_string(r: &mut impl Read, format: &'static str) -> Result<String> {
    let n = u32::from_le_bytes(read_exact(r, format)?) as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::Format { format, reason: e.to_string() })?;
    String::from_utf8(b).map_err(|e| Error::Format { format, reason: e.to_string() })
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Magic, kind code, size, mesh id, kernel id, diagonal rule, row-major entries (little endian).
pub fn write_operator(op: &BemOperator, w: &mut impl Write) -> Result<()> {
    let n = op.matrix.nrows();
    w.write_all(OPERATOR_MAGIC)?;
    w.write_all(&[op.kind.code()])?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&op.mesh_id.to_le_bytes())?;
    write_string(w, &op.kernel_id)?;
    write_string(w, &op.diagonal)?;
    let mut buf = Vec::with_capacity(8 * n * n);
    for i in 0..n {
        for j in 0..n {
            buf.extend_from_slice(&op.matrix[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_operator(r: &mut impl Read) -> Result<BemOperator> {
    const F: &str = "operator";
    if &read_exact::<8>(r, F)? != OPERATOR_MAGIC {
        return Err(Error::Format { format: F, reason: "bad magic".into() });
    }
    let [code] = read_exact::<1>(r, F)?;
    let kind = OperatorKind::from_code(code).ok_or(Error::Format { format: F, reason: format!("unknown kind {code}") })?;
    let n = u64::from_le_bytes(read_exact(r, F)?) as usize;
    let mesh_id = u64::from_le_bytes(read_exact(r, F)?);
    let kernel_id = read_string(r, F)?;
    let diagonal = read_string(r, F)?;
    let mut buf = vec![0u8; 8 * n * n];
    r.read_exact(&mut buf).map_err(|e| Error::Format { format: F, reason: e.to_string() })?;
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let k = 8 * (i * n + j);
        f64::from_le_bytes(buf[k..k + 8].try_into().expect("8 bytes"))
    });
    Ok(BemOperator { kind, matrix, mesh_id, kernel_id, diagonal })
}

/// Magic, dimension, cutoff, field fingerprint, residual, iterations, then the
/// in-band coefficient table `(k, c_1k .. c_dk)`.
pub fn write_corrector<const D: usize>(c: &CorrectorField<D>, w: &mut impl Write) -> Result<()> {
    w.write_all(CORRECTOR_MAGIC)?;
    w.write_all(&(D as u32).to_le_bytes())?;
    w.write_all(&(c.cutoff() as u32).to_le_bytes())?;
    w.write_all(&c.field_fingerprint().to_le_bytes())?;
    w.write_all(&c.residual().to_le_bytes())?;
    w.write_all(&(c.iterations() as u64).to_le_bytes())?;
    w.write_all(&(c.table().len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for (k, coef) in c.table() {
        k.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        coef.iter().for_each(|v| {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        });
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_corrector<const D: usize>(r: &mut impl Read) -> Result<CorrectorField<D>> {
    const F: &str = "corrector";
    if &read_exact::<8>(r, F)? != CORRECTOR_MAGIC {
        return Err(Error::Format { format: F, reason: "bad magic".into() });
    }
    let dim = u32::from_le_bytes(read_exact(r, F)?) as usize;
    if dim != D {
        return Err(Error::DimensionMismatch { expected: D, found: dim });
    }
    let cutoff = u32::from_le_bytes(read_exact(r, F)?) as usize;
    let fingerprint = u64::from_le_bytes(read_exact(r, F)?);
    let residual = f64::from_le_bytes(read_exact(r, F)?);
    let iterations = u64::from_le_bytes(read_exact(r, F)?) as usize;
    let n = u64::from_le_bytes(read_exact(r, F)?) as usize;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = [0i32; D];
        for v in k.iter_mut() {
            *v = i32::from_le_bytes(read_exact(r, F)?);
        }
        let mut c = [Complex64::new(0.0, 0.0); D];
        for v in c.iter_mut() {
            *v = Complex64::new(f64::from_le_bytes(read_exact(r, F)?), f64::from_le_bytes(read_exact(r, F)?));
        }
        table.push((k, c));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format { format: F, reason: "trailing bytes".into() });
    }
    Ok(CorrectorField::from_table(cutoff, table, residual, iterations, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::solve_cell;
    use crate::coeff::{make_field, FieldDescriptor};
    use crate::geom::{build_graph_patch, build_polygon_mesh, unit_cube, unit_square};
    use crate::kernel::TwoScaleKernel;
    use crate::layer::BemSystem;
    use std::sync::Arc;

    fn round_trip<const D: usize>(m: &BoundaryMesh<D>) {
        let mut buf = Vec::new();
        write_mesh(m, &mut buf).unwrap();
        let back: BoundaryMesh<D> = read_mesh(&buf[..]).unwrap();
        assert_eq!(&back, m);
        assert_eq!(back.id(), m.id());
    }

    #[test]
    fn mesh_round_trip_is_exact() {
        round_trip(&unit_square(7, 2).unwrap());
        round_trip(&unit_cube(3, 1).unwrap());
        let tri = [Point::<2>::new(0.0, 0.0), Point::<2>::new(1.0, 0.1), Point::<2>::new(0.3, 0.7)];
        round_trip(&build_polygon_mesh(&tri, 5, 1).unwrap());
        round_trip(&build_graph_patch(Psi::Cone { slope: 0.5 }, 1.0, 0.5, 8).unwrap().outer);
    }

    #[test]
    fn mesh_rejects_damage() {
        let mut buf = Vec::new();
        write_mesh(&unit_square(2, 0).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(read_mesh::<3>(text.as_bytes()).is_err());
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_mesh::<2>(cut.as_bytes()), Err(Error::Format { .. })));
        let bad = text.replacen("sigma 4.0", "sigma 4.5", 1);
        assert!(matches!(read_mesh::<2>(bad.as_bytes()), Err(Error::Format { .. })));
    }

    #[test]
    fn operator_and_corrector_round_trip() {
        let field = Arc::new(make_field::<2>(&FieldDescriptor::trig_test(2)).unwrap());
        let corr = solve_cell(&field, 8, 1e-4).unwrap();
        let mut buf = Vec::new();
        write_corrector(&corr, &mut buf).unwrap();
        let back: CorrectorField<2> = read_corrector(&mut &buf[..]).unwrap();
        assert_eq!(back.table(), corr.table());
        let y = Point::<2>::new(0.3, 0.8);
        assert_eq!(back.eval(&y), corr.eval(&y));
        assert!(read_corrector::<3>(&mut &buf[..]).is_err());

        let kernel = TwoScaleKernel::from_field(field, 0.25).unwrap();
        let sys = BemSystem::new(Arc::new(unit_square(4, 0).unwrap()), kernel);
        let k = sys.assemble_k();
        let mut buf = Vec::new();
        write_operator(&k, &mut buf).unwrap();
        assert_eq!(read_operator(&mut &buf[..]).unwrap(), k);
        buf[0] = b'X';
        assert!(read_operator(&mut &buf[..]).is_err());
    }
}
