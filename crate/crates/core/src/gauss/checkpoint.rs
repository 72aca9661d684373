//! Binary container for a Gaussian cloud.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MSPLATGC"
//! 8       2     version (u16, currently 1)
//! 10      1     sh_degree (u8)
//! 11      1     kernels_per_face (u8)
//! 12      4     reserved (u32, zero)
//! 16      4     vertex_count (u32)
//! 20      12*n  vertex array, n x 3 x f32
//! ...     4     kernel_count (u32)
//! ...           per-kernel records:
//!                 face_id: u32
//!                 beta: 3 x f32
//!                 scale_factor: f32
//!                 opacity: f32
//!                 sh coefficients: (sh_degree+1)^2 x 3 x f32
//! ```
//!
//! Face topology is not stored: it is constant over a model's lifetime and
//! comes from the canonical mesh the cloud is bound to at load time.

use std::io::{Read, Write};
use std::path::Path;

use super::{GaussianCloud, SurfaceGaussian};
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSPLATGC";
pub const VERSION: u16 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u16(&mut self) -> std::io::Result<u16> {
        let mut b = [0u8; 2];
        self.0.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f32(&mut self) -> std::io::Result<f32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
    fn u8(&mut self) -> std::io::Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
}

/// Serialize a cloud (current vertices plus all kernel parameters).
pub fn save_cloud(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Writer(std::io::BufWriter::new(file));
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.0.write_all(MAGIC).map_err(io_err)?;
    w.u16(VERSION).map_err(io_err)?;
    w.0.write_all(&[cloud.sh_degree as u8, cloud.kernels_per_face as u8])
        .map_err(io_err)?;
    w.u32(0).map_err(io_err)?;

    w.u32(cloud.mesh.vertices.len() as u32).map_err(io_err)?;
    for v in &cloud.mesh.vertices {
        for c in v {
            w.f32(*c).map_err(io_err)?;
        }
    }
    w.u32(cloud.gaussians.len() as u32).map_err(io_err)?;
    for g in &cloud.gaussians {
        w.u32(g.face_id).map_err(io_err)?;
        for b in g.beta {
            w.f32(b).map_err(io_err)?;
        }
        w.f32(g.scale_factor).map_err(io_err)?;
        w.f32(g.opacity).map_err(io_err)?;
        for c in &g.sh_coeffs {
            for ch in c {
                w.f32(*ch).map_err(io_err)?;
            }
        }
    }
    w.0.flush().map_err(io_err)?;
    Ok(())
}

/// Load a cloud, binding the stored vertices to the given face topology.
pub fn load_cloud(path: impl AsRef<Path>, faces: &[[u32; 3]]) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let mut r = Reader(std::io::BufReader::new(file));
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.0.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let sh_degree = r.u8().map_err(io_err)? as usize;
    let kernels_per_face = r.u8().map_err(io_err)? as usize;
    let _reserved = r.u32().map_err(io_err)?;

    let n_vertices = r.u32().map_err(io_err)? as usize;
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        vertices.push([
            r.f32().map_err(io_err)?,
            r.f32().map_err(io_err)?,
            r.f32().map_err(io_err)?,
        ]);
    }
    let mesh = TriangleMesh::new(vertices, faces.to_vec())?;

    let n_kernels = r.u32().map_err(io_err)? as usize;
    if n_kernels != kernels_per_face * faces.len() {
        return Err(Error::Checkpoint(format!(
            "kernel count {n_kernels} != k {kernels_per_face} x faces {}",
            faces.len()
        )));
    }
    let n_coeffs = (sh_degree + 1) * (sh_degree + 1);
    let mut gaussians = Vec::with_capacity(n_kernels);
    for _ in 0..n_kernels {
        let face_id = r.u32().map_err(io_err)?;
        let beta = [
            r.f32().map_err(io_err)?,
            r.f32().map_err(io_err)?,
            r.f32().map_err(io_err)?,
        ];
        let scale_factor = r.f32().map_err(io_err)?;
        let opacity = r.f32().map_err(io_err)?;
        let mut sh_coeffs = Vec::with_capacity(n_coeffs);
        for _ in 0..n_coeffs {
            sh_coeffs.push([
                r.f32().map_err(io_err)?,
                r.f32().map_err(io_err)?,
                r.f32().map_err(io_err)?,
            ]);
        }
        gaussians.push(SurfaceGaussian {
            face_id,
            beta,
            scale_factor,
            opacity,
            sh_coeffs,
        });
    }
    let cloud = GaussianCloud {
        gaussians,
        mesh,
        kernels_per_face,
        sh_degree,
    };
    cloud.validate()?;
    Ok(cloud)
}
