//! Pinhole cameras. Convention: x right, y down, z forward in camera space;
//! pixel (u, v) = (fx x/z + cx, fy y/z + cy).

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rigid transform.
    pub w2c: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be > 0".into()));
        }
        if self.near >= self.far {
            return Err(Error::InvalidParameter("near must be < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.w2c.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.w2c.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p_world + self.translation()
    }

    /// Project a world point; returns (u, v, depth). Points behind the
    /// camera get a negative depth.
    pub fn project(&self, p_world: &Vector3<f64>) -> (f64, f64, f64) {
        let p = self.to_camera(p_world);
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }

    /// Camera at `eye` looking at `target`, with the world +z axis as the
    /// up hint.
    pub fn look_at(
        eye: &Vector3<f64>,
        target: &Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidParameter("look-at target equals eye".into()));
        }
        let z = forward.normalize();
        let mut up = Vector3::new(0.0, 0.0, 1.0);
        if z.cross(&up).norm() < 1e-6 {
            up = Vector3::new(0.0, 1.0, 0.0);
        }
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let cam = Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            w2c,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// On-disk JSON form: `{fx,fy,cx,cy,width,height,w2c:[16 row-major],near,far}`.
#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    w2c: [f64; 16],
    near: f64,
    far: f64,
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut w2c = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                w2c[r * 4 + c] = self.w2c[(r, c)];
            }
        }
        CameraFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            w2c,
            near: self.near,
            far: self.far,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = CameraFile::deserialize(d)?;
        Ok(Camera {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            width: f.width,
            height: f.height,
            w2c: Matrix4::from_row_slice(&f.w2c),
            near: f.near,
            far: f.far,
        })
    }
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let cam: Camera =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    cam.validate()?;
    Ok(cam)
}

pub fn save_camera(cam: &Camera, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cam)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
