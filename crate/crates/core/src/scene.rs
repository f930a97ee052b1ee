//! Linear multi-view "renderer": view `k` of an asset is `P_k θ` for an
//! orthogonal camera matrix `P_k`, optionally followed by a pointwise
//! sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

const ORTHOGONALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asset<T = f64> {
    pub theta: Tensor<T>,
}

impl<T: Scalar> Asset<T> {
    pub fn new(theta: Vec<T>) -> Result<Self> {
        let theta = Tensor::vector(theta);
        if !theta.is_finite() {
            return Err(Error::NonFinite("asset parameters".into()));
        }
        Ok(Self { theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostMap {
    #[default]
    Linear,
    Sigmoid,
}

/// `K` orthogonal `D×D` camera transforms with their camera ids.
///
/// `camera_ids[k]` names the physical camera producing view slot `k`; a
/// freshly built rig has `camera_ids = [0, 1, ..., K-1]` and [`Self::posed`]
/// rotates both transforms and ids together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig<T = f64> {
    transforms: Vec<Tensor<T>>,
    camera_ids: Vec<usize>,
    #[serde(default)]
    post_map: PostMap,
}

impl<T: Scalar> CameraRig<T> {
    pub fn from_transforms(transforms: Vec<Tensor<T>>) -> Result<Self> {
        let ids = (0..transforms.len()).collect();
        let rig = Self {
            transforms,
            camera_ids: ids,
            post_map: PostMap::Linear,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// `views` identity cameras.
    pub fn identity(dim: usize, views: usize) -> Result<Self> {
        Self::from_transforms(vec![Tensor::identity(dim); views])
    }

    /// Cameras at `360/views`-degree increments in the plane of the first two
    /// coordinates; the remaining coordinates are left fixed.
    pub fn orbit(dim: usize, views: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("orbit rig needs dimension >= 2".into()));
        }
        let transforms = (0..views)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / views as f64;
                let (s, c) = angle.sin_cos();
                let mut m = Tensor::identity(dim);
                let d = m.data_mut();
                d[0] = T::lit(c);
                d[1] = T::lit(-s);
                d[dim] = T::lit(s);
                d[dim + 1] = T::lit(c);
                m
            })
            .collect();
        Self::from_transforms(transforms)
    }

    pub fn with_post_map(mut self, post_map: PostMap) -> Self {
        self.post_map = post_map;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.transforms.first().ok_or(Error::Empty("camera rig"))?;
        let d = first.rows();
        for (k, p) in self.transforms.iter().enumerate() {
            p.ensure_shape(&[d, d], &format!("camera {k}"))?;
            let ptp = p.transpose()?.matmul(p)?;
            let err = ptp.sub(&Tensor::identity(d))?.max_abs();
            if err.to_f64_lossy() > ORTHOGONALITY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "camera {k} is not orthogonal (|PᵀP - I| = {err})"
                )));
            }
        }
        if self.camera_ids.len() != self.transforms.len() {
            return Err(Error::shape("camera ids", &[self.transforms.len()], &[self.camera_ids.len()]));
        }
        let mut ids = self.camera_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.camera_ids.len() {
            return Err(Error::InvalidArgument("camera ids must be distinct".into()));
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.transforms.len()
    }

    pub fn dim(&self) -> usize {
        self.transforms[0].rows()
    }

    pub fn transform(&self, k: usize) -> &Tensor<T> {
        &self.transforms[k]
    }

    pub fn camera_ids(&self) -> &[usize] {
        &self.camera_ids
    }

    pub fn post_map(&self) -> PostMap {
        self.post_map
    }

    /// One-hot code of the camera in view slot `k`.
    pub fn encoding(&self, k: usize) -> Vec<T> {
        let mut code = vec![T::zero(); self.views()];
        code[self.camera_ids[k]] = T::one();
        code
    }

    /// The rig rotated by `offset` camera positions.
    pub fn posed(&self, offset: usize) -> Self {
        let k = self.views();
        Self {
            transforms: (0..k).map(|j| self.transforms[(j + offset) % k].clone()).collect(),
            camera_ids: (0..k).map(|j| self.camera_ids[(j + offset) % k]).collect(),
            post_map: self.post_map,
        }
    }
}

/// `K × D` stack of rendered views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewImage<T = f64> {
    pub views: Tensor<T>,
}

impl<T: Scalar> MultiViewImage<T> {
    pub fn new(views: Tensor<T>) -> Result<Self> {
        if views.shape().len() != 2 {
            return Err(Error::InvalidArgument("view stack must be K x D".into()));
        }
        Ok(Self { views })
    }

    pub fn from_flat(k: usize, d: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::matrix(k, d, data)?)
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            views: Tensor::zeros(&[k, d]),
        }
    }

    pub fn num_views(&self) -> usize {
        self.views.rows()
    }

    pub fn view_dim(&self) -> usize {
        self.views.cols()
    }

    pub fn view(&self, k: usize) -> &[T] {
        self.views.row(k)
    }

    pub fn flat(&self) -> &[T] {
        self.views.data()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn render<T: Scalar>(asset: &Asset<T>, rig: &CameraRig<T>, k: usize) -> Result<Tensor<T>> {
    if k >= rig.views() {
        return Err(Error::IndexOutOfRange {
            what: "camera",
            index: k,
            len: rig.views(),
        });
    }
    if asset.dim() != rig.dim() {
        return Err(Error::shape("render", &[rig.dim()], &[asset.dim()]));
    }
    let v = Tensor::vector(rig.transform(k).matvec(asset.theta.data())?);
    Ok(match rig.post_map() {
        PostMap::Linear => v,
        PostMap::Sigmoid => v.map(sigmoid),
    })
}

pub fn render_all<T: Scalar>(asset: &Asset<T>, rig: &CameraRig<T>) -> Result<MultiViewImage<T>> {
    let (k, d) = (rig.views(), rig.dim());
    let mut data = Vec::with_capacity(k * d);
    for j in 0..k {
        data.extend_from_slice(render(asset, rig, j)?.data());
    }
    MultiViewImage::from_flat(k, d, data)
}

/// `Σ_k P_kᵀ u_k`: the vector-Jacobian product of the linear renderer.
pub fn render_vjp<T: Scalar>(rig: &CameraRig<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, d) = (rig.views(), rig.dim());
    upstream.ensure_shape(&[k, d], "render_vjp upstream")?;
    let mut out = vec![T::zero(); d];
    for j in 0..k {
        let back = rig.transform(j).matvec_t(upstream.row(j))?;
        for (o, b) in out.iter_mut().zip(back) {
            *o = *o + b;
        }
    }
    Ok(Tensor::vector(out))
}

/// Vector-Jacobian product at `asset`, including the sigmoid post-map when
/// the rig has one.
pub fn render_vjp_at<T: Scalar>(asset: &Asset<T>, rig: &CameraRig<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    match rig.post_map() {
        PostMap::Linear => render_vjp(rig, upstream),
        PostMap::Sigmoid => {
            let (k, d) = (rig.views(), rig.dim());
            upstream.ensure_shape(&[k, d], "render_vjp upstream")?;
            let mut local = upstream.clone();
            for j in 0..k {
                let pre = rig.transform(j).matvec(asset.theta.data())?;
                for (u, z) in local.row_mut(j).iter_mut().zip(pre) {
                    let s = sigmoid(z);
                    *u = *u * s * (T::one() - s);
                }
            }
            render_vjp(rig, &local)
        }
    }
}
