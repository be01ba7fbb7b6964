//! Rays, pinhole cameras, the ROI box and camera-pose sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::Vec3;
use crate::raster::ScalarMap;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box dimensions must be finite and positive, got {0:?}")]
    InvalidBoxDims([f64; 3]),
    #[error("box center must be finite, got {0:?}")]
    InvalidBoxCenter([f64; 3]),
    #[error("ray direction must be finite and nonzero")]
    InvalidDirection,
    #[error("ray origin must be finite")]
    InvalidOrigin,
    #[error("ray interval must satisfy 0 <= t_near < t_far, got [{0}, {1}]")]
    InvalidInterval(f64, f64),
    #[error("angular field of view must lie in (0, pi), got {0} rad")]
    InvalidFov(f64),
    #[error("box extent must be positive, got {0}")]
    InvalidExtent(f64),
    #[error("camera frame is degenerate (look direction parallel to up)")]
    DegenerateFrame,
    #[error("invalid pose sampling config: {0}")]
    InvalidSamplingConfig(String),
}

/// Axis-aligned region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoiBoxRepr", into = "RoiBoxRepr")]
pub struct RoiBox {
    center: Vec3,
    dims: Vec3,
}

#[derive(Serialize, Deserialize)]
struct RoiBoxRepr {
    center: Vec3,
    dims: Vec3,
}

impl TryFrom<RoiBoxRepr> for RoiBox {
    type Error = GeometryError;
    fn try_from(r: RoiBoxRepr) -> Result<Self, Self::Error> {
        RoiBox::new(r.center, r.dims)
    }
}

impl From<RoiBox> for RoiBoxRepr {
    fn from(b: RoiBox) -> Self {
        RoiBoxRepr {
            center: b.center,
            dims: b.dims,
        }
    }
}

impl RoiBox {
    pub fn new(center: Vec3, dims: Vec3) -> Result<Self, GeometryError> {
        if !center.is_finite() {
            return Err(GeometryError::InvalidBoxCenter(center.to_array()));
        }
        if !dims.is_finite() || dims.x <= 0.0 || dims.y <= 0.0 || dims.z <= 0.0 {
            return Err(GeometryError::InvalidBoxDims(dims.to_array()));
        }
        Ok(Self { center, dims })
    }

    pub fn from_min_max(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        Self::new((min + max) * 0.5, max - min)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn dims(&self) -> Vec3 {
        self.dims
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.dims * 0.5
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.dims * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.dims.length()
    }

    /// Longest edge, `e_max` in the camera-distance rule.
    pub fn max_extent(&self) -> f64 {
        self.dims.max_component()
    }

    /// Closed-set membership.
    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn contains_box(&self, other: &RoiBox) -> bool {
        self.contains(other.min()) && self.contains(other.max())
    }

    /// Corner `i` takes the max coordinate on axis `k` when bit `k` of `i` is set.
    pub fn corners(&self) -> [Vec3; 8] {
        let (lo, hi) = (self.min(), self.max());
        std::array::from_fn(|i| {
            Vec3::new(
                if i & 1 != 0 { hi.x } else { lo.x },
                if i & 2 != 0 { hi.y } else { lo.y },
                if i & 4 != 0 { hi.z } else { lo.z },
            )
        })
    }

    /// The 12 edges as corner pairs.
    pub fn edges(&self) -> [(Vec3, Vec3); 12] {
        let c = self.corners();
        let mut out = [(Vec3::ZERO, Vec3::ZERO); 12];
        let mut n = 0;
        for i in 0..8usize {
            for bit in [1usize, 2, 4] {
                if i & bit == 0 {
                    out[n] = (c[i], c[i | bit]);
                    n += 1;
                }
            }
        }
        out
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let u = Vec3::new(rng.random(), rng.random(), rng.random());
        self.min() + self.dims.mul_elem(u)
    }
}

/// Parametric ray `origin + t * direction`, `t` in `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self, GeometryError> {
        if !origin.is_finite() {
            return Err(GeometryError::InvalidOrigin);
        }
        let direction = direction.try_normalize().ok_or(GeometryError::InvalidDirection)?;
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(GeometryError::InvalidInterval(t_near, t_far));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Slab intersection of `ray` with `roi`, clamped to the ray's own interval.
///
/// Returns `None` on a miss or when the overlap has zero length.
pub fn ray_box_intersect(ray: &Ray, roi: &RoiBox) -> Option<(f64, f64)> {
    let (lo, hi) = (roi.min(), roi.max());
    let mut t_enter = ray.t_near;
    let mut t_exit = ray.t_far;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        if d == 0.0 {
            if o < lo[axis] || o > hi[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((lo[axis] - o) * inv, (hi[axis] - o) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
        if t_enter >= t_exit {
            return None;
        }
    }
    (t_enter < t_exit).then_some((t_enter, t_exit))
}

/// Pinhole camera with an orthonormal `forward/up/right` frame.
///
/// `afov` is the full horizontal angular field of view in radians. Pixel
/// `(col, row)` has its center at `(col + 0.5, row + 0.5)`; rows grow downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    pub right: Vec3,
    pub afov: f64,
}

/// Azimuth/elevation of the viewing position in degrees.
///
/// Elevation is negative above the target (top-down at -90).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewAngles {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

/// A projected point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    /// Coordinate along `forward`.
    pub z_cam: f64,
    /// Euclidean distance from the camera center.
    pub distance: f64,
}

impl CameraPose {
    pub fn look_at(position: Vec3, target: Vec3, up_hint: Vec3, afov: f64) -> Result<Self, GeometryError> {
        check_fov(afov)?;
        if !position.is_finite() {
            return Err(GeometryError::InvalidOrigin);
        }
        let forward = (target - position)
            .try_normalize()
            .ok_or(GeometryError::DegenerateFrame)?;
        let right = forward.cross(up_hint);
        if right.length() < 1e-9 {
            return Err(GeometryError::DegenerateFrame);
        }
        let right = right.try_normalize().ok_or(GeometryError::DegenerateFrame)?;
        Ok(Self::from_forward_right(position, forward, right, afov))
    }

    /// Caller guarantees `forward` and `right` are orthonormal.
    pub fn from_forward_right(position: Vec3, forward: Vec3, right: Vec3, afov: f64) -> Self {
        Self {
            position,
            forward,
            up: right.cross(forward),
            right,
            afov,
        }
    }

    pub fn focal_length(&self, width: usize) -> f64 {
        0.5 * width as f64 / (0.5 * self.afov).tan()
    }

    pub fn ray_direction(&self, col: f64, row: f64, width: usize, height: usize) -> Vec3 {
        let f = self.focal_length(width);
        let u = (col - 0.5 * width as f64) / f;
        let v = (row - 0.5 * height as f64) / f;
        (self.forward + self.right * u - self.up * v)
            .try_normalize()
            .unwrap_or(self.forward)
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize, width: usize, height: usize, near: f64, far: f64) -> Ray {
        Ray {
            origin: self.position,
            direction: self.ray_direction(col as f64 + 0.5, row as f64 + 0.5, width, height),
            t_near: near,
            t_far: far,
        }
    }

    /// Pinhole projection; `None` for points at or behind the camera plane.
    pub fn project(&self, p: Vec3, width: usize, height: usize) -> Option<Projection> {
        let rel = p - self.position;
        let z = rel.dot(self.forward);
        if z <= 1e-12 {
            return None;
        }
        let f = self.focal_length(width);
        let u = rel.dot(self.right) / z * f + 0.5 * width as f64;
        let v = -rel.dot(self.up) / z * f + 0.5 * height as f64;
        Some(Projection {
            pixel: [u, v],
            z_cam: z,
            distance: rel.length(),
        })
    }

    pub fn view_angles(&self) -> ViewAngles {
        // Viewing position relative to the target is -forward.
        let back = -self.forward;
        ViewAngles {
            azimuth_deg: back.x.atan2(back.z).to_degrees(),
            elevation_deg: (-back.y).clamp(-1.0, 1.0).asin().to_degrees(),
        }
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let unit = |v: Vec3| (v.length() - 1.0).abs() <= tol;
        unit(self.forward)
            && unit(self.up)
            && unit(self.right)
            && self.forward.dot(self.up).abs() <= tol
            && self.forward.dot(self.right).abs() <= tol
            && self.up.dot(self.right).abs() <= tol
    }
}

fn check_fov(afov: f64) -> Result<(), GeometryError> {
    if afov.is_finite() && afov > 0.0 && afov < std::f64::consts::PI {
        Ok(())
    } else {
        Err(GeometryError::InvalidFov(afov))
    }
}

/// Distance at which a face of extent `e_max` exactly fills the field of view.
pub fn camera_distance(afov: f64, e_max: f64) -> Result<f64, GeometryError> {
    check_fov(afov)?;
    if !(e_max > 0.0 && e_max.is_finite()) {
        return Err(GeometryError::InvalidExtent(e_max));
    }
    Ok(e_max / (2.0 * (0.5 * afov).tan()))
}

pub const DEFAULT_MIN_NEAR: f64 = 0.01;

/// Near/far planes concentrated around the box: `n = d - D/2`, `f = d + D`.
///
/// `n` is clamped to `min_near`. When the clamp pushes `n` past `d` the far
/// plane is widened so that `f - n >= D` still holds.
pub fn near_far_planes(distance: f64, box_diag: f64, min_near: f64) -> (f64, f64) {
    let near = min_near.max(distance - 0.5 * box_diag);
    let far = (distance + box_diag).max(near + box_diag);
    (near, far)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SceneType {
    #[default]
    FullOrbit,
    ForwardFacing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSamplingConfig {
    pub scene_type: SceneType,
    /// Degrees, `[lo, hi]`.
    pub azimuth_range: [f64; 2],
    /// Degrees, `[lo, hi]`; negative is above the target.
    pub elevation_range: [f64; 2],
    /// Radius is drawn from `d * [1 - j, 1 + j]`.
    pub radius_jitter: f64,
    /// Probability of aiming at a uniform random point inside the box.
    pub recenter_probability: f64,
    /// Forward-facing spiral radii as fractions of the camera distance.
    pub spiral_radii: [f64; 3],
    pub min_near: f64,
}

impl Default for PoseSamplingConfig {
    fn default() -> Self {
        Self {
            scene_type: SceneType::FullOrbit,
            azimuth_range: [-180.0, 180.0],
            elevation_range: [-90.0, 15.0],
            radius_jitter: 0.3,
            recenter_probability: 0.1,
            spiral_radii: [0.5, 0.5, 0.25],
            min_near: DEFAULT_MIN_NEAR,
        }
    }
}

impl PoseSamplingConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidSamplingConfig(msg.to_string()));
        let [a0, a1] = self.azimuth_range;
        let [e0, e1] = self.elevation_range;
        if !(a0 <= a1 && a0 >= -180.0 && a1 <= 180.0) {
            return bad("azimuth range must be ordered and within [-180, 180]");
        }
        if !(e0 <= e1 && e0 >= -90.0 && e1 <= 90.0) {
            return bad("elevation range must be ordered and within [-90, 90]");
        }
        if !(0.0..=1.0).contains(&self.recenter_probability) {
            return bad("recenter probability must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.radius_jitter) {
            return bad("radius jitter must lie in [0, 1)");
        }
        if self.spiral_radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("spiral radii must be finite and nonnegative");
        }
        if !(self.min_near > 0.0 && self.min_near.is_finite()) {
            return bad("min_near must be positive");
        }
        Ok(())
    }
}

/// A drawn training pose with the quantities used to derive it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPose {
    pub pose: CameraPose,
    pub look_target: Vec3,
    pub radius: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub recentered: bool,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a camera pose around the ROI.
///
/// Full-orbit scenes use spherical angles about the look target; forward-facing
/// scenes trace a spiral in front of it. The draw order is fixed, so equal seeds
/// give bitwise-equal poses.
pub fn sample_pose<R: Rng + ?Sized>(
    cfg: &PoseSamplingConfig,
    roi: &RoiBox,
    afov: f64,
    center_of_mass: Vec3,
    rng: &mut R,
) -> Result<SampledPose, GeometryError> {
    cfg.validate()?;
    let base = camera_distance(afov, roi.max_extent())?;
    let radius = uniform(rng, base * (1.0 - cfg.radius_jitter), base * (1.0 + cfg.radius_jitter));

    let recentered = rng.random::<f64>() < cfg.recenter_probability;
    let look_target = if recentered {
        roi.sample_uniform(rng)
    } else {
        center_of_mass
    };

    match cfg.scene_type {
        SceneType::FullOrbit => {
            let az = uniform(rng, cfg.azimuth_range[0], cfg.azimuth_range[1]);
            let el = uniform(rng, cfg.elevation_range[0], cfg.elevation_range[1]);
            let (st, ct) = az.to_radians().sin_cos();
            let (sp, cp) = el.to_radians().sin_cos();
            let offset = Vec3::new(cp * st, -sp, cp * ct);
            let right = Vec3::new(ct, 0.0, -st);
            let pose = CameraPose::from_forward_right(look_target + offset * radius, -offset, right, afov);
            Ok(SampledPose {
                pose,
                look_target,
                radius,
                azimuth_deg: az,
                elevation_deg: el,
                recentered,
            })
        }
        SceneType::ForwardFacing => {
            let t = uniform(rng, 0.0, 4.0 * std::f64::consts::PI);
            let [rx, ry, rz] = cfg.spiral_radii;
            let spiral = Vec3::new(rx * t.cos(), ry * t.sin(), rz * (0.5 * t).sin()) * radius;
            let position = look_target + Vec3::Z * radius + spiral;
            let pose = CameraPose::look_at(position, look_target, Vec3::Y, afov)?;
            let angles = pose.view_angles();
            Ok(SampledPose {
                pose,
                look_target,
                radius: position.distance(look_target),
                azimuth_deg: angles.azimuth_deg,
                elevation_deg: angles.elevation_deg,
                recentered,
            })
        }
    }
}

/// One sample of a projected box edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSample {
    pub edge: usize,
    pub pixel: [f64; 2],
    pub visible: bool,
}

/// Relative slack when comparing an edge sample against scene depth.
pub const OCCLUSION_TOLERANCE: f64 = 1e-3;

/// Projects the 12 box edges into the image described by `depth_map` and
/// flags each sample hidden when the scene surface lies in front of it.
///
/// Depth is distance along the unit pixel ray, the same quantity the
/// renderer reports. Samples behind the camera or off the image are dropped.
pub fn project_box_edges(
    roi: &RoiBox,
    pose: &CameraPose,
    depth_map: &ScalarMap,
    samples_per_edge: usize,
) -> Vec<EdgeSample> {
    let n = samples_per_edge.max(2);
    let (w, h) = (depth_map.width, depth_map.height);
    let mut out = Vec::new();
    for (edge, (a, b)) in roi.edges().into_iter().enumerate() {
        for k in 0..n {
            let p = a.lerp(b, k as f64 / (n - 1) as f64);
            let Some(proj) = pose.project(p, w, h) else {
                continue;
            };
            let [u, v] = proj.pixel;
            if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                continue;
            }
            let scene_depth = depth_map.get(u as usize, v as usize);
            let visible = proj.distance <= scene_depth * (1.0 + OCCLUSION_TOLERANCE);
            out.push(EdgeSample {
                edge,
                pixel: [u, v],
                visible,
            });
        }
    }
    out
}
