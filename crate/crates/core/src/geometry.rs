//! Planar observer kinematics and the pinhole model for the two body-mounted
//! cameras.
//!
//! Observer-local frames put `x` to the observer's right and `y` straight
//! ahead. A pose with heading `θ` maps local coordinates to the world by the
//! rotation `R(θ)`, so heading 0 looks along world `+y`.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 3D cross product.
    pub fn det(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Observer pose on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundPose {
    pub position: Vec2,
    pub heading: f64,
}

/// Per-step SE(2) increment expressed in the previous observer frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObserverAction {
    pub dtheta: f64,
    pub dt: Vec2,
}

impl ObserverAction {
    pub const IDENTITY: ObserverAction = ObserverAction {
        dtheta: 0.0,
        dt: Vec2::ZERO,
    };

    pub fn new(dtheta: f64, dt: Vec2) -> Self {
        Self { dtheta, dt }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dtheta, self.dt.x, self.dt.y]
    }

    pub fn is_finite(&self) -> bool {
        self.dtheta.is_finite() && self.dt.is_finite()
    }

    /// Re-expresses a point given in the frame before the action in the
    /// frame after it.
    pub fn transform_point(&self, p: Vec2) -> Vec2 {
        (p - self.dt).rotated(-self.dtheta)
    }

    /// Same as [`transform_point`](Self::transform_point) for free vectors.
    pub fn transform_vector(&self, v: Vec2) -> Vec2 {
        v.rotated(-self.dtheta)
    }
}

impl GroundPose {
    pub fn new(position: Vec2, heading: f64) -> Result<Self> {
        if !position.is_finite() || !heading.is_finite() {
            return Err(GeometryError::InvalidInput(format!(
                "non-finite pose ({}, {}, {heading})",
                position.x, position.y
            )));
        }
        Ok(Self {
            position,
            heading: normalize_angle(heading),
        })
    }

    pub fn compose(&self, action: &ObserverAction) -> Result<GroundPose> {
        if !action.is_finite() {
            return Err(GeometryError::InvalidInput(format!(
                "non-finite action {:?}",
                action.as_array()
            )));
        }
        GroundPose::new(
            self.position + action.dt.rotated(self.heading),
            self.heading + action.dtheta,
        )
    }

    pub fn to_local(&self, world: Vec2) -> Vec2 {
        (world - self.position).rotated(-self.heading)
    }

    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.position + local.rotated(self.heading)
    }

    pub fn vector_to_local(&self, world: Vec2) -> Vec2 {
        world.rotated(-self.heading)
    }

    /// The action that takes `self` to `next`.
    pub fn action_to(&self, next: &GroundPose) -> ObserverAction {
        ObserverAction::new(
            normalize_angle(next.heading - self.heading),
            self.to_local(next.position),
        )
    }

    /// Heading whose forward axis points along `direction`.
    pub fn heading_facing(direction: Vec2) -> f64 {
        normalize_angle(direction.y.atan2(direction.x) - PI / 2.0)
    }
}

pub fn to_observer_frame(world_point: Vec2, pose: &GroundPose) -> Vec2 {
    pose.to_local(world_point)
}

pub fn compose_action(pose: &GroundPose, action: &ObserverAction) -> Result<GroundPose> {
    pose.compose(action)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidInput(format!(
                "bad intrinsics {self:?}"
            )))
        }
    }
}

/// Front and rear pinhole cameras sharing intrinsics, mounted at the same
/// height with horizontal optical axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    pub mount_height: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            mount_height: 1.5,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.mount_height > 0.0) {
            return Err(GeometryError::InvalidInput(format!(
                "mount height {} must be positive",
                self.mount_height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Front,
    Rear,
}

impl Camera {
    pub const ALL: [Camera; 2] = [Camera::Front, Camera::Rear];

    /// +1 front, -1 rear.
    pub fn flag(self) -> f64 {
        match self {
            Camera::Front => 1.0,
            Camera::Rear => -1.0,
        }
    }

    pub fn from_flag(flag: f64) -> Option<Camera> {
        if flag == 1.0 {
            Some(Camera::Front)
        } else if flag == -1.0 {
            Some(Camera::Rear)
        } else {
            None
        }
    }

    /// (lateral, depth) in this camera's frame.
    fn camera_coords(self, local: Vec2) -> (f64, f64) {
        match self {
            Camera::Front => (local.x, local.y),
            Camera::Rear => (-local.x, -local.y),
        }
    }

    fn camera_to_local(self, lateral: f64, depth: f64) -> Vec2 {
        match self {
            Camera::Front => Vec2::new(lateral, depth),
            Camera::Rear => Vec2::new(-lateral, -depth),
        }
    }
}

/// Points closer than this along the optical axis are not imaged.
pub const Z_NEAR: f64 = 0.1;

/// Projects the head point of a pedestrian standing at `local_point` (observer
/// frame) into `camera`. `None` when the point is behind the near plane or
/// lands outside the image.
pub fn project_head_point(
    local_point: Vec2,
    ped_height: f64,
    rig: &CameraRig,
    camera: Camera,
) -> Result<Option<(f64, f64)>> {
    rig.validate()?;
    if !(ped_height > 0.0) || !local_point.is_finite() {
        return Err(GeometryError::InvalidInput(format!(
            "height {ped_height} at {local_point:?}"
        )));
    }
    let (lateral, depth) = camera.camera_coords(local_point);
    if depth <= Z_NEAR {
        return Ok(None);
    }
    let k = &rig.intrinsics;
    let u = k.cx + k.fx * lateral / depth;
    let v = k.cy + k.fy * (rig.mount_height - ped_height) / depth;
    if u < 0.0 || u >= k.width || v < 0.0 || v >= k.height {
        return Ok(None);
    }
    Ok(Some((u, v)))
}

/// First camera (front, then rear) in which the head point is visible.
pub fn project_any(
    local_point: Vec2,
    ped_height: f64,
    rig: &CameraRig,
) -> Result<Option<(Camera, f64, f64)>> {
    for cam in Camera::ALL {
        if let Some((u, v)) = project_head_point(local_point, ped_height, rig, cam)? {
            return Ok(Some((cam, u, v)));
        }
    }
    Ok(None)
}

/// Inverts [`project_head_point`] when the pedestrian height is known.
pub fn unproject_with_height(
    u: f64,
    v: f64,
    ped_height: f64,
    rig: &CameraRig,
    camera: Camera,
) -> Result<Vec2> {
    rig.validate()?;
    let k = &rig.intrinsics;
    let dh = rig.mount_height - ped_height;
    if dh == 0.0 {
        return Err(GeometryError::Degenerate(format!(
            "head at mount height {ped_height} lies on the horizon row"
        )));
    }
    let dv = v - k.cy;
    if dv == 0.0 {
        return Err(GeometryError::Degenerate(format!(
            "v = cy = {v} carries no depth for height {ped_height}"
        )));
    }
    let depth = k.fy * dh / dv;
    if depth <= 0.0 {
        return Err(GeometryError::Degenerate(format!(
            "row {v} is on the wrong side of the horizon for height {ped_height}"
        )));
    }
    let lateral = (u - k.cx) * depth / k.fx;
    Ok(camera.camera_to_local(lateral, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn compose_examples() {
        let p = GroundPose::new(Vec2::ZERO, 0.0).unwrap();
        let a = ObserverAction::new(0.0, Vec2::new(1.0, 0.0));
        assert_eq!(
            p.compose(&a).unwrap(),
            GroundPose::new(Vec2::new(1.0, 0.0), 0.0).unwrap()
        );

        let p = GroundPose::new(Vec2::ZERO, FRAC_PI_2).unwrap();
        let q = p.compose(&a).unwrap();
        assert!(close(q.position, Vec2::new(0.0, 1.0), 1e-15));
        assert_eq!(q.heading, FRAC_PI_2);

        let p = GroundPose::new(Vec2::new(2.0, 3.0), 0.4).unwrap();
        assert_eq!(p.compose(&ObserverAction::IDENTITY).unwrap(), p);
    }

    #[test]
    fn compose_rejects_non_finite() {
        let p = GroundPose::default();
        let a = ObserverAction::new(f64::NAN, Vec2::ZERO);
        assert!(matches!(p.compose(&a), Err(GeometryError::InvalidInput(_))));
        assert!(GroundPose::new(Vec2::new(f64::INFINITY, 0.0), 0.0).is_err());
    }

    #[test]
    fn heading_normalised_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        let p = GroundPose::new(Vec2::ZERO, 3.0).unwrap();
        let q = p.compose(&ObserverAction::new(1.0, Vec2::ZERO)).unwrap();
        assert!(q.heading > -PI && q.heading <= PI);
    }

    #[test]
    fn observer_frame_examples() {
        let p = GroundPose::new(Vec2::ZERO, 0.0).unwrap();
        assert_eq!(
            to_observer_frame(Vec2::new(1.0, 0.0), &p),
            Vec2::new(1.0, 0.0)
        );
        let p = GroundPose::new(Vec2::ZERO, FRAC_PI_2).unwrap();
        assert!(close(
            to_observer_frame(Vec2::new(0.0, 1.0), &p),
            Vec2::new(1.0, 0.0),
            1e-15
        ));
    }

    fn rig() -> CameraRig {
        CameraRig::default()
    }

    #[test]
    fn projection_examples() {
        let r = rig();
        assert_eq!(
            project_head_point(Vec2::new(0.0, 5.0), 1.7, &r, Camera::Front).unwrap(),
            Some((320.0, 220.0))
        );
        assert_eq!(
            project_head_point(Vec2::new(1.0, 4.0), 1.5, &r, Camera::Front).unwrap(),
            Some((445.0, 240.0))
        );
        assert_eq!(
            project_head_point(Vec2::new(0.0, -3.0), 1.8, &r, Camera::Front).unwrap(),
            None
        );
        assert!(project_head_point(Vec2::new(0.0, 3.0), 0.0, &r, Camera::Front).is_err());
    }

    #[test]
    fn near_plane_and_bounds() {
        let r = rig();
        assert_eq!(
            project_head_point(Vec2::new(0.0, 0.1), 1.7, &r, Camera::Front).unwrap(),
            None
        );
        // 10 m to the side at 2 m depth is far outside a 640 px image
        assert_eq!(
            project_head_point(Vec2::new(10.0, 2.0), 1.7, &r, Camera::Front).unwrap(),
            None
        );
        // on the lateral axis neither camera sees the point
        assert_eq!(project_any(Vec2::new(0.5, 0.05), 1.7, &r).unwrap(), None);
    }

    #[test]
    fn unprojection_examples() {
        let r = rig();
        let p = unproject_with_height(320.0, 220.0, 1.7, &r, Camera::Front).unwrap();
        assert!(close(p, Vec2::new(0.0, 5.0), 1e-12));
        assert!(matches!(
            unproject_with_height(445.0, 240.0, 1.5, &r, Camera::Front),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(matches!(
            unproject_with_height(300.0, 240.0, 1.7, &r, Camera::Front),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn invalid_rig_is_rejected() {
        let mut r = rig();
        r.intrinsics.fx = 0.0;
        assert!(project_head_point(Vec2::new(0.0, 5.0), 1.7, &r, Camera::Front).is_err());
        let mut r = rig();
        r.mount_height = -1.0;
        assert!(unproject_with_height(320.0, 220.0, 1.7, &r, Camera::Front).is_err());
    }

    #[test]
    fn head_height_orders_rows() {
        let r = rig();
        let tall = project_head_point(Vec2::new(0.3, 6.0), 1.9, &r, Camera::Front)
            .unwrap()
            .unwrap();
        let short = project_head_point(Vec2::new(0.3, 6.0), 1.2, &r, Camera::Front)
            .unwrap()
            .unwrap();
        assert!(tall.1 < r.intrinsics.cy);
        assert!(short.1 > r.intrinsics.cy);
    }

    fn pose_strategy() -> impl Strategy<Value = GroundPose> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI)
            .prop_map(|(x, y, h)| GroundPose::new(Vec2::new(x, y), h).unwrap())
    }

    fn action_strategy() -> impl Strategy<Value = ObserverAction> {
        (-1.0..1.0f64, -2.0..2.0f64, -2.0..2.0f64)
            .prop_map(|(t, x, y)| ObserverAction::new(t, Vec2::new(x, y)))
    }

    proptest! {
        #[test]
        fn frame_round_trip(p in pose_strategy(), x in -30.0..30.0f64, y in -30.0..30.0f64) {
            let local = Vec2::new(x, y);
            prop_assert!(close(p.to_local(p.to_world(local)), local, 1e-9));
        }

        #[test]
        fn composition_matches_frame_transform(p in pose_strategy(), a in action_strategy(), x in -30.0..30.0f64, y in -30.0..30.0f64) {
            // a world point seen from the composed pose equals the action's
            // transform of the point seen from the original pose
            let q = p.compose(&a).unwrap();
            let w = Vec2::new(x, y);
            prop_assert!(close(q.to_local(w), a.transform_point(p.to_local(w)), 1e-9));
            let back = p.action_to(&q);
            prop_assert!((normalize_angle(back.dtheta - a.dtheta)).abs() < 1e-12);
            prop_assert!(close(back.dt, a.dt, 1e-9));
        }

        #[test]
        fn composition_is_associative(p in pose_strategy(), a in action_strategy(), b in action_strategy()) {
            // (p ∘ a) ∘ b equals p ∘ (a ∘ b), where a ∘ b is the combined increment
            let two_step = p.compose(&a).unwrap().compose(&b).unwrap();
            let combined = ObserverAction::new(a.dtheta + b.dtheta, a.dt + b.dt.rotated(a.dtheta));
            let one_step = p.compose(&combined).unwrap();
            prop_assert!(close(two_step.position, one_step.position, 1e-9));
            prop_assert!(normalize_angle(two_step.heading - one_step.heading).abs() < 1e-12);
        }

        #[test]
        fn rear_camera_mirrors_front(x in -3.0..3.0f64, z in 0.5..20.0f64, h in 1.4..2.1f64) {
            let r = CameraRig::default();
            let p = Vec2::new(x, z);
            prop_assert_eq!(
                project_head_point(-p, h, &r, Camera::Rear).unwrap(),
                project_head_point(p, h, &r, Camera::Front).unwrap()
            );
        }

        #[test]
        fn projection_round_trip(x in -3.0..3.0f64, z in 0.5..25.0f64, h in 1.4..2.1f64, rear in any::<bool>()) {
            prop_assume!((h - 1.5).abs() >= 0.05);
            let r = CameraRig::default();
            let cam = if rear { Camera::Rear } else { Camera::Front };
            let local = if rear { Vec2::new(-x, -z) } else { Vec2::new(x, z) };
            if let Some((u, v)) = project_head_point(local, h, &r, cam).unwrap() {
                let back = unproject_with_height(u, v, h, &r, cam).unwrap();
                prop_assert!((back - local).norm() / local.norm() < 1e-9);
            }
        }
    }
}
