//! The unified state-action space.
//!
//! A [`SlotLayout`] partitions a fixed-length vector into named groups of
//! slots, each carrying one physical quantity (joint angles in radians,
//! end-effector deltas in metres, axis-angle rotations, ...). Every
//! embodiment writes into a sparse subset of those slots; everything else is
//! left at zero. Values stay in physical units: the only preprocessing is
//! per-kind outlier clamping.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::uac::{commit_delay, DelayModel, DelayModelConfig};

/// Physical meaning of a slot group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    ArmJointRad,
    EefDeltaM,
    EefRotAxisAngle,
    GripperWidthM,
    FingerRad,
    BaseVel,
    BaseHeading,
}

impl SlotKind {
    pub const ALL: [SlotKind; 7] = [
        SlotKind::ArmJointRad,
        SlotKind::EefDeltaM,
        SlotKind::EefRotAxisAngle,
        SlotKind::GripperWidthM,
        SlotKind::FingerRad,
        SlotKind::BaseVel,
        SlotKind::BaseHeading,
    ];

    /// Angular slots are wrapped to (-pi, pi] by the simulator.
    pub fn is_angle(self) -> bool {
        matches!(
            self,
            SlotKind::ArmJointRad | SlotKind::FingerRad | SlotKind::BaseHeading
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGroup {
    pub name: String,
    pub width: usize,
    pub kind: SlotKind,
}

impl SlotGroup {
    pub fn new(name: impl Into<String>, width: usize, kind: SlotKind) -> Self {
        Self {
            name: name.into(),
            width,
            kind,
        }
    }
}

/// Ordered, contiguous slot groups. `dim()` is the unified dimension `d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    groups: Vec<SlotGroup>,
    offsets: Vec<usize>,
    dim: usize,
}

impl SlotLayout {
    pub fn new(groups: Vec<SlotGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("slot layout", "no groups"));
        }
        let mut seen = BTreeSet::new();
        let mut offsets = Vec::with_capacity(groups.len());
        let mut dim = 0;
        for g in &groups {
            if g.width == 0 {
                return Err(Error::invalid(
                    "slot layout",
                    format!("group `{}` has zero width", g.name),
                ));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(Error::invalid(
                    "slot layout",
                    format!("duplicate group name `{}`", g.name),
                ));
            }
            offsets.push(dim);
            dim += g.width;
        }
        Ok(Self {
            groups,
            offsets,
            dim,
        })
    }

    /// Two 7-DoF arms with end-effector deltas, two six-finger hands, two
    /// grippers, a mobile base and five reserved fine-manipulation slots
    /// (d = 48).
    pub fn default_layout() -> Self {
        use SlotKind::*;
        let groups = vec![
            SlotGroup::new("left_arm_joints", 7, ArmJointRad),
            SlotGroup::new("right_arm_joints", 7, ArmJointRad),
            SlotGroup::new("left_eef_pos", 3, EefDeltaM),
            SlotGroup::new("left_eef_rot", 3, EefRotAxisAngle),
            SlotGroup::new("right_eef_pos", 3, EefDeltaM),
            SlotGroup::new("right_eef_rot", 3, EefRotAxisAngle),
            SlotGroup::new("left_hand_fingers", 6, FingerRad),
            SlotGroup::new("right_hand_fingers", 6, FingerRad),
            SlotGroup::new("left_gripper", 1, GripperWidthM),
            SlotGroup::new("right_gripper", 1, GripperWidthM),
            SlotGroup::new("base_vel", 2, BaseVel),
            SlotGroup::new("base_heading", 1, BaseHeading),
            SlotGroup::new("reserved_fine", 5, FingerRad),
        ];
        Self::new(groups).expect("default layout is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[SlotGroup] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_range(&self, group: usize) -> Range<usize> {
        let start = self.offsets[group];
        start..start + self.groups[group].width
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Slot index range of the named group.
    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        self.group_index(name).map(|g| self.group_range(g))
    }

    /// Group owning `slot`.
    pub fn group_of_slot(&self, slot: usize) -> Option<usize> {
        if slot >= self.dim {
            return None;
        }
        // offsets are sorted; the owning group is the last offset <= slot
        Some(self.offsets.partition_point(|&o| o <= slot) - 1)
    }

    pub fn kind_of_slot(&self, slot: usize) -> Option<SlotKind> {
        self.group_of_slot(slot).map(|g| self.groups[g].kind)
    }
}

/// One robot (or the human hand) as seen by the unified space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbodimentSpec {
    pub id: String,
    active_slots: Vec<usize>,
    pub control_period_s: f64,
    pub latency_budget_s: f64,
    pub delay_model: DelayModel,
}

impl EmbodimentSpec {
    /// Builds a spec with the default delay model: uniform over
    /// `0..=commit_delay(L, dt, 1)`.
    pub fn new(
        id: impl Into<String>,
        active_slots: impl IntoIterator<Item = usize>,
        control_period_s: f64,
        latency_budget_s: f64,
        layout: &SlotLayout,
    ) -> Result<Self> {
        if !(control_period_s.is_finite() && control_period_s > 0.0) {
            return Err(Error::invalid(
                "embodiment",
                format!("control period must be > 0, got {control_period_s}"),
            ));
        }
        if !(latency_budget_s.is_finite() && latency_budget_s >= 0.0) {
            return Err(Error::invalid(
                "embodiment",
                format!("latency budget must be >= 0, got {latency_budget_s}"),
            ));
        }
        let d_max = commit_delay(latency_budget_s, control_period_s, 1)? + 1;
        let delay_model = DelayModel::uniform(d_max)?;
        Self::with_delay_model(
            id,
            active_slots,
            control_period_s,
            latency_budget_s,
            delay_model,
            layout,
        )
    }

    pub fn with_delay_model(
        id: impl Into<String>,
        active_slots: impl IntoIterator<Item = usize>,
        control_period_s: f64,
        latency_budget_s: f64,
        delay_model: DelayModel,
        layout: &SlotLayout,
    ) -> Result<Self> {
        let id = id.into();
        let set: BTreeSet<usize> = active_slots.into_iter().collect();
        if set.is_empty() {
            return Err(Error::invalid(
                "embodiment",
                format!("`{id}` has no active slots"),
            ));
        }
        if let Some(&bad) = set.iter().find(|&&s| s >= layout.dim()) {
            return Err(Error::invalid(
                "embodiment",
                format!("`{id}` slot {bad} outside layout of dimension {}", layout.dim()),
            ));
        }
        if !(control_period_s.is_finite() && control_period_s > 0.0) {
            return Err(Error::invalid(
                "embodiment",
                format!("control period must be > 0, got {control_period_s}"),
            ));
        }
        if !(latency_budget_s.is_finite() && latency_budget_s >= 0.0) {
            return Err(Error::invalid(
                "embodiment",
                format!("latency budget must be >= 0, got {latency_budget_s}"),
            ));
        }
        Ok(Self {
            id,
            active_slots: set.into_iter().collect(),
            control_period_s,
            latency_budget_s,
            delay_model,
        })
    }

    /// Active slot indices in ascending order.
    pub fn active_slots(&self) -> &[usize] {
        &self.active_slots
    }

    pub fn num_active(&self) -> usize {
        self.active_slots.len()
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.active_slots.binary_search(&slot).is_ok()
    }

    /// Layout groups touched by at least one active slot.
    pub fn active_groups(&self, layout: &SlotLayout) -> BTreeSet<usize> {
        self.active_slots
            .iter()
            .filter_map(|&s| layout.group_of_slot(s))
            .collect()
    }

    /// 0/1 mask over the unified dimension.
    pub fn mask(&self, dim: usize) -> Vec<bool> {
        let mut m = vec![false; dim];
        for &s in &self.active_slots {
            if s < dim {
                m[s] = true;
            }
        }
        m
    }
}

/// A vector in the unified space, physical units per slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnifiedVector(Vec<f64>);

impl UnifiedVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        check_finite("unified vector", &values)?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for UnifiedVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Sparse slot assignment: the k-th raw value lands in the k-th active slot.
pub fn project(raw: &[f64], emb: &EmbodimentSpec, layout: &SlotLayout) -> Result<UnifiedVector> {
    check_len("raw embodiment vector", emb.num_active(), raw.len())?;
    check_finite("raw embodiment vector", raw)?;
    let mut out = vec![0.0; layout.dim()];
    for (&slot, &v) in emb.active_slots().iter().zip(raw) {
        out[slot] = v;
    }
    Ok(UnifiedVector(out))
}

/// Restriction of `u` to the embodiment's active slots.
pub fn extract(u: &UnifiedVector, emb: &EmbodimentSpec) -> Result<Vec<f64>> {
    if let Some(&last) = emb.active_slots().last() {
        if last >= u.dim() {
            return Err(Error::LengthMismatch {
                what: "unified vector",
                expected: last + 1,
                got: u.dim(),
            });
        }
    }
    Ok(emb.active_slots().iter().map(|&s| u.0[s]).collect())
}

/// Input rotation parameterizations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rotation {
    /// (w, x, y, z)
    Quaternion([f64; 4]),
    /// Intrinsic X-Y-Z Euler angles in radians: R = Rx(a) * Ry(b) * Rz(c).
    EulerXyz([f64; 3]),
    /// Axis-angle vector theta * n.
    AxisAngle([f64; 3]),
}

impl Rotation {
    pub fn to_unit_quaternion(&self) -> Result<UnitQuaternion<f64>> {
        match *self {
            Rotation::Quaternion(q) => {
                check_finite("quaternion", &q)?;
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(Error::invalid("quaternion", "zero norm"));
                }
                Ok(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    q[0], q[1], q[2], q[3],
                )))
            }
            Rotation::EulerXyz(e) => {
                check_finite("euler angles", &e)?;
                Ok(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), e[0])
                    * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), e[1])
                    * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), e[2]))
            }
            Rotation::AxisAngle(w) => {
                check_finite("axis-angle", &w)?;
                Ok(UnitQuaternion::from_scaled_axis(Vector3::from(w)))
            }
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        Ok(*self.to_unit_quaternion()?.to_rotation_matrix().matrix())
    }
}

/// Canonical axis-angle of a unit quaternion: theta in [0, pi]; at theta = pi
/// the axis is chosen with its first nonzero component positive.
pub fn quaternion_to_axis_angle(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let (mut w, mut v) = (q.w, q.vector().into_owned());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s == 0.0 {
        return [0.0; 3];
    }
    let theta = 2.0 * s.atan2(w);
    let mut axis = v / s;
    if w == 0.0 {
        if let Some(first) = axis.iter().copied().find(|c| *c != 0.0) {
            if first < 0.0 {
                axis = -axis;
            }
        }
    }
    let out = axis * theta;
    [out.x, out.y, out.z]
}

pub fn to_axis_angle(rot: &Rotation) -> Result<[f64; 3]> {
    Ok(quaternion_to_axis_angle(&rot.to_unit_quaternion()?))
}

/// Position in metres and orientation, both in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub rotation: Rotation,
}

/// Relative motion between two world-frame poses:
/// `[p1 - p0, axis_angle(R0^-1 R1)]`.
pub fn delta_pose(from: &Pose, to: &Pose) -> Result<[f64; 6]> {
    check_finite("pose position", from.position.iter().chain(&to.position))?;
    let r0 = from.rotation.to_unit_quaternion()?;
    let r1 = to.rotation.to_unit_quaternion()?;
    let rel = quaternion_to_axis_angle(&(r0.inverse() * r1));
    Ok([
        to.position[0] - from.position[0],
        to.position[1] - from.position[1],
        to.position[2] - from.position[2],
        rel[0],
        rel[1],
        rel[2],
    ])
}

/// Inverse of [`delta_pose`]: applies a delta to a pose.
pub fn apply_delta(pose: &Pose, delta: &[f64; 6]) -> Result<Pose> {
    let r0 = pose.rotation.to_unit_quaternion()?;
    let step = UnitQuaternion::from_scaled_axis(Vector3::new(delta[3], delta[4], delta[5]));
    let r1 = r0 * step;
    Ok(Pose {
        position: [
            pose.position[0] + delta[0],
            pose.position[1] + delta[1],
            pose.position[2] + delta[2],
        ],
        rotation: Rotation::Quaternion([r1.w, r1.i, r1.j, r1.k]),
    })
}

/// Rotation matrix from an axis-angle vector.
pub fn axis_angle_matrix(w: &[f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(*w);
    let angle = v.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    *Rotation3::from_axis_angle(&Unit::new_normalize(v), angle).matrix()
}

/// Per-kind inclusive clamp bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBounds(BTreeMap<SlotKind, (f64, f64)>);

impl Default for ClipBounds {
    fn default() -> Self {
        use std::f64::consts::PI;
        let mut m = BTreeMap::new();
        m.insert(SlotKind::ArmJointRad, (-PI, PI));
        m.insert(SlotKind::FingerRad, (-PI, PI));
        m.insert(SlotKind::BaseHeading, (-PI, PI));
        m.insert(SlotKind::EefRotAxisAngle, (-PI, PI));
        m.insert(SlotKind::EefDeltaM, (-0.25, 0.25));
        m.insert(SlotKind::GripperWidthM, (0.0, 0.12));
        m.insert(SlotKind::BaseVel, (-1.5, 1.5));
        Self(m)
    }
}

impl ClipBounds {
    pub fn new(bounds: impl IntoIterator<Item = (SlotKind, (f64, f64))>) -> Result<Self> {
        let mut m = ClipBounds::default().0;
        for (kind, (lo, hi)) in bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(
                    "clip bounds",
                    format!("{kind:?}: need finite min < max, got ({lo}, {hi})"),
                ));
            }
            m.insert(kind, (lo, hi));
        }
        Ok(Self(m))
    }

    pub fn get(&self, kind: SlotKind) -> (f64, f64) {
        self.0[&kind]
    }
}

/// Clamps every slot into its kind's bounds. No rescaling.
pub fn clip_outliers(
    series: &[UnifiedVector],
    bounds: &ClipBounds,
    layout: &SlotLayout,
) -> Result<Vec<UnifiedVector>> {
    let per_slot: Vec<(f64, f64)> = (0..layout.dim())
        .map(|s| bounds.get(layout.kind_of_slot(s).expect("slot within layout")))
        .collect();
    series
        .iter()
        .map(|u| {
            check_len("unified vector", layout.dim(), u.dim())?;
            Ok(UnifiedVector(
                u.0.iter()
                    .zip(&per_slot)
                    .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
                    .collect(),
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSON config

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbodimentEntry {
    pub id: String,
    pub active_slots: Vec<usize>,
    pub control_period_s: f64,
    pub latency_budget_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_model: Option<DelayModelConfig>,
    /// Rest action for the safe-pose fallback, over the active slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safe_pose: Option<Vec<f64>>,
}

/// `{"groups": [...], "embodiments": [...]}`
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub groups: Vec<SlotGroup>,
    #[serde(default)]
    pub embodiments: Vec<EmbodimentEntry>,
}

impl SpaceConfig {
    pub fn build(&self) -> Result<(SlotLayout, Vec<EmbodimentSpec>)> {
        let layout = SlotLayout::new(self.groups.clone())?;
        let mut ids = BTreeSet::new();
        let embodiments = self
            .embodiments
            .iter()
            .map(|e| {
                if !ids.insert(e.id.as_str()) {
                    return Err(Error::invalid(
                        "embodiment",
                        format!("duplicate id `{}`", e.id),
                    ));
                }
                let spec = match &e.delay_model {
                    Some(dm) => EmbodimentSpec::with_delay_model(
                        &e.id,
                        e.active_slots.iter().copied(),
                        e.control_period_s,
                        e.latency_budget_s,
                        dm.build()?,
                        &layout,
                    )?,
                    None => EmbodimentSpec::new(
                        &e.id,
                        e.active_slots.iter().copied(),
                        e.control_period_s,
                        e.latency_budget_s,
                        &layout,
                    )?,
                };
                if let Some(p) = &e.safe_pose {
                    check_len("safe pose", spec.num_active(), p.len())?;
                }
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((layout, embodiments))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
