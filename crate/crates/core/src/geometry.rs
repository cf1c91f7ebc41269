//! Blocked-region polyhedra for building shadows.
//!
//! For a ground user and an axis-aligned building, the set of UAV positions
//! whose link to the user is blocked forms a polyhedron bounded by planes
//! through the user and the silhouette edges of the visible flank faces:
//! one plane per visible top edge plus the two planes through the outermost
//! vertical silhouette edges. All boundary planes pass through the user.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("user lies inside the building footprint")]
    UserInsideFootprint,
    #[error("user lies on a footprint edge (tangent silhouette)")]
    UserOnFootprintEdge,
    #[error("user must be on the ground plane (z = 0), got z = {0}")]
    UserNotOnGround(f64),
}

/// Axis-aligned building box standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub min_corner: Vector3<f64>,
    pub size: Vector3<f64>,
}

impl Building {
    pub fn new(min_corner: Vector3<f64>, size: Vector3<f64>) -> Self {
        assert!(
            size.x > 0.0 && size.y > 0.0 && size.z > 0.0,
            "building size components must be positive"
        );
        Self { min_corner, size }
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.min_corner + self.size
    }

    pub fn height(&self) -> f64 {
        self.min_corner.z + self.size.z
    }

    /// True if the horizontal projection of `p` lies in the closed footprint.
    pub fn footprint_contains(&self, p: &Vector3<f64>) -> bool {
        let max = self.max_corner();
        p.x >= self.min_corner.x && p.x <= max.x && p.y >= self.min_corner.y && p.y <= max.y
    }

    fn footprint_contains_strict(&self, p: &Vector3<f64>) -> bool {
        let max = self.max_corner();
        p.x > self.min_corner.x && p.x < max.x && p.y > self.min_corner.y && p.y < max.y
    }
}

/// Boundary plane of a blocked region: the shadow side satisfies a·x - b <= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    /// Outward unit normal.
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl HalfSpace {
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// Shadow polyhedron of one user-building pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedRegion {
    pub halfspaces: Vec<HalfSpace>,
    pub user_index: usize,
    pub building_index: usize,
}

/// Construct the shadow polyhedron cast by `building` for a ground user.
///
/// The user must be strictly outside the footprint. One or two flank faces
/// are visible; the region has three halfspaces for one visible face and
/// four for two (the inner top-edge/side planes of adjacent faces merge).
pub fn build_blocked_region(
    user: &Vector3<f64>,
    building: &Building,
    user_index: usize,
    building_index: usize,
) -> Result<BlockedRegion, GeometryError> {
    if user.z.abs() > 1e-9 {
        return Err(GeometryError::UserNotOnGround(user.z));
    }
    if building.footprint_contains_strict(user) {
        return Err(GeometryError::UserInsideFootprint);
    }
    if building.footprint_contains(user) {
        return Err(GeometryError::UserOnFootprintEdge);
    }

    let lo = building.min_corner;
    let hi = building.max_corner();
    let h = building.height();

    // Flank faces in fixed order: west (-x), east (+x), south (-y), north (+y).
    // A face is visible iff the user is strictly on its outward side.
    struct Face {
        // Footprint corners of the face, counterclockwise seen from outside.
        c0: (f64, f64),
        c1: (f64, f64),
        visible: bool,
    }
    let faces = [
        Face { c0: (lo.x, hi.y), c1: (lo.x, lo.y), visible: user.x < lo.x },
        Face { c0: (hi.x, lo.y), c1: (hi.x, hi.y), visible: user.x > hi.x },
        Face { c0: (lo.x, lo.y), c1: (hi.x, lo.y), visible: user.y < lo.y },
        Face { c0: (hi.x, hi.y), c1: (lo.x, hi.y), visible: user.y > hi.y },
    ];
    let visible: Vec<&Face> = faces.iter().filter(|f| f.visible).collect();
    debug_assert!(!visible.is_empty() && visible.len() <= 2);

    // Reference point deep inside the shadow: far behind the building along
    // the ray from the user through the footprint center, on the ground.
    let center = Vector3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, 0.0);
    let inside_ref = user + (center - user) * 100.0;

    let plane_through_user = |p: Vector3<f64>, q: Vector3<f64>| -> HalfSpace {
        let mut normal = (p - user).cross(&(q - user)).normalize();
        let mut offset = normal.dot(user);
        if normal.dot(&inside_ref) - offset > 0.0 {
            normal = -normal;
            offset = -offset;
        }
        HalfSpace { normal, offset }
    };

    let mut halfspaces = Vec::with_capacity(4);
    // Top-edge planes, one per visible face.
    for f in &visible {
        let p = Vector3::new(f.c0.0, f.c0.1, h);
        let q = Vector3::new(f.c1.0, f.c1.1, h);
        halfspaces.push(plane_through_user(p, q));
    }
    // Side planes through the outermost vertical silhouette edges. With one
    // visible face those are its own vertical edges; with two adjacent faces
    // the shared corner is interior and the far ends form the silhouette.
    let outer_corners: [(f64, f64); 2] = if visible.len() == 1 {
        [visible[0].c0, visible[0].c1]
    } else {
        let (a, b) = (visible[0], visible[1]);
        let shared = |c: (f64, f64)| c == b.c0 || c == b.c1;
        let first = if shared(a.c0) { a.c1 } else { a.c0 };
        let shared_b = |c: (f64, f64)| c == a.c0 || c == a.c1;
        let second = if shared_b(b.c0) { b.c1 } else { b.c0 };
        [first, second]
    };
    for &(cx, cy) in &outer_corners {
        let p = Vector3::new(cx, cy, 0.0);
        let q = Vector3::new(cx, cy, h);
        halfspaces.push(plane_through_user(p, q));
    }

    Ok(BlockedRegion { halfspaces, user_index, building_index })
}

/// Signed clearance of `x` w.r.t. one region: max over halfspaces of a·x - b.
/// Negative iff strictly inside the shadow. Ties broken by lowest index.
pub fn signed_clearance(region: &BlockedRegion, x: &Vector3<f64>) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, hs) in region.halfspaces.iter().enumerate() {
        let d = hs.signed_distance(x);
        if d > best {
            best = d;
            best_idx = i;
        }
    }
    (best, best_idx)
}

/// Minimum clearance over one user's regions. `None` means no buildings:
/// unblocked everywhere. Ties broken by lowest building index in list order.
pub fn min_clearance(regions: &[BlockedRegion], x: &Vector3<f64>) -> Option<MinClearance> {
    let mut best: Option<MinClearance> = None;
    for (i, region) in regions.iter().enumerate() {
        let (value, halfspace_index) = signed_clearance(region, x);
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(MinClearance { value, region_index: i, halfspace_index });
        }
    }
    best
}

/// Result of [`min_clearance`]: the active region/halfspace pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinClearance {
    pub value: f64,
    /// Index into the region list (building order).
    pub region_index: usize,
    pub halfspace_index: usize,
}

/// Exact LoS ground truth: true iff the open segment (u, x) intersects no
/// building interior. Slab-method segment-AABB test.
pub fn los_oracle(u: &Vector3<f64>, x: &Vector3<f64>, buildings: &[Building]) -> bool {
    assert!(u != x, "los_oracle requires distinct endpoints");
    let dir = x - u;
    for b in buildings {
        let lo = b.min_corner;
        let hi = b.max_corner();
        let mut t_min = 0.0_f64;
        let mut t_max = 1.0_f64;
        let mut miss = false;
        for axis in 0..3 {
            let (o, d) = (u[axis], dir[axis]);
            let (l, h) = (lo[axis], hi[axis]);
            if d == 0.0 {
                if o <= l || o >= h {
                    miss = true;
                    break;
                }
            } else {
                let inv = 1.0 / d;
                let (t0, t1) = if inv >= 0.0 { ((l - o) * inv, (h - o) * inv) } else { ((h - o) * inv, (l - o) * inv) };
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min >= t_max {
                    miss = true;
                    break;
                }
            }
        }
        if !miss && t_min < t_max {
            return false;
        }
    }
    true
}

/// Build all blocked regions for one user against a building list, skipping
/// degenerate pairs is not allowed: any construction error propagates.
pub fn regions_for_user(
    user: &Vector3<f64>,
    user_index: usize,
    buildings: &[Building],
) -> Result<Vec<BlockedRegion>, GeometryError> {
    buildings
        .iter()
        .enumerate()
        .map(|(q, b)| build_blocked_region(user, b, user_index, q))
        .collect()
}
