//! Reference cells, rotation groups, transformed cells `D' = eps*R(D) + h`,
//! and generation of pairwise-disjoint packing families inside an ambient box.
//!
//! Cells are open sets; two cells sharing a face count as disjoint.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Orthonormality / determinant tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-10;
/// Slack used when testing touching faces of open cells.
const CONTACT_TOL: f64 = 1e-12;

/// An axis-aligned open box `prod_i (lo_i, hi_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperbox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Parameter("box bounds must be nonempty and of equal length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Parameter("box bounds must be finite with lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The unit box `(0,1)^n`.
    pub fn unit(n: usize) -> Self {
        Self { lo: vec![0.0; n], hi: vec![1.0; n] }
    }

    /// The centered cube `(-side/2, side/2)^n`.
    pub fn centered_cube(n: usize, side: f64) -> Self {
        Self { lo: vec![-side / 2.0; n], hi: vec![side / 2.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn side(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn min_side(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).fold(f64::INFINITY, f64::min)
    }

    pub fn measure(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Strict interior membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&v, (&a, &b))| v > a && v < b)
    }

    /// Closure membership with a small slack for touching boundaries.
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&a, &b))| v >= a - CONTACT_TOL && v <= b + CONTACT_TOL)
    }

    /// Box shrunk by `margin` on every side. Errors if the result is empty.
    pub fn shrink(&self, margin: f64) -> Result<Hyperbox> {
        let lo: Vec<f64> = self.lo.iter().map(|a| a + margin).collect();
        let hi: Vec<f64> = self.hi.iter().map(|b| b - margin).collect();
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::Domain(format!("margin {margin} exhausts the box")));
        }
        Hyperbox::new(lo, hi)
    }
}

/// Reference cell shapes. Boxes are centered at the origin; the unit cube is
/// `Q = (-1/2, 1/2)^n`.
#[derive(Debug, Clone, PartialEq)]
pub enum CellShape {
    UnitCube,
    Box(Vec<f64>),
    Ball(f64),
}

/// A reference cell `D`: the bounded open set whose scaled, rotated and
/// translated copies form packing families. Its barycenter is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCell {
    shape: CellShape,
    dim: usize,
}

impl ReferenceCell {
    pub fn unit_cube(n: usize) -> Self {
        Self { shape: CellShape::UnitCube, dim: n }
    }

    pub fn boxed(sides: Vec<f64>) -> Result<Self> {
        if sides.is_empty() || sides.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter("box sides must be positive".into()));
        }
        let dim = sides.len();
        Ok(Self { shape: CellShape::Box(sides), dim })
    }

    pub fn ball(n: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Parameter("ball radius must be positive".into()));
        }
        Ok(Self { shape: CellShape::Ball(radius), dim: n })
    }

    pub fn shape(&self) -> &CellShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Side lengths for box shapes, `None` for balls.
    pub fn sides(&self) -> Option<Vec<f64>> {
        match &self.shape {
            CellShape::UnitCube => Some(vec![1.0; self.dim]),
            CellShape::Box(s) => Some(s.clone()),
            CellShape::Ball(_) => None,
        }
    }

    pub fn measure(&self) -> f64 {
        match &self.shape {
            CellShape::UnitCube => 1.0,
            CellShape::Box(s) => s.iter().product(),
            CellShape::Ball(r) => unit_ball_volume(self.dim) * r.powi(self.dim as i32),
        }
    }

    pub fn barycenter(&self) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    pub fn diameter(&self) -> f64 {
        match &self.shape {
            CellShape::UnitCube => (self.dim as f64).sqrt(),
            CellShape::Box(s) => s.iter().map(|v| v * v).sum::<f64>().sqrt(),
            CellShape::Ball(r) => 2.0 * r,
        }
    }

    /// Whether translated copies of the cell tile space (cubes and boxes do).
    pub fn tessellates(&self) -> bool {
        !matches!(self.shape, CellShape::Ball(_))
    }
}

/// Volume of the unit ball in `R^n` via the two-step recursion.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / (n as f64) * unit_ball_volume(n - 2),
    }
}

/// Checks `R^T R = I` and `det R = 1` within [`ROTATION_TOL`].
pub fn is_rotation(r: &DMatrix<f64>) -> bool {
    if r.nrows() != r.ncols() {
        return false;
    }
    let n = r.nrows();
    let gram = r.transpose() * r;
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev <= ROTATION_TOL && (r.determinant() - 1.0).abs() <= ROTATION_TOL
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupKind {
    Trivial,
    Finite,
    SampledSOn { count: usize, seed: u64 },
}

/// A finite set of rotations standing in for a subgroup of `SO(n)`: either
/// the trivial group, an explicit finite list, or a seeded Haar-uniform
/// sample.
#[derive(Debug, Clone)]
pub struct RotationGroup {
    kind: GroupKind,
    elements: Vec<DMatrix<f64>>,
}

impl RotationGroup {
    pub fn trivial(n: usize) -> Self {
        Self { kind: GroupKind::Trivial, elements: vec![DMatrix::identity(n, n)] }
    }

    pub fn finite(elements: Vec<DMatrix<f64>>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Parameter("finite rotation group needs at least one element".into()));
        }
        for r in &elements {
            if !is_rotation(r) {
                return Err(Error::Parameter("group element is not a rotation".into()));
            }
        }
        Ok(Self { kind: GroupKind::Finite, elements })
    }

    /// `count` rotations: the identity followed by `count - 1` Haar-uniform
    /// samples from a seeded generator. Supported for n = 2 (uniform angle)
    /// and n = 3 (uniform quaternions).
    pub fn sampled_so_n(n: usize, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Parameter("sample count must be at least 1".into()));
        }
        if n != 2 && n != 3 {
            return Err(Error::Parameter(format!("SO({n}) sampling supports n = 2 or 3")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut elements = vec![DMatrix::identity(n, n)];
        while elements.len() < count {
            let r = if n == 2 {
                rotation_2d(rng.gen::<f64>() * std::f64::consts::TAU)
            } else {
                random_rotation_3d(&mut rng)
            };
            debug_assert!(is_rotation(&r));
            elements.push(r);
        }
        Ok(Self { kind: GroupKind::SampledSOn { count, seed }, elements })
    }

    pub fn kind(&self) -> &GroupKind {
        &self.kind
    }

    pub fn elements(&self) -> &[DMatrix<f64>] {
        &self.elements
    }

    pub fn dim(&self) -> usize {
        self.elements[0].nrows()
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self.kind, GroupKind::Trivial)
    }
}

pub fn rotation_2d(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Shoemake's uniform quaternion construction.
fn random_rotation_3d(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (std::f64::consts::TAU * u2).sin_cos();
    let (s3, c3) = (std::f64::consts::TAU * u3).sin_cos();
    let (w, x, y, z) = (a * s2, a * c2, b * s3, b * c3);
    DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    )
}

/// A transformed cell `D' = eps * R(D) + h`.
#[derive(Debug, Clone)]
pub struct Cell {
    reference: ReferenceCell,
    epsilon: f64,
    rotation: DMatrix<f64>,
    translation: DVector<f64>,
    axis_aligned: bool,
}

impl Cell {
    pub fn reference(&self) -> &ReferenceCell {
        &self.reference
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &DVector<f64> {
        &self.translation
    }

    pub fn dim(&self) -> usize {
        self.reference.dim()
    }

    pub fn measure(&self) -> f64 {
        self.epsilon.powi(self.dim() as i32) * self.reference.measure()
    }

    /// Barycenter of the transformed cell; for origin-centered references
    /// this is the translation itself.
    pub fn barycenter(&self) -> DVector<f64> {
        &self.rotation * self.reference.barycenter() * self.epsilon + &self.translation
    }

    pub fn diameter(&self) -> f64 {
        self.epsilon * self.reference.diameter()
    }

    /// Pulls a physical point back to reference coordinates,
    /// `xi = R^T (x - h) / eps`.
    pub fn to_reference(&self, x: &[f64]) -> DVector<f64> {
        let d = DVector::from_row_slice(x) - &self.translation;
        self.rotation.transpose() * d / self.epsilon
    }

    /// Maps a reference point to physical coordinates, `x = eps R xi + h`.
    pub fn from_reference(&self, xi: &[f64]) -> DVector<f64> {
        &self.rotation * DVector::from_row_slice(xi) * self.epsilon + &self.translation
    }

    /// Strict interior membership, tested in reference coordinates.
    pub fn contains(&self, x: &[f64]) -> bool {
        let xi = self.to_reference(x);
        match self.reference.shape() {
            CellShape::UnitCube => xi.iter().all(|v| v.abs() < 0.5),
            CellShape::Box(s) => xi.iter().zip(s).all(|(v, side)| v.abs() < side / 2.0),
            CellShape::Ball(r) => xi.norm() < *r,
        }
    }

    /// Corners of the transformed closed cell (box shapes only).
    pub fn corners(&self) -> Option<Vec<DVector<f64>>> {
        let sides = self.reference.sides()?;
        let n = self.dim();
        let mut out = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            let xi: Vec<f64> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { sides[i] / 2.0 } else { -sides[i] / 2.0 })
                .collect();
            out.push(self.from_reference(&xi));
        }
        Some(out)
    }

    /// Whether the closure of the cell lies inside the closure of `ambient`.
    /// For open convex cells inside an open box this is equivalent to
    /// containment of the open cell in the open ambient.
    pub fn inside(&self, ambient: &Hyperbox) -> bool {
        match self.reference.shape() {
            CellShape::Ball(r) => {
                let c = self.barycenter();
                let rad = self.epsilon * r;
                (0..self.dim()).all(|i| {
                    c[i] - rad >= ambient.lo()[i] - CONTACT_TOL
                        && c[i] + rad <= ambient.hi()[i] + CONTACT_TOL
                })
            }
            _ => self
                .corners()
                .expect("box shapes have corners")
                .iter()
                .all(|c| ambient.contains_closed(c.as_slice())),
        }
    }

    /// Axis-aligned bounding box of the closed cell.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        match self.reference.shape() {
            CellShape::Ball(r) => {
                let c = self.barycenter();
                let rad = self.epsilon * r;
                ((0..n).map(|i| c[i] - rad).collect(), (0..n).map(|i| c[i] + rad).collect())
            }
            _ => {
                let corners = self.corners().expect("box shapes have corners");
                let mut lo = vec![f64::INFINITY; n];
                let mut hi = vec![f64::NEG_INFINITY; n];
                for c in corners {
                    for i in 0..n {
                        lo[i] = lo[i].min(c[i]);
                        hi[i] = hi[i].max(c[i]);
                    }
                }
                (lo, hi)
            }
        }
    }

    fn is_axis_aligned(rotation: &DMatrix<f64>) -> bool {
        let n = rotation.nrows();
        (0..n).all(|i| (0..n).all(|j| {
            let target = if i == j { 1.0 } else { 0.0 };
            (rotation[(i, j)] - target).abs() <= ROTATION_TOL
        }))
    }
}

/// Builds a transformed cell, validating the rotation.
pub fn make_cell(
    reference: ReferenceCell,
    epsilon: f64,
    rotation: DMatrix<f64>,
    translation: DVector<f64>,
) -> Result<Cell> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if rotation.nrows() != reference.dim() || translation.len() != reference.dim() {
        return Err(Error::Shape("rotation/translation dimensions must match the cell".into()));
    }
    if !is_rotation(&rotation) {
        return Err(Error::Parameter("rotation is not orthonormal with determinant 1".into()));
    }
    let axis_aligned = Cell::is_axis_aligned(&rotation);
    Ok(Cell { reference, epsilon, rotation, translation, axis_aligned })
}

/// A family of pairwise-disjoint cells, all at the same scale, inside an
/// ambient box. Disjointness is guaranteed by construction for lattice
/// tessellations and enforced incrementally by the greedy filler; use
/// [`check_disjoint`] to verify independently.
#[derive(Debug, Clone)]
pub struct PackingFamily {
    cells: Vec<Cell>,
    ambient: Hyperbox,
    epsilon: f64,
    label: String,
}

impl PackingFamily {
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn ambient(&self) -> &Hyperbox {
        &self.ambient
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_measure(&self) -> f64 {
        self.cells.iter().map(Cell::measure).sum()
    }

    /// Fraction of the ambient measure covered by the family, in `[0, 1]`.
    pub fn coverage(&self) -> f64 {
        self.total_measure() / self.ambient.measure()
    }

    /// Hard cardinality bound `|Omega| / (eps^n |D|)` from disjointness.
    pub fn cardinality_bound(&self) -> f64 {
        if let Some(cell) = self.cells.first() {
            self.ambient.measure() / (self.epsilon.powi(cell.dim() as i32) * cell.reference().measure())
        } else {
            f64::INFINITY
        }
    }
}

/// Lattice tessellation by copies `eps R(D + s∘(k + 1/2)) + lo + offset`
/// anchored at the ambient's minimum corner, clipped to the cells whose
/// closure lies inside the ambient. Coverage tends to 1 as `eps -> 0` for
/// offsets within one lattice period.
pub fn tessellation_family(
    ambient: &Hyperbox,
    reference: &ReferenceCell,
    epsilon: f64,
    offset: &[f64],
    rotation: &DMatrix<f64>,
) -> Result<PackingFamily> {
    let n = reference.dim();
    if ambient.dim() != n || offset.len() != n {
        return Err(Error::Shape("ambient/offset dimensions must match the cell".into()));
    }
    let sides = reference.sides().ok_or_else(|| {
        Error::UnsupportedTessellation("ball reference cells do not tile; use greedy packing".into())
    })?;
    if !(epsilon > 0.0) || epsilon > ambient.min_side() {
        return Err(Error::Parameter(format!(
            "epsilon must lie in (0, {}], got {epsilon}",
            ambient.min_side()
        )));
    }
    if !is_rotation(rotation) {
        return Err(Error::Parameter("rotation is not orthonormal with determinant 1".into()));
    }

    // Anchor: cells are the affine image of the standard tessellation of
    // R^n by D + s∘k, so disjointness is inherited from the lattice.
    let anchor: Vec<f64> =
        ambient.lo().iter().zip(offset).map(|(a, o)| a + o).collect();
    let span = ambient.diameter() / epsilon;
    let mut klim = Vec::with_capacity(n);
    for side in &sides {
        klim.push((span / side).ceil() as i64 + 1);
    }

    let mut cells = Vec::new();
    let mut index = vec![0i64; n];
    let mut k = vec![-klim[0]; n];
    for i in 0..n {
        k[i] = -klim[i];
    }
    // Odometer over k in prod [-klim_i, klim_i].
    'outer: loop {
        let xi: Vec<f64> = (0..n).map(|i| sides[i] * (k[i] as f64 + 0.5)).collect();
        let shifted = rotation * DVector::from_row_slice(&xi) * epsilon;
        let translation =
            DVector::from_iterator(n, (0..n).map(|i| anchor[i] + shifted[i]));
        let cell = Cell {
            reference: reference.clone(),
            epsilon,
            rotation: rotation.clone(),
            translation,
            axis_aligned: Cell::is_axis_aligned(rotation),
        };
        if cell.inside(ambient) {
            cells.push(cell);
        }
        for i in 0..n {
            if k[i] < klim[i] {
                k[i] += 1;
                index[i] += 1;
                continue 'outer;
            }
            k[i] = -klim[i];
            index[i] = 0;
        }
        break;
    }

    // Deterministic cell order regardless of traversal details.
    cells.sort_by(|a, b| {
        a.translation
            .as_slice()
            .partial_cmp(b.translation.as_slice())
            .expect("finite translations")
    });
    Ok(PackingFamily {
        cells,
        ambient: ambient.clone(),
        epsilon,
        label: String::new(),
    })
}

/// Configuration for candidate-family generation.
#[derive(Debug, Clone)]
pub struct PackingOptions {
    /// Offsets per axis swept over one lattice period (default 4).
    pub offsets_per_axis: usize,
    /// Whether to augment each tessellation with greedily placed extra cells.
    pub greedy: bool,
}

impl Default for PackingOptions {
    fn default() -> Self {
        Self { offsets_per_axis: 4, greedy: false }
    }
}

/// Sweeps the offset grid times the rotation elements and returns one
/// candidate family per combination, ordered by offset index then rotation
/// index. Each family is a valid packing; together they bound the packing
/// supremum from below. Returns an empty list when no cell fits.
pub fn packing_candidates(
    ambient: &Hyperbox,
    reference: &ReferenceCell,
    epsilon: f64,
    group: &RotationGroup,
    options: &PackingOptions,
) -> Result<Vec<PackingFamily>> {
    let n = reference.dim();
    if options.offsets_per_axis < 1 {
        return Err(Error::Parameter("offsets_per_axis must be at least 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    if !reference.tessellates() {
        // Balls never tile: greedy packing only, one family per rotation
        // (rotations are immaterial for balls but keep the contract uniform).
        let mut families = Vec::new();
        let family = greedy_ball_family(ambient, reference, epsilon)?;
        if !family.is_empty() {
            families.push(family);
        }
        return Ok(families);
    }
    if epsilon > ambient.min_side() {
        return Ok(Vec::new());
    }

    let sides = reference.sides().expect("tessellating shapes have sides");
    let k = options.offsets_per_axis;
    let mut families = Vec::new();
    let mut offset_idx = vec![0usize; n];
    loop {
        let offset: Vec<f64> = (0..n)
            .map(|i| epsilon * sides[i] * offset_idx[i] as f64 / k as f64)
            .collect();
        let off_label: Vec<String> = offset_idx.iter().map(|v| v.to_string()).collect();
        for (ri, rot) in group.elements().iter().enumerate() {
            let mut family = tessellation_family(ambient, reference, epsilon, &offset, rot)?;
            family.label = format!("off{}_rot{}", off_label.join("-"), ri);
            if options.greedy {
                greedy_fill(&mut family)?;
            }
            if !family.is_empty() {
                families.push(family);
            }
        }
        let mut carry = true;
        for slot in offset_idx.iter_mut() {
            if carry {
                *slot += 1;
                if *slot == k {
                    *slot = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    Ok(families)
}

/// Greedy augmentation: scans a fine grid of axis-aligned candidate cells in
/// the uncovered region and accepts any candidate disjoint from the current
/// family. Tightens the packing near boundaries for non-dyadic scales.
fn greedy_fill(family: &mut PackingFamily) -> Result<()> {
    let reference = match family.cells.first() {
        Some(c) => c.reference().clone(),
        None => return Ok(()),
    };
    let n = reference.dim();
    let eps = family.epsilon;
    let sides = reference.sides().expect("greedy fill applies to box shapes");
    let identity = DMatrix::identity(n, n);
    let mut index = SpatialIndex::new(family.ambient.clone(), eps * reference.diameter());
    for (i, cell) in family.cells.iter().enumerate() {
        index.insert(i, cell);
    }

    let steps: Vec<usize> = (0..n)
        .map(|i| (family.ambient.side(i) / (eps * sides[i] / 4.0)).floor() as usize + 1)
        .collect();
    let mut grid_idx = vec![0usize; n];
    let mut accepted: Vec<Cell> = Vec::new();
    loop {
        let center: Vec<f64> = (0..n)
            .map(|i| {
                family.ambient.lo()[i]
                    + eps * sides[i] / 2.0
                    + grid_idx[i] as f64 * eps * sides[i] / 4.0
            })
            .collect();
        let cell = Cell {
            reference: reference.clone(),
            epsilon: eps,
            rotation: identity.clone(),
            translation: DVector::from_row_slice(&center),
            axis_aligned: true,
        };
        if cell.inside(&family.ambient) {
            let overlapping = index
                .neighbors(&cell)
                .any(|j| {
                    let other = if j < family.cells.len() {
                        &family.cells[j]
                    } else {
                        &accepted[j - family.cells.len()]
                    };
                    !cells_disjoint(&cell, other)
                });
            if !overlapping {
                index.insert(family.cells.len() + accepted.len(), &cell);
                accepted.push(cell);
            }
        }
        let mut carry = true;
        for i in 0..n {
            if carry {
                grid_idx[i] += 1;
                if grid_idx[i] >= steps[i] {
                    grid_idx[i] = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    if !accepted.is_empty() {
        family.label = format!("{}_greedy", family.label);
        family.cells.extend(accepted);
    }
    Ok(())
}

/// Greedy packing of balls on a square lattice (balls cannot tile, so this
/// is the only candidate generator for ball references).
fn greedy_ball_family(
    ambient: &Hyperbox,
    reference: &ReferenceCell,
    epsilon: f64,
) -> Result<PackingFamily> {
    let n = reference.dim();
    let radius = match reference.shape() {
        CellShape::Ball(r) => epsilon * r,
        _ => unreachable!("caller checked the shape"),
    };
    let identity = DMatrix::identity(n, n);
    let step = 2.0 * radius;
    let counts: Vec<usize> =
        (0..n).map(|i| (ambient.side(i) / step).floor() as usize).collect();
    let mut cells = Vec::new();
    if counts.iter().any(|&c| c == 0) {
        return Ok(PackingFamily {
            cells,
            ambient: ambient.clone(),
            epsilon,
            label: "ball_grid".into(),
        });
    }
    let mut idx = vec![0usize; n];
    loop {
        let center: Vec<f64> = (0..n)
            .map(|i| ambient.lo()[i] + radius + idx[i] as f64 * step)
            .collect();
        let cell = Cell {
            reference: reference.clone(),
            epsilon,
            rotation: identity.clone(),
            translation: DVector::from_row_slice(&center),
            axis_aligned: true,
        };
        if cell.inside(ambient) {
            cells.push(cell);
        }
        let mut carry = true;
        for i in 0..n {
            if carry {
                idx[i] += 1;
                if idx[i] >= counts[i] {
                    idx[i] = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    Ok(PackingFamily { cells, ambient: ambient.clone(), epsilon, label: "ball_grid".into() })
}

/// Verifies that all pairs of cells in the family are disjoint as open sets.
/// Exact for axis-aligned boxes and ball pairs; rotated boxes use a
/// separating-axis test (face normals, plus edge cross products for n = 3).
pub fn check_disjoint(family: &PackingFamily) -> bool {
    if family.cells.len() < 2 {
        return true;
    }
    let mut index = SpatialIndex::new(
        family.ambient.clone(),
        family.epsilon * family.cells[0].reference().diameter(),
    );
    for (i, cell) in family.cells.iter().enumerate() {
        if index.neighbors(cell).any(|j| !cells_disjoint(cell, &family.cells[j])) {
            return false;
        }
        index.insert(i, cell);
    }
    true
}

/// Open-cell disjointness of a single pair.
pub fn cells_disjoint(a: &Cell, b: &Cell) -> bool {
    use CellShape::Ball;
    match (a.reference().shape(), b.reference().shape()) {
        (Ball(ra), Ball(rb)) => {
            let d = (a.barycenter() - b.barycenter()).norm();
            d + CONTACT_TOL >= a.epsilon() * ra + b.epsilon() * rb
        }
        (Ball(r), _) => ball_box_disjoint(a, *r, b),
        (_, Ball(r)) => ball_box_disjoint(b, *r, a),
        _ => box_box_disjoint(a, b),
    }
}

fn ball_box_disjoint(ball: &Cell, radius: f64, boxc: &Cell) -> bool {
    // Closest-point distance in the box's reference frame.
    let c = ball.barycenter();
    let xi = boxc.to_reference(c.as_slice());
    let sides = boxc.reference().sides().expect("second cell is a box");
    let mut d2 = 0.0;
    for i in 0..xi.len() {
        let over = xi[i].abs() - sides[i] / 2.0;
        if over > 0.0 {
            d2 += over * over;
        }
    }
    d2.sqrt() * boxc.epsilon() + CONTACT_TOL >= ball.epsilon() * radius
}

fn box_box_disjoint(a: &Cell, b: &Cell) -> bool {
    if a.axis_aligned && b.axis_aligned {
        let (alo, ahi) = a.bounding_box();
        let (blo, bhi) = b.bounding_box();
        return (0..alo.len())
            .any(|i| ahi[i] <= blo[i] + CONTACT_TOL || bhi[i] <= alo[i] + CONTACT_TOL);
    }
    let n = a.dim();
    let mut axes: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        axes.push(a.rotation().column(i).into_owned());
        axes.push(b.rotation().column(i).into_owned());
    }
    if n == 3 {
        for i in 0..3 {
            for j in 0..3 {
                let u: DVector<f64> = a.rotation().column(i).into_owned();
                let v: DVector<f64> = b.rotation().column(j).into_owned();
                let cross = DVector::from_row_slice(&[
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ]);
                if cross.norm() > 1e-9 {
                    axes.push(cross.normalize());
                }
            }
        }
    }
    let sa = a.reference().sides().expect("box shape");
    let sb = b.reference().sides().expect("box shape");
    let delta = b.barycenter() - a.barycenter();
    for axis in &axes {
        let mut ext_a = 0.0;
        let mut ext_b = 0.0;
        for i in 0..n {
            let ca: DVector<f64> = a.rotation().column(i).into_owned();
            let cb: DVector<f64> = b.rotation().column(i).into_owned();
            ext_a += (axis.dot(&ca)).abs() * a.epsilon() * sa[i] / 2.0;
            ext_b += (axis.dot(&cb)).abs() * b.epsilon() * sb[i] / 2.0;
        }
        if delta.dot(axis).abs() + CONTACT_TOL >= ext_a + ext_b {
            return true;
        }
    }
    false
}

/// Uniform-grid index over cell bounding boxes; buckets are sized by the
/// largest cell diameter so overlap candidates sit in adjacent buckets.
struct SpatialIndex {
    ambient: Hyperbox,
    bucket: f64,
    counts: Vec<usize>,
    slots: std::collections::HashMap<Vec<i64>, Vec<usize>>,
}

impl SpatialIndex {
    fn new(ambient: Hyperbox, cell_diameter: f64) -> Self {
        let bucket = cell_diameter.max(1e-12);
        let counts = (0..ambient.dim())
            .map(|i| (ambient.side(i) / bucket).ceil() as usize + 1)
            .collect();
        Self { ambient, bucket, counts, slots: std::collections::HashMap::new() }
    }

    fn key_of(&self, x: &[f64]) -> Vec<i64> {
        (0..x.len()).map(|i| ((x[i] - self.ambient.lo()[i]) / self.bucket).floor() as i64).collect()
    }

    fn insert(&mut self, id: usize, cell: &Cell) {
        let key = self.key_of(cell.barycenter().as_slice());
        self.slots.entry(key).or_default().push(id);
    }

    fn neighbors<'a>(&'a self, cell: &Cell) -> impl Iterator<Item = usize> + 'a {
        let n = self.ambient.dim();
        let key = self.key_of(cell.barycenter().as_slice());
        let mut out: Vec<usize> = Vec::new();
        let mut delta = vec![-1i64; n];
        loop {
            let neighbor: Vec<i64> = (0..n).map(|i| key[i] + delta[i]).collect();
            if let Some(ids) = self.slots.get(&neighbor) {
                out.extend_from_slice(ids);
            }
            let mut carry = true;
            for d in delta.iter_mut() {
                if carry {
                    *d += 1;
                    if *d > 1 {
                        *d = -1;
                    } else {
                        carry = false;
                    }
                }
            }
            if carry {
                break;
            }
        }
        let _ = &self.counts;
        out.into_iter()
    }
}
