//! Sparse voxel tensors, coordinate indexing and convolution rulebooks.
//!
//! A rulebook lists, for every kernel offset, the `(input row, output row)`
//! pairs that contribute a term to a sparse convolution. All three
//! convolution kinds (submanifold, stride-2 downsampling and its inverse) run
//! off the same structure; only the construction differs.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::real::Real;

/// Integer voxel position. Ordered lexicographically by `(z, y, x)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn checked_add(self, o: VoxelCoord) -> Option<VoxelCoord> {
        Some(VoxelCoord {
            x: self.x.checked_add(o.x)?,
            y: self.y.checked_add(o.y)?,
            z: self.z.checked_add(o.z)?,
        })
    }

    /// Componentwise floor division by 2 (rounds toward negative infinity).
    pub fn half_floor(self) -> VoxelCoord {
        VoxelCoord { x: self.x.div_euclid(2), y: self.y.div_euclid(2), z: self.z.div_euclid(2) }
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl Ord for VoxelCoord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.z, self.y, self.x).cmp(&(other.z, other.y, other.x))
    }
}

impl PartialOrd for VoxelCoord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for VoxelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from([x, y, z]: [i32; 3]) -> Self {
        Self { x, y, z }
    }
}

/// Active voxel coordinates with one feature row each, plus optional labels.
///
/// Features are stored row-major (`N×C`). The coordinate list is shared
/// between tensors produced by support-preserving layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    coords: Arc<Vec<VoxelCoord>>,
    features: Vec<T>,
    channels: usize,
    labels: Option<Vec<u16>>,
}

impl<T: Real> SparseTensor<T> {
    /// Validating constructor: distinct coordinates and `N×C` features.
    pub fn new(coords: Vec<VoxelCoord>, features: Vec<T>, channels: usize) -> Result<Self> {
        let mut seen = FxHashSet::default();
        seen.reserve(coords.len());
        for c in &coords {
            if !seen.insert(*c) {
                return Err(Error::DuplicateCoordinate(*c));
            }
        }
        Self::from_shared(Arc::new(coords), features, channels)
    }

    /// Constructor for a coordinate list that is already known to be distinct.
    pub fn from_shared(coords: Arc<Vec<VoxelCoord>>, features: Vec<T>, channels: usize) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} rows x {channels} channels needs {} features, got {}",
                coords.len(),
                coords.len() * channels,
                features.len()
            )));
        }
        Ok(Self { coords, features, channels, labels: None })
    }

    pub fn empty(channels: usize) -> Self {
        Self { coords: Arc::new(Vec::new()), features: Vec::new(), channels, labels: None }
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Same support, new features.
    pub fn with_features(&self, features: Vec<T>, channels: usize) -> Result<Self> {
        let mut out = Self::from_shared(self.coords.clone(), features, channels)?;
        out.labels = self.labels.clone();
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn shared_coords(&self) -> &Arc<Vec<VoxelCoord>> {
        &self.coords
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn into_features(self) -> Vec<T> {
        self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Checks every label against the class count.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(&label) = labels.iter().find(|&&l| usize::from(l) >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        Ok(())
    }

    /// Reorders rows so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        let coords = perm.iter().map(|&p| self.coords[p]).collect();
        let features = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        let labels = self.labels.as_ref().map(|l| perm.iter().map(|&p| l[p]).collect());
        Self { coords: Arc::new(coords), features, channels: self.channels, labels }
    }

    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            coords: self.coords.clone(),
            features: self.features.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            channels: self.channels,
            labels: self.labels.clone(),
        }
    }
}

/// Coordinate → row lookup table.
#[derive(Debug, Clone, Default)]
pub struct CoordIndex {
    map: FxHashMap<VoxelCoord, u32>,
}

impl CoordIndex {
    pub fn get(&self, c: &VoxelCoord) -> Option<usize> {
        self.map.get(c).map(|&r| r as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_coord_index(coords: &[VoxelCoord]) -> Result<CoordIndex> {
    let mut map = FxHashMap::default();
    map.reserve(coords.len());
    for (row, c) in coords.iter().enumerate() {
        if map.insert(*c, row as u32).is_some() {
            return Err(Error::DuplicateCoordinate(*c));
        }
    }
    Ok(CoordIndex { map })
}

/// Kernel geometry. Offsets are ordered lexicographically by `(δz, δy, δx)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub size: [usize; 3],
    pub stride: usize,
    offsets: Vec<VoxelCoord>,
}

impl KernelSpec {
    /// Centered odd kernel with stride 1, e.g. `submanifold(3)` → 27 offsets in `[-1, 1]³`.
    pub fn submanifold(size: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidKernel(format!("submanifold kernel size {size} must be odd")));
        }
        let r = (size / 2) as i32;
        Ok(Self { size: [size; 3], stride: 1, offsets: offsets_in(-r..=r) })
    }

    /// The 2³ stride-2 kernel of downsampling and its inverse; offsets in `{0, 1}³`.
    pub fn downsample() -> Self {
        Self { size: [2; 3], stride: 2, offsets: offsets_in(0..=1) }
    }

    pub fn offsets(&self) -> &[VoxelCoord] {
        &self.offsets
    }

    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    fn downsample_slot(delta: VoxelCoord) -> usize {
        (delta.z * 4 + delta.y * 2 + delta.x) as usize
    }
}

fn offsets_in(range: std::ops::RangeInclusive<i32>) -> Vec<VoxelCoord> {
    let mut out = Vec::new();
    for z in range.clone() {
        for y in range.clone() {
            for x in range.clone() {
                out.push(VoxelCoord { x, y, z });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RulebookKind {
    Submanifold,
    /// Fine input rows → coarse output rows.
    Downsample,
    /// Coarse input rows → fine output rows.
    Upsample,
}

/// Per-offset `(in_row, out_row)` pairs of one sparse convolution.
///
/// Each offset's list is sorted by `(out_row, in_row)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rulebook {
    kind: RulebookKind,
    kernel: KernelSpec,
    pairs: Vec<Vec<(u32, u32)>>,
    in_coords: Arc<Vec<VoxelCoord>>,
    out_coords: Arc<Vec<VoxelCoord>>,
}

impl Rulebook {
    pub fn kind(&self) -> RulebookKind {
        self.kind
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// Pairs for the offset at `slot` in kernel order.
    pub fn pairs(&self, slot: usize) -> &[(u32, u32)] {
        &self.pairs[slot]
    }

    pub fn all_pairs(&self) -> &[Vec<(u32, u32)>] {
        &self.pairs
    }

    pub fn in_count(&self) -> usize {
        self.in_coords.len()
    }

    pub fn out_count(&self) -> usize {
        self.out_coords.len()
    }

    /// Support the input rows index into.
    pub fn in_coords(&self) -> &Arc<Vec<VoxelCoord>> {
        &self.in_coords
    }

    /// Support of the convolution output.
    pub fn out_coords(&self) -> &Arc<Vec<VoxelCoord>> {
        &self.out_coords
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Number of rows on the fine side of a down/upsampling rulebook.
    fn fine_coords(&self) -> &[VoxelCoord] {
        match self.kind {
            RulebookKind::Submanifold | RulebookKind::Downsample => &self.in_coords,
            RulebookKind::Upsample => &self.out_coords,
        }
    }
}

/// Submanifold rulebook: outputs live on exactly the input support.
pub fn build_rulebook_subm(coords: &[VoxelCoord], index: &CoordIndex, kernel: &KernelSpec) -> Result<Rulebook> {
    if kernel.stride != 1 || kernel.size.iter().any(|s| s % 2 == 0) {
        return Err(Error::InvalidKernel(format!(
            "submanifold rulebook needs stride 1 and odd sizes, got stride {} size {:?}",
            kernel.stride, kernel.size
        )));
    }
    if index.len() != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "index holds {} coordinates, support has {}",
            index.len(),
            coords.len()
        )));
    }
    let mut pairs = vec![Vec::new(); kernel.volume()];
    for (out_row, &c) in coords.iter().enumerate() {
        for (slot, &delta) in kernel.offsets.iter().enumerate() {
            if let Some(in_row) = c.checked_add(delta).and_then(|n| index.get(&n)) {
                pairs[slot].push((in_row as u32, out_row as u32));
            }
        }
    }
    let support = Arc::new(coords.to_vec());
    Ok(Rulebook {
        kind: RulebookKind::Submanifold,
        kernel: kernel.clone(),
        pairs,
        in_coords: support.clone(),
        out_coords: support,
    })
}

/// Stride-2 downsampling: returns the sorted coarse support and the fine→coarse rulebook.
pub fn build_downsample(coords: &[VoxelCoord], kernel: &KernelSpec) -> Result<(Vec<VoxelCoord>, Rulebook)> {
    if kernel.stride != 2 || kernel.size != [2; 3] {
        return Err(Error::InvalidKernel(format!(
            "downsampling needs a 2^3 stride-2 kernel, got stride {} size {:?}",
            kernel.stride, kernel.size
        )));
    }
    let mut coarse: Vec<VoxelCoord> = coords.iter().map(|c| c.half_floor()).collect();
    coarse.sort_unstable();
    coarse.dedup();
    let coarse_index = build_coord_index(&coarse)?;

    let mut pairs = vec![Vec::new(); kernel.volume()];
    for (in_row, &c) in coords.iter().enumerate() {
        let parent = c.half_floor();
        let delta = VoxelCoord { x: c.x - 2 * parent.x, y: c.y - 2 * parent.y, z: c.z - 2 * parent.z };
        let out_row = coarse_index.get(&parent).expect("parent is in the coarse support");
        pairs[KernelSpec::downsample_slot(delta)].push((in_row as u32, out_row as u32));
    }
    for list in &mut pairs {
        list.sort_unstable_by_key(|&(i, o)| (o, i));
    }
    let rb = Rulebook {
        kind: RulebookKind::Downsample,
        kernel: kernel.clone(),
        pairs,
        in_coords: Arc::new(coords.to_vec()),
        out_coords: Arc::new(coarse.clone()),
    };
    Ok((coarse, rb))
}

/// Swaps input and output roles, so a downsampling rulebook drives the
/// inverse convolution back onto the stored fine support.
pub fn transpose_rulebook(rb: &Rulebook, fine_coords: &[VoxelCoord]) -> Result<Rulebook> {
    if fine_coords != rb.fine_coords() {
        return Err(Error::ShapeMismatch(format!(
            "rulebook fine side has {} rows, {} fine coordinates given (or they differ)",
            rb.fine_coords().len(),
            fine_coords.len()
        )));
    }
    let pairs = rb
        .pairs
        .iter()
        .map(|list| {
            let mut swapped: Vec<(u32, u32)> = list.iter().map(|&(i, o)| (o, i)).collect();
            swapped.sort_unstable_by_key(|&(i, o)| (o, i));
            swapped
        })
        .collect();
    let kind = match rb.kind {
        RulebookKind::Submanifold => RulebookKind::Submanifold,
        RulebookKind::Downsample => RulebookKind::Upsample,
        RulebookKind::Upsample => RulebookKind::Downsample,
    };
    Ok(Rulebook {
        kind,
        kernel: rb.kernel.clone(),
        pairs,
        in_coords: rb.out_coords.clone(),
        out_coords: rb.in_coords.clone(),
    })
}
