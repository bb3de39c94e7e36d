//! Sparse voxel hash grid holding the local point-cloud map.
//!
//! Voxels are grouped into blocks of 4×4×4. Each hash entry is one block
//! with a 64-bit occupancy mask and its occupied voxel buckets, so a search
//! touches a handful of hash entries and never probes empty voxels. Keys are
//! exact integer coordinates; collisions never merge voxels.
//!
//! Nearest-neighbor search is exact: it visits the 3×3×3 voxels around the
//! query, then every occupied voxel whose box could still hold a closer
//! point.

use std::collections::HashMap;
use std::hash::{BuildHasher, Hash, Hasher};

use nalgebra::Vector3;

use crate::point::LabeledPoint;

/// Integer voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelKey(pub [i32; 3]);

impl Hash for VoxelKey {
    #[inline]
    fn hash<H: Hasher>(&self, state: &mut H) {
        let [x, y, z] = self.0;
        let h = (x as i64 as u64).wrapping_mul(73_856_093)
            ^ (y as i64 as u64).wrapping_mul(19_349_669)
            ^ (z as i64 as u64).wrapping_mul(83_492_791);
        state.write_u64(h);
    }
}

/// Hasher for [`VoxelKey`]: the spatial hash spread over all 64 bits.
#[derive(Debug, Default, Clone, Copy)]
pub struct VoxelKeyHasher;

#[derive(Debug, Default)]
pub struct VoxelHasherState(u64);

impl Hasher for VoxelHasherState {
    #[inline]
    fn finish(&self) -> u64 {
        self.0.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29)
    }

    #[inline]
    fn write_u64(&mut self, v: u64) {
        self.0 = self.0.rotate_left(17) ^ v;
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = self.0.rotate_left(8) ^ *b as u64;
        }
    }
}

impl BuildHasher for VoxelKeyHasher {
    type Hasher = VoxelHasherState;

    #[inline]
    fn build_hasher(&self) -> VoxelHasherState {
        VoxelHasherState(0)
    }
}

#[inline]
pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> VoxelKey {
    VoxelKey([
        (p.x / voxel).floor() as i32,
        (p.y / voxel).floor() as i32,
        (p.z / voxel).floor() as i32,
    ])
}

/// The 26 neighbors of a voxel: faces, then edges, then corners.
const SHELL_ONE: [[i32; 3]; 26] = {
    let mut out = [[0i32; 3]; 26];
    let mut n = 0;
    let mut order = 1;
    while order <= 3 {
        let mut x = -1;
        while x <= 1 {
            let mut y = -1;
            while y <= 1 {
                let mut z = -1;
                while z <= 1 {
                    let nz = (x != 0) as i32 + (y != 0) as i32 + (z != 0) as i32;
                    if nz == order {
                        out[n] = [x, y, z];
                        n += 1;
                    }
                    z += 1;
                }
                y += 1;
            }
            x += 1;
        }
        order += 1;
    }
    out
};

const BLOCK: i32 = 4;

/// Largest block neighborhood looked up block by block; wider searches scan
/// every stored block instead.
const NEIGHBORHOOD: i64 = 64;

#[inline]
fn block_of(key: &VoxelKey) -> VoxelKey {
    let [x, y, z] = key.0;
    VoxelKey([x.div_euclid(BLOCK), y.div_euclid(BLOCK), z.div_euclid(BLOCK)])
}

/// Index of a voxel inside its block, `0..64`.
#[inline]
fn block_index(key: &VoxelKey) -> u32 {
    let [x, y, z] = key.0;
    ((x.rem_euclid(BLOCK) * BLOCK + y.rem_euclid(BLOCK)) * BLOCK + z.rem_euclid(BLOCK)) as u32
}

/// Occupied voxels of one block, stored contiguously. The `i`-th set bit
/// of `mask` owns `points[starts[i]..starts[i + 1]]`.
#[derive(Debug, Clone)]
struct Block {
    mask: u64,
    starts: Vec<u32>,
    points: Vec<LabeledPoint>,
}

impl Default for Block {
    fn default() -> Self {
        Block { mask: 0, starts: vec![0], points: Vec::new() }
    }
}

impl Block {
    #[inline]
    fn rank(&self, index: u32) -> usize {
        (self.mask & ((1u64 << index) - 1)).count_ones() as usize
    }

    #[inline]
    fn slot(&self, rank: usize) -> &[LabeledPoint] {
        &self.points[self.starts[rank] as usize..self.starts[rank + 1] as usize]
    }

    #[inline]
    fn cell(&self, index: u32) -> Option<&[LabeledPoint]> {
        if self.mask & (1u64 << index) == 0 {
            return None;
        }
        Some(self.slot(self.rank(index)))
    }

    /// Adds a point to a voxel unless it is full or crowded. Returns
    /// whether the voxel was created and whether the point was stored.
    fn push(&mut self, index: u32, p: &LabeledPoint, max_points: usize, min_sep_sq: f64) -> (bool, bool) {
        let rank = self.rank(index);
        let created = self.mask & (1u64 << index) == 0;
        if created {
            self.mask |= 1u64 << index;
            let at = self.starts[rank];
            self.starts.insert(rank, at);
        }
        let cell = self.slot(rank);
        if cell.len() >= max_points
            || cell.iter().any(|q| (q.position - p.position).norm_squared() < min_sep_sq)
        {
            return (created, false);
        }
        let end = self.starts[rank + 1] as usize;
        self.points.insert(end, *p);
        for s in &mut self.starts[rank + 1..] {
            *s += 1;
        }
        (created, true)
    }

    fn cells(&self) -> impl Iterator<Item = (u32, &[LabeledPoint])> + '_ {
        set_bits(self.mask).enumerate().map(move |(rank, bit)| (bit, self.slot(rank)))
    }

    /// Voxel keys and buckets of this block, `origin` in block coordinates.
    fn voxels<'a>(&'a self, origin: &VoxelKey) -> impl Iterator<Item = (VoxelKey, &'a [LabeledPoint])> + 'a {
        let base = origin.0.map(|c| c * BLOCK);
        self.cells().map(move |(bit, cell)| (voxel_in_block(base, bit), cell))
    }
}

#[inline]
fn voxel_in_block(base: [i32; 3], bit: u32) -> VoxelKey {
    let bit = bit as i32;
    VoxelKey([base[0] + bit / (BLOCK * BLOCK), base[1] + (bit / BLOCK) % BLOCK, base[2] + bit % BLOCK])
}

fn set_bits(mut mask: u64) -> impl Iterator<Item = u32> {
    std::iter::from_fn(move || {
        if mask == 0 {
            return None;
        }
        let bit = mask.trailing_zeros();
        mask &= mask - 1;
        Some(bit)
    })
}

#[derive(Debug, Clone)]
pub struct VoxelHashMap {
    voxel: f64,
    max_points: usize,
    min_separation_sq: f64,
    max_distance: f64,
    blocks: HashMap<VoxelKey, Block, VoxelKeyHasher>,
    voxel_count: usize,
    point_count: usize,
}

impl VoxelHashMap {
    /// `voxel` is the cell side, `max_points` the bucket capacity and
    /// `max_distance` the trim radius. Points closer than `voxel / 10` to a
    /// point already in the bucket are not stored.
    pub fn new(voxel: f64, max_points: usize, max_distance: f64) -> Self {
        assert!(voxel > 0.0 && max_points > 0 && max_distance > 0.0);
        let sep = voxel / 10.0;
        VoxelHashMap {
            voxel,
            max_points,
            min_separation_sq: sep * sep,
            max_distance,
            blocks: HashMap::with_hasher(VoxelKeyHasher),
            voxel_count: 0,
            point_count: 0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel
    }

    pub fn max_points_per_voxel(&self) -> usize {
        self.max_points
    }

    /// Stored point count.
    pub fn len(&self) -> usize {
        self.point_count
    }

    pub fn is_empty(&self) -> bool {
        self.point_count == 0
    }

    /// Occupied voxel count.
    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    pub fn clear(&mut self) {
        self.blocks.clear();
        self.voxel_count = 0;
        self.point_count = 0;
    }

    pub fn bucket(&self, key: &VoxelKey) -> Option<&[LabeledPoint]> {
        self.blocks.get(&block_of(key))?.cell(block_index(key))
    }

    pub fn voxels(&self) -> impl Iterator<Item = (VoxelKey, &[LabeledPoint])> {
        self.blocks.iter().flat_map(|(origin, block)| block.voxels(origin))
    }

    pub fn points(&self) -> impl Iterator<Item = &LabeledPoint> {
        self.blocks.values().flat_map(|b| b.points.iter())
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vector3<f64> {
        let [x, y, z] = key.0;
        Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel
    }

    /// Adds world-frame points, respecting bucket capacity and the minimum
    /// separation.
    pub fn insert<'a>(&mut self, points: impl IntoIterator<Item = &'a LabeledPoint>) {
        for p in points {
            let key = voxel_key(&p.position, self.voxel);
            let block = self.blocks.entry(block_of(&key)).or_default();
            let (created, stored) = block.push(block_index(&key), p, self.max_points, self.min_separation_sq);
            self.voxel_count += created as usize;
            self.point_count += stored as usize;
        }
    }

    /// Drops every voxel whose center is farther than the trim radius from
    /// `center`.
    pub fn trim(&mut self, center: &Vector3<f64>) {
        let voxel = self.voxel;
        let max_sq = self.max_distance * self.max_distance;
        let (mut points, mut voxels) = (0, 0);
        self.blocks.retain(|origin, block| {
            let base = origin.0.map(|c| c * BLOCK);
            let mut kept = Block::default();
            for (bit, cell) in block.cells() {
                let [x, y, z] = voxel_in_block(base, bit).0;
                let c = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * voxel;
                if (c - center).norm_squared() <= max_sq {
                    kept.mask |= 1u64 << bit;
                    kept.points.extend_from_slice(cell);
                    kept.starts.push(kept.points.len() as u32);
                } else {
                    points += cell.len();
                    voxels += 1;
                }
            }
            if kept.mask != block.mask {
                *block = kept;
            }
            block.mask != 0
        });
        self.point_count -= points;
        self.voxel_count -= voxels;
    }

    /// Closest stored point within `max_dist` of `query`, with its distance.
    pub fn nearest_neighbor(
        &self,
        query: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<(&LabeledPoint, f64)> {
        self.nearest_neighbor_sq(query, max_dist)
            .map(|(p, d2)| (p, d2.sqrt()))
    }

    /// Like [`nearest_neighbor`](Self::nearest_neighbor) but returns the
    /// squared distance.
    pub fn nearest_neighbor_sq(
        &self,
        query: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<(&LabeledPoint, f64)> {
        if self.blocks.is_empty() || !(max_dist > 0.0) {
            return None;
        }
        let v = self.voxel;
        let center = voxel_key(query, v);
        let mut search = Search {
            voxel: v,
            query,
            center,
            max_sq: max_dist * max_dist,
            best: None,
            best_sq: f64::INFINITY,
        };

        // Per axis and offset -1, 0, 1: squared gap to that voxel slab, block
        // (0 or 1 past the lowest core block) and coordinate inside the block.
        let c = center.0;
        let mut gap = [[0.0; 3]; 3];
        let mut blk = [[0usize; 3]; 3];
        let mut local = [[0i32; 3]; 3];
        for k in 0..3 {
            let base = c[k] as f64 * v;
            let below = query[k] - base;
            let above = base + v - query[k];
            gap[k] = [below * below, 0.0, above * above];
            let first = (c[k] - 1).div_euclid(BLOCK);
            for o in 0..3 {
                let coord = c[k] - 1 + o as i32;
                blk[k][o] = (coord.div_euclid(BLOCK) - first) as usize;
                local[k][o] = coord.rem_euclid(BLOCK);
            }
        }
        let first = [
            (c[0] - 1).div_euclid(BLOCK),
            (c[1] - 1).div_euclid(BLOCK),
            (c[2] - 1).div_euclid(BLOCK),
        ];
        let mut core: [Option<Option<&Block>>; 8] = [None; 8];
        for o in std::iter::once([0, 0, 0]).chain(SHELL_ONE) {
            let [x, y, z] = [(o[0] + 1) as usize, (o[1] + 1) as usize, (o[2] + 1) as usize];
            let lb = gap[0][x] + gap[1][y] + gap[2][z];
            if lb > search.bound() || (search.best.is_some() && lb >= search.best_sq) {
                continue;
            }
            let d = [blk[0][x], blk[1][y], blk[2][z]];
            let slot = (d[0] << 2) | (d[1] << 1) | d[2];
            let block = *core[slot].get_or_insert_with(|| {
                let origin = VoxelKey([first[0] + d[0] as i32, first[1] + d[1] as i32, first[2] + d[2] as i32]);
                self.blocks.get(&origin)
            });
            let Some(block) = block else { continue };
            let index = ((local[0][x] * BLOCK + local[1][y]) * BLOCK + local[2][z]) as u32;
            if let Some(cell) = block.cell(index) {
                search.scan_points(cell);
            }
        }

        // Anything beyond the core is at least one voxel past the nearest face.
        let mut nearest_face = f64::INFINITY;
        for k in 0..3 {
            let base = c[k] as f64 * v;
            nearest_face = nearest_face.min((query[k] - base).max(0.0)).min((base + v - query[k]).max(0.0));
        }
        let outer_gap = nearest_face + v;
        if outer_gap * outer_gap <= search.bound() {
            self.search_outer(&mut search);
        }
        search.best.map(|p| (p, search.best_sq))
    }

    /// Visits occupied voxels outside the core, block by block, skipping
    /// blocks whose box is beyond the current bound.
    fn search_outer<'a>(&'a self, search: &mut Search<'a, '_>) {
        let r = Vector3::repeat(search.bound().sqrt());
        let lo = block_of(&voxel_key(&(search.query - r), self.voxel)).0;
        let hi = block_of(&voxel_key(&(search.query + r), self.voxel)).0;
        let cells = (0..3).map(|k| (hi[k] - lo[k] + 1) as i64).product::<i64>();
        if cells > NEIGHBORHOOD.min(self.blocks.len() as i64) {
            for (origin, block) in &self.blocks {
                search.visit_block(block, origin);
            }
            return;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let origin = VoxelKey([x, y, z]);
                    if let Some(block) = self.blocks.get(&origin) {
                        search.visit_block(block, &origin);
                    }
                }
            }
        }
    }
}

struct Search<'a, 'q> {
    voxel: f64,
    query: &'q Vector3<f64>,
    center: VoxelKey,
    max_sq: f64,
    best: Option<&'a LabeledPoint>,
    best_sq: f64,
}

impl<'a, 'q> Search<'a, 'q> {
    /// Squared distance a voxel must undercut to be worth visiting.
    #[inline]
    fn bound(&self) -> f64 {
        self.max_sq.min(self.best_sq)
    }

    /// Squared distance from the query to an axis-aligned box.
    #[inline]
    fn box_gap_sq(&self, min: [f64; 3], side: f64) -> f64 {
        let mut sum = 0.0;
        for k in 0..3 {
            let g = (min[k] - self.query[k]).max(self.query[k] - (min[k] + side)).max(0.0);
            sum += g * g;
        }
        sum
    }

    fn visit_block(&mut self, block: &'a Block, origin: &VoxelKey) {
        let side = BLOCK as f64 * self.voxel;
        let min = origin.0.map(|c| c as f64 * side);
        if self.box_gap_sq(min, side) > self.bound() {
            return;
        }
        let base = origin.0.map(|c| c * BLOCK);
        let c = self.center.0;
        for (bit, cell) in block.cells() {
            let key = voxel_in_block(base, bit);
            let k = key.0;
            if (k[0] - c[0]).abs() <= 1 && (k[1] - c[1]).abs() <= 1 && (k[2] - c[2]).abs() <= 1 {
                continue;
            }
            self.scan_cell(cell, &key);
        }
    }


    #[inline]
    fn scan_cell(&mut self, cell: &'a [LabeledPoint], key: &VoxelKey) {
        let min = key.0.map(|c| c as f64 * self.voxel);
        let lb = self.box_gap_sq(min, self.voxel);
        if lb > self.bound() || (self.best.is_some() && lb >= self.best_sq) {
            return;
        }
        self.scan_points(cell);
    }

    #[inline]
    fn scan_points(&mut self, cell: &'a [LabeledPoint]) {
        for p in cell {
            let d = (p.position - self.query).norm_squared();
            if d < self.best_sq && d <= self.max_sq {
                self.best_sq = d;
                self.best = Some(p);
            }
        }
    }
}

/// Exhaustive nearest neighbor over a point list, the reference for
/// [`VoxelHashMap::nearest_neighbor`].
pub fn brute_force_nearest<'a>(
    points: impl IntoIterator<Item = &'a LabeledPoint>,
    query: &Vector3<f64>,
    max_dist: f64,
) -> Option<(&'a LabeledPoint, f64)> {
    let mut best: Option<(&LabeledPoint, f64)> = None;
    for p in points {
        let d = (p.position - query).norm_squared();
        if d <= max_dist * max_dist && best.is_none_or(|(_, b)| d < b) {
            best = Some((p, d));
        }
    }
    best.map(|(p, d)| (p, d.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::SemanticClass;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> LabeledPoint {
        LabeledPoint::new(Vector3::new(x, y, z), SemanticClass::Road, 0.0)
    }

    #[test]
    fn shell_one_is_complete() {
        let mut all: Vec<_> = SHELL_ONE.to_vec();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 26);
        assert!(!all.contains(&[0, 0, 0]));
    }

    #[test]
    fn insert_capacity_and_dedup() {
        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        m.insert(&[pt(0.1, 0.1, 0.1)]);
        assert_eq!(m.len(), 1);
        m.insert(&[pt(0.1, 0.1, 0.1)]);
        assert_eq!(m.len(), 1);

        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        // 25 points on a 0.06 m lattice inside a single voxel.
        let pts: Vec<_> = (0..25)
            .map(|i| pt(0.01 + 0.06 * (i % 5) as f64, 0.01 + 0.06 * (i / 5) as f64, 0.2))
            .collect();
        m.insert(&pts);
        assert_eq!(m.voxel_count(), 1);
        assert_eq!(m.len(), 20);
        for (k, b) in m.voxels() {
            assert!(b.len() <= 20);
            for p in b {
                assert_eq!(voxel_key(&p.position, 0.5), k);
            }
        }
    }

    #[test]
    fn nearest_neighbor_trivial_cases() {
        let m = VoxelHashMap::new(0.5, 20, 100.0);
        assert!(m.nearest_neighbor(&Vector3::zeros(), 2.0).is_none());
        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        m.insert(&[pt(1.3, 0.0, 0.0)]);
        let (p, d) = m.nearest_neighbor(&Vector3::new(1.0, 0.0, 0.0), 2.0).unwrap();
        assert_eq!(p.position.x, 1.3);
        assert!((d - 0.3).abs() < 1e-12);
        assert!(m.nearest_neighbor(&Vector3::new(-1.0, 0.0, 0.0), 2.0).is_none());
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> VoxelHashMap {
        let mut m = VoxelHashMap::new(0.5, 20, 1000.0);
        let pts: Vec<_> = (0..n)
            .map(|_| {
                pt(
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent / 4.0..extent / 4.0),
                )
            })
            .collect();
        m.insert(&pts);
        m
    }

    #[test]
    fn matches_brute_force_on_ten_thousand_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_map(&mut rng, 10_000, 20.0);
        let stored: Vec<LabeledPoint> = m.points().copied().collect();
        for _ in 0..100 {
            let q = Vector3::new(rng.gen_range(-22.0..22.0), rng.gen_range(-22.0..22.0), rng.gen_range(-6.0..6.0));
            let a = m.nearest_neighbor(&q, 2.0);
            let b = brute_force_nearest(&stored, &q, 2.0);
            assert_eq!(a.map(|(p, d)| (p.position, d)), b.map(|(p, d)| (p.position, d)));
        }
    }

    #[test]
    fn trim_cases() {
        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        m.insert(&[pt(10.0, 0.0, 0.0), pt(-50.0, 3.0, 0.0)]);
        m.trim(&Vector3::zeros());
        assert_eq!(m.len(), 2);
        m.insert(&[pt(150.0, 0.0, 0.0)]);
        m.trim(&Vector3::zeros());
        assert_eq!(m.len(), 2);
        assert_eq!(m.voxel_count(), 2);

        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        let line: Vec<_> = (0..=400).map(|i| pt(-200.0 + i as f64, 0.2, 0.2)).collect();
        m.insert(&line);
        m.trim(&Vector3::zeros());
        let xs: Vec<f64> = m.points().map(|p| p.position.x).collect();
        let extent = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(extent <= 200.0);
        for (k, _) in m.voxels() {
            assert!(m.voxel_center(&k).norm() <= 100.0);
        }
    }

    #[test]
    fn insert_then_trim_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..3000)
            .map(|_| pt(rng.gen_range(-150.0..150.0), rng.gen_range(-150.0..150.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let c = Vector3::new(3.0, -4.0, 0.0);
        let mut m = VoxelHashMap::new(0.5, 20, 100.0);
        m.insert(&pts);
        m.trim(&c);
        let (n, v) = (m.len(), m.voxel_count());
        m.insert(&pts);
        m.trim(&c);
        assert_eq!((m.len(), m.voxel_count()), (n, v));
        assert_eq!(m.points().count(), n);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn nearest_neighbor_equals_brute_force(
            seed in any::<u64>(),
            n in 1usize..400,
            max_dist in 0.05f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, n, 5.0);
            let stored: Vec<LabeledPoint> = m.points().copied().collect();
            for _ in 0..20 {
                let q = Vector3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-2.0..2.0));
                let a = m.nearest_neighbor(&q, max_dist).map(|(p, d)| (p.position, d));
                let b = brute_force_nearest(&stored, &q, max_dist).map(|(p, d)| (p.position, d));
                prop_assert_eq!(a, b);
            }
        }
    }
}
