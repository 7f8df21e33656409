//! Dense uniform grid over axis-aligned boxes, stored in CSR form.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn point(p: Vector3<f64>) -> Self {
        Self { min: p, max: p }
    }

    pub fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn inflate(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min - Vector3::repeat(margin),
            max: self.max + Vector3::repeat(margin),
        }
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let d = (self.min - p).sup(&(p - self.max)).sup(&Vector3::zeros());
        d.norm()
    }
}

/// Maps each grid cell to the items whose boxes overlap it.
#[derive(Debug, Clone)]
pub struct UniformGrid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    offsets: Vec<u32>,
    items: Vec<u32>,
}

const MAX_CELLS: usize = 1 << 22;

impl UniformGrid {
    /// Builds a grid with cells of roughly `cell` mm; the cell size grows
    /// when the domain would need more than a few million cells.
    pub fn build(boxes: &[Aabb], cell: f64) -> Self {
        let mut bounds = Aabb::empty();
        for b in boxes {
            bounds.grow(b);
        }
        if boxes.is_empty() {
            bounds = Aabb::point(Vector3::zeros());
        }
        let bounds = bounds.inflate(1e-6);
        let extent = bounds.max - bounds.min;
        let mut cell = cell.max(1e-6);
        let dims = loop {
            let d = [
                ((extent.x / cell).ceil() as usize).max(1),
                ((extent.y / cell).ceil() as usize).max(1),
                ((extent.z / cell).ceil() as usize).max(1),
            ];
            if d[0] * d[1] * d[2] <= MAX_CELLS {
                break d;
            }
            cell *= 1.5;
        };
        let mut grid = Self {
            origin: bounds.min,
            cell,
            dims,
            offsets: Vec::new(),
            items: Vec::new(),
        };

        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; n_cells + 1];
        for b in boxes {
            grid.for_each_cell_in(b, |c| counts[c + 1] += 1);
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; counts[n_cells] as usize];
        for (idx, b) in boxes.iter().enumerate() {
            grid.for_each_cell_in(b, |c| {
                items[fill[c] as usize] = idx as u32;
                fill[c] += 1;
            });
        }
        grid.offsets = counts;
        grid.items = items;
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: self.origin,
            max: self.origin
                + Vector3::new(
                    self.dims[0] as f64,
                    self.dims[1] as f64,
                    self.dims[2] as f64,
                ) * self.cell,
        }
    }

    fn coord(&self, x: f64, axis: usize) -> isize {
        ((x - self.origin[axis]) / self.cell).floor() as isize
    }

    /// Cell coordinates of `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for (axis, slot) in out.iter_mut().enumerate() {
            let c = self.coord(p[axis], axis);
            if c < 0 || c as usize >= self.dims[axis] {
                return None;
            }
            *slot = c as usize;
        }
        Some(out)
    }

    /// Cell coordinates of `p` clamped into the grid.
    pub fn clamped_cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut out = [0usize; 3];
        for (axis, slot) in out.iter_mut().enumerate() {
            let c = self.coord(p[axis], axis).clamp(0, self.dims[axis] as isize - 1);
            *slot = c as usize;
        }
        out
    }

    fn linear(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn items_in(&self, c: [usize; 3]) -> &[u32] {
        let i = self.linear(c);
        &self.items[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Items registered in the cell containing `p` (empty outside the grid).
    pub fn items_at(&self, p: &Vector3<f64>) -> &[u32] {
        match self.cell_of(p) {
            Some(c) => self.items_in(c),
            None => &[],
        }
    }

    /// Visits every cell overlapping `b` (clipped to the grid).
    pub fn for_each_cell_in(&self, b: &Aabb, mut f: impl FnMut(usize)) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for axis in 0..3 {
            let l = self.coord(b.min[axis], axis);
            let h = self.coord(b.max[axis], axis);
            if h < 0 || l >= self.dims[axis] as isize {
                return;
            }
            lo[axis] = l.max(0) as usize;
            hi[axis] = (h as usize).min(self.dims[axis] - 1);
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    f(self.linear([x, y, z]));
                }
            }
        }
    }

    /// Items of all cells overlapping `b`; may contain duplicates.
    pub fn for_each_item_in(&self, b: &Aabb, mut f: impl FnMut(u32)) {
        self.for_each_cell_in(b, |c| {
            for &it in &self.items[self.offsets[c] as usize..self.offsets[c + 1] as usize] {
                f(it);
            }
        });
    }

    /// Visits the cells at Chebyshev distance exactly `ring` from `center`.
    pub fn for_each_cell_in_ring(&self, center: [usize; 3], ring: usize, mut f: impl FnMut([usize; 3])) {
        let r = ring as isize;
        let lo: Vec<isize> = (0..3).map(|a| center[a] as isize - r).collect();
        let hi: Vec<isize> = (0..3).map(|a| center[a] as isize + r).collect();
        for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
            for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                for x in lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1) {
                    let on_shell = (x - center[0] as isize).abs() == r
                        || (y - center[1] as isize).abs() == r
                        || (z - center[2] as isize).abs() == r;
                    if on_shell {
                        f([x as usize, y as usize, z as usize]);
                    }
                }
            }
        }
    }

    /// Largest ring index that still touches the grid from `center`.
    pub fn max_ring(&self, center: [usize; 3]) -> usize {
        (0..3)
            .map(|a| center[a].max(self.dims[a] - 1 - center[a]))
            .max()
            .unwrap_or(0)
    }
}
