use std::collections::HashMap;


use super::camera::{Camera, Vec3};
use super::{RenderedView, NO_HIT};
use crate::error::{Error, Result};
use crate::par;

/// Feature field carried by surface points. Positions and colors are fixed;
/// only features are optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceField {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    /// Row-major `N × dim`.
    pub features: Vec<f64>,
    pub dim: usize,
    /// Symmetric k-nearest-neighbor lists, ids ascending.
    pub adjacency: Vec<Vec<u32>>,
    pub knn: usize,
}

impl SurfaceField {
    pub fn new(points: Vec<Vec3>, colors: Vec<[f64; 3]>, features: Vec<f64>, dim: usize, knn: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("surface field needs at least one point"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if colors.len() != points.len() || features.len() != points.len() * dim {
            return Err(Error::invalid("points, colors and features disagree in length"));
        }
        let finite = points.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && features.iter().all(|v| v.is_finite())
            && colors.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("surface field has non-finite entries"));
        }
        let adjacency = knn_adjacency(&points, knn);
        Ok(Self {
            points,
            colors,
            features,
            dim,
            adjacency,
            knn,
        })
    }

    /// Same geometry and adjacency with a new feature table.
    pub fn with_features(&self, features: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != self.len() * dim || !features.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature table does not match the point count"));
        }
        Ok(Self {
            features,
            dim,
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// k-nearest-neighbor lists (excluding self), closed under symmetry.
pub fn knn_adjacency(points: &[Vec3], k: usize) -> Vec<Vec<u32>> {
    let n = points.len();
    if k == 0 || n < 2 {
        return vec![Vec::new(); n];
    }
    let grid = PointGrid::new(points, k);
    let lists = par::map_range(n, |i| grid.nearest(points, i, k));
    let mut adj = lists.clone();
    for (i, l) in lists.iter().enumerate() {
        for &j in l {
            adj[j as usize].push(i as u32);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    adj
}

/// Uniform bucket grid sized for roughly `k` points per cell.
struct PointGrid {
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl PointGrid {
    fn new(points: &[Vec3], k: usize) -> Self {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        // size cells by the extent of the axes the points actually span, so
        // planar and linear sets still get about `k` points per cell
        let span = ext.max();
        let live: Vec<f64> = ext.iter().copied().filter(|&e| e > span * 1e-6).collect();
        let cell = if live.is_empty() {
            1.0
        } else {
            let measure: f64 = live.iter().product();
            (measure * k.max(1) as f64 / points.len() as f64)
                .powf(1.0 / live.len() as f64)
                .max(span / 512.0)
        };
        let dims = [0, 1, 2].map(|a| (ext[a] / cell).floor() as i64 + 1);
        let mut grid = Self {
            lo,
            cell,
            dims,
            cells: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            grid.cells.entry(grid.key(p)).or_default().push(i as u32);
        }
        grid
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.lo[a]) / self.cell).floor() as i64).clamp(0, self.dims[a] - 1))
    }

    /// The `k` nearest other points to `points[i]`, ties broken by index.
    fn nearest(&self, points: &[Vec3], i: usize, k: usize) -> Vec<u32> {
        let q = &points[i];
        let c = self.key(q);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for r in 0..=max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &j in ids {
                                if j as usize != i {
                                    found.push(((points[j as usize] - q).norm_squared(), j));
                                }
                            }
                        }
                    }
                }
            }
            // anything beyond ring r lies at least r cells away
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let reach = r as f64 * self.cell;
                if found[k - 1].0 < reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, j)| j).collect()
    }
}

/// Pixels covered by a splat centered at continuous coordinates `(u, v)`:
/// the pixel containing the center, plus every pixel whose center lies within
/// `radius` of it.
pub(crate) fn splat_covers(u: f64, v: f64, radius: f64, x: usize, y: usize) -> bool {
    if u.floor() == x as f64 && v.floor() == y as f64 {
        return true;
    }
    let dx = x as f64 + 0.5 - u;
    let dy = y as f64 + 0.5 - v;
    dx * dx + dy * dy <= radius * radius
}

/// Z-buffered point splatting. Each pixel takes the nearest covering point;
/// equal depths resolve to the lower point id.
pub fn render_surface(field: &SurfaceField, camera: &Camera, point_radius: f64) -> RenderedView {
    let hits = rasterize(field, camera, point_radius);
    let (w, h, d) = (camera.width, camera.height, field.dim);
    let mut view = RenderedView::empty(w, h, d);
    let mut hit_index = vec![NO_HIT; w * h];
    for (pix, &(depth, id)) in hits.iter().enumerate() {
        if id == NO_HIT {
            continue;
        }
        hit_index[pix] = id;
        view.features[pix * d..(pix + 1) * d].copy_from_slice(field.feature(id as usize));
        view.colors[pix] = field.colors[id as usize];
        view.depth[pix] = depth;
        view.opacity[pix] = 1.0;
    }
    view.hit_index = Some(hit_index);
    view
}

/// Per-pixel `(depth, point id)` winners, `NO_HIT` where nothing lands.
pub(crate) fn rasterize(field: &SurfaceField, camera: &Camera, radius: f64) -> Vec<(f64, u32)> {
    let (w, h) = (camera.width, camera.height);
    let n = field.len();
    let chunks = par::current_threads().clamp(1, 16);
    let chunk_len = n.div_ceil(chunks);
    let empty = (f64::INFINITY, NO_HIT);
    let partials = par::map_range(chunks, |c| {
        let mut zbuf = vec![empty; w * h];
        let end = ((c + 1) * chunk_len).min(n);
        for i in c * chunk_len..end {
            let Some((u, v, z)) = camera.project(&field.points[i]) else {
                continue;
            };
            let r = radius.max(0.0);
            let x0 = (u - r - 0.5).floor().max(0.0) as i64;
            let y0 = (v - r - 0.5).floor().max(0.0) as i64;
            let x1 = ((u + r).ceil() as i64).min(w as i64 - 1);
            let y1 = ((v + r).ceil() as i64).min(h as i64 - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (xu, yu) = (x as usize, y as usize);
                    if !splat_covers(u, v, r, xu, yu) {
                        continue;
                    }
                    let slot = &mut zbuf[yu * w + xu];
                    if z < slot.0 || (z == slot.0 && (i as u32) < slot.1) {
                        *slot = (z, i as u32);
                    }
                }
            }
        }
        zbuf
    });
    let mut out = vec![empty; w * h];
    for part in partials {
        for (o, p) in out.iter_mut().zip(part) {
            if p.0 < o.0 || (p.0 == o.0 && p.1 < o.1) {
                *o = p;
            }
        }
    }
    out
}

/// Gradients of a scalar objective with respect to point features and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrads {
    pub features: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Scatter-adds pixel cotangents onto the points that won those pixels.
/// `feature_grad` is `H·W × dim`; `color_grad` may be empty.
pub fn backprop_surface(
    field: &SurfaceField,
    hit_index_map: &[u32],
    feature_grad: &[f64],
    color_grad: &[[f64; 3]],
) -> Result<SurfaceGrads> {
    let d = field.dim;
    if feature_grad.len() != hit_index_map.len() * d {
        return Err(Error::invalid("feature cotangent does not match the hit map"));
    }
    if !color_grad.is_empty() && color_grad.len() != hit_index_map.len() {
        return Err(Error::invalid("color cotangent does not match the hit map"));
    }
    let mut grads = SurfaceGrads {
        features: vec![0.0; field.len() * d],
        colors: vec![[0.0; 3]; field.len()],
    };
    for (pix, &id) in hit_index_map.iter().enumerate() {
        if id == NO_HIT {
            continue;
        }
        let id = id as usize;
        if id >= field.len() {
            return Err(Error::StaleCache(format!("hit map references point {id}")));
        }
        for (g, c) in grads.features[id * d..(id + 1) * d]
            .iter_mut()
            .zip(&feature_grad[pix * d..(pix + 1) * d])
        {
            *g += c;
        }
        if !color_grad.is_empty() {
            for k in 0..3 {
                grads.colors[id][k] += color_grad[pix][k];
            }
        }
    }
    Ok(grads)
}
