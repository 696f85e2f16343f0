//! Interactive segmentation over a trained field: click scoring, threshold
//! masks, multi-selection, region growing, discretization and segment export.
//!
//! A [`SegService`] owns one immutable field snapshot per scene and any number
//! of sessions. Sessions never share mutable state; a snapshot published
//! while sessions are open reaches them only through [`Session::refresh`].

mod grow;

pub use grow::{auto_discretize, region_grow, Discretization, PointGraph, DISCRETIZE_NOTE};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::evalbench::{score_against, score_map_image, ScoreMap};
use crate::field::{save_field, Camera, FieldModel, PcaBasis, RenderOptions, RenderedView, SurfaceField, Vec3, VoxelField, NO_HIT};
use crate::mask::Mask;
use crate::synthdata::{encode_png, Dataset};
use crate::util::write_atomic;

/// Pixels below this opacity count as empty for clicks.
pub const SURFACE_OPACITY: f64 = 0.5;

/// Machine-readable failure class of a service call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    NoSurface,
    NoSelection,
    BadRequest,
    NotFound,
    Io,
    Internal,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::NoSurface => "no-surface",
            ErrorCode::NoSelection => "no-selection",
            ErrorCode::BadRequest => "bad-request",
            ErrorCode::NotFound => "not-found",
            ErrorCode::Io => "io",
            ErrorCode::Internal => "internal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegError {
    pub code: ErrorCode,
    pub message: String,
}

impl SegError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

impl fmt::Display for SegError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code.as_str(), self.message)
    }
}

impl std::error::Error for SegError {}

impl From<Error> for SegError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) | Error::Config(_) => ErrorCode::BadRequest,
            Error::Io { .. } if e.is_not_found() => ErrorCode::NotFound,
            Error::Io { .. } => ErrorCode::Io,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

pub type SegResult<T> = std::result::Result<T, SegError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Rgb,
    Feat,
    Depth,
}

impl Layer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rgb" => Some(Layer::Rgb),
            "feat" | "feature" => Some(Layer::Feat),
            "depth" => Some(Layer::Depth),
            _ => None,
        }
    }
}

/// Immutable field state shared by every session of a scene.
pub struct FieldSnapshot {
    pub version: u64,
    pub field: FieldModel,
    pub render: RenderOptions,
    /// Scene points with their features, used for growing and export.
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub features: Vec<f64>,
    pub graph: PointGraph,
    pub pca: PcaBasis,
}

/// Trilinear feature lookup at `p`.
fn sample_volume(field: &VoxelField, p: &Vec3) -> Vec<f64> {
    let (idx, w) = field.corners(p);
    let d = field.dim;
    let mut f = vec![0.0; d];
    for (&i, &wi) in idx.iter().zip(&w) {
        for (a, v) in f.iter_mut().zip(&field.features[i as usize * d..(i as usize + 1) * d]) {
            *a += wi * v;
        }
    }
    f
}

impl FieldSnapshot {
    /// Surface fields carry their own points; volume fields are read at the
    /// dataset's scene points.
    pub fn new(version: u64, field: FieldModel, geometry: &SurfaceField, render: RenderOptions) -> SegResult<Self> {
        let (points, colors, features, adjacency) = match &field {
            FieldModel::Surface(s) => (s.points.clone(), s.colors.clone(), s.features.clone(), s.adjacency.clone()),
            FieldModel::Volume(v) => {
                let feats: Vec<f64> = geometry.points.iter().flat_map(|p| sample_volume(v, p)).collect();
                (geometry.points.clone(), geometry.colors.clone(), feats, geometry.adjacency.clone())
            }
        };
        let dim = field.dim();
        let graph = PointGraph::new(&features, dim, &adjacency)?;
        let pca = PcaBasis::fit(&graph.units, dim);
        Ok(Self {
            version,
            field,
            render,
            points,
            colors,
            features,
            graph,
            pca,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Scene point seen at pixel `p`: the splatted point for surface fields,
    /// otherwise the point nearest to the back-projected expected depth.
    fn point_at(&self, view: &RenderedView, camera: &Camera, p: usize) -> Option<u32> {
        if view.opacity[p] < SURFACE_OPACITY {
            return None;
        }
        if let Some(hits) = &view.hit_index {
            return (hits[p] != NO_HIT).then_some(hits[p]);
        }
        let z = view.depth[p] / view.opacity[p];
        let x = camera.unproject(p % view.width, p / view.width, z);
        self.points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).norm_squared().total_cmp(&(b.1 - x).norm_squared()))
            .map(|(i, _)| i as u32)
    }
}

/// One scene the service can open sessions on.
pub struct SceneEntry {
    pub id: String,
    pub dataset: Arc<Dataset>,
    snapshot: RwLock<Arc<FieldSnapshot>>,
}

impl SceneEntry {
    pub fn new(id: impl Into<String>, dataset: Arc<Dataset>, field: FieldModel, render: RenderOptions) -> SegResult<Self> {
        if field.dim() == 0 {
            return Err(SegError::bad("field has no features"));
        }
        let snap = FieldSnapshot::new(1, field, &dataset.geometry, render)?;
        Ok(Self {
            id: id.into(),
            dataset,
            snapshot: RwLock::new(Arc::new(snap)),
        })
    }

    pub fn snapshot(&self) -> Arc<FieldSnapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Replaces the shared snapshot atomically; returns the new version.
    pub fn publish(&self, field: FieldModel) -> SegResult<u64> {
        let render = self.snapshot().render;
        let mut slot = self.snapshot.write().expect("snapshot lock");
        let version = slot.version + 1;
        *slot = Arc::new(FieldSnapshot::new(version, field, &self.dataset.geometry, render)?);
        Ok(version)
    }
}

/// A clicked anchor: the scene point under the pixel and the rendered
/// feature there, unit length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub point: u32,
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

/// A named point-id set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub threshold: f64,
    pub points: Vec<u32>,
}

/// Serializable session state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub scene: String,
    pub snapshot_version: u64,
    pub view: usize,
    pub anchors: Vec<Anchor>,
    pub threshold: f64,
    pub segments: BTreeMap<String, Segment>,
}

pub struct Session {
    pub id: String,
    scene: Arc<SceneEntry>,
    snap: Arc<FieldSnapshot>,
    view: usize,
    anchors: Vec<Anchor>,
    threshold: f64,
    segments: BTreeMap<String, Segment>,
    /// Last region-grow result, saved by [`Session::save_segment`].
    grown: Option<Segment>,
    discretized: Option<Discretization>,
    renders: HashMap<usize, Arc<RenderedView>>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.len() <= 64 && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Distinct, fixed color for a component label.
pub fn label_color(label: u32) -> [f64; 3] {
    if label == u32::MAX {
        return [0.0; 3];
    }
    let h = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
}

pub fn mask_image(mask: &Mask) -> Vec<[f64; 3]> {
    (0..mask.len()).map(|p| if mask.get_index(p) { [1.0; 3] } else { [0.0; 3] }).collect()
}

impl Session {
    pub fn new(id: impl Into<String>, scene: Arc<SceneEntry>) -> Self {
        let snap = scene.snapshot();
        Self {
            id: id.into(),
            scene,
            snap,
            view: 0,
            anchors: Vec::new(),
            threshold: 0.5,
            segments: BTreeMap::new(),
            grown: None,
            discretized: None,
            renders: HashMap::new(),
        }
    }

    pub fn scene_id(&self) -> &str {
        &self.scene.id
    }

    pub fn snapshot(&self) -> &Arc<FieldSnapshot> {
        &self.snap
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn segments(&self) -> &BTreeMap<String, Segment> {
        &self.segments
    }

    pub fn num_views(&self) -> usize {
        self.scene.dataset.cameras.len()
    }

    /// Adopts the scene's latest snapshot. Anchors keep their features;
    /// cached renders and grow results are dropped. Returns whether the
    /// version changed.
    pub fn refresh(&mut self) -> bool {
        let latest = self.scene.snapshot();
        if latest.version == self.snap.version {
            return false;
        }
        self.snap = latest;
        self.renders.clear();
        self.grown = None;
        self.discretized = None;
        self.anchors.retain(|a| (a.point as usize) < self.snap.points.len());
        true
    }

    fn camera(&self, view: usize) -> SegResult<&Camera> {
        self.scene
            .dataset
            .cameras
            .get(view)
            .ok_or_else(|| SegError::new(ErrorCode::NotFound, format!("no view {view} (scene has {})", self.num_views())))
    }

    pub fn render(&mut self, view: usize) -> SegResult<Arc<RenderedView>> {
        let camera = self.camera(view)?.clone();
        if let Some(r) = self.renders.get(&view) {
            return Ok(r.clone());
        }
        let r = Arc::new(self.snap.field.render(&camera, &self.snap.render)?);
        self.renders.insert(view, r.clone());
        Ok(r)
    }

    fn layer_pixels(&self, view: &RenderedView, layer: Layer) -> Vec<[f64; 3]> {
        let n = view.num_pixels();
        match layer {
            Layer::Rgb => view.colors.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect(),
            Layer::Feat => (0..n)
                .map(|p| {
                    if !view.covered(p) {
                        return [0.0; 3];
                    }
                    let f = view.feature(p);
                    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let u: Vec<f64> = f.iter().map(|v| v / norm).collect();
                    self.snap.pca.color(&u)
                })
                .collect(),
            Layer::Depth => {
                let z: Vec<Option<f64>> = (0..n)
                    .map(|p| (view.opacity[p] >= SURFACE_OPACITY).then(|| view.depth[p] / view.opacity[p]))
                    .collect();
                let lo = z.iter().flatten().copied().fold(f64::INFINITY, f64::min);
                let hi = z.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = (hi - lo).max(1e-12);
                z.iter()
                    .map(|d| match d {
                        Some(d) => [1.0 - 0.8 * (d - lo) / span; 3],
                        None => [0.0; 3],
                    })
                    .collect()
            }
        }
    }

    /// RGB, PCA-feature or depth image of a dataset view as PNG bytes.
    pub fn render_layer(&mut self, view: usize, layer: Layer) -> SegResult<Vec<u8>> {
        let r = self.render(view)?;
        self.view = view;
        Ok(encode_png(r.width, r.height, &self.layer_pixels(&r, layer))?)
    }

    /// Renders from an arbitrary camera without touching session state.
    pub fn render_camera(&self, camera: &Camera, layer: Layer) -> SegResult<Vec<u8>> {
        let r = self.snap.field.render(camera, &self.snap.render)?;
        Ok(encode_png(r.width, r.height, &self.layer_pixels(&r, layer))?)
    }

    fn anchor_at(&mut self, click: Click) -> SegResult<Anchor> {
        let camera = self.camera(click.view)?.clone();
        let r = self.render(click.view)?;
        if click.x >= r.width || click.y >= r.height {
            return Err(SegError::bad(format!("pixel ({}, {}) outside the {}x{} image", click.x, click.y, r.width, r.height)));
        }
        let p = click.y * r.width + click.x;
        let no_surface = || SegError::new(ErrorCode::NoSurface, format!("no surface at pixel ({}, {}) of view {}", click.x, click.y, click.view));
        let point = self.snap.point_at(&r, &camera, p).ok_or_else(no_surface)?;
        let f = r.feature(p);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(no_surface());
        }
        Ok(Anchor {
            point,
            view: click.view,
            x: click.x,
            y: click.y,
            feature: f.iter().map(|v| v / norm).collect(),
        })
    }

    /// Replaces the selection with one anchor and returns its score map on
    /// the clicked view.
    pub fn click(&mut self, click: Click) -> SegResult<(Anchor, ScoreMap)> {
        let anchor = self.anchor_at(click)?;
        self.anchors = vec![anchor.clone()];
        self.view = click.view;
        let map = self.score_map(click.view)?;
        Ok((anchor, map))
    }

    /// Replaces the selection with one anchor per click. All clicks are
    /// validated before the selection changes.
    pub fn multi_select(&mut self, clicks: &[Click]) -> SegResult<Mask> {
        if clicks.is_empty() {
            return Err(SegError::new(ErrorCode::NoSelection, "no clicks given"));
        }
        let anchors = clicks.iter().map(|&c| self.anchor_at(c)).collect::<SegResult<Vec<_>>>()?;
        self.anchors = anchors;
        self.view = clicks[clicks.len() - 1].view;
        self.mask(self.view, self.threshold)
    }

    /// Per-pixel maximum cosine over the selected anchors.
    pub fn score_map(&mut self, view: usize) -> SegResult<ScoreMap> {
        if self.anchors.is_empty() {
            return Err(SegError::new(ErrorCode::NoSelection, "click a point first"));
        }
        let r = self.render(view)?;
        let feats: Vec<Vec<f64>> = self.anchors.iter().map(|a| a.feature.clone()).collect();
        let query = (self.anchors.len() == 1 && self.anchors[0].view == view).then(|| (self.anchors[0].x, self.anchors[0].y));
        Ok(score_against(&r, view, &feats, query))
    }

    pub fn score_image(&mut self, view: usize) -> SegResult<Vec<u8>> {
        let map = self.score_map(view)?;
        Ok(encode_png(map.width, map.height, &score_map_image(&map, -1.0, 1.0))?)
    }

    /// `{p : score(p) > t}` on `view`.
    pub fn mask(&mut self, view: usize, t: f64) -> SegResult<Mask> {
        Ok(self.score_map(view)?.threshold(t))
    }

    /// Stores `t` and returns the mask on the current view.
    pub fn set_threshold(&mut self, t: f64) -> SegResult<Mask> {
        if !(-1.0..=1.0).contains(&t) {
            return Err(SegError::bad(format!("threshold must lie in [-1, 1], got {t}")));
        }
        let mask = self.mask(self.view, t)?;
        self.threshold = t;
        Ok(mask)
    }

    pub fn mask_png(&mut self, view: usize, t: f64) -> SegResult<Vec<u8>> {
        let m = self.mask(view, t)?;
        Ok(encode_png(m.width(), m.height(), &mask_image(&m))?)
    }

    /// Region growing from the selected anchor points.
    pub fn grow(&mut self, threshold: f64) -> SegResult<Vec<u32>> {
        if self.anchors.is_empty() {
            return Err(SegError::new(ErrorCode::NoSelection, "click a point first"));
        }
        let seeds: Vec<u32> = self.anchors.iter().map(|a| a.point).collect();
        let points = region_grow(&self.snap.graph, &seeds, threshold)?;
        self.grown = Some(Segment {
            name: String::new(),
            threshold,
            points: points.clone(),
        });
        Ok(points)
    }

    pub fn discretize(&mut self, threshold: f64) -> SegResult<&Discretization> {
        let d = auto_discretize(&self.snap.graph, threshold)?;
        Ok(self.discretized.insert(d))
    }

    /// Component labels of the last discretization drawn on `view`.
    pub fn label_image(&mut self, view: usize) -> SegResult<Vec<u8>> {
        let Some(d) = self.discretized.clone() else {
            return Err(SegError::new(ErrorCode::NoSelection, "run discretize first"));
        };
        let camera = self.camera(view)?.clone();
        let r = self.render(view)?;
        let px: Vec<[f64; 3]> = (0..r.num_pixels())
            .map(|p| match self.snap.point_at(&r, &camera, p) {
                Some(i) => label_color(d.labels[i as usize]),
                None => [0.0; 3],
            })
            .collect();
        Ok(encode_png(r.width, r.height, &px)?)
    }

    /// Names the last grown component; grows at the session threshold when
    /// nothing was grown since the last selection change.
    pub fn save_segment(&mut self, name: &str) -> SegResult<&Segment> {
        if !valid_name(name) {
            return Err(SegError::bad(format!("segment names use [A-Za-z0-9_-] and at most 64 characters, got {name:?}")));
        }
        let seeds: Vec<u32> = self.anchors.iter().map(|a| a.point).collect();
        let fresh = self.grown.as_ref().is_some_and(|g| seeds.iter().all(|s| g.points.binary_search(s).is_ok()));
        if !fresh {
            self.grow(self.threshold)?;
        }
        let mut seg = self.grown.clone().expect("grown above");
        seg.name = name.to_string();
        self.segments.insert(name.to_string(), seg);
        Ok(&self.segments[name])
    }

    /// Writes `<name>.ids` (one point id per line) and `<name>.field` (the
    /// segment's points in the field checkpoint format) per saved segment.
    pub fn export_segments(&self, dir: &Path) -> SegResult<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| SegError::from(Error::io(dir, e)))?;
        let d = self.snap.dim();
        let mut written = Vec::new();
        for seg in self.segments.values() {
            let ids: String = seg.points.iter().map(|p| format!("{p}\n")).collect();
            let ids_path = dir.join(format!("{}.ids", seg.name));
            write_atomic(&ids_path, ids.as_bytes())?;
            let idx = seg.points.iter().map(|&p| p as usize);
            let sub = SurfaceField::new(
                idx.clone().map(|i| self.snap.points[i]).collect(),
                idx.clone().map(|i| self.snap.colors[i]).collect(),
                idx.flat_map(|i| self.snap.features[i * d..(i + 1) * d].to_vec()).collect(),
                d,
                self.scene.dataset.geometry.knn,
            )?;
            let field_path = dir.join(format!("{}.field", seg.name));
            save_field(&FieldModel::Surface(sub), &field_path)?;
            written.push(ids_path);
            written.push(field_path);
        }
        Ok(written)
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            scene: self.scene.id.clone(),
            snapshot_version: self.snap.version,
            view: self.view,
            anchors: self.anchors.clone(),
            threshold: self.threshold,
            segments: self.segments.clone(),
        }
    }

    /// Restores selection, threshold and segments from a saved state.
    pub fn restore(&mut self, state: SessionState) -> SegResult<()> {
        if state.scene != self.scene.id {
            return Err(SegError::bad(format!("state belongs to scene {:?}", state.scene)));
        }
        let n = self.snap.points.len() as u32;
        let dim = self.snap.dim();
        let bad_anchor = state.anchors.iter().any(|a| a.point >= n || a.feature.len() != dim || a.view >= self.num_views());
        let bad_segment = state.segments.values().any(|s| s.points.iter().any(|&p| p >= n) || !valid_name(&s.name));
        if bad_anchor || bad_segment || state.view >= self.num_views() || !(-1.0..=1.0).contains(&state.threshold) {
            return Err(SegError::bad("state does not fit this scene"));
        }
        self.view = state.view;
        self.anchors = state.anchors;
        self.threshold = state.threshold;
        self.segments = state.segments;
        self.grown = None;
        Ok(())
    }

    pub fn save_state(&self, path: &Path) -> SegResult<()> {
        let text = serde_json::to_string_pretty(&self.state()).map_err(|e| SegError::new(ErrorCode::Internal, e.to_string()))?;
        Ok(write_atomic(path, text.as_bytes())?)
    }

    pub fn load_state(&mut self, path: &Path) -> SegResult<()> {
        let text = crate::util::read_text(path)?;
        let state: SessionState = serde_json::from_str(&text).map_err(|e| SegError::bad(format!("session state: {e}")))?;
        self.restore(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    pub views: usize,
    pub points: usize,
    pub dim: usize,
    pub backend: String,
    pub snapshot_version: u64,
    pub width: usize,
    pub height: usize,
}

/// Scenes plus open sessions. Each session sits behind its own lock, so
/// calls on one session are serialized while sessions proceed independently.
#[derive(Default)]
pub struct SegService {
    scenes: BTreeMap<String, Arc<SceneEntry>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next: AtomicU64,
}

impl SegService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scene(&mut self, scene: SceneEntry) {
        self.scenes.insert(scene.id.clone(), Arc::new(scene));
    }

    pub fn scene(&self, id: &str) -> SegResult<&Arc<SceneEntry>> {
        self.scenes
            .get(id)
            .ok_or_else(|| SegError::new(ErrorCode::NotFound, format!("no scene {id:?}")))
    }

    pub fn scenes(&self) -> Vec<SceneInfo> {
        self.scenes
            .values()
            .map(|s| {
                let snap = s.snapshot();
                let cam = s.dataset.cameras.first();
                SceneInfo {
                    id: s.id.clone(),
                    views: s.dataset.cameras.len(),
                    points: snap.points.len(),
                    dim: snap.dim(),
                    backend: snap.field.backend_name().into(),
                    snapshot_version: snap.version,
                    width: cam.map_or(0, |c| c.width),
                    height: cam.map_or(0, |c| c.height),
                }
            })
            .collect()
    }

    pub fn create_session(&self, scene: &str) -> SegResult<String> {
        let entry = self.scene(scene)?.clone();
        let id = format!("s{}", self.next.fetch_add(1, Ordering::Relaxed) + 1);
        let session = Session::new(id.clone(), entry);
        self.sessions.write().expect("session table").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn session(&self, id: &str) -> SegResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| SegError::new(ErrorCode::NotFound, format!("no session {id:?}")))
    }

    /// Runs `f` with exclusive access to one session.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> SegResult<T>) -> SegResult<T> {
        let s = self.session(id)?;
        let mut guard = s.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut guard)
    }

    pub fn close_session(&self, id: &str) -> bool {
        self.sessions.write().expect("session table").remove(id).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Camera;

    fn tiny_scene() -> SceneEntry {
        // Two clusters of points with orthogonal features in front of one camera.
        let mut points = Vec::new();
        let mut feats = Vec::new();
        for i in 0..40 {
            let left = i < 20;
            let x = if left { -0.6 } else { 0.6 } + 0.02 * (i % 5) as f64;
            let y = -0.1 + 0.05 * ((i % 20) / 5) as f64;
            points.push(Vec3::new(x, y, 0.0));
            feats.extend_from_slice(if left { &[1.0, 0.0] } else { &[0.0, 1.0] });
        }
        let colors = vec![[0.5; 3]; points.len()];
        let geometry = SurfaceField::new(points, colors, feats, 2, 4).unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), 1.0, 32, 32).unwrap();
        let dataset = Dataset {
            name: "tiny".into(),
            seed: 0,
            cameras: vec![cam],
            geometry: geometry.clone(),
            paths: None,
            views: Vec::new(),
            queries: Vec::new(),
            spec: None,
        };
        let opts = RenderOptions {
            point_radius: 1.5,
            samples_per_ray: 8,
        };
        SceneEntry::new("tiny", Arc::new(dataset), FieldModel::Surface(geometry), opts).unwrap()
    }

    fn hit_pixel(s: &mut Session, want_left: bool) -> Click {
        let r = s.render(0).unwrap();
        let hits = r.hit_index.as_ref().unwrap();
        let p = (0..r.num_pixels())
            .find(|&p| hits[p] != NO_HIT && r.opacity[p] >= SURFACE_OPACITY && ((hits[p] < 20) == want_left))
            .unwrap();
        Click {
            view: 0,
            x: p % r.width,
            y: p / r.width,
        }
    }

    #[test]
    fn click_threshold_and_multi_select() {
        let mut svc = SegService::new();
        svc.add_scene(tiny_scene());
        let id = svc.create_session("tiny").unwrap();
        svc.with_session(&id, |s| {
            let left = hit_pixel(s, true);
            let right = hit_pixel(s, false);
            let (anchor, map) = s.click(left)?;
            assert!(anchor.point < 20);
            assert!(map.scores[left.y * map.width + left.x] > 0.999);
            let m_hi = s.set_threshold(0.5)?;
            let m_lo = s.set_threshold(-1.0)?;
            assert!(m_hi.is_subset_of(&m_lo));
            assert!(!m_hi.get(right.x, right.y));
            let both = {
                s.set_threshold(0.5)?;
                s.multi_select(&[left, right])?
            };
            assert!(both.get(left.x, left.y) && both.get(right.x, right.y));
            assert_eq!(s.set_threshold(1.5).unwrap_err().code, ErrorCode::BadRequest);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn empty_pixel_is_no_surface() {
        let mut svc = SegService::new();
        svc.add_scene(tiny_scene());
        let id = svc.create_session("tiny").unwrap();
        let err = svc.with_session(&id, |s| s.click(Click { view: 0, x: 0, y: 0 })).unwrap_err();
        assert_eq!(err.code, ErrorCode::NoSurface);
        assert_eq!(err.code.as_str(), "no-surface");
        assert_eq!(svc.with_session(&id, |s| s.grow(0.5)).unwrap_err().code, ErrorCode::NoSelection);
        assert_eq!(svc.create_session("nope").unwrap_err().code, ErrorCode::NotFound);
    }

    #[test]
    fn grow_save_export_and_state() {
        let mut svc = SegService::new();
        svc.add_scene(tiny_scene());
        let id = svc.create_session("tiny").unwrap();
        let dir = tempfile::tempdir().unwrap();
        svc.with_session(&id, |s| {
            let left = hit_pixel(s, true);
            s.click(left)?;
            let comp = s.grow(0.9)?;
            assert!(comp.iter().all(|&p| p < 20));
            let seg = s.save_segment("left")?.clone();
            assert_eq!(seg.points, comp);
            assert!(s.save_segment("bad name").is_err());
            let files = s.export_segments(dir.path())?;
            assert_eq!(files.len(), 2);
            let ids = std::fs::read_to_string(dir.path().join("left.ids")).unwrap();
            assert_eq!(ids.lines().count(), comp.len());
            let field = crate::field::load_field(&dir.path().join("left.field"))?;
            assert_eq!(field.features().len(), comp.len() * 2);
            let d = s.discretize(0.9)?;
            assert!(d.component_count() >= 2);
            let path = dir.path().join("state.json");
            s.save_state(&path)?;
            Ok(())
        })
        .unwrap();
        let other = svc.create_session("tiny").unwrap();
        svc.with_session(&other, |s| {
            assert!(s.segments().is_empty());
            s.load_state(&dir.path().join("state.json"))?;
            assert_eq!(s.segments().len(), 1);
            assert_eq!(s.anchors().len(), 1);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn published_snapshots_reach_sessions_on_refresh() {
        let mut svc = SegService::new();
        svc.add_scene(tiny_scene());
        let id = svc.create_session("tiny").unwrap();
        let scene = svc.scene("tiny").unwrap().clone();
        let field = scene.snapshot().field.clone();
        assert_eq!(scene.publish(field).unwrap(), 2);
        svc.with_session(&id, |s| {
            assert_eq!(s.snapshot().version, 1);
            assert!(s.refresh());
            assert_eq!(s.snapshot().version, 2);
            assert!(!s.refresh());
            Ok(())
        })
        .unwrap();
    }
}
