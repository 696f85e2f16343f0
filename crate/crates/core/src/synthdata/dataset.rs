//! Dataset directory layout.
//!
//! ```text
//! manifest              "omnifield-dataset 1", then `key value` lines
//! spec.toml             scene recipe (synthetic datasets only)
//! cameras               one pose per line: fx fy cx cy width height r00..r22 tx ty tz
//! points                surface field checkpoint (positions, colors)
//! points.labels         u32 blob, object/part/subpart per point (optional)
//! queries               `view x y l1_ref l2_ref` per line (optional)
//! views/<k>/masks.bin   packed masks back to back
//! views/<k>/masks.idx   "masks 1 W H count", then `offset length provenance`
//! views/<k>/rgb.png     8-bit color image
//! views/<k>/labels.bin  u32 blob, object/part/subpart layers (optional)
//! views/<k>/hierrep     hierarchical representation
//! views/<k>/hierrep.meta
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use super::masksim::simulate_all;
use super::queries::{make_benchmark_queries, Query};
use super::scene::{HierPath, HierSceneSpec, LabelMaps, SynthScene};
use crate::error::{Error, Result};
use crate::field::{load_field, save_field, Camera, FieldModel, SurfaceField, Vec3};
use crate::hier2d::{deserialize_hierrep, serialize_hierrep, HierRep, HierRepMeta, MaskSet};
use crate::mask::Mask;
use crate::par;
use crate::util::{digest_hex, read_bytes, read_text, read_u32_blob, write_atomic, write_u32_blob};

pub const DATASET_VERSION: u32 = 1;
const LABELS_MAGIC: &[u8; 4] = b"OFLB";
const POINT_LABELS_MAGIC: &[u8; 4] = b"OFPL";

/// One training image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
    pub provenance: Vec<String>,
    /// `None` when the view has no masks.
    pub hierrep: Option<HierRep>,
    pub rgb: Vec<[f64; 3]>,
    pub labels: Option<LabelMaps>,
}

impl DatasetView {
    fn masks_bytes(&self) -> Vec<u8> {
        self.masks.iter().flat_map(|m| m.to_packed_bytes()).collect()
    }

    pub fn masks_digest(&self) -> String {
        digest_hex(&self.masks_bytes())
    }
}

/// Everything training and evaluation read from a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub cameras: Vec<Camera>,
    pub geometry: SurfaceField,
    pub paths: Option<Vec<HierPath>>,
    pub views: Vec<DatasetView>,
    pub queries: Vec<Query>,
    pub spec: Option<HierSceneSpec>,
}

/// Builds the hierarchical representation of a mask list, `None` when empty.
pub fn build_view_hierrep(width: usize, height: usize, masks: &[Mask]) -> Result<Option<HierRep>> {
    if masks.is_empty() {
        return Ok(None);
    }
    HierRep::build(&MaskSet::new(width, height, masks.to_vec())?).map(Some)
}

impl Dataset {
    /// Simulates masks, builds every view's hierarchy and samples queries.
    pub fn from_scene(scene: &SynthScene) -> Result<Self> {
        let sims = simulate_all(scene);
        let spec = &scene.spec;
        let reps = par::map_slice(&sims, |s| build_view_hierrep(spec.width, spec.height, &s.masks));
        let mut views = Vec::with_capacity(sims.len());
        for (k, (sim, rep)) in sims.into_iter().zip(reps).enumerate() {
            views.push(DatasetView {
                width: spec.width,
                height: spec.height,
                masks: sim.masks,
                provenance: sim.provenance,
                hierrep: rep?,
                rgb: scene.rgb[k].clone(),
                labels: Some(scene.labels[k].clone()),
            });
        }
        Ok(Self {
            name: spec.name.clone(),
            seed: spec.seed,
            cameras: scene.cameras.clone(),
            geometry: scene.geometry.clone(),
            paths: Some(scene.paths.clone()),
            views,
            queries: make_benchmark_queries(scene, spec.queries_per_view, spec.min_query_area),
            spec: Some(spec.clone()),
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.geometry.bounds();
        (hi - lo).norm()
    }

    pub fn labels(&self, view: usize) -> Result<&LabelMaps> {
        self.views
            .get(view)
            .and_then(|v| v.labels.as_ref())
            .ok_or_else(|| Error::invalid(format!("view {view} has no ground-truth labels")))
    }
}

fn view_dir(root: &Path, k: usize) -> PathBuf {
    root.join("views").join(k.to_string())
}

fn camera_line(c: &Camera) -> String {
    let mut s = format!("{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
    for i in 0..3 {
        for j in 0..3 {
            let _ = write!(s, " {}", c.rotation[(i, j)]);
        }
    }
    for v in c.translation.iter() {
        let _ = write!(s, " {v}");
    }
    s
}

fn parse_camera(line: &str) -> Result<Camera> {
    let bad = || Error::format("cameras", format!("malformed pose line {line:?}"));
    let c: Vec<&str> = line.split_whitespace().collect();
    if c.len() != 18 {
        return Err(bad());
    }
    let f = |i: usize| c[i].parse::<f64>().map_err(|_| bad());
    let u = |i: usize| c[i].parse::<usize>().map_err(|_| bad());
    let r = Matrix3::from_fn(|i, j| c[6 + 3 * i + j].parse::<f64>().unwrap_or(f64::NAN));
    Camera::new(f(0)?, f(1)?, f(2)?, f(3)?, r, Vec3::new(f(15)?, f(16)?, f(17)?), u(4)?, u(5)?)
}

fn labels_blob(l: &LabelMaps) -> Vec<u8> {
    let mut v = vec![l.width as u32, l.height as u32];
    v.extend_from_slice(&l.object);
    v.extend_from_slice(&l.part);
    v.extend_from_slice(&l.subpart);
    write_u32_blob(LABELS_MAGIC, &v)
}

fn parse_labels(bytes: &[u8]) -> Result<LabelMaps> {
    let v = read_u32_blob(bytes, LABELS_MAGIC, "label maps")?;
    let (w, h) = match v.as_slice() {
        [w, h, ..] => (*w as usize, *h as usize),
        _ => return Err(Error::format("label maps", "missing size")),
    };
    let n = w * h;
    if v.len() != 2 + 3 * n {
        return Err(Error::format("label maps", "size does not match payload"));
    }
    Ok(LabelMaps {
        width: w,
        height: h,
        object: v[2..2 + n].to_vec(),
        part: v[2 + n..2 + 2 * n].to_vec(),
        subpart: v[2 + 2 * n..].to_vec(),
    })
}

fn png_bytes(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Vec<u8>> {
    let raw: Vec<u8> = rgb
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::invalid("image buffer does not match its size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Encodes an RGB image in `[0, 1]` as PNG.
pub fn encode_png(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Vec<u8>> {
    png_bytes(width, height, rgb)
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let img = image::load_from_memory_with_format(&read_bytes(path)?, image::ImageFormat::Png)
        .map_err(|e| Error::format("rgb image", e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    Ok((w, h, px))
}

fn write_masks(dir: &Path, view: &DatasetView) -> Result<()> {
    let mut idx = format!("masks 1 {} {} {}\n", view.width, view.height, view.masks.len());
    let mut offset = 0;
    for (m, p) in view.masks.iter().zip(&view.provenance) {
        let len = m.to_packed_bytes().len();
        let _ = writeln!(idx, "{offset} {len} {p}");
        offset += len;
    }
    write_atomic(&dir.join("masks.bin"), &view.masks_bytes())?;
    write_atomic(&dir.join("masks.idx"), idx.as_bytes())
}

fn read_masks(dir: &Path) -> Result<(usize, usize, Vec<Mask>, Vec<String>)> {
    let idx = read_text(&dir.join("masks.idx"))?;
    let bin = read_bytes(&dir.join("masks.bin"))?;
    let bad = |d: String| Error::format("mask index", d);
    let mut lines = idx.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if head.len() != 5 || head[0] != "masks" || head[1] != "1" {
        return Err(bad(format!("bad header in {}", dir.display())));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
    let (w, h, count) = (num(head[2])?, num(head[3])?, num(head[4])?);
    let mut masks = Vec::with_capacity(count);
    let mut prov = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let c: Vec<&str> = line.split_whitespace().collect();
        if c.len() < 2 {
            return Err(bad(format!("bad entry {line:?}")));
        }
        let (off, len) = (num(c[0])?, num(c[1])?);
        let bytes = bin
            .get(off..off + len)
            .ok_or_else(|| bad(format!("entry {line:?} runs past masks.bin")))?;
        masks.push(Mask::from_packed_bytes(w, h, bytes)?);
        prov.push(c.get(2).copied().unwrap_or("unknown").to_string());
    }
    if masks.len() != count {
        return Err(bad(format!("expected {count} masks, found {}", masks.len())));
    }
    Ok((w, h, masks, prov))
}

fn hierrep_meta(k: usize, view: &DatasetView) -> HierRepMeta {
    HierRepMeta {
        source_image: format!("views/{k}/rgb.png"),
        masks_digest: view.masks_digest(),
        mask_provenance: view.provenance.clone(),
    }
}

/// Writes the hierarchy files of view `k` (or removes them for a maskless view).
fn write_hierrep(dir: &Path, k: usize, view: &DatasetView) -> Result<()> {
    match &view.hierrep {
        Some(rep) => {
            write_atomic(&dir.join("hierrep"), &serialize_hierrep(rep))?;
            write_atomic(&dir.join("hierrep.meta"), hierrep_meta(k, view).to_text().as_bytes())
        }
        None => Ok(()),
    }
}

/// Keys of the manifest, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub views: usize,
    pub points: usize,
    pub has_labels: bool,
    pub queries: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "omnifield-dataset {}\nname {}\nseed {}\nviews {}\npoints {}\nlabels {}\nqueries {}\n",
            self.version,
            self.name,
            self.seed,
            self.views,
            self.points,
            if self.has_labels { "yes" } else { "no" },
            self.queries
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("manifest", d);
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("omnifield-dataset "))
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("missing version line".into()))?;
        if version != DATASET_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut m = Manifest {
            version,
            name: String::new(),
            seed: 0,
            views: 0,
            points: 0,
            has_labels: false,
            queries: 0,
        };
        for line in lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let num = || v.trim().parse::<usize>().map_err(|_| bad(format!("bad value in {line:?}")));
            match k {
                "name" => m.name = v.trim().to_string(),
                "seed" => m.seed = v.trim().parse().map_err(|_| bad(format!("bad seed {v:?}")))?,
                "views" => m.views = num()?,
                "points" => m.points = num()?,
                "labels" => m.has_labels = v.trim() == "yes",
                "queries" => m.queries = num()?,
                _ => {}
            }
        }
        Ok(m)
    }
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: DATASET_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            views: self.views.len(),
            points: self.geometry.len(),
            has_labels: self.paths.is_some(),
            queries: self.queries.len(),
        }
    }

    /// Writes the dataset under `root`. Output is a pure function of the
    /// dataset contents.
    pub fn write(&self, root: &Path) -> Result<Manifest> {
        let manifest = self.manifest();
        if let Some(spec) = &self.spec {
            write_atomic(&root.join("spec.toml"), spec.to_toml().as_bytes())?;
        }
        let cams: String = self.cameras.iter().map(|c| camera_line(c) + "\n").collect();
        write_atomic(&root.join("cameras"), cams.as_bytes())?;
        save_field(&FieldModel::Surface(self.geometry.clone()), &root.join("points"))?;
        if let Some(paths) = &self.paths {
            let flat: Vec<u32> = paths.iter().flat_map(|p| [p.object, p.part, p.subpart]).collect();
            write_atomic(&root.join("points.labels"), &write_u32_blob(POINT_LABELS_MAGIC, &flat))?;
        }
        let mut q = String::from("# view x y l1 l2\n");
        for query in &self.queries {
            q.push_str(&query.to_line());
            q.push('\n');
        }
        write_atomic(&root.join("queries"), q.as_bytes())?;
        for (k, view) in self.views.iter().enumerate() {
            let dir = view_dir(root, k);
            write_masks(&dir, view)?;
            write_atomic(&dir.join("rgb.png"), &png_bytes(view.width, view.height, &view.rgb)?)?;
            if let Some(l) = &view.labels {
                write_atomic(&dir.join("labels.bin"), &labels_blob(l))?;
            }
            write_hierrep(&dir, k, view)?;
        }
        write_atomic(&root.join("manifest"), manifest.to_text().as_bytes())?;
        Ok(manifest)
    }
}

/// Generates the dataset of `scene` and writes it under `root`.
pub fn export_dataset(scene: &SynthScene, root: &Path) -> Result<Manifest> {
    Dataset::from_scene(scene)?.write(root)
}

/// Outcome of [`build_hierreps`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HierRepReport {
    pub built: Vec<usize>,
    pub up_to_date: Vec<usize>,
    pub empty: Vec<usize>,
}

fn hierrep_is_current(dir: &Path, digest: &str) -> bool {
    let Ok(text) = read_text(&dir.join("hierrep.meta")) else {
        return false;
    };
    dir.join("hierrep").is_file() && HierRepMeta::from_text(&text).is_ok_and(|m| m.masks_digest == digest)
}

/// Builds the hierarchy files of every view whose files are missing or were
/// made from different masks. Existing up-to-date files are left untouched.
pub fn build_hierreps(root: &Path, force: bool) -> Result<HierRepReport> {
    let manifest = Manifest::from_text(&read_text(&root.join("manifest"))?)?;
    let mut report = HierRepReport::default();
    for k in 0..manifest.views {
        let dir = view_dir(root, k);
        let (w, h, masks, provenance) = read_masks(&dir)?;
        let mut view = DatasetView {
            width: w,
            height: h,
            masks,
            provenance,
            hierrep: None,
            rgb: Vec::new(),
            labels: None,
        };
        if view.masks.is_empty() {
            report.empty.push(k);
            continue;
        }
        if !force && hierrep_is_current(&dir, &view.masks_digest()) {
            report.up_to_date.push(k);
            continue;
        }
        view.hierrep = build_view_hierrep(w, h, &view.masks)?;
        write_hierrep(&dir, k, &view)?;
        report.built.push(k);
    }
    Ok(report)
}

/// Reads a dataset directory. Hierarchies that are missing or stale are
/// rebuilt in memory with a warning.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = Manifest::from_text(&read_text(&root.join("manifest"))?)?;
    let cameras = read_text(&root.join("cameras"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_camera)
        .collect::<Result<Vec<Camera>>>()?;
    if cameras.len() != manifest.views {
        return Err(Error::format(
            "cameras",
            format!("{} poses for {} views", cameras.len(), manifest.views),
        ));
    }
    let geometry = match load_field(&root.join("points"))? {
        FieldModel::Surface(f) => f,
        FieldModel::Volume(_) => return Err(Error::format("points", "expected a surface point set")),
    };
    let label_path = root.join("points.labels");
    let paths = if label_path.is_file() {
        let flat = read_u32_blob(&read_bytes(&label_path)?, POINT_LABELS_MAGIC, "point labels")?;
        if flat.len() != 3 * geometry.len() {
            return Err(Error::format("point labels", "count does not match points"));
        }
        Some(
            flat.chunks_exact(3)
                .map(|c| HierPath {
                    object: c[0],
                    part: c[1],
                    subpart: c[2],
                })
                .collect(),
        )
    } else {
        None
    };
    let spec = match read_text(&root.join("spec.toml")) {
        Ok(t) => Some(HierSceneSpec::from_toml(&t)?),
        Err(e) if e.is_not_found() => None,
        Err(e) => return Err(e),
    };
    let queries = match read_text(&root.join("queries")) {
        Ok(t) => t
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(Query::parse_line)
            .collect::<Result<Vec<Query>>>()?,
        Err(e) if e.is_not_found() => Vec::new(),
        Err(e) => return Err(e),
    };
    let views = par::map_range(manifest.views, |k| -> Result<DatasetView> {
        let dir = view_dir(root, k);
        let (w, h, masks, provenance) = read_masks(&dir)?;
        let cam = &cameras[k];
        if (w, h) != (cam.width, cam.height) {
            return Err(Error::format("mask index", format!("view {k} size differs from its camera")));
        }
        let rgb = match read_png(&dir.join("rgb.png")) {
            Ok((pw, ph, px)) if (pw, ph) == (w, h) => px,
            Ok(_) => return Err(Error::format("rgb image", format!("view {k} size differs from its camera"))),
            Err(e) if e.is_not_found() => vec![[0.0; 3]; w * h],
            Err(e) => return Err(e),
        };
        let labels = match read_bytes(&dir.join("labels.bin")) {
            Ok(b) => Some(parse_labels(&b)?),
            Err(e) if e.is_not_found() => None,
            Err(e) => return Err(e),
        };
        let mut view = DatasetView {
            width: w,
            height: h,
            masks,
            provenance,
            hierrep: None,
            rgb,
            labels,
        };
        if !view.masks.is_empty() {
            view.hierrep = if hierrep_is_current(&dir, &view.masks_digest()) {
                Some(deserialize_hierrep(&read_bytes(&dir.join("hierrep"))?)?)
            } else {
                log::warn!("view {k}: hierarchy file missing or stale, rebuilding in memory");
                build_view_hierrep(w, h, &view.masks)?
            };
        }
        Ok(view)
    })
    .into_iter()
    .collect::<Result<Vec<DatasetView>>>()?;
    for q in &queries {
        if q.view >= views.len() || q.x >= views[q.view].width || q.y >= views[q.view].height {
            return Err(Error::format("queries", format!("query {:?} is out of range", q.to_line())));
        }
    }
    Ok(Dataset {
        name: manifest.name,
        seed: manifest.seed,
        cameras,
        geometry,
        paths,
        views,
        queries,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::scene::{generate_scene, HierSceneSpec};

    fn tiny() -> SynthScene {
        generate_scene(&HierSceneSpec {
            objects: 2,
            points_per_part: 200,
            views: 2,
            width: 20,
            height: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn camera_lines_round_trip_exactly() {
        let sc = tiny();
        for c in &sc.cameras {
            assert_eq!(&parse_camera(&camera_line(c)).unwrap(), c);
        }
        assert!(parse_camera("1 2 3").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            version: 1,
            name: "a".into(),
            seed: 3,
            views: 2,
            points: 10,
            has_labels: true,
            queries: 4,
        };
        assert_eq!(Manifest::from_text(&m.to_text()).unwrap(), m);
        assert!(Manifest::from_text("omnifield-dataset 9\n").is_err());
    }

    #[test]
    fn label_blob_round_trip() {
        let sc = tiny();
        let l = &sc.labels[0];
        assert_eq!(&parse_labels(&labels_blob(l)).unwrap(), l);
    }
}
