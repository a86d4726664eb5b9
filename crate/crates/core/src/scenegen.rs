//! Procedural scenes with exact edge and depth truth, plus PGM frame I/O.
//!
//! Objects are rectangles and disks with constant velocity, rendered
//! without anti-aliasing: a pixel belongs to a shape when its center lies
//! inside it. Nearer objects (smaller depth) occlude farther ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cdt::{self, StoredTensor};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::{derive_stream, RandomStream};
use crate::tensor::Tensor;
use crate::types::VideoCube;

pub const BACKGROUND: f32 = 0.05;
pub const MIN_INTENSITY: f64 = 0.2;
pub const MAX_INTENSITY: f64 = 1.0;
/// Smallest intensity gap between any two objects and the background.
pub const MIN_CONTRAST: f64 = 0.1;
pub const MAX_SPEED: f64 = 3.0;
pub const DEPTH_NEAR: f64 = 1.0;
pub const DEPTH_FAR: f64 = 80.0;
const MAX_OBJECTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rectangle" | "rect" => Ok(Self::Rectangle),
            "disk" => Ok(Self::Disk),
            other => Err(Error::Config(format!("unknown shape {other:?}"))),
        }
    }
}

impl ShapeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rectangle => "rectangle",
            Self::Disk => "disk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Side length (rectangles) or diameter (disks), in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    /// Number of scenes in a generated dataset.
    pub count: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            t: 8,
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            min_size: 6.0,
            max_size: 16.0,
            max_speed: 1.0,
            count: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object count range {}..={} invalid (at most {MAX_OBJECTS})",
                self.min_objects, self.max_objects
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("no shapes enabled".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config(format!(
                "size range {}..{} invalid",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "objects up to {} px do not fit a {}x{} frame",
                self.max_size, self.height, self.width
            )));
        }
        if !(0.0..=MAX_SPEED).contains(&self.max_speed) {
            return Err(Error::Config(format!(
                "max_speed {} outside [0, {MAX_SPEED}]",
                self.max_speed
            )));
        }
        Ok(())
    }

    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take_parsed(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(t);
        field!(height);
        field!(width);
        field!(min_objects);
        field!(max_objects);
        field!(min_size);
        field!(max_size);
        field!(max_speed);
        field!(count);
        field!(seed);
        if let Some(list) = kv.take("shapes") {
            cfg.shapes = list.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "t = {}", self.t).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "min_objects = {}", self.min_objects).unwrap();
        writeln!(s, "max_objects = {}", self.max_objects).unwrap();
        let shapes: Vec<_> = self.shapes.iter().map(ShapeKind::as_str).collect();
        writeln!(s, "shapes = {}", shapes.join(",")).unwrap();
        writeln!(s, "min_size = {}", self.min_size).unwrap();
        writeln!(s, "max_size = {}", self.max_size).unwrap();
        writeln!(s, "max_speed = {}", self.max_speed).unwrap();
        writeln!(s, "count = {}", self.count).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    /// Center at frame 0, `(x, y)` in pixels from the top-left corner.
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    /// Width and height; a disk uses `size.0` as its diameter.
    pub size: (f64, f64),
    pub intensity: f32,
    pub depth: f32,
}

impl SceneObject {
    fn covers(&self, t: usize, i: usize, j: usize) -> bool {
        let cx = self.center.0 + self.velocity.0 * t as f64;
        let cy = self.center.1 + self.velocity.1 * t as f64;
        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
        match self.shape {
            ShapeKind::Rectangle => {
                let (hw, hh) = (self.size.0 / 2.0, self.size.1 / 2.0);
                px >= cx - hw && px < cx + hw && py >= cy - hh && py < cy + hh
            }
            ShapeKind::Disk => {
                let r = self.size.0 / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
        }
    }
}

/// A rendered scene with its ground truth, all `(T, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub video: VideoCube,
    pub edges: Tensor<u8>,
    pub depth: Tensor<f32>,
    pub valid: Tensor<u8>,
}

impl Scene {
    /// The first `t` frames of every field.
    pub fn prefix(&self, t: usize) -> Result<Self> {
        let cut_u8 = |x: &Tensor<u8>| {
            let [_, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            Tensor::from_vec(&[t, h, w], x.data()[..t * h * w].to_vec())
        };
        let video = self.video.prefix(t)?;
        let [_, h, w] = video.shape();
        Ok(Self {
            edges: cut_u8(&self.edges)?,
            depth: Tensor::from_vec(&[t, h, w], self.depth.data()[..t * h * w].to_vec())?,
            valid: cut_u8(&self.valid)?,
            video,
        })
    }
}

/// Render objects into a scene. Objects may be given in any order.
pub fn render(objects: &[SceneObject], t: usize, h: usize, w: usize) -> Result<Scene> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("cannot render a {t}x{h}x{w} scene")));
    }
    // back to front: draw far objects first
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth).then(a.cmp(&b)));

    let n = t * h * w;
    let mut label = vec![usize::MAX; n];
    for f in 0..t {
        for i in 0..h {
            for j in 0..w {
                for &o in &order {
                    if objects[o].covers(f, i, j) {
                        label[(f * h + i) * w + j] = o;
                    }
                }
            }
        }
    }
    let mut video = vec![BACKGROUND; n];
    let mut depth = vec![DEPTH_FAR as f32; n];
    let mut valid = vec![0u8; n];
    let mut edges = vec![0u8; n];
    for idx in 0..n {
        if let Some(o) = objects.get(label[idx]) {
            video[idx] = o.intensity;
            depth[idx] = o.depth;
            valid[idx] = 1;
        }
    }
    for f in 0..t {
        for i in 0..h {
            for j in 0..w {
                let idx = (f * h + i) * w + j;
                let Some(obj) = objects.get(label[idx]) else { continue };
                let mut neighbors = [None; 4];
                if i > 0 {
                    neighbors[0] = Some(idx - w);
                }
                if i + 1 < h {
                    neighbors[1] = Some(idx + w);
                }
                if j > 0 {
                    neighbors[2] = Some(idx - 1);
                }
                if j + 1 < w {
                    neighbors[3] = Some(idx + 1);
                }
                let boundary = neighbors.iter().flatten().any(|&q| {
                    label[q] != label[idx] && objects.get(label[q]).map_or(true, |other| other.depth > obj.depth)
                });
                edges[idx] = u8::from(boundary);
            }
        }
    }
    Ok(Scene {
        video: VideoCube::from_vec(t, h, w, video)?,
        edges: Tensor::from_vec(&[t, h, w], edges)?,
        depth: Tensor::from_vec(&[t, h, w], depth)?,
        valid: Tensor::from_vec(&[t, h, w], valid)?,
    })
}

fn draw_intensity(taken: &[f32], stream: &mut RandomStream) -> f32 {
    loop {
        let v = stream.uniform_range(MIN_INTENSITY, MAX_INTENSITY) as f32;
        let clear = |other: f32| ((v - other).abs() as f64) >= MIN_CONTRAST;
        if clear(BACKGROUND) && taken.iter().all(|&o| clear(o)) {
            return v;
        }
    }
}

/// Draw the objects of one scene.
pub fn gen_objects(cfg: &SceneConfig, stream: &mut RandomStream) -> Result<Vec<SceneObject>> {
    cfg.validate()?;
    let span = (cfg.max_objects - cfg.min_objects + 1) as u64;
    let count = cfg.min_objects + stream.below(span) as usize;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = cfg.shapes[stream.below(cfg.shapes.len() as u64) as usize];
        let mut side = || stream.uniform_range(cfg.min_size, cfg.max_size);
        let size = match shape {
            ShapeKind::Rectangle => (side(), side()),
            ShapeKind::Disk => {
                let d = side();
                (d, d)
            }
        };
        let center = (
            stream.uniform_range(0.0, cfg.width as f64),
            stream.uniform_range(0.0, cfg.height as f64),
        );
        let angle = stream.uniform_range(0.0, std::f64::consts::TAU);
        let speed = stream.uniform_range(0.0, cfg.max_speed);
        let taken: Vec<f32> = objects.iter().map(|o| o.intensity).collect();
        let intensity = draw_intensity(&taken, stream);
        let depth = stream.uniform_range(DEPTH_NEAR, DEPTH_FAR) as f32;
        objects.push(SceneObject {
            shape,
            center,
            velocity: (speed * angle.cos(), speed * angle.sin()),
            size,
            intensity,
            depth,
        });
    }
    Ok(objects)
}

pub fn gen_scene(cfg: &SceneConfig, stream: &mut RandomStream) -> Result<Scene> {
    let objects = gen_objects(cfg, stream)?;
    render(&objects, cfg.t, cfg.height, cfg.width)
}

/// A set of scenes sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub config: SceneConfig,
}

const VIDEO_FILE: &str = "video.cdt";
const EDGES_FILE: &str = "edges.cdt";
const DEPTH_FILE: &str = "depth.cdt";
const VALID_FILE: &str = "valid.cdt";
const MANIFEST_FILE: &str = "manifest.txt";

impl Dataset {
    /// Scene `i` is drawn from its own stream, so datasets of different
    /// sizes with one seed share their leading scenes.
    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let scenes = (0..cfg.count)
            .map(|i| gen_scene(cfg, &mut derive_stream(cfg.seed, &format!("scene/{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            scenes,
            config: cfg.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    fn stack<T: Copy>(&self, field: impl Fn(&Scene) -> &[T]) -> Result<Tensor<T>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(self.len() * c.t * c.height * c.width);
        for s in &self.scenes {
            data.extend_from_slice(field(s));
        }
        Tensor::from_vec(&[self.len(), c.t, c.height, c.width], data)
    }

    fn video_stored(&self) -> Result<StoredTensor> {
        Ok(StoredTensor::Real32(self.stack(|s| s.video.tensor().data())?))
    }

    /// Digest of the serialized video tensor.
    pub fn digest(&self) -> Result<u64> {
        Ok(cdt::tensor_digest(&self.video_stored()?))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (VIDEO_FILE, self.video_stored()?),
            (EDGES_FILE, StoredTensor::Uint8(self.stack(|s| s.edges.data())?)),
            (DEPTH_FILE, StoredTensor::Real32(self.stack(|s| s.depth.data())?)),
            (VALID_FILE, StoredTensor::Uint8(self.stack(|s| s.valid.data())?)),
        ];
        let mut paths = Vec::new();
        for (name, tensor) in files {
            let path = dir.join(name);
            cdt::write(&path, &tensor)?;
            paths.push(path);
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.config.to_text()).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
        Ok(paths)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let config = SceneConfig::from_text(&text)?;
        let video = cdt::read(dir.join(VIDEO_FILE))?.into_real32()?;
        let edges = cdt::read(dir.join(EDGES_FILE))?.into_uint8()?;
        let depth = cdt::read(dir.join(DEPTH_FILE))?.into_real32()?;
        let valid = cdt::read(dir.join(VALID_FILE))?.into_uint8()?;
        let expect = [config.count, config.t, config.height, config.width];
        for (name, shape) in [
            (VIDEO_FILE, video.shape()),
            (EDGES_FILE, edges.shape()),
            (DEPTH_FILE, depth.shape()),
            (VALID_FILE, valid.shape()),
        ] {
            if shape != expect {
                return Err(Error::Shape(format!("{name} is {shape:?}, manifest says {expect:?}")));
            }
        }
        let frame = config.t * config.height * config.width;
        let dims = [config.t, config.height, config.width];
        let scenes = (0..config.count)
            .map(|i| {
                let r = i * frame..(i + 1) * frame;
                Ok(Scene {
                    video: VideoCube::new(Tensor::from_vec(&dims, video.data()[r.clone()].to_vec())?)?,
                    edges: Tensor::from_vec(&dims, edges.data()[r.clone()].to_vec())?,
                    depth: Tensor::from_vec(&dims, depth.data()[r.clone()].to_vec())?,
                    valid: Tensor::from_vec(&dims, valid.data()[r].to_vec())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scenes, config })
    }
}

/// A decoded binary greymap.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (magic P5)".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} outside 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if bytes.len() < end {
        return Err(format!(
            "raster has {} of {} bytes",
            bytes.len().saturating_sub(start),
            width * height
        ));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: bytes[start..end].to_vec(),
    })
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load every `.pgm` file of `dir`, in lexicographic order, as one frame.
pub fn ingest_frames(dir: impl AsRef<Path>) -> Result<VideoCube> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pgm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if path.is_file() && is_pgm {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest {
            file: dir.to_path_buf(),
            msg: "no .pgm frames found".into(),
        });
    }
    let mut dims = None;
    let mut data = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        let img = parse_pgm(&bytes).map_err(|msg| Error::Ingest {
            file: file.clone(),
            msg,
        })?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::Ingest {
                    file: file.clone(),
                    msg: format!(
                        "frame is {}x{}, earlier frames are {}x{}",
                        img.height, img.width, d.0, d.1
                    ),
                })
            }
            Some(_) => {}
        }
        let scale = 1.0 / img.maxval as f32;
        data.extend(img.pixels.iter().map(|&p| (p as f32 * scale).min(1.0)));
    }
    let (h, w) = dims.unwrap();
    VideoCube::from_vec(files.len(), h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, side: f64, vx: f64) -> SceneObject {
        SceneObject {
            shape: ShapeKind::Rectangle,
            center: (x, y),
            velocity: (vx, 0.0),
            size: (side, side),
            intensity: 0.8,
            depth: 10.0,
        }
    }

    #[test]
    fn static_square_has_twelve_border_pixels() {
        let s = render(&[square(6.0, 6.0, 4.0, 0.0)], 2, 12, 12).unwrap();
        for f in 0..2 {
            assert_eq!(s.edges.outer(f).iter().map(|&e| e as usize).sum::<usize>(), 12);
            assert_eq!(s.valid.outer(f).iter().map(|&e| e as usize).sum::<usize>(), 16);
        }
    }

    #[test]
    fn empty_scene() {
        let s = render(&[], 3, 5, 5).unwrap();
        assert!(s.edges.data().iter().all(|&e| e == 0));
        assert!(s.valid.data().iter().all(|&v| v == 0));
        assert!(s.video.tensor().data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn moving_square_translates_edges() {
        let (h, w) = (10, 16);
        let s = render(&[square(3.0, 5.0, 4.0, 1.0)], 6, h, w).unwrap();
        let f0 = s.edges.outer(0);
        for t in 1..6 {
            let ft = s.edges.outer(t);
            for i in 0..h {
                for j in 0..w {
                    let src = if j >= t { f0[i * w + j - t] } else { 0 };
                    assert_eq!(ft[i * w + j], src, "t={t} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn nearer_object_occludes() {
        let mut far = square(5.0, 5.0, 6.0, 0.0);
        far.depth = 50.0;
        far.intensity = 0.3;
        let near = square(8.0, 5.0, 4.0, 0.0);
        for objs in [vec![far.clone(), near.clone()], vec![near.clone(), far.clone()]] {
            let s = render(&objs, 1, 10, 12).unwrap();
            assert_eq!(s.video.frame(0)[5 * 12 + 7], 0.8);
            assert_eq!(s.depth.data()[5 * 12 + 7], 10.0);
            // far object pixel touching the near one is not an edge of the far object
            assert_eq!(s.edges.data()[5 * 12 + 5], 0);
            assert_eq!(s.edges.data()[5 * 12 + 6], 1);
        }
    }

    #[test]
    fn random_scenes_satisfy_invariants() {
        let cfg = SceneConfig {
            max_objects: 6,
            max_speed: 2.0,
            ..SceneConfig::default()
        };
        for k in 0..100 {
            let s = gen_scene(&cfg, &mut derive_stream(k, "scene-test")).unwrap();
            let [t, h, w] = s.video.shape();
            let v = s.video.tensor().data();
            for f in 0..t {
                for i in 0..h {
                    for j in 0..w {
                        let idx = (f * h + i) * w + j;
                        let d = s.depth.data()[idx];
                        assert!((1.0..=80.0).contains(&d));
                        if s.valid.data()[idx] == 1 {
                            assert!(d > 0.0);
                        }
                        if s.edges.data()[idx] == 0 {
                            continue;
                        }
                        let mut jump = 0.0f32;
                        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                            let (ii, jj) = (i as i64 + di, j as i64 + dj);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                let q = (f * h + ii as usize) * w + jj as usize;
                                jump = jump.max((v[idx] - v[q]).abs());
                            }
                        }
                        assert!(jump as f64 >= MIN_CONTRAST - 1e-6, "scene {k} pixel {idx}");
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_objects_rejected() {
        let cfg = SceneConfig {
            max_size: 40.0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            gen_scene(&cfg, &mut derive_stream(0, "x")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SceneConfig {
            count: 3,
            seed: 4,
            ..SceneConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest().unwrap(), ds.digest().unwrap());
        let again = Dataset::generate(&cfg).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn pgm_ingest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"P5\n# comment\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        let v = ingest_frames(dir.path()).unwrap();
        assert_eq!(v.shape(), [1, 2, 2]);
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in v.frame(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        write_pgm(dir.path().join("b.pgm"), 3, 1, &[1, 2, 3]).unwrap();
        assert!(matches!(ingest_frames(dir.path()), Err(Error::Ingest { .. })));
    }

    #[test]
    fn pgm_errors() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_frames(empty.path()), Err(Error::Ingest { .. })));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..=255).collect();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 16, 16, &pixels).unwrap();
        let img = parse_pgm(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(img.pixels, pixels);
    }
}
