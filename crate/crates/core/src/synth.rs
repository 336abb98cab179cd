//! Deterministic misaligned RGB/IR scenes with exact masks and shifts.
//!
//! IR is the reference frame. Every object is drawn once in IR at its
//! placed box and once in RGB displaced by `global_shift` plus a per-object
//! jitter, so the recorded shift is exactly RGB position minus IR position.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sam::MaskSet;
use crate::tensor::params::name_seed;
use crate::tensor::{ten1, Tensor};
use crate::util::checksum;

/// Spatial reduction of the feature backbone; image sizes must divide by it.
pub const DOWNSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 200;
const PLACEMENT_RESTARTS: usize = 50;
pub const MANIFEST_FILE: &str = "manifest.txt";
const SAMPLE_FILES: [&str; 5] = [
    "rgb.ten",
    "ir.ten",
    "masks_rgb.ten",
    "masks_ir.ten",
    "meta.txt",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_categories: usize,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Inclusive side length range in pixels.
    pub object_size: (usize, usize),
    /// `(dy, dx)` applied to every RGB object.
    pub global_shift: (i32, i32),
    /// Extra per-object shift drawn from `[-jitter, jitter]` on each axis.
    pub jitter: i32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_categories: 5,
            objects: (2, 3),
            object_size: (20, 28),
            global_shift: (0, 0),
            jitter: 0,
            noise_sigma: 0.03,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of {DOWNSAMPLE}",
                self.image_size
            ));
        }
        if self.n_categories == 0 {
            return bad("n_categories must be positive".into());
        }
        let (lo, hi) = self.objects;
        if lo > hi {
            return bad(format!("objects range {lo}..={hi} is empty"));
        }
        let (smin, smax) = self.object_size;
        if smin < 2 || smin > smax || smax > self.image_size {
            return bad(format!("object_size range {smin}..={smax} is invalid"));
        }
        if self.jitter < 0 {
            return bad("jitter must be non-negative".into());
        }
        let reach = self.max_displacement();
        if reach >= smin {
            return bad(format!(
                "shift magnitude {reach} (global + jitter) must stay below the minimum object size {smin}"
            ));
        }
        if 2 * reach + smax > self.image_size {
            return bad("objects cannot fit inside the image at this shift".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Largest per-axis displacement between an object's two renderings.
    pub fn max_displacement(&self) -> usize {
        let g = self
            .global_shift
            .0
            .unsigned_abs()
            .max(self.global_shift.1.unsigned_abs());
        (g + self.jitter as u32) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub category: usize,
    pub kind: ShapeKind,
    /// `[y0, x0, y1, x1)` in the IR frame.
    pub bbox: [usize; 4],
    /// RGB position minus IR position.
    pub shift: (i32, i32),
}

impl SceneObject {
    pub fn rgb_bbox(&self) -> [usize; 4] {
        let [y0, x0, y1, x1] = self.bbox;
        let (dy, dx) = self.shift;
        let m = |v: usize, d: i32| (v as i64 + d as i64) as usize;
        [m(y0, dy), m(x0, dx), m(y1, dy), m(x1, dx)]
    }

    /// Whether pixel `(y, x)` of a box with origin `(oy, ox)` is covered.
    fn covers(&self, oy: usize, ox: usize, y: usize, x: usize) -> bool {
        let [y0, x0, y1, x1] = self.bbox;
        let (h, w) = (y1 - y0, x1 - x0);
        if y < oy || x < ox || y >= oy + h || x >= ox + w {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let ry = h as f64 / 2.0;
                let rx = w as f64 / 2.0;
                let u = (y - oy) as f64 + 0.5 - ry;
                let v = (x - ox) as f64 + 0.5 - rx;
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1, H, W]` in `[0, 1]`.
    pub ir: Tensor<f32>,
    pub masks_rgb: MaskSet<f32>,
    pub masks_ir: MaskSet<f32>,
    pub objects: Vec<SceneObject>,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.ir.shape()[1]
    }

    pub fn n_categories(&self) -> usize {
        self.masks_ir.categories()
    }
}

/// IR intensity of category `c`; categories are spread evenly over a band
/// well above the background level.
fn ir_level(c: usize, n: usize) -> f64 {
    if n == 1 {
        0.7
    } else {
        0.45 + 0.3 * c as f64 / (n - 1) as f64
    }
}

/// Category-specific IR texture in `[-1, 1]`, in object-local coordinates:
/// stripes at four orientations, then a flat fill; later categories repeat
/// the cycle with a doubled stripe width.
fn ir_texture(c: usize, y: usize, x: usize) -> f64 {
    let p = 2 << (c / 5);
    let on = match c % 5 {
        0 => (y / p) % 2 == 0,
        1 => (x / p) % 2 == 0,
        2 => ((y + x) / p) % 2 == 0,
        3 => ((y + 4 * p - x % (4 * p)) / p) % 2 == 0,
        _ => return 0.0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

const IR_BACKGROUND: f64 = 0.12;
const IR_TEXTURE_AMPLITUDE: f64 = 0.4;
const RGB_BACKGROUND: f64 = 0.5;
const RGB_CONTRAST: f64 = 0.2;

/// Dim colour offset for category `c`: a deterministic direction in RGB.
fn rgb_tint(c: usize) -> [f64; 3] {
    const DIRS: [[f64; 3]; 8] = [
        [1.0, -0.5, -0.5],
        [-0.5, 1.0, -0.5],
        [-0.5, -0.5, 1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, -1.0, -1.0],
    ];
    DIRS[c % DIRS.len()]
}

fn overlaps(a: [usize; 4], b: [usize; 4]) -> bool {
    // one pixel of clearance between objects
    a[0] < b[2] + 1 && b[0] < a[2] + 1 && a[1] < b[3] + 1 && b[1] < a[3] + 1
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    for _ in 0..PLACEMENT_RESTARTS {
        if let Some(placed) = try_place(cfg, count, rng) {
            return Ok(placed);
        }
    }
    Err(Error::Generation(format!(
        "could not place {count} objects without overlap in {PLACEMENT_RESTARTS} layouts; \
         use fewer or smaller objects"
    )))
}

/// One greedy layout attempt; `None` when some object finds no free spot.
fn try_place(cfg: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<SceneObject>> {
    let size = cfg.image_size as i64;
    let mut placed: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                return None;
            }
            let h = rng.random_range(cfg.object_size.0..=cfg.object_size.1) as i64;
            let w = rng.random_range(cfg.object_size.0..=cfg.object_size.1) as i64;
            let j = cfg.jitter;
            let shift = (
                cfg.global_shift.0 + rng.random_range(-j..=j),
                cfg.global_shift.1 + rng.random_range(-j..=j),
            );
            let (dy, dx) = (shift.0 as i64, shift.1 as i64);
            // both renderings must lie fully inside the image
            let (ylo, yhi) = (0.max(-dy), (size - h).min(size - h - dy));
            let (xlo, xhi) = (0.max(-dx), (size - w).min(size - w - dx));
            if ylo > yhi || xlo > xhi {
                continue;
            }
            let y0 = rng.random_range(ylo..=yhi);
            let x0 = rng.random_range(xlo..=xhi);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Ellipse
            };
            let category = rng.random_range(0..cfg.n_categories);
            let obj = SceneObject {
                category,
                kind,
                bbox: [
                    y0 as usize,
                    x0 as usize,
                    (y0 + h) as usize,
                    (x0 + w) as usize,
                ],
                shift,
            };
            let clear = placed
                .iter()
                .all(|o| !overlaps(o.bbox, obj.bbox) && !overlaps(o.rgb_bbox(), obj.rgb_bbox()));
            if clear {
                placed.push(obj);
                break;
            }
        }
    }
    Some(placed)
}

/// Renders scene `index` of the stream defined by `cfg`. Pure in
/// `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, &format!("scene/{index}")));
    let objects = place_objects(cfg, &mut rng)?;
    let (n, s) = (cfg.n_categories, cfg.image_size);
    let plane = s * s;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut ir = vec![0f64; plane];
    let mut rgb = vec![0f64; 3 * plane];
    let mut m_ir = vec![0f32; n * plane];
    let mut m_rgb = vec![0f32; n * plane];
    for v in ir.iter_mut() {
        *v = IR_BACKGROUND + noise.sample(&mut rng);
    }
    for v in rgb.iter_mut() {
        *v = RGB_BACKGROUND + noise.sample(&mut rng);
    }
    for obj in &objects {
        let c = obj.category;
        let [y0, x0, y1, x1] = obj.bbox;
        for y in y0..y1 {
            for x in x0..x1 {
                if obj.covers(y0, x0, y, x) {
                    let p = y * s + x;
                    m_ir[c * plane + p] = 1.0;
                    ir[p] = ir_level(c, n)
                        + IR_TEXTURE_AMPLITUDE * ir_texture(c, y - y0, x - x0)
                        + noise.sample(&mut rng);
                }
            }
        }
        let [ry0, rx0, ry1, rx1] = obj.rgb_bbox();
        let tint = rgb_tint(c);
        for y in ry0..ry1 {
            for x in rx0..rx1 {
                if obj.covers(ry0, rx0, y, x) {
                    let p = y * s + x;
                    m_rgb[c * plane + p] = 1.0;
                    for (ch, t) in tint.iter().enumerate() {
                        rgb[ch * plane + p] =
                            RGB_BACKGROUND + RGB_CONTRAST * t + noise.sample(&mut rng);
                    }
                }
            }
        }
    }
    let to_f32 = |v: Vec<f64>| {
        v.into_iter()
            .map(|a| a.clamp(0.0, 1.0) as f32)
            .collect::<Vec<_>>()
    };
    Ok(Sample {
        rgb: Tensor::new([3, s, s], to_f32(rgb))?,
        ir: Tensor::new([1, s, s], to_f32(ir))?,
        masks_rgb: MaskSet::new(Tensor::new([n, s, s], m_rgb)?)?,
        masks_ir: MaskSet::new(Tensor::new([n, s, s], m_ir)?)?,
        objects,
    })
}

/// One `object <id> cat <c> shift <dy> <dx> bbox <y0> <x0> <y1> <x1>` line
/// per object; the box is in the IR frame.
pub fn format_meta(objects: &[SceneObject]) -> String {
    let mut out = String::new();
    for (id, o) in objects.iter().enumerate() {
        let [y0, x0, y1, x1] = o.bbox;
        let kind = match o.kind {
            ShapeKind::Rect => "rect",
            ShapeKind::Ellipse => "ellipse",
        };
        writeln!(
            out,
            "object {id} cat {} shift {} {} bbox {y0} {x0} {y1} {x1} shape {kind}",
            o.category, o.shift.0, o.shift.1
        )
        .expect("write to string");
    }
    out
}

pub fn parse_meta(text: &str, origin: &str) -> Result<Vec<SceneObject>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Format {
            path: origin.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let keywords_ok =
            f.len() >= 12 && f[0] == "object" && f[2] == "cat" && f[4] == "shift" && f[7] == "bbox";
        if !keywords_ok {
            return Err(err(
                "expected `object <id> cat <c> shift <dy> <dx> bbox <y0> <x0> <y1> <x1>`",
            ));
        }
        let int = |s: &str| {
            s.parse::<i64>()
                .map_err(|_| err(&format!("bad integer {s:?}")))
        };
        let uint = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(&format!("bad index {s:?}")))
        };
        let kind = match f.get(12..14) {
            None | Some([]) => ShapeKind::Rect,
            Some(["shape", "rect"]) => ShapeKind::Rect,
            Some(["shape", "ellipse"]) => ShapeKind::Ellipse,
            Some(_) => return Err(err("unknown shape")),
        };
        out.push(SceneObject {
            category: uint(f[3])?,
            kind,
            shift: (int(f[5])? as i32, int(f[6])? as i32),
            bbox: [uint(f[8])?, uint(f[9])?, uint(f[10])?, uint(f[11])?],
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    /// `(relative sample dir, checksum)` in index order.
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        self.entries
            .iter()
            .map(|(p, c)| format!("{p}\t{c}\n"))
            .collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (p, c) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: origin.to_string(),
                line: i + 1,
                msg: "expected `path<TAB>checksum`".into(),
            })?;
            entries.push((p.to_string(), c.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn sample_files(sample: &Sample) -> [String; 5] {
    [
        ten1::encode(&sample.rgb),
        ten1::encode(&sample.ir),
        ten1::encode(sample.masks_rgb.tensor()),
        ten1::encode(sample.masks_ir.tensor()),
        format_meta(&sample.objects),
    ]
}

fn files_checksum(contents: &[String]) -> String {
    let mut all = Vec::new();
    for (name, body) in SAMPLE_FILES.iter().zip(contents) {
        all.extend_from_slice(name.as_bytes());
        all.push(0);
        all.extend_from_slice(body.as_bytes());
    }
    checksum(&all)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes scenes `0..count` as `sample_NNNN/` directories plus `manifest.txt`.
pub fn write_dataset(cfg: &SceneConfig, count: usize, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for index in 0..count {
        let sample = generate_scene(cfg, index as u64)?;
        let rel = format!("sample_{index:04}");
        let sub = dir.join(&rel);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let contents = sample_files(&sample);
        for (name, body) in SAMPLE_FILES.iter().zip(&contents) {
            write_file(&sub.join(name), body)?;
        }
        manifest.entries.push((rel, files_checksum(&contents)));
    }
    write_file(&dir.join(MANIFEST_FILE), &manifest.encode())?;
    Ok(manifest)
}

pub fn load_sample(dir: &Path) -> Result<(Sample, String)> {
    let mut contents: Vec<String> = Vec::with_capacity(SAMPLE_FILES.len());
    for name in SAMPLE_FILES {
        let p = dir.join(name);
        contents.push(fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
    }
    let origin = |name: &str| dir.join(name).display().to_string();
    let sample = Sample {
        rgb: ten1::decode(&contents[0], &origin(SAMPLE_FILES[0]))?,
        ir: ten1::decode(&contents[1], &origin(SAMPLE_FILES[1]))?,
        masks_rgb: MaskSet::new(ten1::decode(&contents[2], &origin(SAMPLE_FILES[2]))?)?,
        masks_ir: MaskSet::new(ten1::decode(&contents[3], &origin(SAMPLE_FILES[3]))?)?,
        objects: parse_meta(&contents[4], &origin(SAMPLE_FILES[4]))?,
    };
    let s = sample.ir.shape();
    let ok = s.len() == 3
        && s[0] == 1
        && sample.rgb.shape() == [3, s[1], s[2]]
        && sample.masks_ir.tensor().shape()[1..] == s[1..]
        && sample.masks_rgb.tensor().shape() == sample.masks_ir.tensor().shape();
    if !ok {
        return Err(Error::Validation(format!(
            "inconsistent tensor shapes in {}",
            dir.display()
        )));
    }
    Ok((sample, files_checksum(&contents)))
}

/// Loaded dataset with its root directory and manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Reads `manifest.txt` under `dir` and every listed sample, verifying
    /// checksums.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = Manifest::parse(&text, &mpath.display().to_string())?;
        let mut samples = Vec::with_capacity(manifest.len());
        for (rel, want) in &manifest.entries {
            let (sample, got) = load_sample(&dir.join(rel))?;
            if &got != want {
                return Err(Error::Validation(format!(
                    "checksum mismatch for {rel}: manifest {want}, files {got}"
                )));
            }
            samples.push(sample);
        }
        if let Some(first) = samples.first() {
            let key = (first.image_size(), first.n_categories());
            if samples
                .iter()
                .any(|s| (s.image_size(), s.n_categories()) != key)
            {
                return Err(Error::Validation(
                    "samples differ in size or category count".into(),
                ));
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    /// In-memory dataset, as if written and read back.
    pub fn generate(cfg: &SceneConfig, indices: std::ops::Range<u64>) -> Result<Self> {
        let samples = indices
            .map(|i| generate_scene(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: PathBuf::new(),
            manifest: Manifest::default(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_categories(&self) -> Option<usize> {
        self.samples.first().map(Sample::n_categories)
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(Sample::image_size)
    }
}
