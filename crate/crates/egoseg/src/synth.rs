//! Procedural egocentric-style scenes and dataset IO.
//!
//! Every scene has a left-hand blob anchored to the bottom-left border and a
//! right-hand blob anchored to the bottom-right. Objects are placed strictly
//! adjacent (8-connected) to the hands they interact with and never touch
//! the other hand; distractors keep a clearance of at least two pixels from
//! hands and objects and stay labeled background. Interactive objects and
//! distractors draw from the same color palette, so touching a hand is the
//! only cue separating them.
//!
//! Dataset layout on disk: `images/<stem>.png`, `labels/<stem>.png`, and a
//! line-delimited `manifest.jsonl` with one `{stem, split, seed}` record per
//! sample.

use crate::error::{Error, Result};
use crate::mask::{ImageRaster, LabelRaster};
use crate::tape::{cast, Real};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Which hands the scene's interactive objects touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TouchConfig {
    LeftOnly,
    RightOnly,
    Both,
    None,
    /// Random object set per scene (any combination, possibly empty).
    Mixed,
}

/// Scene recipe; generation is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rng_seed: u64,
    pub image_size: usize,
    pub n_distractors: usize,
    pub touch_config: TouchConfig,
    /// Color jitter half-range applied to the palette (0..=64).
    pub palette_jitter: u8,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rng_seed: 0,
            image_size: 128,
            n_distractors: 3,
            touch_config: TouchConfig::Mixed,
            palette_jitter: 24,
            max_retries: 400,
        }
    }
}

/// Parametric shape painted into a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let mut px = Vec::new();
        match *self {
            Shape::Disc { cy, cx, r } => {
                let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size - 1));
                let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size - 1));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= r * r {
                            px.push((y, x));
                        }
                    }
                }
            }
            Shape::Rect { y0, x0, y1, x1 } => {
                for y in y0..=y1.min(size - 1) {
                    for x in x0..=x1.min(size - 1) {
                        px.push((y, x));
                    }
                }
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, (((cy + ry).ceil()) as usize).min(size - 1));
                let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, (((cx + rx).ceil()) as usize).min(size - 1));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let ny = (y as f64 - cy) / ry;
                        let nx = (x as f64 - cx) / rx;
                        if ny * ny + nx * nx <= 1.0 {
                            px.push((y, x));
                        }
                    }
                }
            }
        }
        px
    }
}

/// One placed scene element, kept for provenance and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: Shape,
    /// Class painted into the labels; distractors record 0.
    pub class: u8,
}

/// Scene description record attached to each generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub image_size: usize,
    pub hands: Vec<PlacedShape>,
    pub objects: Vec<PlacedShape>,
    pub distractors: Vec<PlacedShape>,
}

/// Image, labels, and provenance for one sample.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: ImageRaster,
    pub labels: LabelRaster,
    pub meta: SceneMeta,
}

fn neighbors8(y: usize, x: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let (yi, xi) = (y as isize, x as isize);
    [
        (-1, -1), (-1, 0), (-1, 1),
        (0, -1), (0, 1),
        (1, -1), (1, 0), (1, 1),
    ]
    .into_iter()
    .filter_map(move |(dy, dx)| {
        let (ny, nx) = (yi + dy, xi + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size)
            .then_some((ny as usize, nx as usize))
    })
}

/// Candidate acceptance checks against the current label occupancy and the
/// paint map (labels plus distractors).
struct Placement<'a> {
    labels: &'a Array2<u8>,
    painted: &'a Array2<u8>,
    size: usize,
}

impl Placement<'_> {
    fn overlaps_paint(&self, px: &[(usize, usize)]) -> bool {
        px.iter().any(|&(y, x)| self.painted[[y, x]] != 0)
    }

    fn touches_class(&self, px: &[(usize, usize)], class: u8) -> bool {
        px.iter().any(|&(y, x)| {
            neighbors8(y, x, self.size).any(|(ny, nx)| self.labels[[ny, nx]] == class)
        })
    }

    fn touches_any_labeled(&self, px: &[(usize, usize)]) -> bool {
        px.iter().any(|&(y, x)| {
            neighbors8(y, x, self.size).any(|(ny, nx)| self.labels[[ny, nx]] != 0)
        })
    }
}

/// Deterministically generates one scene from its spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<SamplePair> {
    let size = spec.image_size;
    if size < 32 {
        return Err(Error::Config("scene image size must be at least 32".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let s = size as f64;

    let mut labels = Array2::<u8>::zeros((size, size));
    let mut painted = Array2::<u8>::zeros((size, size));

    // Hands: ellipses clipped by the bottom border, left and right.
    let mut hands = Vec::new();
    for (class, cx_lo, cx_hi) in [(1u8, 0.16, 0.30), (2u8, 0.70, 0.84)] {
        let rx = s * rng.gen_range(0.10..0.15);
        let ry = s * rng.gen_range(0.16..0.24);
        let cx = s * rng.gen_range(cx_lo..cx_hi);
        let cy = s - 1.0 - ry * rng.gen_range(0.0..0.35);
        let shape = Shape::Ellipse { cy, cx, ry, rx };
        for (y, x) in shape.pixels(size) {
            labels[[y, x]] = class;
            painted[[y, x]] = class;
        }
        hands.push(PlacedShape { shape, class });
    }

    // Decide which object kinds this scene gets. The two-hand bridge is
    // placed first: it needs the whole gap between the hands free.
    let mut kinds: Vec<u8> = Vec::new();
    match spec.touch_config {
        TouchConfig::LeftOnly => kinds.push(3),
        TouchConfig::RightOnly => kinds.push(4),
        TouchConfig::Both => kinds.push(5),
        TouchConfig::None => {}
        TouchConfig::Mixed => {
            let with_left = rng.gen_bool(0.55);
            let with_right = rng.gen_bool(0.55);
            let with_both = rng.gen_bool(0.45);
            if with_both {
                kinds.push(5);
            }
            if with_left {
                kinds.push(3);
            }
            if with_right {
                kinds.push(4);
            }
        }
    }

    let mut objects = Vec::new();
    for class in kinds {
        let placed = match class {
            3 | 4 => place_hand_object(&mut rng, spec, &labels, &painted, class)?,
            5 => place_bridge_object(&mut rng, spec, &labels, &painted)?,
            _ => unreachable!(),
        };
        for &(y, x) in &placed.1 {
            labels[[y, x]] = class;
            painted[[y, x]] = class;
        }
        objects.push(PlacedShape { shape: placed.0, class });
    }

    // Distractors: clear of every labeled class by at least two pixels.
    let mut distractors = Vec::new();
    for _ in 0..spec.n_distractors {
        let (shape, px) = place_distractor(&mut rng, spec, &labels, &painted)?;
        for &(y, x) in &px {
            painted[[y, x]] = 6; // paint-only marker
        }
        distractors.push(PlacedShape { shape, class: 0 });
    }

    let labels = LabelRaster::new(labels).expect("classes stay in range");
    let image = render(&mut rng, spec, &labels, &hands, &objects, &distractors);
    Ok(SamplePair {
        image,
        labels,
        meta: SceneMeta {
            seed: spec.rng_seed,
            image_size: size,
            hands,
            objects,
            distractors,
        },
    })
}

fn hand_pixels(labels: &Array2<u8>, class: u8) -> Vec<(usize, usize)> {
    labels
        .indexed_iter()
        .filter_map(|((y, x), &v)| (v == class).then_some((y, x)))
        .collect()
}

/// Hand pixels with at least one background neighbor.
fn boundary_pixels(labels: &Array2<u8>, class: u8, size: usize) -> Vec<(usize, usize)> {
    hand_pixels(labels, class)
        .into_iter()
        .filter(|&(y, x)| neighbors8(y, x, size).any(|(ny, nx)| labels[[ny, nx]] == 0))
        .collect()
}

/// Object adjacent to exactly one hand.
fn place_hand_object(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    labels: &Array2<u8>,
    painted: &Array2<u8>,
    class: u8,
) -> Result<(Shape, Vec<(usize, usize)>)> {
    let size = spec.image_size;
    let s = size as f64;
    let (target, other) = if class == 3 { (1u8, 2u8) } else { (2u8, 1u8) };
    let anchor_pool = boundary_pixels(labels, target, size);
    let all_hand = hand_pixels(labels, target);
    let n = all_hand.len().max(1) as f64;
    let centroid = all_hand.iter().fold((0.0, 0.0), |(ys, xs), &(y, x)| {
        (ys + y as f64 / n, xs + x as f64 / n)
    });
    let placement = Placement { labels, painted, size };
    for _ in 0..spec.max_retries {
        let &(ay, ax) = &anchor_pool[rng.gen_range(0..anchor_pool.len())];
        let r = s * rng.gen_range(0.055..0.11);
        // Aim outward: from the hand centroid through the boundary anchor,
        // with some angular jitter.
        let base = (ay as f64 - centroid.0).atan2(ax as f64 - centroid.1);
        let theta = base + rng.gen_range(-0.7..0.7);
        let d = r + rng.gen_range(0.5..1.8);
        let cy = ay as f64 + d * theta.sin();
        let cx = ax as f64 + d * theta.cos();
        if cy - r < 1.0 || cx - r < 1.0 || cy + r > s - 2.0 || cx + r > s - 2.0 {
            continue;
        }
        let shape = Shape::Disc { cy, cx, r };
        let px = shape.pixels(size);
        if px.is_empty()
            || placement.overlaps_paint(&px)
            || !placement.touches_class(&px, target)
            || placement.touches_class(&px, other)
            || placement.touches_class(&px, 3)
            || placement.touches_class(&px, 4)
            || placement.touches_class(&px, 5)
        {
            continue;
        }
        return Ok((shape, px));
    }
    Err(Error::Placement {
        seed: spec.rng_seed,
        retries: spec.max_retries,
        what: format!("object touching hand class {target}"),
    })
}

/// Object bridging both hands: a bar spanning the gap at a row where both
/// hands have pixels.
fn place_bridge_object(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    labels: &Array2<u8>,
    painted: &Array2<u8>,
) -> Result<(Shape, Vec<(usize, usize)>)> {
    let size = spec.image_size;
    let placement = Placement { labels, painted, size };
    // Per-row extents: rightmost left-hand pixel and leftmost right-hand
    // pixel, if the hand is present in the row.
    let mut lmax = vec![None; size];
    let mut rmin = vec![None; size];
    for y in 0..size {
        for x in 0..size {
            match labels[[y, x]] {
                1 => lmax[y] = Some(x),
                2 => {
                    if rmin[y].is_none() {
                        rmin[y] = Some(x);
                    }
                }
                _ => {}
            }
        }
    }
    let rows: Vec<usize> = (0..size)
        .filter(|&y| matches!((lmax[y], rmin[y]), (Some(l), Some(r)) if r > l + 6))
        .collect();
    if rows.is_empty() {
        return Err(Error::Placement {
            seed: spec.rng_seed,
            retries: 0,
            what: "no row spans both hands for a two-hand object".into(),
        });
    }
    for _ in 0..spec.max_retries {
        let y = rows[rng.gen_range(0..rows.len())];
        let half = rng.gen_range(2..6usize);
        let y0 = y.saturating_sub(half);
        let y1 = (y + half).min(size - 1);
        // Span the widest clear gap over the whole band so the bar can
        // never run into a hand bulge on a neighboring row.
        let l = (y0..=y1).filter_map(|yy| lmax[yy]).max();
        let r = (y0..=y1).filter_map(|yy| rmin[yy]).min();
        let (l, r) = match (l, r) {
            (Some(l), Some(r)) if r > l + 4 => (l, r),
            _ => continue,
        };
        let shape = Shape::Rect { y0, x0: l + 1, y1, x1: r - 1 };
        let px = shape.pixels(size);
        if px.is_empty()
            || placement.overlaps_paint(&px)
            || !placement.touches_class(&px, 1)
            || !placement.touches_class(&px, 2)
            || placement.touches_class(&px, 3)
            || placement.touches_class(&px, 4)
            || placement.touches_class(&px, 5)
        {
            continue;
        }
        return Ok((shape, px));
    }
    Err(Error::Placement {
        seed: spec.rng_seed,
        retries: spec.max_retries,
        what: "two-hand bridge object".into(),
    })
}

fn place_distractor(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    labels: &Array2<u8>,
    painted: &Array2<u8>,
) -> Result<(Shape, Vec<(usize, usize)>)> {
    let size = spec.image_size;
    let s = size as f64;
    let placement = Placement { labels, painted, size };
    for _ in 0..spec.max_retries {
        let r = s * rng.gen_range(0.05..0.10);
        let cy = rng.gen_range(r + 1.0..s - r - 2.0);
        let cx = rng.gen_range(r + 1.0..s - r - 2.0);
        let shape = if rng.gen_bool(0.5) {
            Shape::Disc { cy, cx, r }
        } else {
            Shape::Rect {
                y0: (cy - r) as usize,
                x0: (cx - r) as usize,
                y1: (cy + r) as usize,
                x1: (cx + r) as usize,
            }
        };
        let px = shape.pixels(size);
        if px.is_empty() || placement.overlaps_paint(&px) || placement.touches_any_labeled(&px) {
            continue;
        }
        return Ok((shape, px));
    }
    Err(Error::Placement {
        seed: spec.rng_seed,
        retries: spec.max_retries,
        what: "distractor".into(),
    })
}

fn jitter(rng: &mut ChaCha8Rng, base: [i32; 3], amount: u8) -> [i32; 3] {
    let a = amount as i32;
    [
        base[0] + rng.gen_range(-a..=a),
        base[1] + rng.gen_range(-a..=a),
        base[2] + rng.gen_range(-a..=a),
    ]
}

fn render(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    labels: &LabelRaster,
    hands: &[PlacedShape],
    objects: &[PlacedShape],
    distractors: &[PlacedShape],
) -> ImageRaster {
    let size = spec.image_size;
    let put = |img: &mut Array3<u8>, y: usize, x: usize, c: [i32; 3], n: i32| {
        for ch in 0..3 {
            img[[y, x, ch]] = (c[ch] + n).clamp(0, 255) as u8;
        }
    };

    let mut img = Array3::<u8>::zeros((size, size, 3));
    // Background: jittered base with a vertical gradient and pixel noise.
    let bg = jitter(rng, [96, 102, 110], spec.palette_jitter);
    for y in 0..size {
        let shade = (y as i32 * 28) / size as i32 - 14;
        for x in 0..size {
            let n = rng.gen_range(-8..=8);
            put(&mut img, y, x, [bg[0] + shade, bg[1] + shade, bg[2] + shade], n);
        }
    }
    // Distractors and objects share one palette distribution.
    let lay_shape = |img: &mut Array3<u8>, rng: &mut ChaCha8Rng, p: &PlacedShape, color: [i32; 3]| {
        for (y, x) in p.shape.pixels(size) {
            let n = rng.gen_range(-6..=6);
            put(img, y, x, color, n);
        }
    };
    for d in distractors {
        let color = [
            rng.gen_range(40..=230),
            rng.gen_range(40..=230),
            rng.gen_range(40..=230),
        ];
        lay_shape(&mut img, rng, d, color);
    }
    for o in objects {
        let color = [
            rng.gen_range(40..=230),
            rng.gen_range(40..=230),
            rng.gen_range(40..=230),
        ];
        lay_shape(&mut img, rng, o, color);
    }
    // Hands last: consistent skin family.
    let skin = jitter(rng, [198, 150, 118], spec.palette_jitter.min(16));
    for h in hands {
        lay_shape(&mut img, rng, h, skin);
    }
    // Repaint strictly by label for hand/object pixels so labels and colors
    // can never disagree on overlap boundaries.
    let _ = labels;
    ImageRaster::new(img).expect("three channels")
}

// ---- preprocessing ----

/// Per-channel normalization constants. Defaults match the reference
/// preprocessing pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [106.011, 95.400, 87.429],
            std: [64.357, 60.889, 61.419],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Center,
    /// Offsets must be drawn by the caller (keeps RNG use single-threaded).
    At { oy: usize, ox: usize },
}

/// Crops to `crop x crop` then normalizes: `(v - mean) / std` per channel.
pub fn preprocess<T: Real>(
    image: &ImageRaster,
    crop: usize,
    norm: &Normalization,
    mode: CropMode,
) -> Result<Array3<T>> {
    let (h, w) = (image.height(), image.width());
    if crop > h.min(w) {
        return Err(Error::Config(format!(
            "crop {crop} larger than image {h}x{w}"
        )));
    }
    let (oy, ox) = match mode {
        CropMode::Center => ((h - crop) / 2, (w - crop) / 2),
        CropMode::At { oy, ox } => {
            if oy + crop > h || ox + crop > w {
                return Err(Error::Config(format!(
                    "crop offset ({oy}, {ox}) out of bounds for {h}x{w}"
                )));
            }
            (oy, ox)
        }
    };
    let data = image.data();
    let mut out = Array3::<T>::zeros((crop, crop, 3));
    for y in 0..crop {
        for x in 0..crop {
            for c in 0..3 {
                let v = data[[oy + y, ox + x, c]] as f64;
                out[[y, x, c]] = cast((v - norm.mean[c]) / norm.std[c]);
            }
        }
    }
    Ok(out)
}

/// Crops labels with the same window as `preprocess`.
pub fn crop_labels(labels: &LabelRaster, crop: usize, mode: CropMode) -> Result<LabelRaster> {
    let (h, w) = (labels.height(), labels.width());
    if crop > h.min(w) {
        return Err(Error::Config(format!(
            "crop {crop} larger than labels {h}x{w}"
        )));
    }
    let (oy, ox) = match mode {
        CropMode::Center => ((h - crop) / 2, (w - crop) / 2),
        CropMode::At { oy, ox } => (oy, ox),
    };
    let data = Array2::from_shape_fn((crop, crop), |(y, x)| labels.data()[[oy + y, ox + x]]);
    LabelRaster::new(data)
}

// ---- dataset directories ----

/// One manifest record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub split: String,
    pub seed: u64,
}

/// What to do when a sample fails validation while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnError {
    FailFast,
    SkipWithLog,
}

/// Writes `pairs` under `dir` with the documented layout.
pub fn write_dataset(dir: &Path, pairs: &[(String, String, SamplePair)]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for (stem, split, pair) in pairs {
        pair.image.save_png(&dir.join("images").join(format!("{stem}.png")))?;
        pair.labels.save_png(&dir.join("labels").join(format!("{stem}.png")))?;
        let entry = ManifestEntry {
            stem: stem.clone(),
            split: split.clone(),
            seed: pair.meta.seed,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry).expect("serializable"))?;
    }
    Ok(())
}

/// Reads the manifest of a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(dir.join("manifest.jsonl"))
        .map_err(|e| Error::Dataset(format!("no manifest.jsonl in {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("bad manifest line: {e}")))?,
        );
    }
    Ok(out)
}

/// Loads paired image/label files by shared stem from `images/` and
/// `labels/`. An optional remap table translates on-disk label values into
/// the canonical `0..=5` range before validation. Normalization is not
/// applied here.
pub fn load_egohos_dir(
    dir: &Path,
    remap: Option<&[(u8, u8)]>,
    on_error: OnError,
) -> Result<Vec<(String, SamplePair)>> {
    let images = dir.join("images");
    let labels_dir = dir.join("labels");
    if !images.is_dir() || !labels_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} must contain images/ and labels/",
            dir.display()
        )));
    }
    let mut stems: Vec<String> = std::fs::read_dir(&images)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().map(|x| x == "png").unwrap_or(false))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        eprintln!("warning: no image files found in {}", images.display());
    }
    let mut out = Vec::new();
    for stem in stems {
        match load_pair(&images, &labels_dir, &stem, remap) {
            Ok(pair) => out.push((stem, pair)),
            Err(e) => match on_error {
                OnError::FailFast => return Err(e),
                OnError::SkipWithLog => {
                    eprintln!("warning: skipping {stem}: {e}");
                }
            },
        }
    }
    Ok(out)
}

fn load_pair(
    images: &Path,
    labels_dir: &Path,
    stem: &str,
    remap: Option<&[(u8, u8)]>,
) -> Result<SamplePair> {
    let ipath = images.join(format!("{stem}.png"));
    let lpath = labels_dir.join(format!("{stem}.png"));
    if !lpath.exists() {
        return Err(Error::Dataset(format!(
            "missing label file for {}",
            ipath.display()
        )));
    }
    let image = ImageRaster::load_png(&ipath)?;
    let labels = if let Some(table) = remap {
        let raw = image::open(&lpath)?.into_luma8();
        let (w, h) = raw.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            let v = raw.get_pixel(x as u32, y as u32).0[0];
            table
                .iter()
                .find_map(|&(from, to)| (from == v).then_some(to))
                .unwrap_or(v)
        });
        LabelRaster::new(data).map_err(|e| match e {
            Error::InvalidClass { value, .. } => Error::InvalidClass {
                value,
                source_file: Some(lpath.display().to_string()),
            },
            other => other,
        })?
    } else {
        LabelRaster::load_png(&lpath)?
    };
    if (labels.height(), labels.width()) != (image.height(), image.width()) {
        return Err(Error::shape(
            format!("sample {stem}"),
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", labels.height(), labels.width()),
        ));
    }
    Ok(SamplePair {
        meta: SceneMeta {
            seed: 0,
            image_size: image.height(),
            hands: Vec::new(),
            objects: Vec::new(),
            distractors: Vec::new(),
        },
        image,
        labels,
    })
}

/// Loads one split of a dataset directory through its manifest.
pub fn load_split(dir: &Path, split: &str, remap: Option<&[(u8, u8)]>) -> Result<Vec<SamplePair>> {
    let manifest = read_manifest(dir)?;
    let images = dir.join("images");
    let labels = dir.join("labels");
    let mut out = Vec::new();
    for entry in manifest.iter().filter(|e| e.split == split) {
        out.push(load_pair(&images, &labels, &entry.stem, remap)?);
    }
    Ok(out)
}

/// Generates a synthetic dataset directory with train/val/test splits.
/// Sample seeds are `base_seed + index` with val and test offset far away.
pub fn generate_dataset(
    dir: &Path,
    template: &SceneSpec,
    base_seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<()> {
    let mut pairs = Vec::new();
    let splits = [
        ("train", n_train, base_seed),
        ("val", n_val, base_seed + 1_000_000),
        ("test", n_test, base_seed + 2_000_000),
    ];
    for (split, n, seed0) in splits {
        for i in 0..n {
            let spec = SceneSpec {
                rng_seed: seed0 + i as u64,
                ..template.clone()
            };
            let pair = generate_scene(&spec)?;
            pairs.push((format!("{split}_{i:05}"), split.to_string(), pair));
        }
    }
    write_dataset(dir, &pairs)
}
